#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenelab {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, int line)
      : std::runtime_error(line > 0 ? msg + " (line " + std::to_string(line) +
                                          ")"
                                    : msg),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Plain-text key-value configuration with [section] headers and '#'
// comments. Section names may contain spaces (e.g. "variant baseline").
// Duplicate keys within a section are rejected with the offending line.
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse(const std::string& text,
                      const std::string& origin = "<string>");

  bool has(const std::string& section, const std::string& key) const;
  std::string get_str(const std::string& section, const std::string& key) const;
  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const;
  int64_t get_int(const std::string& section, const std::string& key) const;
  int64_t get_int(const std::string& section, const std::string& key,
                  int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key,
                    double fallback) const;
  bool get_bool(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key,
                bool fallback) const;
  // line number of a key, for schema error messages
  int line_of(const std::string& section, const std::string& key) const;

  std::vector<std::string> sections() const;  // in file order, deduplicated
  std::vector<std::string> keys(const std::string& section) const;

  void set(const std::string& section, const std::string& key,
           const std::string& value);

  // sections and keys sorted, whitespace normalized
  std::string canonical() const;
  uint64_t fingerprint() const;

 private:
  struct Entry {
    std::string section, key, value;
    int line = 0;
  };
  const Entry* find(const std::string& section, const std::string& key) const;
  std::vector<Entry> entries_;
  std::string origin_;
};

// fingerprint rendered the way run artifacts carry it
std::string fingerprint_hex(uint64_t fp);

}  // namespace scenelab
