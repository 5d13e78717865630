#include "scenelab/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "scenelab/rng.hpp"

namespace scenelab {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path, 0);
  std::ostringstream os;
  os << is.rdbuf();
  return parse(os.str(), path);
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  cfg.origin_ = origin;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw ConfigError(origin + ": malformed section header '" + t + "'",
                          lineno);
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) {
        throw ConfigError(origin + ": empty section name", lineno);
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ": expected 'key = value', got '" + t + "'",
                        lineno);
    }
    Entry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty()) {
      throw ConfigError(origin + ": empty key", lineno);
    }
    if (cfg.find(e.section, e.key)) {
      throw ConfigError(origin + ": duplicate key '" + e.key +
                            "' in section [" + e.section + "]",
                        lineno);
    }
    cfg.entries_.push_back(std::move(e));
  }
  return cfg;
}

const Config::Entry* Config::find(const std::string& section,
                                  const std::string& key) const {
  for (const auto& e : entries_) {
    if (e.section == section && e.key == key) return &e;
  }
  return nullptr;
}

bool Config::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string Config::get_str(const std::string& section,
                            const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) {
    throw ConfigError(origin_ + ": missing key '" + key + "' in section [" +
                          section + "]",
                      0);
  }
  return e->value;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
  const Entry* e = find(section, key);
  return e ? e->value : fallback;
}

int64_t Config::get_int(const std::string& section,
                        const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) {
    throw ConfigError(origin_ + ": missing key '" + key + "' in section [" +
                          section + "]",
                      0);
  }
  try {
    size_t used = 0;
    const int64_t v = std::stoll(e->value, &used);
    if (used != e->value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" +
                          e->value + "'",
                      e->line);
  }
}

int64_t Config::get_int(const std::string& section, const std::string& key,
                        int64_t fallback) const {
  return has(section, key) ? get_int(section, key) : fallback;
}

double Config::get_double(const std::string& section,
                          const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) {
    throw ConfigError(origin_ + ": missing key '" + key + "' in section [" +
                          section + "]",
                      0);
  }
  try {
    size_t used = 0;
    const double v = std::stod(e->value, &used);
    if (used != e->value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" +
                          e->value + "'",
                      e->line);
  }
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

bool Config::get_bool(const std::string& section,
                      const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) {
    throw ConfigError(origin_ + ": missing key '" + key + "' in section [" +
                          section + "]",
                      0);
  }
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  throw ConfigError(origin_ + ": key '" + key + "' is not a boolean: '" +
                        e->value + "'",
                    e->line);
}

bool Config::get_bool(const std::string& section, const std::string& key,
                      bool fallback) const {
  return has(section, key) ? get_bool(section, key) : fallback;
}

int Config::line_of(const std::string& section, const std::string& key) const {
  const Entry* e = find(section, key);
  return e ? e->line : 0;
}

std::vector<std::string> Config::sections() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (std::find(out.begin(), out.end(), e.section) == out.end()) {
      out.push_back(e.section);
    }
  }
  return out;
}

std::vector<std::string> Config::keys(const std::string& section) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.section == section) out.push_back(e.key);
  }
  return out;
}

void Config::set(const std::string& section, const std::string& key,
                 const std::string& value) {
  for (auto& e : entries_) {
    if (e.section == section && e.key == key) {
      e.value = value;
      return;
    }
  }
  entries_.push_back({section, key, value, 0});
}

std::string Config::canonical() const {
  std::map<std::string, std::map<std::string, std::string>> sorted;
  for (const auto& e : entries_) sorted[e.section][e.key] = e.value;
  std::ostringstream os;
  for (const auto& [section, kv] : sorted) {
    os << '[' << section << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  }
  return os.str();
}

uint64_t Config::fingerprint() const { return fnv1a64(canonical()); }

std::string fingerprint_hex(uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fp));
  return buf;
}

}  // namespace scenelab
