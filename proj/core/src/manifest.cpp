#include "scenelab/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace scenelab {

namespace {

void check_field(const std::string& v, const char* what) {
  if (v.empty() || v.find('\t') != std::string::npos ||
      v.find('\n') != std::string::npos) {
    throw ContractError(std::string("manifest: invalid ") + what + " '" + v +
                        "'");
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace

void SampleManifest::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  os << "# dataset=" << dataset_name << '\n';
  os << "# seed=" << seed << '\n';
  os << "# table=" << table_fingerprint << '\n';
  os << "# columns=uri\toriginal_category\tmapped_class\tsplit\tsource_tag\t"
        "synthetic_flag\n";
  for (const auto& r : rows) {
    check_field(r.uri, "uri");
    check_field(r.original_category, "original_category");
    check_field(r.mapped_class, "mapped_class");
    check_field(r.split, "split");
    check_field(r.source_tag, "source_tag");
    os << r.uri << '\t' << r.original_category << '\t' << r.mapped_class
       << '\t' << r.split << '\t' << r.source_tag << '\t'
       << (r.synthetic ? '1' : '0') << '\n';
  }
  if (!os) throw std::runtime_error("manifest write failed: " + path);
}

SampleManifest SampleManifest::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read manifest: " + path);
  SampleManifest m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2);
      const std::string val = line.substr(eq + 1);
      if (key == "dataset") {
        m.dataset_name = val;
      } else if (key == "seed") {
        m.seed = std::stoull(val);
      } else if (key == "table") {
        m.table_fingerprint = val;
      }
      continue;
    }
    auto fields = split_tabs(line);
    if (fields.size() != 6) {
      throw std::runtime_error("manifest " + path + " line " +
                               std::to_string(lineno) + ": expected 6 fields, got " +
                               std::to_string(fields.size()));
    }
    ManifestRow r;
    r.uri = fields[0];
    r.original_category = fields[1];
    r.mapped_class = fields[2];
    r.split = fields[3];
    r.source_tag = fields[4];
    r.synthetic = fields[5] == "1";
    m.rows.push_back(std::move(r));
  }
  return m;
}

std::map<std::string, int64_t> SampleManifest::class_counts(
    const std::string& split) const {
  std::map<std::string, int64_t> counts;
  for (const auto& r : rows) {
    if (r.mapped_class == kUnmapped) continue;
    if (!split.empty() && r.split != split) continue;
    ++counts[r.mapped_class];
  }
  return counts;
}

RemapTable RemapTable::places8() {
  RemapTable t;
  t.classes_ = {"bathroom",      "bedroom",     "child's room",
                "classroom",     "dressing room", "living room",
                "studio",        "swimming pool"};
  t.entries_ = {
      {"bathroom", "bathroom"},
      {"shower", "bathroom"},
      {"bedchamber", "bedroom"},
      {"bedroom", "bedroom"},
      {"hotel room", "bedroom"},
      {"berth", "bedroom"},
      {"dorm room", "bedroom"},
      {"youth hostel", "bedroom"},
      {"child's room", "child's room"},
      {"nursery", "child's room"},
      {"playroom", "child's room"},
      {"classroom", "classroom"},
      {"kindergarden classroom", "classroom"},
      {"closet", "dressing room"},
      {"dressing room", "dressing room"},
      {"home theater", "living room"},
      {"living room", "living room"},
      {"recreation room", "living room"},
      {"television room", "living room"},
      {"waiting room", "living room"},
      {"television studio", "studio"},
      {"jacuzzi", "swimming pool"},
      {"swimming pool", "swimming pool"},
  };
  return t;
}

std::optional<std::string> RemapTable::lookup(
    const std::string& original) const {
  for (const auto& [from, to] : entries_) {
    if (from == original) return to;
  }
  return std::nullopt;
}

std::string RemapTable::fingerprint() const {
  std::string blob;
  for (const auto& [from, to] : entries_) {
    blob += from;
    blob += '>';
    blob += to;
    blob += ';';
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob)));
  return buf;
}

SampleManifest remap_manifest(const SampleManifest& m, const RemapTable& t) {
  SampleManifest out = m;
  out.table_fingerprint = t.fingerprint();
  int64_t matched = 0;
  for (auto& r : out.rows) {
    const auto mapped = t.lookup(r.original_category);
    if (mapped) {
      r.mapped_class = *mapped;
      if (r.split == "none" || r.split.empty()) r.split = "train";
      ++matched;
    } else {
      r.mapped_class = kUnmapped;
      r.split = "none";  // kept for the audit trail, excluded from splits
    }
  }
  if (matched == 0) {
    throw std::runtime_error(
        "remap_manifest: no category matched the table; wrong dataset?");
  }
  return out;
}

SampleManifest stratified_split(const SampleManifest& m, double fraction,
                                Rng& rng, const std::string& from_split,
                                const std::string& to_split) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ContractError("stratified_split: fraction must be in (0,1), got " +
                        std::to_string(fraction));
  }
  // class -> indices of eligible rows
  std::map<std::string, std::vector<size_t>> pools;
  int64_t total = 0;
  for (size_t i = 0; i < m.rows.size(); ++i) {
    const auto& r = m.rows[i];
    if (r.split != from_split || r.mapped_class == kUnmapped) continue;
    pools[r.mapped_class].push_back(i);
    ++total;
  }
  if (total == 0) {
    throw ContractError("stratified_split: no rows in split '" + from_split +
                        "'");
  }
  const int64_t min_needed =
      static_cast<int64_t>(std::ceil(1.0 / fraction));
  for (const auto& [cls, pool] : pools) {
    if (static_cast<int64_t>(pool.size()) < min_needed) {
      throw ContractError("stratified_split: class '" + cls + "' has " +
                          std::to_string(pool.size()) + " rows, needs >= " +
                          std::to_string(min_needed));
    }
  }

  // largest-remainder quotas: total exactly round(fraction * total)
  const int64_t target = std::llround(fraction * static_cast<double>(total));
  std::vector<std::pair<std::string, double>> remainders;
  std::map<std::string, int64_t> take;
  int64_t base_sum = 0;
  for (const auto& [cls, pool] : pools) {
    const double quota = fraction * static_cast<double>(pool.size());
    const int64_t base = static_cast<int64_t>(std::floor(quota));
    take[cls] = base;
    base_sum += base;
    remainders.emplace_back(cls, quota - static_cast<double>(base));
  }
  std::sort(remainders.begin(), remainders.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  for (int64_t extra = target - base_sum; extra > 0; --extra) {
    take[remainders[(target - base_sum) - extra].first] += 1;
  }

  SampleManifest out = m;
  for (auto& [cls, pool] : pools) {
    Rng crng = rng.split("split-" + cls);
    crng.shuffle(pool);
    const int64_t n = take[cls];
    // stable order within the class keeps the output deterministic
    std::vector<size_t> chosen(pool.begin(), pool.begin() + n);
    std::sort(chosen.begin(), chosen.end());
    for (size_t idx : chosen) out.rows[idx].split = to_split;
  }
  return out;
}

FoldPlan make_folds(const SampleManifest& m, int k, int repetitions,
                    Rng& rng) {
  if (k < 2) throw ContractError("make_folds: k must be >= 2");
  if (repetitions < 1) {
    throw ContractError("make_folds: repetitions must be >= 1");
  }
  FoldPlan plan;
  plan.folds = k;
  plan.repetitions = repetitions;
  std::map<std::string, std::vector<size_t>> pools;  // positions in row_indices
  for (size_t i = 0; i < m.rows.size(); ++i) {
    const auto& r = m.rows[i];
    if (r.split != "train" || r.mapped_class == kUnmapped) continue;
    pools[r.mapped_class].push_back(plan.row_indices.size());
    plan.row_indices.push_back(i);
  }
  for (const auto& [cls, pool] : pools) {
    if (static_cast<int>(pool.size()) < k) {
      throw ContractError("make_folds: class '" + cls + "' has " +
                          std::to_string(pool.size()) + " rows, needs >= " +
                          std::to_string(k));
    }
  }
  if (plan.row_indices.empty()) {
    throw ContractError("make_folds: no train rows");
  }
  plan.assignment.resize(repetitions);
  for (int rep = 0; rep < repetitions; ++rep) {
    auto& assign = plan.assignment[rep];
    assign.assign(plan.row_indices.size(), -1);
    Rng rep_rng = rng.split("folds-rep-" + std::to_string(rep));
    for (const auto& [cls, pool] : pools) {
      std::vector<size_t> shuffled = pool;
      Rng crng = rep_rng.split(cls);
      crng.shuffle(shuffled);
      // round-robin deal keeps per-class fold sizes within 1
      for (size_t j = 0; j < shuffled.size(); ++j) {
        assign[shuffled[j]] = static_cast<int>(j % k);
      }
    }
  }
  return plan;
}

ComposeReport compose_pretext(const std::vector<SampleManifest>& manifests,
                              const std::string& mode) {
  if (mode != "real" && mode != "all") {
    throw ContractError("compose_pretext: mode must be 'real' or 'all', got '" +
                        mode + "'");
  }
  ComposeReport report;
  report.manifest.dataset_name = "pretext-" + mode;
  std::map<std::string, int64_t> counts;
  for (const auto& m : manifests) {
    for (const auto& r : m.rows) {
      if (mode == "real" && r.synthetic) continue;
      report.manifest.rows.push_back(r);
      ++counts[r.source_tag];
    }
  }
  if (report.manifest.rows.empty()) {
    throw ContractError("compose_pretext: mode '" + mode +
                        "' selected no rows");
  }
  // canonical source order, then anything else alphabetically
  const std::vector<std::string> canonical = {"places", "interiornet",
                                              "hypersim", "openrooms"};
  for (const auto& src : canonical) {
    const auto it = counts.find(src);
    if (it != counts.end()) {
      report.source_counts.emplace_back(src, it->second);
      counts.erase(it);
    }
  }
  for (const auto& [src, n] : counts) {
    report.source_counts.emplace_back(src, n);
  }
  return report;
}

std::vector<std::string> class_list(const SampleManifest& m) {
  std::set<std::string> present;
  for (const auto& r : m.rows) {
    if (r.mapped_class != kUnmapped && !r.mapped_class.empty()) {
      present.insert(r.mapped_class);
    }
  }
  std::vector<std::string> out;
  const auto table = RemapTable::places8();
  for (const auto& cls : table.classes()) {
    if (present.erase(cls)) out.push_back(cls);
  }
  out.insert(out.end(), present.begin(), present.end());
  return out;
}

SampleManifest make_ood_manifest(const std::vector<OodClassSources>& classes,
                                 int per_class) {
  if (per_class < 1) throw ContractError("make_ood_manifest: per_class < 1");
  SampleManifest out;
  out.dataset_name = "ood-scenes";
  // 4:3:3 shares, scaled by largest remainder if per_class differs from 10
  const int ratio[3] = {4, 3, 3};
  int shares[3];
  int assigned = 0;
  double rem[3];
  for (int i = 0; i < 3; ++i) {
    const double q = per_class * ratio[i] / 10.0;
    shares[i] = static_cast<int>(std::floor(q));
    rem[i] = q - shares[i];
    assigned += shares[i];
  }
  while (assigned < per_class) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    shares[best] += 1;
    rem[best] = -1;
    ++assigned;
  }
  for (const auto& cls : classes) {
    if (cls.sources.size() != 3) {
      throw ContractError("make_ood_manifest: class '" + cls.class_name +
                          "' must list exactly 3 sources");
    }
    for (int s = 0; s < 3; ++s) {
      const auto& [src_name, uris] = cls.sources[s];
      if (static_cast<int>(uris.size()) < shares[s]) {
        throw ContractError("make_ood_manifest: class '" + cls.class_name +
                            "' source '" + src_name + "' has " +
                            std::to_string(uris.size()) + " images, needs " +
                            std::to_string(shares[s]));
      }
      for (int i = 0; i < shares[s]; ++i) {
        ManifestRow r;
        r.uri = uris[i];
        r.original_category = cls.class_name;
        r.mapped_class = cls.class_name;
        r.split = "val";  // evaluation-only holdout
        r.source_tag = src_name;
        r.synthetic = false;
        out.rows.push_back(std::move(r));
      }
    }
  }
  return out;
}

}  // namespace scenelab
