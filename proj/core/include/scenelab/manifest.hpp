#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scenelab/rng.hpp"
#include "scenelab/tensor.hpp"

namespace scenelab {

// literal used in the mapped_class column for rows outside the remap table
inline constexpr const char* kUnmapped = "unmapped";

struct ManifestRow {
  std::string uri;
  std::string original_category;
  std::string mapped_class;  // one of the 8 class names, or kUnmapped
  std::string split;         // train | val | test | none
  std::string source_tag;
  bool synthetic = false;
};

// Tab-separated dataset listing with '#' header lines (dataset name, seed,
// remap-table fingerprint). The on-disk form round-trips bit-exactly.
struct SampleManifest {
  std::string dataset_name = "unnamed";
  uint64_t seed = 0;
  std::string table_fingerprint = "-";
  std::vector<ManifestRow> rows;

  void save(const std::string& path) const;
  static SampleManifest load(const std::string& path);

  // per-class row counts, optionally restricted to one split
  std::map<std::string, int64_t> class_counts(
      const std::string& split = "") const;
};

// The frozen indoor-scene remapping: 23 original categories onto 8 classes.
class RemapTable {
 public:
  static RemapTable places8();

  std::optional<std::string> lookup(const std::string& original) const;
  // the 8 class names in display order
  const std::vector<std::string>& classes() const { return classes_; }
  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }
  size_t size() const { return entries_.size(); }
  std::string fingerprint() const;

 private:
  std::vector<std::string> classes_;
  std::vector<std::pair<std::string, std::string>> entries_;  // original -> class
};

// Applies the table: matching rows get their class, others are marked
// unmapped and dropped from splits. Idempotent. Throws if nothing matches.
SampleManifest remap_manifest(const SampleManifest& m, const RemapTable& t);

// Moves a stratified fraction of `from_split` rows into `to_split`.
// Per-class quotas use largest-remainder rounding so the total selected
// count is exactly round(fraction * pool size). Deterministic under seed.
SampleManifest stratified_split(const SampleManifest& m, double fraction,
                                Rng& rng, const std::string& from_split = "train",
                                const std::string& to_split = "test");

// Stratified k-fold assignments over the mapped train rows, reshuffled per
// repetition with a derived seed. Per-class fold sizes differ by <= 1.
struct FoldPlan {
  int folds = 0;
  int repetitions = 0;
  std::vector<size_t> row_indices;          // indices into manifest rows
  std::vector<std::vector<int>> assignment;  // [repetition][i] -> fold id
};
FoldPlan make_folds(const SampleManifest& m, int k, int repetitions, Rng& rng);

// Union of pretext pools. mode "real" keeps non-synthetic rows only; mode
// "all" keeps everything. The report lists per-source counts, known sources
// first in their canonical order.
struct ComposeReport {
  SampleManifest manifest;
  std::vector<std::pair<std::string, int64_t>> source_counts;
};
ComposeReport compose_pretext(const std::vector<SampleManifest>& manifests,
                              const std::string& mode);

// Stable label ordering for a manifest: the canonical indoor-scene class
// order first (for the classes present), then any others alphabetically.
std::vector<std::string> class_list(const SampleManifest& m);

// Per-class image lists from the three out-of-distribution sources,
// combined 4:3:3 per class into a validation-only manifest.
struct OodClassSources {
  std::string class_name;
  // source name -> available uris, in ratio order (4 : 3 : 3)
  std::vector<std::pair<std::string, std::vector<std::string>>> sources;
};
SampleManifest make_ood_manifest(const std::vector<OodClassSources>& classes,
                                 int per_class = 10);

}  // namespace scenelab
