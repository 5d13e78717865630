#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scenelab/augment.hpp"
#include "scenelab/config.hpp"
#include "scenelab/eval.hpp"
#include "scenelab/losses.hpp"
#include "scenelab/manifest.hpp"
#include "scenelab/model.hpp"
#include "scenelab/optimizer.hpp"

namespace scenelab {

enum class LossKind { NtXent, SupCon, BarlowTwins, Swav, CrossEntropy };
LossKind loss_kind_from(const std::string& name);
std::string to_string(LossKind kind);

// One training stage: objective + budget + optimizer + schedule + policy.
struct StageSpec {
  std::string tag = "downstream";  // pretext-object | pretext-scene | downstream
  LossKind loss = LossKind::CrossEntropy;
  int epochs = 0;
  int batch_size = 64;
  LarsConfig opt;
  ScheduleConfig sched;
  std::optional<EarlyStopConfig> early;  // needs a validation set
  AugmentPolicy augment;
  float temperature = 0.1f;
  BarlowConfig barlow;
  int swav_prototypes = 32;
  float sinkhorn_eps = 0.05f;
  int sinkhorn_iters = 3;
};

struct EpochMetric {
  std::string stage;
  int epoch = 0;
  float train_loss = 0.f;
  float val_loss = 0.f;  // NaN when the stage has no validation set
  float lr = 0.f;
  double wall_ms = 0.0;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<EpochMetric> metrics;
  int best_epoch = -1;   // argmin of validation loss when early stopping ran
  bool aborted = false;  // NaN-loss bailout; checkpoint is the last good one
};

// Trains one stage in place. Deterministic for a given seed; a 0-epoch
// stage passes the incoming state through untouched (lineage unchanged).
// Three consecutive non-finite losses abort the stage and return the last
// epoch-end checkpoint.
StageResult run_stage(SceneModel& model, const StageSpec& stage,
                      std::span<const Tensor> train_images,
                      std::span<const int> train_labels,
                      std::span<const Tensor> val_images,
                      std::span<const int> val_labels,
                      std::vector<std::string> lineage, const Rng& rng);

// ---------------------------------------------------------------------------
// experiment grid
// ---------------------------------------------------------------------------

// One grid axis combination: protocol x object pretext x scene pretext.
struct GridVariant {
  std::string name;
  std::string protocol = "none";  // nt_xent|barlow_twins|supcon|swav|none
  bool object_pretext = false;
  std::string scene_pretext = "none";  // none | real | all
};

struct GridConfig {
  std::string name = "grid";
  uint64_t seed = 0;
  int folds = 5;
  int repetitions = 3;
  int workers = 1;
  std::string downstream_manifest;
  std::string object_manifest;                // optional
  std::vector<std::string> scene_manifests;   // optional
  int image_size = 64;
  ModelConfig model;
  int pretext_epochs = 20;
  int downstream_epochs = 30;
  int batch = 64;
  LarsConfig opt;
  float min_lr = 0.f;
  int restarts = 3;
  std::optional<EarlyStopConfig> early;
  float temperature = 0.1f;
  float sinkhorn_eps = 0.05f;
  int sinkhorn_iters = 3;
  int swav_prototypes = 32;
  float barlow_lambda = 5e-3f;
  AugmentPolicy pretext_policy;
  AugmentPolicy downstream_policy;
  std::vector<GridVariant> variants;
  uint64_t fingerprint = 0;
  std::string config_text;  // canonical form persisted into the run dir
};

// Validates the documented schema; unknown sections or keys and malformed
// values are ConfigErrors carrying line numbers. Relative manifest paths
// resolve against base_dir.
GridConfig load_grid_config(const Config& cfg, const std::string& base_dir);

struct RunRecord {
  std::string variant;
  int rep = 0;
  int fold = 0;
  uint64_t seed = 0;
  std::string fingerprint;
  int64_t n_eval = 0;
  double balanced_acc = 0.0;
  double plain_acc = 0.0;
  std::vector<std::string> classes;
  std::vector<int64_t> confusion;  // flattened row-major
};

struct GridResult {
  std::vector<RunRecord> records;
  std::vector<std::string> failures;  // one line per failed cell
};

// Runs every (variant, repetition, fold) cell, sharing the pretext
// checkpoint across the folds of a (variant, repetition) pair. Completed
// cells are skipped when their record carries the current fingerprint.
// Cell failures are collected, not fatal.
GridResult run_grid(const GridConfig& cfg, const std::string& run_dir,
                    bool resume, int workers);

void write_records_table(const std::vector<RunRecord>& records,
                         uint64_t fingerprint, const std::string& path);
std::vector<RunRecord> read_records_table(const std::string& path);

// per-variant mean +- sample std of balanced accuracy, one row per variant
std::string variant_summary_table(const std::vector<RunRecord>& records);

}  // namespace scenelab
