#pragma once

#include <span>
#include <string>
#include <vector>

#include "scenelab/augment.hpp"
#include "scenelab/dataset.hpp"
#include "scenelab/manifest.hpp"
#include "scenelab/model.hpp"

namespace scenelab {

// Row-major counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<int64_t> counts;

  explicit ConfusionMatrix(std::vector<std::string> class_names);
  void add(int true_idx, int pred_idx, int64_t n = 1);
  int64_t at(int true_idx, int pred_idx) const;
  int64_t total() const;
  int64_t row_sum(int true_idx) const;
  // rows sum to 1; zero-support rows stay all-zero
  std::vector<double> row_normalized() const;
  int size() const { return static_cast<int>(classes.size()); }
};

// Macro-averaged recall over classes with nonzero support. Classes without
// support are excluded from the mean and reported through `excluded`.
double balanced_accuracy(const ConfusionMatrix& cm,
                         std::vector<std::string>* excluded = nullptr);

struct PredictionRow {
  std::string uri;
  std::string true_class;
  std::string predicted_class;
  float confidence = 0.f;  // softmax mass on the prediction
  std::string group_tag;   // empty unless grouped evaluation
};

struct EvalResult {
  double balanced_acc = 0.0;
  double plain_acc = 0.0;
  ConfusionMatrix cm{{}};
  std::vector<double> per_class_recall;      // aligned with cm.classes
  std::vector<std::string> excluded_classes;  // zero-support classes
  std::vector<PredictionRow> audit;          // one row per image
  int64_t evaluated = 0;
  int64_t skipped = 0;
};

// Runs the classifier over one manifest split. Manifest classes must be a
// subset of the model's class list; offending classes are named otherwise.
EvalResult evaluate(SceneModel& model, const SampleManifest& manifest,
                    const std::string& split,
                    const std::vector<std::string>& model_classes,
                    const AugmentPolicy& eval_policy,
                    const std::string& base_dir, int batch_size = 64);

// Same metrics over an in-memory image set (the grid's hot path; images
// are already decoded and sized for the model).
EvalResult evaluate_images(SceneModel& model, std::span<const Tensor> images,
                           std::span<const int> labels,
                           const std::vector<std::string>& classes,
                           const AugmentPolicy& eval_policy,
                           int batch_size = 64);

// Aggregates an audit listing (predictions + per-row group tags) into
// metrics computed from predictions alone, no model needed.
EvalResult evaluate_predictions(const std::vector<PredictionRow>& predictions,
                                const std::vector<std::string>& classes);

struct GroupReport {
  std::string group;
  EvalResult metrics;
  std::vector<std::pair<std::string, int64_t>> class_histogram;  // ground truth
};

// Per-group metrics plus the group's ground-truth class histogram. Every
// prediction row must carry a known group tag.
std::vector<GroupReport> grouped_report(
    const std::vector<PredictionRow>& predictions,
    const std::vector<std::string>& classes);

// tab-separated serialization of the audit listing
void write_audit(const std::vector<PredictionRow>& rows,
                 const std::string& path);
std::vector<PredictionRow> read_audit(const std::string& path);

}  // namespace scenelab
