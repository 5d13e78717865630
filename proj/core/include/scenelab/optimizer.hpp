#pragma once

#include <map>
#include <string>
#include <vector>

#include "scenelab/model.hpp"

namespace scenelab {

// Layer-wise adaptive rate scaling. Weight tensors get a local rate of
//   trust * ||w|| / (||g|| + weight_decay * ||w||)
// (1 when ||w|| is zero) on top of the schedule rate; bias and norm
// parameters (no_decay) fall back to plain momentum SGD without decay.
struct LarsConfig {
  float base_lr = 0.4f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  float trust_coefficient = 0.02f;

  void validate() const;
};

class LarsOptimizer {
 public:
  explicit LarsOptimizer(LarsConfig cfg);

  // One update from the gradients currently on `params`; grads are cleared
  // afterwards. Throws NumericError naming the parameter on NaN/Inf grads.
  void step(std::vector<Parameter>& params, float lr_t);

  const LarsConfig& config() const { return cfg_; }

 private:
  LarsConfig cfg_;
  std::map<std::string, std::vector<float>> velocity_;
};

// Cosine half-wave with equal-length restart segments:
//   lr(e) = min + (base-min) * (1 + cos(pi * (e mod T) / T)) / 2
// where T = total_epochs / restarts. The rate is base_lr at every segment
// start and decays toward min_lr within the segment.
struct ScheduleConfig {
  float base_lr = 0.4f;
  float min_lr = 0.f;
  int total_epochs = 30;
  int restarts = 3;

  void validate() const;
};

float cosine_restart_lr(int epoch, const ScheduleConfig& cfg);

struct EarlyStopConfig {
  int patience = 5;
  float min_delta = 0.f;
};

struct EarlyStopDecision {
  bool stop = false;
  int best_index = 0;  // argmin of the history (first minimum wins)
};

// Stop once `patience` consecutive epochs fail to improve the best value
// by more than min_delta.
EarlyStopDecision early_stop(const std::vector<float>& val_losses,
                             const EarlyStopConfig& cfg);

}  // namespace scenelab
