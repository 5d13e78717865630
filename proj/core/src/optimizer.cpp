#include "scenelab/optimizer.hpp"

#include <cmath>

namespace scenelab {

void LarsConfig::validate() const {
  if (!(base_lr > 0.f)) throw ContractError("lars: base_lr must be positive");
  if (!(trust_coefficient > 0.f)) {
    throw ContractError("lars: trust_coefficient must be positive");
  }
  if (momentum < 0.f || momentum >= 1.f) {
    throw ContractError("lars: momentum must be in [0,1)");
  }
  if (weight_decay < 0.f) {
    throw ContractError("lars: weight_decay must be nonnegative");
  }
}

LarsOptimizer::LarsOptimizer(LarsConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void LarsOptimizer::step(std::vector<Parameter>& params, float lr_t) {
  if (lr_t < 0.f) throw ContractError("lars: negative learning rate");
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto& w = p.tensor.mutable_values();
    const auto& g = p.tensor.grad();
    for (float gv : g) {
      if (!std::isfinite(gv)) {
        throw NumericError("lars: non-finite gradient in " + p.name);
      }
    }
    auto& v = velocity_[p.name];
    if (v.size() != w.size()) v.assign(w.size(), 0.f);

    if (p.no_decay) {
      // plain momentum SGD for biases and norm parameters
      for (size_t i = 0; i < w.size(); ++i) {
        v[i] = cfg_.momentum * v[i] + g[i];
        w[i] -= lr_t * v[i];
      }
    } else {
      double wn = 0.0, gn = 0.0;
      for (size_t i = 0; i < w.size(); ++i) {
        wn += static_cast<double>(w[i]) * w[i];
        gn += static_cast<double>(g[i]) * g[i];
      }
      wn = std::sqrt(wn);
      gn = std::sqrt(gn);
      double local = 1.0;
      if (wn > 0.0) {
        local = cfg_.trust_coefficient * wn /
                (gn + cfg_.weight_decay * wn +
                 (gn == 0.0 && cfg_.weight_decay == 0.f ? 1e-12 : 0.0));
      }
      const float rate = static_cast<float>(lr_t * local);
      for (size_t i = 0; i < w.size(); ++i) {
        const float d = g[i] + cfg_.weight_decay * w[i];
        v[i] = cfg_.momentum * v[i] + d;
        w[i] -= rate * v[i];
      }
    }
    p.tensor.zero_grad();
  }
}

void ScheduleConfig::validate() const {
  if (restarts < 1) throw ContractError("schedule: restarts must be >= 1");
  if (total_epochs < 1) {
    throw ContractError("schedule: total_epochs must be >= 1");
  }
  if (total_epochs % restarts != 0) {
    throw ContractError("schedule: total_epochs " +
                        std::to_string(total_epochs) +
                        " not divisible by restarts " +
                        std::to_string(restarts));
  }
  if (!(min_lr < base_lr)) {
    throw ContractError("schedule: min_lr must be below base_lr");
  }
}

float cosine_restart_lr(int epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  if (epoch < 0 || epoch >= cfg.total_epochs) {
    throw ContractError("schedule: epoch " + std::to_string(epoch) +
                        " outside [0," + std::to_string(cfg.total_epochs) +
                        ")");
  }
  const int seg = cfg.total_epochs / cfg.restarts;
  const int t = epoch % seg;
  const double cosine = std::cos(M_PI * static_cast<double>(t) / seg);
  return static_cast<float>(cfg.min_lr +
                            (cfg.base_lr - cfg.min_lr) * (1.0 + cosine) / 2.0);
}

EarlyStopDecision early_stop(const std::vector<float>& val_losses,
                             const EarlyStopConfig& cfg) {
  if (val_losses.empty()) {
    throw ContractError("early_stop: empty history");
  }
  EarlyStopDecision d;
  float best = val_losses[0];
  int since_improvement = 0;
  for (size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < best - cfg.min_delta) {
      best = val_losses[i];
      d.best_index = static_cast<int>(i);
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
  }
  d.stop = since_improvement >= cfg.patience;
  return d;
}

}  // namespace scenelab
