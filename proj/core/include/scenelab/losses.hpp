#pragma once

#include <optional>
#include <vector>

#include "scenelab/tensor.hpp"

namespace scenelab {

// Embeddings of V augmented views of a batch of B samples, arranged
// view-major: rows [0,B) are view 1, rows [B,2B) are view 2, and so on.
struct ContrastiveBatch {
  Tensor embeddings;  // (V*B) x d
  int views = 2;
  int batch = 0;
  std::optional<std::vector<int>> labels;  // length B, required by supcon
  float temperature = 0.1f;
};

struct SupconDiag {
  int excluded_anchors = 0;  // anchors with no positive, dropped from the mean
};

// Normalized-temperature cross entropy over positive pairs. Requires
// exactly two views; embeddings are l2-normalized internally.
Tensor nt_xent(const ContrastiveBatch& batch);

// Supervised contrastive loss: every same-label row is a positive. Anchors
// without any positive are excluded and counted in `diag`.
Tensor supcon(const ContrastiveBatch& batch, SupconDiag* diag = nullptr);

struct BarlowConfig {
  float lambda = 5e-3f;  // off-diagonal weight
};

// Redundancy-reduction loss on the cross-correlation of the two views'
// batch-standardized embeddings. Zero iff the cross-correlation is identity.
Tensor barlow_twins(const Tensor& view_a, const Tensor& view_b,
                    const BarlowConfig& cfg);

// Balanced assignment codes: row/column renormalization of exp(scores/eps)
// toward row sums 1 and column sums B/K, ending on an exact row
// normalization. Output is detached; no gradient flows through codes.
Tensor sinkhorn_codes(const Tensor& scores, float eps, int iters);

struct SwavState {
  Tensor prototypes;  // K x d, unit-norm rows
  float sinkhorn_epsilon = 0.05f;
  int sinkhorn_iters = 3;
  float temperature = 0.1f;

  static SwavState init(int num_prototypes, int dim, Rng& rng);
  // project prototype rows back to unit norm (call after each optimizer step)
  void renormalize();
};

// Swapped prediction: codes from one view's prototype scores supervise the
// softmax of the other view's scores, symmetrized over the two views.
Tensor swav_loss(const Tensor& view_a, const Tensor& view_b, SwavState& state);

// Mean negative log-likelihood with a stable log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

}  // namespace scenelab
