#include "scenelab/losses.hpp"

#include <cmath>
#include <string>

namespace scenelab {

namespace {

void check_batch(const ContrastiveBatch& b, const char* op) {
  if (!b.embeddings.defined()) {
    throw ContractError(std::string(op) + ": undefined embeddings");
  }
  if (b.embeddings.dim() != 2) {
    throw DimensionError(std::string(op) + ": embeddings must be 2-D, got " +
                         shape_str(b.embeddings.shape()));
  }
  if (b.views < 2) {
    throw ContractError(std::string(op) + ": needs at least 2 views");
  }
  if (b.batch < 1 ||
      b.embeddings.shape()[0] != static_cast<int64_t>(b.views) * b.batch) {
    throw DimensionError(std::string(op) + ": row count " +
                         std::to_string(b.embeddings.shape()[0]) +
                         " != views*batch = " +
                         std::to_string(b.views * b.batch));
  }
  if (!(b.temperature > 0.f)) {
    throw ContractError(std::string(op) + ": temperature must be positive");
  }
}

// all-pairs similarity with the diagonal pushed to -inf so exp() drops self
Tensor masked_similarity(const Tensor& z, float temperature) {
  const int64_t n = z.shape()[0];
  Tensor sim = mul(matmul(z, transpose(z)), 1.f / temperature);
  std::vector<float> maskv(static_cast<size_t>(n * n), 0.f);
  for (int64_t i = 0; i < n; ++i) maskv[i * n + i] = -1e9f;
  return add(sim, Tensor::from_data({n, n}, std::move(maskv)));
}

}  // namespace

Tensor nt_xent(const ContrastiveBatch& batch) {
  check_batch(batch, "nt_xent");
  if (batch.views != 2) {
    throw ContractError("nt_xent: exactly 2 views required, got " +
                        std::to_string(batch.views));
  }
  if (batch.batch < 2) {
    throw ContractError("nt_xent: batch of " + std::to_string(batch.batch) +
                        " has no negatives");
  }
  const int64_t b = batch.batch;
  const int64_t n = 2 * b;
  Tensor z = l2_normalize(batch.embeddings, 1);
  Tensor logp = log_softmax(masked_similarity(z, batch.temperature));
  // positive of row i is its other view: i+b mod 2b
  std::vector<float> posv(static_cast<size_t>(n * n), 0.f);
  for (int64_t i = 0; i < n; ++i) posv[i * n + (i + b) % n] = 1.f;
  Tensor pos = Tensor::from_data({n, n}, std::move(posv));
  return mul(sum(mul(logp, pos)), -1.f / static_cast<float>(n));
}

Tensor supcon(const ContrastiveBatch& batch, SupconDiag* diag) {
  check_batch(batch, "supcon");
  if (!batch.labels) {
    throw ContractError("supcon: labels required");
  }
  if (static_cast<int>(batch.labels->size()) != batch.batch) {
    throw ContractError("supcon: expected " + std::to_string(batch.batch) +
                        " labels, got " + std::to_string(batch.labels->size()));
  }
  const int64_t n = static_cast<int64_t>(batch.views) * batch.batch;
  const auto& labels = *batch.labels;
  auto label_of = [&](int64_t row) { return labels[row % batch.batch]; };

  // positives weighted 1/|P(i)| so each anchor contributes its mean
  std::vector<float> wv(static_cast<size_t>(n * n), 0.f);
  int valid_anchors = 0, excluded = 0;
  for (int64_t i = 0; i < n; ++i) {
    int count = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (j != i && label_of(j) == label_of(i)) ++count;
    }
    if (count == 0) {
      ++excluded;
      continue;
    }
    ++valid_anchors;
    for (int64_t j = 0; j < n; ++j) {
      if (j != i && label_of(j) == label_of(i)) {
        wv[i * n + j] = 1.f / static_cast<float>(count);
      }
    }
  }
  if (diag) diag->excluded_anchors = excluded;
  if (valid_anchors == 0) {
    throw ContractError("supcon: no anchor has a positive");
  }
  Tensor z = l2_normalize(batch.embeddings, 1);
  Tensor logp = log_softmax(masked_similarity(z, batch.temperature));
  Tensor weights = Tensor::from_data({n, n}, std::move(wv));
  return mul(sum(mul(logp, weights)),
             -1.f / static_cast<float>(valid_anchors));
}

Tensor barlow_twins(const Tensor& view_a, const Tensor& view_b,
                    const BarlowConfig& cfg) {
  if (!view_a.defined() || !view_b.defined()) {
    throw ContractError("barlow_twins: undefined view");
  }
  if (view_a.dim() != 2 || view_a.shape() != view_b.shape()) {
    throw DimensionError("barlow_twins: views must share a 2-D shape, got " +
                         shape_str(view_a.shape()) + " and " +
                         shape_str(view_b.shape()));
  }
  const int64_t b = view_a.shape()[0];
  const int64_t d = view_a.shape()[1];
  if (b < 2) {
    throw ContractError("barlow_twins: batch of " + std::to_string(b) +
                        " cannot be standardized");
  }
  if (!(cfg.lambda > 0.f)) {
    throw ContractError("barlow_twins: lambda must be positive");
  }
  auto standardize = [](const Tensor& v) {
    Tensor mu = mean_axis(v, 0, true);
    Tensor centered = sub(v, mu);
    Tensor var = mean_axis(pow(centered, 2.f), 0, true);
    // div uses the global epsilon floor; constant columns warn there
    return div(centered, sqrt(var));
  };
  Tensor za = standardize(view_a);
  Tensor zb = standardize(view_b);
  Tensor c = mul(matmul(transpose(za), zb), 1.f / static_cast<float>(b));
  std::vector<float> eye(static_cast<size_t>(d * d), 0.f);
  for (int64_t i = 0; i < d; ++i) eye[i * d + i] = 1.f;
  Tensor identity = Tensor::from_data({d, d}, eye);
  std::vector<float> offv(static_cast<size_t>(d * d), 1.f);
  for (int64_t i = 0; i < d; ++i) offv[i * d + i] = 0.f;
  Tensor off = Tensor::from_data({d, d}, std::move(offv));
  Tensor on_diag = sum(mul(pow(sub(c, identity), 2.f), identity));
  Tensor off_diag = sum(mul(pow(c, 2.f), off));
  return add(on_diag, mul(off_diag, cfg.lambda));
}

Tensor sinkhorn_codes(const Tensor& scores, float eps, int iters) {
  if (!scores.defined() || scores.dim() != 2) {
    throw ContractError("sinkhorn_codes: 2-D scores required");
  }
  if (iters < 1) throw ContractError("sinkhorn_codes: iters must be >= 1");
  if (!(eps > 0.f)) throw ContractError("sinkhorn_codes: eps must be > 0");
  const int64_t b = scores.shape()[0];
  const int64_t k = scores.shape()[1];
  // float64 throughout; codes are constants as far as the graph goes
  std::vector<double> q(static_cast<size_t>(b * k));
  const auto& sv = scores.values();
  for (int64_t r = 0; r < b; ++r) {
    double row_max = sv[r * k];
    for (int64_t c = 1; c < k; ++c) {
      row_max = std::max(row_max, static_cast<double>(sv[r * k + c]));
    }
    for (int64_t c = 0; c < k; ++c) {
      q[r * k + c] = std::exp((sv[r * k + c] - row_max) / eps);
    }
  }
  const double col_target = static_cast<double>(b) / static_cast<double>(k);
  for (int it = 0; it < iters; ++it) {
    for (int64_t r = 0; r < b; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < k; ++c) s += q[r * k + c];
      if (s > 0) {
        for (int64_t c = 0; c < k; ++c) q[r * k + c] /= s;
      }
    }
    for (int64_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (int64_t r = 0; r < b; ++r) s += q[r * k + c];
      if (s > 0) {
        const double f = col_target / s;
        for (int64_t r = 0; r < b; ++r) q[r * k + c] *= f;
      }
    }
  }
  // final exact row normalization
  std::vector<float> out(q.size());
  for (int64_t r = 0; r < b; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < k; ++c) s += q[r * k + c];
    for (int64_t c = 0; c < k; ++c) {
      out[r * k + c] = static_cast<float>(s > 0 ? q[r * k + c] / s : 1.0 / k);
    }
  }
  return Tensor::from_data({b, k}, std::move(out));
}

SwavState SwavState::init(int num_prototypes, int dim, Rng& rng) {
  SwavState s;
  s.prototypes = Tensor::normal({num_prototypes, dim}, rng, 0.f,
                                1.f / std::sqrt(static_cast<float>(dim)), true);
  s.renormalize();
  return s;
}

void SwavState::renormalize() {
  auto& v = prototypes.mutable_values();
  const int64_t k = prototypes.shape()[0];
  const int64_t d = prototypes.shape()[1];
  for (int64_t r = 0; r < k; ++r) {
    double sq = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      sq += static_cast<double>(v[r * d + c]) * v[r * d + c];
    }
    const double nrm = std::sqrt(sq);
    if (nrm > 0) {
      for (int64_t c = 0; c < d; ++c) {
        v[r * d + c] = static_cast<float>(v[r * d + c] / nrm);
      }
    }
  }
}

Tensor swav_loss(const Tensor& view_a, const Tensor& view_b,
                 SwavState& state) {
  if (!view_a.defined() || !view_b.defined()) {
    throw ContractError("swav_loss: undefined view");
  }
  if (view_a.shape() != view_b.shape() || view_a.dim() != 2) {
    throw DimensionError("swav_loss: views must share a 2-D shape, got " +
                         shape_str(view_a.shape()) + " and " +
                         shape_str(view_b.shape()));
  }
  const int64_t k = state.prototypes.shape()[0];
  if (k < 2) {
    throw ContractError("swav_loss: needs at least 2 prototypes, got " +
                        std::to_string(k));
  }
  const float b = static_cast<float>(view_a.shape()[0]);
  Tensor za = l2_normalize(view_a, 1);
  Tensor zb = l2_normalize(view_b, 1);
  Tensor proto_t = transpose(state.prototypes);
  Tensor scores_a = matmul(za, proto_t);
  Tensor scores_b = matmul(zb, proto_t);
  Tensor q_a = sinkhorn_codes(scores_a.detach(), state.sinkhorn_epsilon,
                              state.sinkhorn_iters);
  Tensor q_b = sinkhorn_codes(scores_b.detach(), state.sinkhorn_epsilon,
                              state.sinkhorn_iters);
  Tensor logp_a = log_softmax(mul(scores_a, 1.f / state.temperature));
  Tensor logp_b = log_softmax(mul(scores_b, 1.f / state.temperature));
  Tensor loss_ab = mul(sum(mul(q_a, logp_b)), -1.f / b);
  Tensor loss_ba = mul(sum(mul(q_b, logp_a)), -1.f / b);
  return mul(add(loss_ab, loss_ba), 0.5f);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (!logits.defined() || logits.dim() != 2) {
    throw ContractError("cross_entropy: 2-D logits required");
  }
  const int64_t b = logits.shape()[0];
  const int64_t c = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != b) {
    throw ContractError("cross_entropy: expected " + std::to_string(b) +
                        " targets, got " + std::to_string(targets.size()));
  }
  std::vector<float> onehot(static_cast<size_t>(b * c), 0.f);
  for (int64_t r = 0; r < b; ++r) {
    if (targets[r] < 0 || targets[r] >= c) {
      throw ContractError("cross_entropy: target out of range at row " +
                          std::to_string(r) + ": " +
                          std::to_string(targets[r]));
    }
    onehot[r * c + targets[r]] = 1.f;
  }
  Tensor picked = mul(log_softmax(logits),
                      Tensor::from_data({b, c}, std::move(onehot)));
  return mul(sum(picked), -1.f / static_cast<float>(b));
}

}  // namespace scenelab
