#include <doctest.h>

#include <cmath>

#include "scenelab/losses.hpp"
#include "scenelab/rng.hpp"
#include "reference_losses.hpp"
#include "reference_ops.hpp"
#include "testutil.hpp"

using namespace scenelab;
using namespace scenelab::testutil;
namespace ref = scenelab::testref;
using ref::dvec;

namespace {

ContrastiveBatch make_batch(Tensor emb, int views, int b,
                            std::optional<std::vector<int>> labels = {},
                            float tau = 0.1f) {
  ContrastiveBatch batch;
  batch.embeddings = std::move(emb);
  batch.views = views;
  batch.batch = b;
  batch.labels = std::move(labels);
  batch.temperature = tau;
  return batch;
}

// columns whitened in float64: zero mean, unit (biased) variance, mutually
// uncorrelated over the batch
std::vector<float> whitened_columns(int b, int d, Rng& rng) {
  std::vector<dvec> cols(d, dvec(b));
  for (int c = 0; c < d; ++c) {
    for (int r = 0; r < b; ++r) cols[c][r] = rng.normal();
  }
  for (int c = 0; c < d; ++c) {
    double mu = 0.0;
    for (double v : cols[c]) mu += v;
    mu /= b;
    for (double& v : cols[c]) v -= mu;
    for (int prev = 0; prev < c; ++prev) {
      double dot = 0.0, nrm = 0.0;
      for (int r = 0; r < b; ++r) {
        dot += cols[c][r] * cols[prev][r];
        nrm += cols[prev][r] * cols[prev][r];
      }
      for (int r = 0; r < b; ++r) cols[c][r] -= dot / nrm * cols[prev][r];
    }
    double sq = 0.0;
    for (double v : cols[c]) sq += v * v;
    const double scale = std::sqrt(static_cast<double>(b) / sq);
    for (double& v : cols[c]) v *= scale;
  }
  std::vector<float> out(static_cast<size_t>(b) * d);
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < d; ++c) out[r * d + c] = static_cast<float>(cols[c][r]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// nt_xent
// ---------------------------------------------------------------------------

TEST_CASE("nt_xent on identical pairs equals ln 3 for any temperature") {
  const std::vector<float> e = {0.3f, -1.2f, 0.25f};
  std::vector<float> emb;
  for (int i = 0; i < 4; ++i) emb.insert(emb.end(), e.begin(), e.end());
  for (float tau : {0.05f, 0.1f, 0.5f, 1.0f}) {
    auto loss =
        nt_xent(make_batch(Tensor::from_data({4, 3}, emb), 2, 2, {}, tau));
    CHECK(std::fabs(loss.item() - std::log(3.0)) < 1e-6);
  }
}

TEST_CASE("nt_xent prefers identical positives over orthogonal ones") {
  // identical positives: each view pair coincides
  std::vector<float> ident = {1, 0, 0, 0, 0, 1, 0, 0,
                              1, 0, 0, 0, 0, 1, 0, 0};
  // orthogonal positives: second view orthogonal to the first
  std::vector<float> ortho = {1, 0, 0, 0, 0, 1, 0, 0,
                              0, 0, 1, 0, 0, 0, 0, 1};
  auto l_ident = nt_xent(make_batch(Tensor::from_data({4, 4}, ident), 2, 2));
  auto l_ortho = nt_xent(make_batch(Tensor::from_data({4, 4}, ortho), 2, 2));
  CHECK(l_ident.item() < l_ortho.item());
  CHECK(l_ident.item() >= 0.f);
}

TEST_CASE("nt_xent gradient matches the float64 oracle") {
  Rng rng(101);
  const int b = 4, d = 8;
  std::vector<Tensor> inputs{Tensor::uniform({2 * b, d}, rng, -2.f, 2.f)};
  const double err = gradcheck_ref(
      [&](const std::vector<Tensor>& in) {
        return nt_xent(make_batch(in[0], 2, b));
      },
      [&](size_t, const dvec& x) { return ref::ref_nt_xent(x, b, d, 0.1); },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("nt_xent contract errors") {
  Rng rng(5);
  auto one_pair = Tensor::uniform({2, 4}, rng, -1.f, 1.f);
  CHECK_THROWS_AS(nt_xent(make_batch(one_pair, 2, 1)), ContractError);
  auto bad_rows = Tensor::uniform({5, 4}, rng, -1.f, 1.f);
  CHECK_THROWS_AS(nt_xent(make_batch(bad_rows, 2, 2)), DimensionError);
  auto ok = Tensor::uniform({8, 4}, rng, -1.f, 1.f);
  auto batch = make_batch(ok, 2, 4);
  batch.temperature = 0.f;
  CHECK_THROWS_AS(nt_xent(batch), ContractError);
}

// ---------------------------------------------------------------------------
// supcon
// ---------------------------------------------------------------------------

TEST_CASE("supcon with one label and identical embeddings equals ln 3") {
  const std::vector<float> e = {0.5f, 0.1f, -0.9f};
  std::vector<float> emb;
  for (int i = 0; i < 4; ++i) emb.insert(emb.end(), e.begin(), e.end());
  auto loss = supcon(make_batch(Tensor::from_data({4, 3}, emb), 2, 2,
                                std::vector<int>{0, 0}));
  CHECK(std::fabs(loss.item() - std::log(3.0)) < 1e-6);
}

TEST_CASE("supcon two-label fixture matches brute-force evaluation") {
  // within-label identical, cross-label orthogonal, tau = 1
  std::vector<float> emb = {1, 0, 0, 0, 0, 1, 0, 0,
                            1, 0, 0, 0, 0, 1, 0, 0};
  std::vector<int> labels = {0, 1};
  SupconDiag diag;
  auto loss = supcon(
      make_batch(Tensor::from_data({4, 4}, emb), 2, 2, labels, 1.f), &diag);
  const double expect =
      ref::ref_supcon(dvec(emb.begin(), emb.end()), labels, 2, 2, 4, 1.0);
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-6));
  CHECK(diag.excluded_anchors == 0);
  // and the closed form by hand: each anchor has one positive at sim 1 and
  // two negatives at sim 0 -> -log(e / (e + 2))
  const double hand = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  CHECK(loss.item() == doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("supcon reduces to nt_xent when labels are unique per pair") {
  Rng rng(202);
  const int b = 4, d = 6;
  auto emb = Tensor::uniform({2 * b, d}, rng, -2.f, 2.f);
  std::vector<int> labels = {0, 1, 2, 3};
  auto l_sup = supcon(make_batch(emb, 2, b, labels));
  auto l_nt = nt_xent(make_batch(emb, 2, b));
  CHECK(std::fabs(l_sup.item() - l_nt.item()) < 1e-6);
}

TEST_CASE("supcon gradient matches the float64 oracle") {
  Rng rng(203);
  const int b = 4, d = 6;
  std::vector<int> labels = {0, 1, 0, 1};
  std::vector<Tensor> inputs{Tensor::uniform({2 * b, d}, rng, -2.f, 2.f)};
  const double err = gradcheck_ref(
      [&](const std::vector<Tensor>& in) {
        return supcon(make_batch(in[0], 2, b, labels));
      },
      [&](size_t, const dvec& x) {
        return ref::ref_supcon(x, labels, 2, b, d, 0.1);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("supcon requires labels") {
  Rng rng(7);
  auto emb = Tensor::uniform({4, 4}, rng, -1.f, 1.f);
  CHECK_THROWS_AS(supcon(make_batch(emb, 2, 2)), ContractError);
}

// ---------------------------------------------------------------------------
// barlow twins
// ---------------------------------------------------------------------------

TEST_CASE("barlow_twins is zero on whitened identical views") {
  Rng rng(301);
  auto w = whitened_columns(8, 3, rng);
  auto va = Tensor::from_data({8, 3}, w);
  auto vb = Tensor::from_data({8, 3}, w);
  auto loss = barlow_twins(va, vb, BarlowConfig{});
  CHECK(std::fabs(loss.item()) < 1e-6);
}

TEST_CASE("barlow_twins on negated whitened views gives 4d") {
  Rng rng(302);
  const int d = 3;
  auto w = whitened_columns(8, d, rng);
  std::vector<float> negated(w.size());
  for (size_t i = 0; i < w.size(); ++i) negated[i] = -w[i];
  auto loss = barlow_twins(Tensor::from_data({8, d}, w),
                           Tensor::from_data({8, d}, negated), BarlowConfig{});
  CHECK(loss.item() == doctest::Approx(4.0 * d).epsilon(1e-5));
}

TEST_CASE("barlow_twins gradient matches the float64 oracle") {
  Rng rng(303);
  const int b = 8, d = 4;
  std::vector<Tensor> inputs{Tensor::uniform({b, d}, rng, -2.f, 2.f),
                             Tensor::uniform({b, d}, rng, -2.f, 2.f)};
  const double err = gradcheck_ref(
      [](const std::vector<Tensor>& in) {
        return barlow_twins(in[0], in[1], BarlowConfig{});
      },
      [&](size_t which, const dvec& x) {
        dvec a = which == 0 ? x : ref::to_dvec(inputs[0].values());
        dvec b2 = which == 1 ? x : ref::to_dvec(inputs[1].values());
        return ref::ref_barlow(a, b2, b, d, 5e-3);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("barlow_twins is invariant to per-dimension affine rescaling") {
  Rng rng(304);
  const int b = 8, d = 4;
  auto va = Tensor::uniform({b, d}, rng, -2.f, 2.f);
  auto vb = Tensor::uniform({b, d}, rng, -2.f, 2.f);
  const float scales[4] = {2.f, 0.5f, 3.f, 1.5f};
  const float shifts[4] = {0.7f, -1.f, 0.2f, 0.f};
  std::vector<float> va2(va.values()), vb2(vb.values());
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < d; ++c) {
      va2[r * d + c] = va2[r * d + c] * scales[c] + shifts[c];
      vb2[r * d + c] = vb2[r * d + c] * scales[c] + shifts[c];
    }
  }
  auto l1 = barlow_twins(va, vb, BarlowConfig{});
  auto l2 = barlow_twins(Tensor::from_data({b, d}, va2),
                         Tensor::from_data({b, d}, vb2), BarlowConfig{});
  CHECK(std::fabs(l1.item() - l2.item()) < 1e-5);
}

TEST_CASE("barlow_twins floors constant feature columns with a warning") {
  reset_numeric_warnings();
  std::vector<float> v(8 * 2);
  Rng rng(305);
  for (int r = 0; r < 8; ++r) {
    v[r * 2] = 1.f;  // constant column
    v[r * 2 + 1] = static_cast<float>(rng.normal());
  }
  auto t = Tensor::from_data({8, 2}, v);
  auto loss = barlow_twins(t, t, BarlowConfig{});
  CHECK(std::isfinite(loss.item()));
  CHECK(numeric_warning_count() > 0);
  reset_numeric_warnings();
}

// ---------------------------------------------------------------------------
// sinkhorn + swav
// ---------------------------------------------------------------------------

TEST_CASE("sinkhorn on uniform scores gives the uniform plan") {
  auto scores = Tensor::zeros({4, 8});
  auto q = sinkhorn_codes(scores, 0.05f, 3);
  for (float v : q.values()) CHECK(v == doctest::Approx(1.f / 8).epsilon(1e-6));
}

TEST_CASE("sinkhorn strong diagonal converges to the fixed-point oracle") {
  auto scores = Tensor::from_data({2, 2}, {10, 0, 0, 10});
  auto q = sinkhorn_codes(scores, 1.f, 50);
  const dvec oracle = ref::ref_sinkhorn({10, 0, 0, 10}, 2, 2, 1.0, 10000);
  for (int i = 0; i < 4; ++i) {
    CHECK(q.values()[i] == doctest::Approx(oracle[i]).epsilon(1e-5));
  }
  // doubly stochastic at the fixed point: rows to 1, columns to b/k = 1
  CHECK(q.values()[0] + q.values()[1] == doctest::Approx(1.f));
  CHECK(oracle[0] + oracle[2] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(q.values()[0] > 0.9f);  // diagonal dominates
}

TEST_CASE("sinkhorn production iterations approach the column marginal") {
  // 1e-2 after 3 iterations holds for kernels up to ~e^{+-2} contrast
  // (unit-range scores at eps = 0.5); measured against the 10k-iteration
  // oracle, which is what pins this tolerance
  Rng rng(401);
  auto scores = Tensor::uniform({16, 8}, rng, -1.f, 1.f);
  auto q = sinkhorn_codes(scores, 0.5f, 3);
  const double col_target = 16.0 / 8.0;
  for (int c = 0; c < 8; ++c) {
    double s = 0.0;
    for (int r = 0; r < 16; ++r) s += q.at({r, c});
    CHECK(std::fabs(s - col_target) / col_target < 1e-2);
  }
  // rows normalized exactly (to float32 resolution), all entries nonnegative
  for (int r = 0; r < 16; ++r) {
    double s = 0.0;
    for (int c = 0; c < 8; ++c) {
      s += q.at({r, c});
      CHECK(q.at({r, c}) >= 0.f);
    }
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
  // at the peaked production temperature the plan is still a valid
  // assignment (rows exact, nonnegative), just further from balance
  auto q_peaked = sinkhorn_codes(scores, 0.05f, 3);
  for (int r = 0; r < 16; ++r) {
    double s = 0.0;
    for (int c = 0; c < 8; ++c) s += q_peaked.at({r, c});
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("sinkhorn output carries no gradient") {
  Rng rng(402);
  auto scores = Tensor::uniform({4, 4}, rng, -1.f, 1.f, true);
  auto q = sinkhorn_codes(scores.detach(), 0.05f, 3);
  CHECK_FALSE(q.requires_grad());
}

TEST_CASE("swav aligned embeddings give near-zero loss, below a shuffled baseline") {
  const int k = 8, d = 8;
  Rng rng(403);
  SwavState state = SwavState::init(k, d, rng);
  // prototypes = orthonormal basis; each sample sits on its own prototype
  std::vector<float> basis(k * d, 0.f);
  for (int i = 0; i < k; ++i) basis[i * d + i] = 1.f;
  state.prototypes = Tensor::from_data({k, d}, basis, true);
  state.temperature = 0.05f;
  auto aligned = Tensor::from_data({k, d}, basis);
  auto l_aligned = swav_loss(aligned, aligned, state);
  // shuffled baseline: pair each sample with the next sample's embedding
  std::vector<float> shifted(k * d, 0.f);
  for (int i = 0; i < k; ++i) shifted[i * d + (i + 1) % k] = 1.f;
  auto l_shuffled =
      swav_loss(aligned, Tensor::from_data({k, d}, shifted), state);
  CHECK(l_aligned.item() < 1e-3);
  CHECK(l_aligned.item() < l_shuffled.item());
  CHECK(l_shuffled.item() > 1.f);
}

TEST_CASE("swav loss is finite and nonnegative on random draws") {
  Rng rng(404);
  for (int rep = 0; rep < 1000; ++rep) {
    Rng local = rng.split(rep);
    SwavState state = SwavState::init(8, 4, local);
    auto va = Tensor::uniform({8, 4}, local, -2.f, 2.f);
    auto vb = Tensor::uniform({8, 4}, local, -2.f, 2.f);
    const float l = swav_loss(va, vb, state).item();
    CHECK(std::isfinite(l));
    CHECK(l >= 0.f);
  }
}

TEST_CASE("swav gradient matches the float64 oracle with codes frozen") {
  Rng rng(405);
  const int b = 6, k = 8, d = 4;
  SwavState state = SwavState::init(k, d, rng);
  std::vector<Tensor> inputs{Tensor::uniform({b, d}, rng, -2.f, 2.f),
                             Tensor::uniform({b, d}, rng, -2.f, 2.f),
                             state.prototypes.detach()};
  // freeze codes at the unperturbed point, as the engine does via detach
  auto codes_for = [&](const Tensor& view, const dvec& protos) {
    dvec z = ref::normalize_rows_d(ref::to_dvec(view.values()), b, d);
    dvec scores(static_cast<size_t>(b) * k);
    for (int r = 0; r < b; ++r) {
      for (int c = 0; c < k; ++c) {
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += z[r * d + j] * protos[c * d + j];
        scores[r * k + c] = dot;
      }
    }
    return ref::ref_sinkhorn(scores, b, k, 0.05, 3);
  };
  const dvec protos0 = ref::to_dvec(inputs[2].values());
  const dvec qa = codes_for(inputs[0], protos0);
  const dvec qb = codes_for(inputs[1], protos0);

  const double err = gradcheck_ref(
      [&](const std::vector<Tensor>& in) {
        SwavState s;
        s.prototypes = in[2];
        s.sinkhorn_epsilon = 0.05f;
        s.sinkhorn_iters = 3;
        s.temperature = 0.1f;
        return swav_loss(in[0], in[1], s);
      },
      [&](size_t which, const dvec& x) {
        const dvec& va = which == 0 ? x : ref::to_dvec(inputs[0].values());
        const dvec& vb = which == 1 ? x : ref::to_dvec(inputs[1].values());
        const dvec& pr = which == 2 ? x : protos0;
        return ref::ref_swav_frozen(va, vb, pr, qa, qb, b, k, d, 0.1);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("swav rejects a degenerate prototype bank") {
  Rng rng(406);
  SwavState state;
  state.prototypes = Tensor::from_data({1, 4}, {1, 0, 0, 0});
  auto v = Tensor::uniform({4, 4}, rng, -1.f, 1.f);
  CHECK_THROWS_AS(swav_loss(v, v, state), ContractError);
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

TEST_CASE("cross_entropy on uniform logits equals ln C") {
  auto logits = Tensor::full({3, 8}, 0.7f);
  auto loss = cross_entropy(logits, {0, 3, 7});
  CHECK(std::fabs(loss.item() - std::log(8.0)) < 1e-6);
}

TEST_CASE("cross_entropy vanishes on confident correct logits") {
  std::vector<float> v(2 * 4, 0.f);
  v[0 * 4 + 1] = 50.f;
  v[1 * 4 + 2] = 50.f;
  auto loss = cross_entropy(Tensor::from_data({2, 4}, v), {1, 2});
  CHECK(loss.item() < 1e-6);
}

TEST_CASE("cross_entropy gradient equals softmax minus one-hot") {
  Rng rng(501);
  const int b = 4, c = 8;
  auto logits = Tensor::uniform({b, c}, rng, -2.f, 2.f, true);
  std::vector<int> targets = {2, 0, 7, 4};
  auto loss = cross_entropy(logits, targets);
  loss.backward();
  // independent float64 softmax
  const auto lv = ref::to_dvec(logits.values());
  for (int r = 0; r < b; ++r) {
    double m = lv[r * c];
    for (int j = 1; j < c; ++j) m = std::max(m, lv[r * c + j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(lv[r * c + j] - m);
    for (int j = 0; j < c; ++j) {
      const double sm = std::exp(lv[r * c + j] - m) / denom;
      const double expect = (sm - (targets[r] == j ? 1.0 : 0.0)) / b;
      CHECK(logits.grad()[r * c + j] ==
            doctest::Approx(expect).epsilon(1e-4));
    }
  }
  // and the finite-difference oracle agrees
  std::vector<Tensor> inputs{logits.detach()};
  const double err = gradcheck_ref(
      [&](const std::vector<Tensor>& in) {
        return cross_entropy(in[0], targets);
      },
      [&](size_t, const dvec& x) {
        return ref::ref_cross_entropy(x, targets, b, c);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("cross_entropy names the offending row on a bad target") {
  auto logits = Tensor::zeros({3, 4});
  try {
    cross_entropy(logits, {0, 9, 1});
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// shared invariants
// ---------------------------------------------------------------------------

TEST_CASE("losses are invariant to a consistent sample permutation") {
  Rng rng(601);
  const int b = 6, d = 5;
  auto emb = Tensor::uniform({2 * b, d}, rng, -2.f, 2.f);
  std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  auto perm = rng.permutation(b);
  std::vector<float> pv(emb.values().size());
  std::vector<int> plabels(b);
  for (int i = 0; i < b; ++i) {
    const size_t src = perm[i];
    plabels[i] = labels[src];
    for (int v = 0; v < 2; ++v) {
      for (int c = 0; c < d; ++c) {
        pv[(v * b + i) * d + c] = emb.values()[(v * b + src) * d + c];
      }
    }
  }
  auto pemb = Tensor::from_data({2 * b, d}, pv);

  CHECK(std::fabs(nt_xent(make_batch(emb, 2, b)).item() -
                  nt_xent(make_batch(pemb, 2, b)).item()) < 1e-6);
  CHECK(std::fabs(supcon(make_batch(emb, 2, b, labels)).item() -
                  supcon(make_batch(pemb, 2, b, plabels)).item()) < 1e-6);

  auto va = slice(emb, 0, 0, b);
  auto vb = slice(emb, 0, b, 2 * b);
  auto pva = slice(pemb, 0, 0, b);
  auto pvb = slice(pemb, 0, b, 2 * b);
  CHECK(std::fabs(barlow_twins(va, vb, BarlowConfig{}).item() -
                  barlow_twins(pva, pvb, BarlowConfig{}).item()) < 1e-5);

  Rng prng(602);
  SwavState st = SwavState::init(8, d, prng);
  CHECK(std::fabs(swav_loss(va, vb, st).item() -
                  swav_loss(pva, pvb, st).item()) < 1e-6);
}

TEST_CASE("cosine-based losses ignore a positive rescaling of embeddings") {
  Rng rng(603);
  const int b = 5, d = 6;
  auto emb = Tensor::uniform({2 * b, d}, rng, -2.f, 2.f);
  std::vector<float> scaled(emb.values());
  for (auto& v : scaled) v *= 3.7f;
  auto semb = Tensor::from_data({2 * b, d}, scaled);
  std::vector<int> labels = {0, 1, 0, 1, 2};

  CHECK(std::fabs(nt_xent(make_batch(emb, 2, b)).item() -
                  nt_xent(make_batch(semb, 2, b)).item()) < 1e-6);
  CHECK(std::fabs(supcon(make_batch(emb, 2, b, labels)).item() -
                  supcon(make_batch(semb, 2, b, labels)).item()) < 1e-6);

  Rng prng(604);
  SwavState st = SwavState::init(8, d, prng);
  auto va = slice(emb, 0, 0, b), vb = slice(emb, 0, b, 2 * b);
  auto sva = slice(semb, 0, 0, b), svb = slice(semb, 0, b, 2 * b);
  CHECK(std::fabs(swav_loss(va, vb, st).item() -
                  swav_loss(sva, svb, st).item()) < 1e-6);
}
