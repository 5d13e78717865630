#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "scenelab/losses.hpp"
#include "scenelab/model.hpp"
#include "scenelab/rng.hpp"
#include "testutil.hpp"

using namespace scenelab;
using namespace scenelab::testutil;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.encoder.in_h = 16;
  cfg.encoder.in_w = 16;
  cfg.encoder.in_ch = 3;
  cfg.encoder.stage_widths = {8, 16};
  cfg.encoder.blocks_per_stage = {1, 1};
  cfg.encoder.embedding_dim = 8;
  cfg.encoder.norm_groups = 8;
  cfg.projection.hidden_dim = 16;
  cfg.projection.output_dim = 8;
  cfg.num_classes = 8;
  return cfg;
}

}  // namespace

TEST_CASE("fresh encoder maps a zero image to a finite embedding") {
  Rng rng(1);
  SceneModel model(small_config(), rng);
  auto img = Tensor::zeros({2, 3, 16, 16});
  auto emb = model.encode(img, false);
  CHECK(emb.shape() == Shape{2, 8});
  for (float v : emb.values()) CHECK(std::isfinite(v));
}

TEST_CASE("encode is deterministic for the same input and parameters") {
  Rng rng(2);
  SceneModel model(small_config(), rng);
  Rng irng(3);
  auto img = Tensor::uniform({2, 3, 16, 16}, irng, 0.f, 1.f);
  auto a = model.encode(img, false).values();
  auto b = model.encode(img, false).values();
  CHECK(a == b);
}

TEST_CASE("identical init seeds give identical models") {
  Rng a(77), b(77);
  SceneModel ma(small_config(), a), mb(small_config(), b);
  REQUIRE(ma.parameters().size() == mb.parameters().size());
  for (size_t i = 0; i < ma.parameters().size(); ++i) {
    CHECK(ma.parameters()[i].tensor.values() ==
          mb.parameters()[i].tensor.values());
  }
}

TEST_CASE("all-zero parameters map any input to the zero embedding") {
  Rng rng(4);
  SceneModel model(small_config(), rng);
  for (auto& p : model.parameters()) {
    auto& v = p.tensor.mutable_values();
    std::fill(v.begin(), v.end(), 0.f);
  }
  Rng irng(5);
  auto img = Tensor::uniform({3, 3, 16, 16}, irng, -1.f, 1.f);
  auto emb = model.encode(img, false);
  for (float v : emb.values()) CHECK(v == 0.f);
}

TEST_CASE("non-finite activations raise a NumericError naming the layer") {
  Rng rng(6);
  SceneModel model(small_config(), rng);
  std::vector<float> v(3 * 16 * 16, 0.f);
  v[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    model.encode(Tensor::from_data({1, 3, 16, 16}, v), false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("stem") != std::string::npos);
  }
}

TEST_CASE("parameter count formula matches a hand count and the instance") {
  EncoderConfig e;
  e.in_h = 16;
  e.in_w = 16;
  e.in_ch = 3;
  e.stage_widths = {8, 16};
  e.blocks_per_stage = {1, 1};
  e.embedding_dim = 8;
  e.norm_groups = 8;
  // by hand: stem 9*3*8+16 = 232; s0.b0 (8->8, no downsample)
  // 576+576+32 = 1184; s1.b0 (8->16, stride 2, downsample)
  // 1152+2304+64+128+32 = 3680; head 16*8+8 = 136
  CHECK(encoder_parameter_count(e) == 232 + 1184 + 3680 + 136);

  // and the instantiated encoder agrees (encoder-only params)
  ModelConfig cfg = small_config();
  Rng rng(7);
  SceneModel model(cfg, rng);
  int64_t encoder_params = 0;
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("proj.", 0) == 0 || p.name.rfind("cls.", 0) == 0)
      continue;
    encoder_params += p.tensor.numel();
  }
  CHECK(encoder_params == encoder_parameter_count(cfg.encoder));
}

TEST_CASE("heads: shapes, identity classify, softmax normalization") {
  Rng rng(8);
  auto cfg = small_config();
  SceneModel model(cfg, rng);
  Rng irng(9);
  auto img = Tensor::uniform({4, 3, 16, 16}, irng, 0.f, 1.f);
  auto emb = model.encode(img, false);
  auto logits = model.classify(emb);
  CHECK(logits.shape() == Shape{4, 8});
  auto proj = model.project(emb, false);
  CHECK(proj.shape() == Shape{4, 8});

  // identity-initialized classifier returns the embedding unchanged
  for (auto& p : model.parameters()) {
    if (p.name == "cls.w") {
      auto& v = p.tensor.mutable_values();
      std::fill(v.begin(), v.end(), 0.f);
      for (int i = 0; i < 8; ++i) v[i * 8 + i] = 1.f;
    }
    if (p.name == "cls.b") {
      std::fill(p.tensor.mutable_values().begin(),
                p.tensor.mutable_values().end(), 0.f);
    }
  }
  auto ident_logits = model.classify(emb);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 8; ++c) {
      CHECK(ident_logits.at({r, c}) == doctest::Approx(emb.at({r, c})));
    }
  }

  auto sm = softmax(logits);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 8; ++c) s += sm.at({r, c});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("full graph gradient w.r.t. a 16x16 input matches finite differences") {
  Rng rng(10);
  SceneModel model(small_config(), rng);
  Rng irng(11);
  auto img = Tensor::uniform({1, 3, 16, 16}, irng, 0.1f, 0.9f);
  Rng wrng(12);
  auto w = Tensor::uniform({1, 8}, wrng, -1.f, 1.f);

  auto input = img.detach();
  input.set_requires_grad(true);
  auto loss = sum(mul(model.encode(input, true), w));
  loss.backward();

  auto f = [&](const std::vector<float>& x) {
    auto probe = Tensor::from_data({1, 3, 16, 16}, x);
    NoGradGuard ng;
    return static_cast<double>(sum(mul(model.encode(probe, true), w)).item());
  };
  const auto fd = finite_difference_f32(f, input.values(), 1e-3);
  const double err = norm_rel_error(input.grad(), fd);
  CHECK(err < 1e-3);
}

TEST_CASE("checkpoint round trip reproduces forward output bit-exactly") {
  Rng rng(13);
  SceneModel model(small_config(), rng);
  Rng irng(14);
  auto img = Tensor::uniform({2, 3, 16, 16}, irng, 0.f, 1.f);
  const auto before = model.encode(img, false).values();

  const std::string path = "/tmp/scenelab_model_test.ckpt";
  Rng state_rng(15);
  auto ckpt = snapshot(model, "pretext-object", {"pretext-object"}, 7,
                       1234567890123456789ull, state_rng.state());
  save_checkpoint(ckpt, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.stage == "pretext-object");
  CHECK(loaded.lineage == std::vector<std::string>{"pretext-object"});
  CHECK(loaded.epoch == 7);
  CHECK(loaded.seed == 1234567890123456789ull);
  CHECK(loaded.rng_state == state_rng.state());

  Rng rng2(999);  // different init; checkpoint must overwrite it
  SceneModel restored(small_config(), rng2);
  apply_checkpoint(restored, loaded);
  const auto after = restored.encode(img, false).values();
  CHECK(before == after);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint refuses a mismatched config with a diff") {
  Rng rng(16);
  SceneModel model(small_config(), rng);
  auto ckpt = snapshot(model, "downstream", {}, 0, 1, Rng(1).state());

  auto other_cfg = small_config();
  other_cfg.encoder.embedding_dim = 16;
  other_cfg.projection.hidden_dim = 16;
  other_cfg.projection.output_dim = 16;
  Rng rng2(17);
  SceneModel other(other_cfg, rng2);
  try {
    apply_checkpoint(other, ckpt);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("embedding_dim") != std::string::npos);
  }
}

TEST_CASE("config validation rejects bad shapes") {
  EncoderConfig e;
  e.stage_widths = {8, 16};
  e.blocks_per_stage = {1};
  CHECK_THROWS_AS(e.validate(), ContractError);
  EncoderConfig e2;
  e2.embedding_dim = 4;
  CHECK_THROWS_AS(e2.validate(), ContractError);
  ProjectionConfig p;
  p.hidden_dim = 8;
  p.output_dim = 16;
  CHECK_THROWS_AS(p.validate(), ContractError);
}

TEST_CASE("batch-norm variant keeps running buffers and round-trips") {
  auto cfg = small_config();
  cfg.encoder.use_batch_norm = true;
  Rng rng(18);
  SceneModel model(cfg, rng);
  CHECK_FALSE(model.buffers().empty());
  Rng irng(19);
  auto img = Tensor::uniform({4, 3, 16, 16}, irng, 0.f, 1.f);
  (void)model.encode(img, true);  // moves running stats
  const auto eval_out = model.encode(img, false).values();

  const std::string path = "/tmp/scenelab_bn_test.ckpt";
  save_checkpoint(snapshot(model, "downstream", {}, 0, 1, Rng(1).state()),
                  path);
  SceneModel restored(cfg, rng);
  apply_checkpoint(restored, load_checkpoint(path));
  CHECK(restored.encode(img, false).values() == eval_out);
  std::remove(path.c_str());
}
