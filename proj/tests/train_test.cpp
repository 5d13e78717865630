#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "scenelab/config.hpp"
#include "scenelab/optimizer.hpp"
#include "scenelab/pipeline.hpp"
#include "scenelab/toyscenes.hpp"

using namespace scenelab;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

Parameter make_param(const std::string& name, std::vector<float> w,
                     std::vector<float> g, bool no_decay = false) {
  Parameter p;
  p.name = name;
  const auto n = static_cast<int64_t>(w.size());
  p.tensor = Tensor::from_data({n}, std::move(w), true);
  p.tensor.mutable_grad() = std::move(g);
  p.no_decay = no_decay;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// LARS
// ---------------------------------------------------------------------------

TEST_CASE("lars local rate follows trust * |w| / (|g| + decay * |w|)") {
  LarsConfig cfg;
  cfg.base_lr = 1.f;
  cfg.momentum = 0.f;
  cfg.weight_decay = 0.f;
  cfg.trust_coefficient = 1.f;
  LarsOptimizer opt(cfg);
  // |w| = 2, |g| = 1 -> local rate 2, so w -= lr * 2 * g
  std::vector<Parameter> params{make_param("w", {2.f, 0.f}, {1.f, 0.f})};
  opt.step(params, 1.f);
  CHECK(params[0].tensor.values()[0] == doctest::Approx(0.f));
  CHECK(params[0].tensor.values()[1] == doctest::Approx(0.f));
}

TEST_CASE("lars leaves parameters alone at zero rate") {
  LarsConfig cfg;
  LarsOptimizer opt(cfg);
  std::vector<Parameter> params{make_param("w", {1.f, -2.f}, {0.5f, 0.5f})};
  opt.step(params, 0.f);
  CHECK(params[0].tensor.values() == std::vector<float>{1.f, -2.f});
}

TEST_CASE("lars falls back to rate 1 on zero-norm weights") {
  LarsConfig cfg;
  cfg.momentum = 0.f;
  cfg.weight_decay = 0.f;
  cfg.trust_coefficient = 0.5f;
  LarsOptimizer opt(cfg);
  std::vector<Parameter> params{make_param("w", {0.f, 0.f}, {1.f, 0.f})};
  opt.step(params, 0.1f);
  // local rate 1 -> plain step of lr * g
  CHECK(params[0].tensor.values()[0] == doctest::Approx(-0.1f));
}

TEST_CASE("lars aborts on non-finite gradients naming the parameter") {
  LarsConfig cfg;
  LarsOptimizer opt(cfg);
  std::vector<Parameter> params{
      make_param("stem.conv.w", {1.f},
                 {std::numeric_limits<float>::quiet_NaN()})};
  try {
    opt.step(params, 0.1f);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("stem.conv.w") != std::string::npos);
  }
}

TEST_CASE("lars excluded parameters take plain momentum sgd") {
  LarsConfig cfg;
  cfg.momentum = 0.f;
  cfg.weight_decay = 10.f;  // would dominate the scaled branch
  cfg.trust_coefficient = 1.f;
  LarsOptimizer opt(cfg);
  std::vector<Parameter> params{
      make_param("norm.beta", {1.f}, {0.5f}, true)};
  opt.step(params, 0.1f);
  // no decay, no trust scaling: w -= lr * g
  CHECK(params[0].tensor.values()[0] == doctest::Approx(1.f - 0.05f));
}

TEST_CASE("lars drives a quadratic to its minimum within 500 steps") {
  // minimize |w - target|^2 with the production update rule
  Rng rng(2024);
  std::vector<float> target(10), start(10);
  for (int i = 0; i < 10; ++i) {
    target[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    start[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  LarsConfig cfg;
  cfg.base_lr = 1.f;
  cfg.momentum = 0.5f;
  cfg.weight_decay = 0.f;
  cfg.trust_coefficient = 0.05f;
  LarsOptimizer opt(cfg);
  std::vector<Parameter> params{
      make_param("w", start, std::vector<float>(10, 0.f))};
  ScheduleConfig sched;
  sched.base_lr = 1.f;
  sched.min_lr = 0.f;
  sched.total_epochs = 500;
  sched.restarts = 1;
  double final_dist = 0.0;
  for (int step = 0; step < 500; ++step) {
    auto& w = params[0].tensor.mutable_values();
    auto& g = params[0].tensor.mutable_grad();
    for (int i = 0; i < 10; ++i) g[i] = 2.f * (w[i] - target[i]);
    opt.step(params, cosine_restart_lr(step, sched));
  }
  for (int i = 0; i < 10; ++i) {
    const double d = params[0].tensor.values()[i] - target[i];
    final_dist += d * d;
  }
  CHECK(std::sqrt(final_dist) < 1e-3);
}

// ---------------------------------------------------------------------------
// schedule + early stopping
// ---------------------------------------------------------------------------

TEST_CASE("cosine restart schedule hits its anchors") {
  ScheduleConfig cfg;
  cfg.base_lr = 0.4f;
  cfg.min_lr = 0.04f;
  cfg.total_epochs = 30;
  cfg.restarts = 3;
  CHECK(cosine_restart_lr(0, cfg) == doctest::Approx(0.4f));
  // segment midpoint: cos(pi/2) = 0
  CHECK(cosine_restart_lr(5, cfg) == doctest::Approx((0.4f + 0.04f) / 2));
  // exactly three maxima, at the segment starts
  int peaks = 0;
  for (int e = 0; e < 30; ++e) {
    const float lr = cosine_restart_lr(e, cfg);
    if (lr == doctest::Approx(0.4f)) {
      ++peaks;
      CHECK((e == 0 || e == 10 || e == 20));
    }
  }
  CHECK(peaks == 3);
  // monotone decay within a segment
  for (int e = 1; e < 10; ++e) {
    CHECK(cosine_restart_lr(e, cfg) < cosine_restart_lr(e - 1, cfg));
  }
  CHECK_THROWS_AS(cosine_restart_lr(30, cfg), ContractError);
  ScheduleConfig bad = cfg;
  bad.total_epochs = 31;
  CHECK_THROWS_AS(cosine_restart_lr(0, bad), ContractError);
}

TEST_CASE("early stopping watches for stalled validation loss") {
  EarlyStopConfig cfg;
  cfg.patience = 3;
  cfg.min_delta = 0.f;

  // strictly decreasing: never stops
  std::vector<float> dec;
  for (int i = 0; i < 20; ++i) {
    dec.push_back(10.f - i * 0.1f);
    CHECK_FALSE(early_stop(dec, cfg).stop);
  }

  // flat: stops after `patience` epochs, best stays at the first
  std::vector<float> flat{1.f, 1.f, 1.f, 1.f};
  auto d = early_stop(flat, cfg);
  CHECK(d.stop);
  CHECK(d.best_index == 0);
  CHECK_FALSE(early_stop({1.f, 1.f, 1.f}, cfg).stop);

  // noisy U-shape: stops patience epochs after the minimum
  std::vector<float> u{5.f, 4.f, 3.f, 2.5f, 2.6f, 2.55f, 2.7f};
  d = early_stop(u, cfg);
  CHECK(d.stop);
  CHECK(d.best_index == 3);
  CHECK_FALSE(early_stop({5.f, 4.f, 3.f, 2.5f, 2.6f, 2.55f}, cfg).stop);

  CHECK_THROWS_AS(early_stop({}, cfg), ContractError);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

namespace {

ModelConfig tiny_model(int size) {
  ModelConfig cfg;
  cfg.encoder.in_h = cfg.encoder.in_w = size;
  cfg.encoder.stage_widths = {8, 16};
  cfg.encoder.blocks_per_stage = {1, 1};
  cfg.encoder.embedding_dim = 8;
  cfg.encoder.norm_groups = 8;
  cfg.projection.hidden_dim = 16;
  cfg.projection.output_dim = 8;
  cfg.num_classes = 8;
  return cfg;
}

StageSpec tiny_stage(LossKind loss, int epochs, int size) {
  StageSpec s;
  s.tag = loss == LossKind::CrossEntropy ? "downstream" : "pretext-scene";
  s.loss = loss;
  s.epochs = epochs;
  s.batch_size = 16;
  s.opt.base_lr = 0.5f;
  s.opt.trust_coefficient = 0.02f;
  s.sched.base_lr = 0.5f;
  s.sched.min_lr = 0.f;
  s.sched.restarts = 1;
  s.augment = AugmentPolicy::simclr_default(size);
  return s;
}

struct ToyData {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

ToyData toy_images(int per_class, int size, uint64_t seed) {
  TmpDir tmp("scenelab_train_toy_" + std::to_string(seed));
  ToySceneSpec spec;
  spec.classes = 8;
  spec.per_class = per_class;
  spec.image_size = size;
  spec.seed = seed;
  auto manifest = generate_toy_scenes(spec, tmp.path.string());
  const auto classes = class_list(manifest);
  ToyData data;
  std::vector<size_t> rows;
  for (size_t i = 0; i < manifest.rows.size(); ++i) rows.push_back(i);
  auto loaded = load_images(manifest, rows, tmp.path.string());
  for (size_t i = 0; i < rows.size(); ++i) {
    data.images.push_back(loaded.images[i]);
    const auto it = std::find(classes.begin(), classes.end(),
                              manifest.rows[i].mapped_class);
    data.labels.push_back(static_cast<int>(it - classes.begin()));
  }
  return data;
}

}  // namespace

TEST_CASE("a zero-epoch stage passes the checkpoint through unchanged") {
  Rng rng(1);
  SceneModel model(tiny_model(16), rng);
  const auto before = model.parameters()[0].tensor.values();
  auto data = toy_images(3, 16, 5);
  auto stage = tiny_stage(LossKind::CrossEntropy, 0, 16);
  Rng srng(2);
  auto res = run_stage(model, stage, data.images, data.labels, {}, {},
                       {"pretext-scene"}, srng);
  CHECK(model.parameters()[0].tensor.values() == before);
  CHECK(res.checkpoint.lineage == std::vector<std::string>{"pretext-scene"});
  CHECK(res.metrics.empty());
}

TEST_CASE("pretext training reduces its own loss") {
  Rng rng(3);
  SceneModel model(tiny_model(16), rng);
  auto data = toy_images(6, 16, 7);
  auto stage = tiny_stage(LossKind::NtXent, 5, 16);
  Rng srng(4);
  auto res = run_stage(model, stage, data.images, data.labels, {}, {}, {},
                       srng);
  REQUIRE(res.metrics.size() == 5);
  CHECK(res.metrics.back().train_loss < res.metrics.front().train_loss);
  CHECK(res.checkpoint.lineage ==
        std::vector<std::string>{"pretext-scene"});
  CHECK_FALSE(res.aborted);
}

TEST_CASE("stage chaining records the full lineage in order") {
  Rng rng(5);
  SceneModel model(tiny_model(16), rng);
  auto data = toy_images(4, 16, 9);
  auto pre = tiny_stage(LossKind::BarlowTwins, 1, 16);
  pre.tag = "pretext-object";
  Rng r1(6);
  auto res1 =
      run_stage(model, pre, data.images, data.labels, {}, {}, {}, r1);
  auto pre2 = tiny_stage(LossKind::BarlowTwins, 1, 16);
  pre2.tag = "pretext-scene";
  Rng r2(7);
  auto res2 = run_stage(model, pre2, data.images, data.labels, {}, {},
                        res1.checkpoint.lineage, r2);
  auto down = tiny_stage(LossKind::CrossEntropy, 1, 16);
  Rng r3(8);
  auto res3 = run_stage(model, down, data.images, data.labels, {}, {},
                        res2.checkpoint.lineage, r3);
  CHECK(res3.checkpoint.lineage ==
        std::vector<std::string>{"pretext-object", "pretext-scene",
                                 "downstream"});
}

TEST_CASE("stages are deterministic under the seed") {
  auto data = toy_images(4, 16, 11);
  auto stage = tiny_stage(LossKind::NtXent, 2, 16);
  auto run_once = [&]() {
    Rng rng(13);
    SceneModel model(tiny_model(16), rng);
    Rng srng(14);
    auto res = run_stage(model, stage, data.images, data.labels, {}, {}, {},
                         srng);
    return res.checkpoint.params.front().second.values();
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("supcon stage requires labels") {
  Rng rng(15);
  SceneModel model(tiny_model(16), rng);
  auto data = toy_images(3, 16, 17);
  auto stage = tiny_stage(LossKind::SupCon, 1, 16);
  Rng srng(16);
  CHECK_THROWS_AS(
      run_stage(model, stage, data.images, {}, {}, {}, {}, srng),
      ContractError);
}

// ---------------------------------------------------------------------------
// grid config
// ---------------------------------------------------------------------------

namespace {

std::string micro_grid_config(const std::string& manifest) {
  return std::string("[grid]\n") +
         "name = micro\n"
         "seed = 77\n"
         "folds = 2\n"
         "repetitions = 1\n"
         "workers = 2\n"
         "[data]\n"
         "manifest = " + manifest + "\n"
         "image_size = 16\n"
         "[model]\n"
         "stage_widths = 8,16\n"
         "blocks_per_stage = 1,1\n"
         "embedding_dim = 8\n"
         "proj_hidden = 16\n"
         "proj_out = 8\n"
         "[optimizer]\n"
         "base_lr = 0.5\n"
         "trust = 0.02\n"
         "[schedule]\n"
         "restarts = 1\n"
         "[pretext]\n"
         "epochs = 1\n"
         "batch = 16\n"
         "[downstream]\n"
         "epochs = 2\n"
         "patience = 0\n"
         "[variant scratch]\n"
         "protocol = none\n"
         "[variant ssl]\n"
         "protocol = nt_xent\n"
         "scene_pretext = real\n";
}

}  // namespace

TEST_CASE("config files parse with line-accurate schema errors") {
  auto ok = Config::parse(
      "[grid]\nseed = 1\n# comment\n[variant a]\nprotocol = none\n");
  CHECK(ok.get_int("grid", "seed") == 1);
  CHECK(ok.get_str("variant a", "protocol") == "none");

  try {
    Config::parse("[grid]\nseed = 1\nseed = 2\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 3);
  }
  try {
    Config::parse("[grid]\nbroken line\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
  }
  try {
    auto cfg = Config::parse("[grid]\nseed = notanumber\n");
    cfg.get_int("grid", "seed");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
  }

  // canonical form is sorted and fingerprint-stable
  auto a = Config::parse("[b]\ny = 2\nx = 1\n[a]\nk = v\n");
  auto b = Config::parse("[a]\nk = v\n[b]\nx = 1\ny = 2\n");
  CHECK(a.canonical() == b.canonical());
  CHECK(a.fingerprint() == b.fingerprint());
}

TEST_CASE("grid config schema rejects unknown keys with their line") {
  TmpDir tmp("scenelab_gridcfg");
  ToySceneSpec spec;
  spec.classes = 8;
  spec.per_class = 6;
  spec.image_size = 16;
  spec.seed = 3;
  auto manifest = generate_toy_scenes(spec, tmp.path.string());
  const std::string mpath = (tmp.path / "toy.tsv").string();
  manifest.save(mpath);

  auto cfg = Config::parse(micro_grid_config(mpath));
  auto grid = load_grid_config(cfg, "");
  CHECK(grid.variants.size() == 2);
  CHECK(grid.folds == 2);

  try {
    load_grid_config(
        Config::parse(micro_grid_config(mpath) + "[grid2]\nbogus = 1\n"),
        "");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("grid2") != std::string::npos);
  }
  try {
    load_grid_config(
        Config::parse("[grid]\nwat = 1\n" + micro_grid_config(mpath)), "");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
  }
}

// ---------------------------------------------------------------------------
// grid execution
// ---------------------------------------------------------------------------

TEST_CASE("micro grid runs all cells, resumes, and repeats byte-identically") {
  TmpDir tmp("scenelab_grid");
  ToySceneSpec spec;
  spec.classes = 8;
  spec.per_class = 12;
  spec.image_size = 16;
  spec.seed = 21;
  auto manifest = generate_toy_scenes(spec, (tmp.path / "toy").string());
  manifest.save((tmp.path / "toy/manifest.tsv").string());

  auto cfg = Config::parse(
      micro_grid_config((tmp.path / "toy/manifest.tsv").string()));
  auto grid = load_grid_config(cfg, "");

  const std::string run1 = (tmp.path / "run1").string();
  auto result = run_grid(grid, run1, false, 2);
  CHECK(result.failures.empty());
  CHECK(result.records.size() == 2 * 2 * 1);  // variants x folds x reps
  for (const auto& r : result.records) {
    CHECK(r.n_eval > 0);
    CHECK(r.balanced_acc >= 0.0);
    CHECK(r.balanced_acc <= 1.0);
  }

  // resume: a second pass recomputes nothing and reproduces the table
  const std::string table1 = read_file(run1 + "/reports/records.tsv");
  auto again = run_grid(grid, run1, true, 2);
  CHECK(again.failures.empty());
  CHECK(read_file(run1 + "/reports/records.tsv") == table1);

  // a fresh directory with the same seed is byte-identical
  const std::string run2 = (tmp.path / "run2").string();
  run_grid(grid, run2, false, 1);
  CHECK(read_file(run2 + "/reports/records.tsv") == table1);

  // round trip of the records table
  auto records = read_records_table(run1 + "/reports/records.tsv");
  CHECK(records.size() == result.records.size());
  CHECK(records[0].classes.size() == 8);
  CHECK(records[0].confusion.size() == 64);

  // summary carries the mean +- std formatting
  const std::string summary = read_file(run1 + "/reports/summary.tsv");
  CHECK(summary.find("\\pm") != std::string::npos);
  CHECK(summary.find('$') != std::string::npos);

  // run dir is self-describing
  CHECK(fs::exists(run1 + "/MANIFEST"));
  CHECK(fs::exists(run1 + "/config/grid.cfg"));
}
