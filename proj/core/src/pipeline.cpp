#include "scenelab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "scenelab/dataset.hpp"

namespace scenelab {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

LossKind loss_kind_from(const std::string& name) {
  if (name == "nt_xent") return LossKind::NtXent;
  if (name == "supcon") return LossKind::SupCon;
  if (name == "barlow_twins") return LossKind::BarlowTwins;
  if (name == "swav") return LossKind::Swav;
  if (name == "cross_entropy") return LossKind::CrossEntropy;
  throw ContractError("unknown loss kind '" + name + "'");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::NtXent: return "nt_xent";
    case LossKind::SupCon: return "supcon";
    case LossKind::BarlowTwins: return "barlow_twins";
    case LossKind::Swav: return "swav";
    case LossKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

namespace {

bool needs_labels(LossKind k) {
  return k == LossKind::SupCon || k == LossKind::CrossEntropy;
}

Tensor stack_images(const std::vector<Tensor>& imgs) {
  std::vector<Tensor> reshaped;
  reshaped.reserve(imgs.size());
  for (const auto& t : imgs) {
    const auto& s = t.shape();
    reshaped.push_back(reshape(t, {1, s[0], s[1], s[2]}));
  }
  return concat(reshaped, 0);
}

// forward for one batch of item indices; pretext losses consume two views
Tensor batch_loss(SceneModel& model, const StageSpec& stage,
                  std::span<const Tensor> images, std::span<const int> labels,
                  const std::vector<size_t>& items, SwavState* swav,
                  const Rng& view_rng) {
  const int b = static_cast<int>(items.size());
  if (stage.loss == LossKind::CrossEntropy) {
    std::vector<Tensor> batch;
    std::vector<int> targets;
    for (size_t i : items) {
      Rng irng = view_rng.split(static_cast<uint64_t>(i));
      batch.push_back(augment_view(images[i], stage.augment, irng));
      targets.push_back(labels[i]);
    }
    Tensor logits = model.classify(model.encode(stack_images(batch), true));
    return cross_entropy(logits, targets);
  }

  std::vector<Tensor> view_a, view_b;
  for (size_t i : items) {
    Rng irng = view_rng.split(static_cast<uint64_t>(i));
    auto views = make_views(images[i], stage.augment, irng, 2);
    view_a.push_back(std::move(views[0]));
    view_b.push_back(std::move(views[1]));
  }
  view_a.insert(view_a.end(), view_b.begin(), view_b.end());
  Tensor emb = model.encode(stack_images(view_a), true);
  Tensor proj = model.project(emb, true);

  switch (stage.loss) {
    case LossKind::NtXent: {
      ContrastiveBatch cb;
      cb.embeddings = proj;
      cb.views = 2;
      cb.batch = b;
      cb.temperature = stage.temperature;
      return nt_xent(cb);
    }
    case LossKind::SupCon: {
      ContrastiveBatch cb;
      cb.embeddings = proj;
      cb.views = 2;
      cb.batch = b;
      cb.temperature = stage.temperature;
      std::vector<int> batch_labels;
      for (size_t i : items) batch_labels.push_back(labels[i]);
      cb.labels = std::move(batch_labels);
      return supcon(cb);
    }
    case LossKind::BarlowTwins: {
      Tensor za = slice(proj, 0, 0, b);
      Tensor zb = slice(proj, 0, b, 2 * b);
      return barlow_twins(za, zb, stage.barlow);
    }
    case LossKind::Swav: {
      Tensor za = slice(proj, 0, 0, b);
      Tensor zb = slice(proj, 0, b, 2 * b);
      return swav_loss(za, zb, *swav);
    }
    default:
      throw ContractError("batch_loss: unhandled loss kind");
  }
}

float validation_loss(SceneModel& model, const StageSpec& stage,
                      std::span<const Tensor> val_images,
                      std::span<const int> val_labels, SwavState* swav,
                      const Rng& rng) {
  NoGradGuard ng;
  // view draws keyed by item only, so the number is comparable across epochs
  Rng view_rng = rng.split("val-views");
  double total = 0.0;
  int64_t weight = 0;
  std::vector<size_t> items;
  const int min_batch = stage.loss == LossKind::CrossEntropy ? 1 : 2;
  for (size_t start = 0; start < val_images.size();
       start += static_cast<size_t>(stage.batch_size)) {
    const size_t stop = std::min(val_images.size(),
                                 start + static_cast<size_t>(stage.batch_size));
    if (static_cast<int>(stop - start) < min_batch) break;
    items.clear();
    for (size_t i = start; i < stop; ++i) items.push_back(i);
    Tensor loss = batch_loss(model, stage, val_images, val_labels, items,
                             swav, view_rng);
    total += static_cast<double>(loss.item()) * items.size();
    weight += static_cast<int64_t>(items.size());
  }
  return weight > 0 ? static_cast<float>(total / weight)
                    : std::numeric_limits<float>::quiet_NaN();
}

std::vector<std::vector<float>> copy_params(const SceneModel& model) {
  std::vector<std::vector<float>> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor.values());
  for (const auto& p : model.buffers()) out.push_back(p.tensor.values());
  return out;
}

void restore_params(SceneModel& model,
                    const std::vector<std::vector<float>>& saved) {
  size_t i = 0;
  for (auto& p : model.parameters()) p.tensor.mutable_values() = saved[i++];
  for (auto& p : model.buffers()) p.tensor.mutable_values() = saved[i++];
}

}  // namespace

StageResult run_stage(SceneModel& model, const StageSpec& stage,
                      std::span<const Tensor> train_images,
                      std::span<const int> train_labels,
                      std::span<const Tensor> val_images,
                      std::span<const int> val_labels,
                      std::vector<std::string> lineage, const Rng& rng) {
  if (needs_labels(stage.loss)) {
    if (train_labels.size() != train_images.size()) {
      throw ContractError("run_stage: loss " + to_string(stage.loss) +
                          " requires labels for every image");
    }
    if (!val_images.empty() && val_labels.size() != val_images.size()) {
      throw ContractError("run_stage: validation labels missing");
    }
  }
  StageResult result;
  if (stage.epochs == 0) {
    result.checkpoint =
        snapshot(model, stage.tag, std::move(lineage), 0, rng.seed(),
                 rng.state());
    return result;
  }
  if (train_images.empty()) {
    throw ContractError("run_stage: no training images");
  }
  if (stage.early && val_images.empty()) {
    throw ContractError("run_stage: early stopping needs a validation set");
  }

  ScheduleConfig sched = stage.sched;
  sched.total_epochs = stage.epochs;
  sched.validate();

  LarsOptimizer optimizer(stage.opt);
  std::vector<Parameter> params = model.parameters();
  SwavState swav;
  SwavState* swav_ptr = nullptr;
  if (stage.loss == LossKind::Swav) {
    Rng srng = rng.split("swav-init");
    swav = SwavState::init(stage.swav_prototypes,
                           model.config().projection.output_dim, srng);
    swav.sinkhorn_epsilon = stage.sinkhorn_eps;
    swav.sinkhorn_iters = stage.sinkhorn_iters;
    swav.temperature = stage.temperature;
    params.push_back({"swav.prototypes", swav.prototypes, false});
    swav_ptr = &swav;
  }

  const int min_batch = stage.loss == LossKind::CrossEntropy ? 1 : 2;
  std::vector<float> val_history;
  std::vector<std::vector<float>> best_params = copy_params(model);
  std::vector<std::vector<float>> last_good = best_params;
  int best_epoch = -1;
  int nan_streak = 0;
  int completed_epochs = 0;

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const float lr = cosine_restart_lr(epoch, sched);
    Rng epoch_rng = rng.split("epoch-" + std::to_string(epoch));
    Rng view_rng = epoch_rng.split("views");
    auto perm = epoch_rng.permutation(train_images.size());

    double loss_sum = 0.0;
    int64_t loss_weight = 0;
    bool aborted = false;
    for (size_t start = 0; start < perm.size();
         start += static_cast<size_t>(stage.batch_size)) {
      const size_t stop =
          std::min(perm.size(), start + static_cast<size_t>(stage.batch_size));
      if (static_cast<int>(stop - start) < min_batch) break;
      std::vector<size_t> items(perm.begin() + start, perm.begin() + stop);
      Tensor loss = batch_loss(model, stage, train_images, train_labels,
                               items, swav_ptr, view_rng);
      const float lv = loss.item();
      if (!std::isfinite(lv)) {
        if (++nan_streak >= 3) {
          aborted = true;
          break;
        }
        continue;  // skip the update, keep going
      }
      nan_streak = 0;
      loss_sum += static_cast<double>(lv) * items.size();
      loss_weight += static_cast<int64_t>(items.size());
      loss.backward();
      optimizer.step(params, lr);
      if (swav_ptr) swav_ptr->renormalize();
    }
    if (aborted) {
      restore_params(model, last_good);
      result.aborted = true;
      break;
    }

    EpochMetric m;
    m.stage = stage.tag;
    m.epoch = epoch;
    m.train_loss = loss_weight
                       ? static_cast<float>(loss_sum / loss_weight)
                       : std::numeric_limits<float>::quiet_NaN();
    m.lr = lr;
    m.val_loss = std::numeric_limits<float>::quiet_NaN();
    if (!val_images.empty()) {
      m.val_loss = validation_loss(model, stage, val_images, val_labels,
                                   swav_ptr, rng);
      val_history.push_back(m.val_loss);
    }
    m.wall_ms =
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    result.metrics.push_back(m);
    last_good = copy_params(model);
    completed_epochs = epoch + 1;

    if (stage.early && !val_history.empty()) {
      const auto decision = early_stop(val_history, *stage.early);
      if (decision.best_index == static_cast<int>(val_history.size()) - 1) {
        best_params = copy_params(model);
        best_epoch = epoch;
      } else if (best_epoch < 0) {
        best_epoch = decision.best_index;
      }
      if (decision.stop) break;
    }
  }

  if (stage.early && best_epoch >= 0) {
    restore_params(model, best_params);
    result.best_epoch = best_epoch;
  }
  lineage.push_back(stage.tag);
  result.checkpoint = snapshot(model, stage.tag, std::move(lineage),
                               completed_epochs, rng.seed(), rng.state());
  return result;
}

// ---------------------------------------------------------------------------
// grid configuration
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string> kKnownSections = {
    "grid", "data", "model", "optimizer", "schedule",
    "pretext", "downstream", "augment"};

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"grid", {"name", "seed", "folds", "repetitions", "workers"}},
    {"data",
     {"manifest", "object_manifest", "scene_manifests", "image_size"}},
    {"model",
     {"stage_widths", "blocks_per_stage", "embedding_dim", "norm_groups",
      "use_batch_norm", "proj_hidden", "proj_out"}},
    {"optimizer", {"base_lr", "momentum", "weight_decay", "trust"}},
    {"schedule", {"restarts", "min_lr"}},
    {"pretext",
     {"epochs", "batch", "temperature", "sinkhorn_eps", "sinkhorn_iters",
      "swav_prototypes", "barlow_lambda"}},
    {"downstream", {"epochs", "batch", "patience", "min_delta"}},
    {"augment", {"policy"}},
    {"variant", {"protocol", "object_pretext", "scene_pretext"}},
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::string resolve_path(const std::string& p, const std::string& base) {
  if (p.empty() || p[0] == '/' || base.empty()) return p;
  return (fs::path(base) / p).string();
}

}  // namespace

GridConfig load_grid_config(const Config& cfg, const std::string& base_dir) {
  // schema first: unknown sections/keys carry their line numbers
  for (const auto& section : cfg.sections()) {
    std::string canonical = section;
    if (section.rfind("variant ", 0) == 0) canonical = "variant";
    if (canonical != "variant" && !kKnownSections.count(canonical)) {
      throw ConfigError("unknown section [" + section + "]",
                        cfg.line_of(section, cfg.keys(section).front()));
    }
    const auto& known = kKnownKeys.at(canonical);
    for (const auto& key : cfg.keys(section)) {
      if (!known.count(key)) {
        throw ConfigError("unknown key '" + key + "' in section [" + section +
                              "]",
                          cfg.line_of(section, key));
      }
    }
  }

  GridConfig g;
  g.name = cfg.get_str("grid", "name", "grid");
  g.seed = static_cast<uint64_t>(cfg.get_int("grid", "seed", 0));
  g.folds = static_cast<int>(cfg.get_int("grid", "folds", 5));
  g.repetitions = static_cast<int>(cfg.get_int("grid", "repetitions", 3));
  g.workers = static_cast<int>(cfg.get_int("grid", "workers", 1));
  if (g.folds < 2) throw ConfigError("grid.folds must be >= 2", 0);
  if (g.repetitions < 1) throw ConfigError("grid.repetitions must be >= 1", 0);

  g.downstream_manifest =
      resolve_path(cfg.get_str("data", "manifest"), base_dir);
  g.object_manifest =
      resolve_path(cfg.get_str("data", "object_manifest", ""), base_dir);
  const std::string scenes = cfg.get_str("data", "scene_manifests", "");
  if (!scenes.empty()) {
    std::istringstream is(scenes);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      g.scene_manifests.push_back(resolve_path(tok, base_dir));
    }
  }
  g.image_size = static_cast<int>(cfg.get_int("data", "image_size", 64));

  g.model.encoder.in_h = g.model.encoder.in_w = g.image_size;
  g.model.encoder.stage_widths =
      parse_int_list(cfg.get_str("model", "stage_widths", "16,32,64"));
  g.model.encoder.blocks_per_stage =
      parse_int_list(cfg.get_str("model", "blocks_per_stage", "2,2,2"));
  g.model.encoder.embedding_dim =
      static_cast<int>(cfg.get_int("model", "embedding_dim", 64));
  g.model.encoder.norm_groups =
      static_cast<int>(cfg.get_int("model", "norm_groups", 8));
  g.model.encoder.use_batch_norm =
      cfg.get_bool("model", "use_batch_norm", false);
  g.model.projection.hidden_dim =
      static_cast<int>(cfg.get_int("model", "proj_hidden", 128));
  g.model.projection.output_dim =
      static_cast<int>(cfg.get_int("model", "proj_out", 64));

  g.opt.base_lr = static_cast<float>(cfg.get_double("optimizer", "base_lr", 0.4));
  g.opt.momentum =
      static_cast<float>(cfg.get_double("optimizer", "momentum", 0.9));
  g.opt.weight_decay =
      static_cast<float>(cfg.get_double("optimizer", "weight_decay", 1e-4));
  g.opt.trust_coefficient =
      static_cast<float>(cfg.get_double("optimizer", "trust", 0.02));
  g.restarts = static_cast<int>(cfg.get_int("schedule", "restarts", 3));
  g.min_lr = static_cast<float>(cfg.get_double("schedule", "min_lr", 0.0));

  g.pretext_epochs = static_cast<int>(cfg.get_int("pretext", "epochs", 20));
  g.downstream_epochs =
      static_cast<int>(cfg.get_int("downstream", "epochs", 30));
  g.batch = static_cast<int>(cfg.get_int("pretext", "batch", 64));
  const int patience =
      static_cast<int>(cfg.get_int("downstream", "patience", 5));
  if (patience > 0) {
    EarlyStopConfig e;
    e.patience = patience;
    e.min_delta =
        static_cast<float>(cfg.get_double("downstream", "min_delta", 0.0));
    g.early = e;
  }
  g.temperature =
      static_cast<float>(cfg.get_double("pretext", "temperature", 0.1));
  g.sinkhorn_eps =
      static_cast<float>(cfg.get_double("pretext", "sinkhorn_eps", 0.05));
  g.sinkhorn_iters =
      static_cast<int>(cfg.get_int("pretext", "sinkhorn_iters", 3));
  g.swav_prototypes =
      static_cast<int>(cfg.get_int("pretext", "swav_prototypes", 32));
  g.barlow_lambda =
      static_cast<float>(cfg.get_double("pretext", "barlow_lambda", 5e-3));

  if (cfg.has("augment", "policy")) {
    g.pretext_policy = AugmentPolicy::parse(cfg.get_str("augment", "policy"));
  } else {
    g.pretext_policy = AugmentPolicy::simclr_default(g.image_size);
  }
  // downstream fine-tuning keeps the light crop+flip pair only
  g.downstream_policy = AugmentPolicy::simclr_default(g.image_size);
  g.downstream_policy.transforms.resize(2);
  g.downstream_policy.transforms[0].scale_min = 0.6f;

  for (const auto& section : cfg.sections()) {
    if (section.rfind("variant ", 0) != 0) continue;
    GridVariant v;
    v.name = section.substr(8);
    v.protocol = cfg.get_str(section, "protocol", "none");
    if (v.protocol != "none") loss_kind_from(v.protocol);  // validates
    v.object_pretext = cfg.get_bool(section, "object_pretext", false);
    v.scene_pretext = cfg.get_str(section, "scene_pretext", "none");
    if (v.scene_pretext != "none" && v.scene_pretext != "real" &&
        v.scene_pretext != "all") {
      throw ConfigError("variant " + v.name + ": scene_pretext must be " +
                            "none|real|all",
                        cfg.line_of(section, "scene_pretext"));
    }
    if (v.object_pretext && g.object_manifest.empty()) {
      throw ConfigError(
          "variant " + v.name +
              " wants object_pretext but data.object_manifest is unset",
          cfg.line_of(section, "object_pretext"));
    }
    g.variants.push_back(std::move(v));
  }
  if (g.variants.empty()) {
    throw ConfigError("config defines no [variant <name>] sections", 0);
  }
  std::set<std::string> names;
  for (const auto& v : g.variants) {
    if (!names.insert(v.name).second) {
      throw ConfigError("duplicate variant name '" + v.name + "'", 0);
    }
  }

  g.fingerprint = cfg.fingerprint();
  g.config_text = cfg.canonical();
  return g;
}

// ---------------------------------------------------------------------------
// grid execution
// ---------------------------------------------------------------------------

namespace {

struct ImagePool {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

ImagePool load_pool(const SampleManifest& m, const std::vector<size_t>& rows,
                    const std::string& base_dir,
                    const std::vector<std::string>& classes, int size) {
  auto loaded = load_images(m, rows, base_dir, size);
  ImagePool pool;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (!loaded.ok[i]) continue;
    pool.images.push_back(loaded.images[i]);
    const auto& cls = m.rows[rows[i]].mapped_class;
    const auto it = std::find(classes.begin(), classes.end(), cls);
    pool.labels.push_back(
        it == classes.end() ? -1 : static_cast<int>(it - classes.begin()));
  }
  return pool;
}

StageSpec make_stage(const GridConfig& g, const std::string& tag,
                     LossKind loss, int epochs, bool with_early) {
  StageSpec s;
  s.tag = tag;
  s.loss = loss;
  s.epochs = epochs;
  s.batch_size = g.batch;
  s.opt = g.opt;
  s.sched.base_lr = g.opt.base_lr;
  s.sched.min_lr = g.min_lr;
  s.sched.restarts = g.restarts;
  s.sched.total_epochs = epochs;
  s.augment =
      loss == LossKind::CrossEntropy ? g.downstream_policy : g.pretext_policy;
  s.temperature = g.temperature;
  s.barlow.lambda = g.barlow_lambda;
  s.swav_prototypes = g.swav_prototypes;
  s.sinkhorn_eps = g.sinkhorn_eps;
  s.sinkhorn_iters = g.sinkhorn_iters;
  if (with_early) s.early = g.early;
  return s;
}

std::string cell_name(const std::string& variant, int rep, int fold) {
  return variant + "_r" + std::to_string(rep) + "_f" + std::to_string(fold);
}

void write_cell_record(const RunRecord& r, const std::string& path) {
  std::ostringstream os;
  os << "# fingerprint=" << r.fingerprint << '\n';
  os << r.variant << '\t' << r.rep << '\t' << r.fold << '\t' << r.seed << '\t'
     << r.n_eval << '\t';
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", r.balanced_acc);
  os << buf << '\t';
  std::snprintf(buf, sizeof buf, "%.6f", r.plain_acc);
  os << buf << '\t';
  for (size_t i = 0; i < r.classes.size(); ++i) {
    os << (i ? "|" : "") << r.classes[i];
  }
  os << '\t';
  for (size_t i = 0; i < r.confusion.size(); ++i) {
    os << (i ? "," : "") << r.confusion[i];
  }
  os << '\n';
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << os.str();
    if (!f) throw std::runtime_error("cannot write record: " + path);
  }
  fs::rename(tmp, path);
}

RunRecord parse_record_line(const std::string& line,
                            const std::string& fingerprint) {
  std::istringstream is(line);
  RunRecord r;
  std::string tok;
  std::getline(is, r.variant, '\t');
  std::getline(is, tok, '\t');
  r.rep = std::stoi(tok);
  std::getline(is, tok, '\t');
  r.fold = std::stoi(tok);
  std::getline(is, tok, '\t');
  r.seed = std::stoull(tok);
  std::getline(is, tok, '\t');
  r.n_eval = std::stoll(tok);
  std::getline(is, tok, '\t');
  r.balanced_acc = std::stod(tok);
  std::getline(is, tok, '\t');
  r.plain_acc = std::stod(tok);
  std::getline(is, tok, '\t');
  {
    std::istringstream cs(tok);
    std::string c;
    while (std::getline(cs, c, '|')) r.classes.push_back(c);
  }
  std::getline(is, tok, '\t');
  {
    std::istringstream cs(tok);
    std::string c;
    while (std::getline(cs, c, ',')) r.confusion.push_back(std::stoll(c));
  }
  r.fingerprint = fingerprint;
  return r;
}

std::optional<RunRecord> read_cell_record(const std::string& path,
                                          const std::string& fingerprint) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return std::nullopt;
  std::string line;
  std::string fp;
  while (std::getline(is, line)) {
    if (line.rfind("# fingerprint=", 0) == 0) {
      fp = line.substr(14);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (fp != fingerprint) return std::nullopt;  // stale cell, recompute
    return parse_record_line(line, fp);
  }
  return std::nullopt;
}

void write_metrics_stream(const std::vector<EpochMetric>& metrics,
                          const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << "# columns=stage\tepoch\ttrain_loss\tval_loss\tlr\twall_ms\n";
  char buf[64];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(m.train_loss));
    os << m.stage << '\t' << m.epoch << '\t' << buf << '\t';
    if (std::isfinite(m.val_loss)) {
      std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(m.val_loss));
      os << buf;
    } else {
      os << '-';
    }
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(m.lr));
    os << '\t' << buf;
    std::snprintf(buf, sizeof buf, "%.1f", m.wall_ms);
    os << '\t' << buf << '\n';
  }
}

}  // namespace

GridResult run_grid(const GridConfig& cfg, const std::string& run_dir,
                    bool resume, int workers) {
  const std::string fingerprint = fingerprint_hex(cfg.fingerprint);
  for (const char* sub :
       {"config", "checkpoints", "metrics", "reports", "reports/cells",
        "manifests"}) {
    fs::create_directories(fs::path(run_dir) / sub);
  }
  const std::string cfg_path = (fs::path(run_dir) / "config/grid.cfg").string();
  if (fs::exists(cfg_path)) {
    const auto existing = Config::parse_file(cfg_path);
    if (fingerprint_hex(existing.fingerprint()) != fingerprint) {
      throw std::runtime_error(
          "run directory was produced by a different config: " + run_dir);
    }
  } else {
    std::ofstream os(cfg_path, std::ios::binary);
    os << cfg.config_text;
  }

  // data: downstream manifest + folds + image pools
  const auto manifest = SampleManifest::load(cfg.downstream_manifest);
  const std::string base_dir = manifest_base_dir(cfg.downstream_manifest);
  const auto classes = class_list(manifest);
  if (classes.empty()) {
    throw ContractError("run_grid: downstream manifest has no classes");
  }
  {
    SampleManifest copy = manifest;
    copy.save((fs::path(run_dir) / "manifests/downstream.tsv").string());
  }
  Rng grid_rng(cfg.seed);
  Rng fold_rng = grid_rng.split("folds");
  const FoldPlan plan = make_folds(manifest, cfg.folds, cfg.repetitions,
                                   fold_rng);

  const ImagePool train_pool = load_pool(manifest, plan.row_indices, base_dir,
                                         classes, cfg.image_size);
  if (train_pool.images.size() != plan.row_indices.size()) {
    throw std::runtime_error("run_grid: some training images failed to load");
  }
  const auto val_rows = split_indices(manifest, "val");
  const ImagePool val_pool =
      load_pool(manifest, val_rows, base_dir, classes, cfg.image_size);

  // pretext pools are shared across variants that use the same mode
  std::map<std::string, ImagePool> pretext_pools;
  auto pretext_pool = [&](const std::string& key) -> const ImagePool& {
    return pretext_pools.at(key);
  };
  {
    std::set<std::string> needed;
    for (const auto& v : cfg.variants) {
      if (v.protocol == "none") continue;
      if (v.object_pretext) needed.insert("object");
      if (v.scene_pretext != "none") needed.insert("scene-" + v.scene_pretext);
    }
    for (const auto& key : needed) {
      if (key == "object") {
        const auto om = SampleManifest::load(cfg.object_manifest);
        pretext_pools["object"] =
            load_pool(om, split_indices(om, "train"),
                      manifest_base_dir(cfg.object_manifest), classes,
                      cfg.image_size);
      } else {
        std::vector<SampleManifest> scene_manifests;
        if (cfg.scene_manifests.empty()) {
          scene_manifests.push_back(manifest);
        } else {
          for (const auto& p : cfg.scene_manifests) {
            scene_manifests.push_back(SampleManifest::load(p));
          }
        }
        const std::string mode = key.substr(6);
        auto composed = compose_pretext(scene_manifests, mode);
        // URIs are resolved against each source manifest's directory; with
        // several sources they must already be absolute or share base_dir
        const std::string scene_base =
            cfg.scene_manifests.empty()
                ? base_dir
                : manifest_base_dir(cfg.scene_manifests.front());
        std::vector<size_t> all_rows(composed.manifest.rows.size());
        for (size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;
        pretext_pools[key] = load_pool(composed.manifest, all_rows, scene_base,
                                       classes, cfg.image_size);
      }
    }
  }

  // jobs: one per (variant, repetition); folds run inside the job so the
  // pretext checkpoint is built once per pair
  struct Job {
    const GridVariant* variant;
    int rep;
  };
  std::vector<Job> jobs;
  for (const auto& v : cfg.variants) {
    for (int rep = 0; rep < cfg.repetitions; ++rep) {
      jobs.push_back({&v, rep});
    }
  }

  std::mutex out_mutex;
  GridResult result;
  std::atomic<size_t> next_job{0};

  auto run_job = [&](const Job& job) {
    const auto& v = *job.variant;
    Rng cell_base = Rng(cfg.seed).split(v.name).split(
        "rep-" + std::to_string(job.rep));

    // resume: skip the whole job if all fold cells are present
    std::vector<std::optional<RunRecord>> cached(cfg.folds);
    bool all_cached = true;
    for (int fold = 0; fold < cfg.folds; ++fold) {
      const std::string cell = cell_name(v.name, job.rep, fold);
      const std::string path =
          (fs::path(run_dir) / "reports/cells" / (cell + ".tsv")).string();
      if (resume) cached[fold] = read_cell_record(path, fingerprint);
      all_cached = all_cached && cached[fold].has_value();
    }
    if (all_cached) {
      std::lock_guard<std::mutex> lock(out_mutex);
      for (auto& c : cached) result.records.push_back(std::move(*c));
      return;
    }

    try {
      // pretext once per (variant, rep)
      Rng model_rng = cell_base.split("init");
      SceneModel model(cfg.model, model_rng);
      std::vector<std::string> lineage;
      std::vector<EpochMetric> pretext_metrics;
      if (v.protocol != "none") {
        const LossKind kind = loss_kind_from(v.protocol);
        auto run_pretext = [&](const std::string& tag, const ImagePool& pool) {
          StageSpec stage = make_stage(cfg, tag, kind, cfg.pretext_epochs,
                                       false);
          Rng stage_rng = cell_base.split(tag);
          auto res =
              run_stage(model, stage, pool.images, pool.labels, {}, {},
                        lineage, stage_rng);
          lineage = res.checkpoint.lineage;
          pretext_metrics.insert(pretext_metrics.end(), res.metrics.begin(),
                                 res.metrics.end());
          return res;
        };
        if (v.object_pretext) {
          run_pretext("pretext-object", pretext_pool("object"));
        }
        if (v.scene_pretext != "none") {
          run_pretext("pretext-scene",
                      pretext_pool("scene-" + v.scene_pretext));
        }
        const std::string ck =
            (fs::path(run_dir) / "checkpoints" /
             (v.name + "_r" + std::to_string(job.rep) + "_pretext.ckpt"))
                .string();
        save_checkpoint(snapshot(model, lineage.empty() ? "none" : lineage.back(),
                                 lineage, 0, cell_base.seed(),
                                 cell_base.state()),
                        ck);
      }
      const Checkpoint pretext_state = snapshot(
          model, lineage.empty() ? "init" : lineage.back(), lineage, 0,
          cell_base.seed(), cell_base.state());

      for (int fold = 0; fold < cfg.folds; ++fold) {
        if (cached[fold]) {
          std::lock_guard<std::mutex> lock(out_mutex);
          result.records.push_back(*cached[fold]);
          continue;
        }
        const std::string cell = cell_name(v.name, job.rep, fold);
        try {
          // reset to the pretext checkpoint; lineage must match the plan
          apply_checkpoint(model, pretext_state);
          if (pretext_state.lineage != lineage) {
            throw ContractError("lineage mismatch in cell " + cell);
          }
          // fold f held out for evaluation, the rest trains
          std::vector<Tensor> fold_train;
          std::vector<int> fold_train_labels;
          std::vector<Tensor> fold_eval;
          std::vector<int> fold_eval_labels;
          const auto& assign = plan.assignment[job.rep];
          for (size_t i = 0; i < assign.size(); ++i) {
            if (assign[i] == fold) {
              fold_eval.push_back(train_pool.images[i]);
              fold_eval_labels.push_back(train_pool.labels[i]);
            } else {
              fold_train.push_back(train_pool.images[i]);
              fold_train_labels.push_back(train_pool.labels[i]);
            }
          }
          StageSpec down = make_stage(cfg, "downstream",
                                      LossKind::CrossEntropy,
                                      cfg.downstream_epochs,
                                      !val_pool.images.empty());
          Rng stage_rng = cell_base.split("downstream-f" +
                                          std::to_string(fold));
          auto res = run_stage(model, down, fold_train, fold_train_labels,
                               val_pool.images, val_pool.labels,
                               pretext_state.lineage, stage_rng);
          auto metrics = pretext_metrics;
          metrics.insert(metrics.end(), res.metrics.begin(),
                         res.metrics.end());
          write_metrics_stream(
              metrics,
              (fs::path(run_dir) / "metrics" / (cell + ".tsv")).string());
          save_checkpoint(res.checkpoint,
                          (fs::path(run_dir) / "checkpoints" /
                           (cell + ".ckpt"))
                              .string());

          auto eval_res = evaluate_images(
              model, fold_eval, fold_eval_labels, classes,
              AugmentPolicy::eval_only(cfg.image_size), cfg.batch);
          RunRecord record;
          record.variant = v.name;
          record.rep = job.rep;
          record.fold = fold;
          record.seed = cell_base.seed();
          record.fingerprint = fingerprint;
          record.n_eval = eval_res.evaluated;
          record.balanced_acc = eval_res.balanced_acc;
          record.plain_acc = eval_res.plain_acc;
          record.classes = classes;
          record.confusion = eval_res.cm.counts;
          write_cell_record(
              record,
              (fs::path(run_dir) / "reports/cells" / (cell + ".tsv")).string());
          std::lock_guard<std::mutex> lock(out_mutex);
          result.records.push_back(std::move(record));
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(out_mutex);
          result.failures.push_back(cell + ": " + e.what());
        }
      }
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(out_mutex);
      result.failures.push_back(v.name + "_r" + std::to_string(job.rep) +
                                ": " + e.what());
    }
  };

  workers = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (workers == 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < workers; ++t) {
      threads.emplace_back([&]() {
        while (true) {
          const size_t i = next_job.fetch_add(1);
          if (i >= jobs.size()) return;
          run_job(jobs[i]);
        }
      });
    }
    for (auto& t : threads) t.join();
  }

  std::sort(result.records.begin(), result.records.end(),
            [](const RunRecord& a, const RunRecord& b) {
              return std::tie(a.variant, a.rep, a.fold) <
                     std::tie(b.variant, b.rep, b.fold);
            });
  write_records_table(result.records, cfg.fingerprint,
                      (fs::path(run_dir) / "reports/records.tsv").string());
  {
    std::ofstream os((fs::path(run_dir) / "reports/summary.tsv").string(),
                     std::ios::binary | std::ios::trunc);
    os << variant_summary_table(result.records);
  }
  {
    // self-describing index of every artifact in the run directory
    std::ofstream os((fs::path(run_dir) / "MANIFEST").string(),
                     std::ios::binary | std::ios::trunc);
    os << "# run=" << cfg.name << " fingerprint=" << fingerprint << '\n';
    std::vector<std::string> paths;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
      if (!entry.is_regular_file()) continue;
      const auto rel = fs::relative(entry.path(), run_dir).string();
      if (rel == "MANIFEST") continue;
      paths.push_back(rel);
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) os << p << '\t' << fingerprint << '\n';
  }
  return result;
}

void write_records_table(const std::vector<RunRecord>& records,
                         uint64_t fingerprint, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write records: " + path);
  os << "# fingerprint=" << fingerprint_hex(fingerprint) << '\n';
  os << "# columns=variant\trep\tfold\tseed\tn_eval\tbalanced_acc\tplain_acc"
        "\tclasses\tconfusion\n";
  char buf[32];
  for (const auto& r : records) {
    os << r.variant << '\t' << r.rep << '\t' << r.fold << '\t' << r.seed
       << '\t' << r.n_eval << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", r.balanced_acc);
    os << buf << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", r.plain_acc);
    os << buf << '\t';
    for (size_t i = 0; i < r.classes.size(); ++i) {
      os << (i ? "|" : "") << r.classes[i];
    }
    os << '\t';
    for (size_t i = 0; i < r.confusion.size(); ++i) {
      os << (i ? "," : "") << r.confusion[i];
    }
    os << '\n';
  }
}

std::vector<RunRecord> read_records_table(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read records: " + path);
  std::vector<RunRecord> records;
  std::string line, fp;
  while (std::getline(is, line)) {
    if (line.rfind("# fingerprint=", 0) == 0) {
      fp = line.substr(14);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    records.push_back(parse_record_line(line, fp));
  }
  return records;
}

std::string variant_summary_table(const std::vector<RunRecord>& records) {
  std::map<std::string, std::vector<double>> by_variant;
  for (const auto& r : records) by_variant[r.variant].push_back(r.balanced_acc);
  std::ostringstream os;
  os << "# columns=variant\tcells\tbalanced_acc_mean\tbalanced_acc_std\t"
        "formatted\n";
  char buf[64];
  for (const auto& [variant, accs] : by_variant) {
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    const double sd =
        accs.size() > 1 ? std::sqrt(var / (accs.size() - 1)) : 0.0;
    os << variant << '\t' << accs.size() << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", mean);
    os << buf << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", sd);
    os << buf << '\t';
    std::snprintf(buf, sizeof buf, "$%.2f \\pm %.2f$", mean, sd);
    os << buf << '\n';
  }
  return os.str();
}

}  // namespace scenelab
