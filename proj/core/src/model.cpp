#include "scenelab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace scenelab {

using nlohmann::json;

namespace {

constexpr float kNormEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;
constexpr char kCkptMagic[4] = {'S', 'L', 'C', 'P'};
constexpr uint32_t kCkptVersion = 1;

void check_finite(const Tensor& t, const std::string& layer) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite activation in layer " + layer);
    }
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (in_h < 8 || in_w < 8 || in_ch < 1) {
    throw ContractError("encoder: input size too small");
  }
  if (stage_widths.empty() ||
      stage_widths.size() != blocks_per_stage.size()) {
    throw ContractError(
        "encoder: stage_widths and blocks_per_stage must align, got " +
        std::to_string(stage_widths.size()) + " vs " +
        std::to_string(blocks_per_stage.size()));
  }
  if (embedding_dim < 8) {
    throw ContractError("encoder: embedding_dim must be >= 8, got " +
                        std::to_string(embedding_dim));
  }
  for (int w : stage_widths) {
    if (w < 1) throw ContractError("encoder: non-positive stage width");
    if (!use_batch_norm && w % norm_groups != 0) {
      throw ContractError("encoder: stage width " + std::to_string(w) +
                          " not divisible by norm_groups " +
                          std::to_string(norm_groups));
    }
  }
  for (int b : blocks_per_stage) {
    if (b < 1) throw ContractError("encoder: non-positive block count");
  }
}

json EncoderConfig::to_json() const {
  return json{{"in_h", in_h},
              {"in_w", in_w},
              {"in_ch", in_ch},
              {"stage_widths", stage_widths},
              {"blocks_per_stage", blocks_per_stage},
              {"embedding_dim", embedding_dim},
              {"norm_groups", norm_groups},
              {"use_batch_norm", use_batch_norm}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.in_h = j.at("in_h");
  c.in_w = j.at("in_w");
  c.in_ch = j.at("in_ch");
  c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
  c.embedding_dim = j.at("embedding_dim");
  c.norm_groups = j.at("norm_groups");
  c.use_batch_norm = j.at("use_batch_norm");
  return c;
}

void ProjectionConfig::validate() const {
  if (hidden_dim < 1 || output_dim < 1) {
    throw ContractError("projection: dims must be positive");
  }
  if (output_dim > hidden_dim) {
    throw ContractError("projection: output_dim " +
                        std::to_string(output_dim) + " exceeds hidden_dim " +
                        std::to_string(hidden_dim));
  }
}

json ProjectionConfig::to_json() const {
  return json{{"hidden_dim", hidden_dim},
              {"output_dim", output_dim},
              {"use_batch_norm", use_batch_norm}};
}

ProjectionConfig ProjectionConfig::from_json(const json& j) {
  ProjectionConfig c;
  c.hidden_dim = j.at("hidden_dim");
  c.output_dim = j.at("output_dim");
  c.use_batch_norm = j.at("use_batch_norm");
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  projection.validate();
  if (num_classes < 2) {
    throw ContractError("model: num_classes must be >= 2");
  }
}

json ModelConfig::to_json() const {
  return json{{"encoder", encoder.to_json()},
              {"projection", projection.to_json()},
              {"num_classes", num_classes}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.projection = ProjectionConfig::from_json(j.at("projection"));
  c.num_classes = j.at("num_classes");
  return c;
}

uint64_t ModelConfig::fingerprint() const {
  return fnv1a64(to_json().dump());
}

int64_t encoder_parameter_count(const EncoderConfig& cfg) {
  cfg.validate();
  int64_t count = 0;
  const int64_t w0 = cfg.stage_widths[0];
  count += 9 * cfg.in_ch * w0 + 2 * w0;  // stem
  int64_t prev = w0;
  for (size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const int64_t w = cfg.stage_widths[s];
    for (int b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const int64_t cin = b == 0 ? prev : w;
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      count += 9 * cin * w + 9 * w * w + 4 * w;
      if (stride != 1 || cin != w) count += cin * w + 2 * w;  // downsample
    }
    prev = w;
  }
  count += prev * cfg.embedding_dim + cfg.embedding_dim;  // head
  return count;
}

// --------------------------------------------------------------------------
// SceneModel
// --------------------------------------------------------------------------

Tensor SceneModel::conv_init(const std::string& name, int out_ch, int in_ch,
                             int k, Rng& rng) {
  const float bound = std::sqrt(6.f / (in_ch * k * k));  // He-uniform
  Tensor t = Tensor::uniform({out_ch, in_ch, k, k}, rng, -bound, bound, true);
  params_.push_back({name, t, false});
  return t;
}

Tensor SceneModel::linear_init(const std::string& name, int out_dim,
                               int in_dim, Rng& rng) {
  const float bound = 1.f / std::sqrt(static_cast<float>(in_dim));
  Tensor t = Tensor::uniform({out_dim, in_dim}, rng, -bound, bound, true);
  params_.push_back({name, t, false});
  return t;
}

Tensor SceneModel::bias_init(const std::string& name, int dim) {
  Tensor t = Tensor::zeros({dim}, true);
  params_.push_back({name, t, true});
  return t;
}

SceneModel::NormRef SceneModel::make_norm(const std::string& name,
                                          int channels, float gamma_init) {
  NormRef n;
  n.gamma = Tensor::full({channels}, gamma_init, true);
  n.beta = Tensor::zeros({channels}, true);
  params_.push_back({name + ".gamma", n.gamma, true});
  params_.push_back({name + ".beta", n.beta, true});
  if (cfg_.encoder.use_batch_norm) {
    n.run_mean = Tensor::zeros({channels});
    n.run_var = Tensor::ones({channels});
    buffers_.push_back({name + ".run_mean", n.run_mean, true});
    buffers_.push_back({name + ".run_var", n.run_var, true});
  }
  return n;
}

Tensor SceneModel::apply_norm(const Tensor& x, const NormRef& n,
                              bool training) {
  if (cfg_.encoder.use_batch_norm) {
    Tensor rm = n.run_mean;
    Tensor rv = n.run_var;
    return batch_norm(x, n.gamma, n.beta, rm, rv, kBnMomentum, kNormEps,
                      training);
  }
  return group_norm(x, n.gamma, n.beta, cfg_.encoder.norm_groups, kNormEps);
}

SceneModel::SceneModel(ModelConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = init_rng.split("model-init");
  const auto& e = cfg_.encoder;

  stem_conv_ = conv_init("stem.conv.w", e.stage_widths[0], e.in_ch, 3, rng);
  stem_norm_ = make_norm("stem.norm", e.stage_widths[0], 1.f);

  int prev = e.stage_widths[0];
  stages_.resize(e.stage_widths.size());
  for (size_t s = 0; s < e.stage_widths.size(); ++s) {
    const int w = e.stage_widths[s];
    for (int b = 0; b < e.blocks_per_stage[s]; ++b) {
      const int cin = b == 0 ? prev : w;
      Block blk;
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string base =
          "s" + std::to_string(s) + ".b" + std::to_string(b);
      blk.conv1 = conv_init(base + ".conv1.w", w, cin, 3, rng);
      blk.norm1 = make_norm(base + ".norm1", w, 1.f);
      blk.conv2 = conv_init(base + ".conv2.w", w, w, 3, rng);
      // zero-init the residual branch scale so fresh blocks start as
      // near-identities
      blk.norm2 = make_norm(base + ".norm2", w, 0.f);
      blk.has_down = blk.stride != 1 || cin != w;
      if (blk.has_down) {
        blk.down = conv_init(base + ".down.conv.w", w, cin, 1, rng);
        blk.down_norm = make_norm(base + ".down.norm", w, 1.f);
      }
      stages_[s].push_back(std::move(blk));
    }
    prev = w;
  }

  embed_w_ = linear_init("embed.w", e.embedding_dim, prev, rng);
  embed_b_ = bias_init("embed.b", e.embedding_dim);

  const auto& p = cfg_.projection;
  proj_w1_ = linear_init("proj.fc1.w", p.hidden_dim, e.embedding_dim, rng);
  proj_b1_ = bias_init("proj.fc1.b", p.hidden_dim);
  if (p.use_batch_norm) {
    proj_norm_ = make_norm("proj.norm", p.hidden_dim, 1.f);
  }
  proj_w2_ = linear_init("proj.fc2.w", p.output_dim, p.hidden_dim, rng);
  proj_b2_ = bias_init("proj.fc2.b", p.output_dim);

  cls_w_ = linear_init("cls.w", cfg_.num_classes, e.embedding_dim, rng);
  cls_b_ = bias_init("cls.b", cfg_.num_classes);
}

Tensor SceneModel::encode(const Tensor& images, bool training) {
  const auto& e = cfg_.encoder;
  if (images.dim() != 4 || images.shape()[1] != e.in_ch ||
      images.shape()[2] != e.in_h || images.shape()[3] != e.in_w) {
    throw DimensionError("encode: expected [Bx" + std::to_string(e.in_ch) +
                         "x" + std::to_string(e.in_h) + "x" +
                         std::to_string(e.in_w) + "], got " +
                         shape_str(images.shape()));
  }
  // finiteness is checked before relu, which would otherwise flush NaN to 0
  Tensor stem = apply_norm(conv2d(images, stem_conv_, 2, 1), stem_norm_,
                           training);
  check_finite(stem, "stem");
  Tensor x = relu(stem);
  for (size_t s = 0; s < stages_.size(); ++s) {
    for (size_t b = 0; b < stages_[s].size(); ++b) {
      Block& blk = stages_[s][b];
      Tensor branch = relu(
          apply_norm(conv2d(x, blk.conv1, blk.stride, 1), blk.norm1, training));
      branch = apply_norm(conv2d(branch, blk.conv2, 1, 1), blk.norm2, training);
      Tensor skip =
          blk.has_down
              ? apply_norm(conv2d(x, blk.down, blk.stride, 0), blk.down_norm,
                           training)
              : x;
      Tensor pre = add(skip, branch);
      check_finite(pre, "s" + std::to_string(s) + ".b" + std::to_string(b));
      x = relu(pre);
    }
  }
  Tensor emb = linear(global_avg_pool(x), embed_w_, embed_b_);
  check_finite(emb, "embed");
  return emb;
}

Tensor SceneModel::project(const Tensor& embeddings, bool training) {
  if (embeddings.dim() != 2 ||
      embeddings.shape()[1] != cfg_.encoder.embedding_dim) {
    throw DimensionError("project: expected [Bx" +
                         std::to_string(cfg_.encoder.embedding_dim) +
                         "], got " + shape_str(embeddings.shape()));
  }
  Tensor h = linear(embeddings, proj_w1_, proj_b1_);
  if (cfg_.projection.use_batch_norm) {
    const int64_t b = h.shape()[0];
    const int64_t c = h.shape()[1];
    Tensor h4 = reshape(h, {b, c, 1, 1});
    h = reshape(apply_norm(h4, proj_norm_, training), {b, c});
  }
  return linear(relu(h), proj_w2_, proj_b2_);
}

Tensor SceneModel::classify(const Tensor& embeddings) {
  if (embeddings.dim() != 2 ||
      embeddings.shape()[1] != cfg_.encoder.embedding_dim) {
    throw DimensionError("classify: expected [Bx" +
                         std::to_string(cfg_.encoder.embedding_dim) +
                         "], got " + shape_str(embeddings.shape()));
  }
  return linear(embeddings, cls_w_, cls_b_);
}

// --------------------------------------------------------------------------
// checkpoints
// --------------------------------------------------------------------------

Checkpoint snapshot(const SceneModel& model, const std::string& stage,
                    std::vector<std::string> lineage, int epoch, uint64_t seed,
                    const std::array<uint64_t, 6>& rng_state) {
  Checkpoint c;
  c.fingerprint = model.config().fingerprint();
  c.stage = stage;
  c.lineage = std::move(lineage);
  c.epoch = epoch;
  c.seed = seed;
  c.rng_state = rng_state;
  c.config_json = model.config().to_json();
  for (const auto& p : model.parameters()) {
    c.params.emplace_back(p.name, p.tensor.detach());
  }
  for (const auto& p : model.buffers()) {
    c.params.emplace_back(p.name, p.tensor.detach());
  }
  return c;
}

namespace {

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32_block(std::ostream& os, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (float f : v) write_u32(os, std::bit_cast<uint32_t>(f));
  }
}

void read_f32_block(std::istream& is, std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (auto& f : v) f = std::bit_cast<float>(read_u32(is));
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json header;
  header["format"] = kCkptVersion;
  header["fingerprint"] = ckpt.fingerprint;
  header["stage"] = ckpt.stage;
  header["lineage"] = ckpt.lineage;
  header["epoch"] = ckpt.epoch;
  header["seed"] = std::to_string(ckpt.seed);
  std::vector<std::string> rs;
  for (uint64_t s : ckpt.rng_state) rs.push_back(std::to_string(s));
  header["rng_state"] = rs;
  header["config"] = ckpt.config_json;
  json plist = json::array();
  for (const auto& [name, t] : ckpt.params) {
    plist.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["params"] = plist;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kCkptMagic, 4);
  write_u32(os, kCkptVersion);
  write_u32(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.params) {
    write_f32_block(os, t.values());
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kCkptVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version) + " in " + path);
  }
  const uint32_t hlen = read_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(hs);

  Checkpoint c;
  c.fingerprint = header.at("fingerprint");
  c.stage = header.at("stage");
  c.lineage = header.at("lineage").get<std::vector<std::string>>();
  c.epoch = header.at("epoch");
  c.seed = std::stoull(header.at("seed").get<std::string>());
  const auto rs = header.at("rng_state").get<std::vector<std::string>>();
  for (size_t i = 0; i < c.rng_state.size() && i < rs.size(); ++i) {
    c.rng_state[i] = std::stoull(rs[i]);
  }
  c.config_json = header.at("config");
  for (const auto& p : header.at("params")) {
    Shape shape = p.at("shape").get<Shape>();
    std::vector<float> vals(static_cast<size_t>(shape_numel(shape)));
    read_f32_block(is, vals);
    if (!is) {
      throw std::runtime_error("truncated checkpoint payload: " + path);
    }
    c.params.emplace_back(p.at("name").get<std::string>(),
                          Tensor::from_data(std::move(shape), std::move(vals)));
  }
  return c;
}

void apply_checkpoint(SceneModel& model, const Checkpoint& ckpt) {
  const uint64_t expect = model.config().fingerprint();
  if (ckpt.fingerprint != expect) {
    // diff the configs field by field for the error message
    std::ostringstream diff;
    const json mine = model.config().to_json().flatten();
    const json theirs = ckpt.config_json.flatten();
    for (auto it = mine.begin(); it != mine.end(); ++it) {
      const auto other = theirs.find(it.key());
      if (other == theirs.end() || *other != it.value()) {
        diff << ' ' << it.key() << '=' << it.value().dump() << "(model) vs "
             << (other == theirs.end() ? json("missing") : *other).dump()
             << "(checkpoint)";
      }
    }
    throw ContractError("checkpoint fingerprint mismatch:" + diff.str());
  }
  auto assign = [&](std::vector<Parameter>& dest) {
    for (auto& p : dest) {
      bool found = false;
      for (const auto& [name, t] : ckpt.params) {
        if (name == p.name) {
          if (t.shape() != p.tensor.shape()) {
            throw ContractError("checkpoint param " + name +
                                " shape mismatch: " + shape_str(t.shape()) +
                                " vs " + shape_str(p.tensor.shape()));
          }
          p.tensor.mutable_values() = t.values();
          found = true;
          break;
        }
      }
      if (!found) {
        throw ContractError("checkpoint missing param " + p.name);
      }
    }
  };
  assign(model.parameters());
  assign(model.buffers());
}

}  // namespace scenelab
