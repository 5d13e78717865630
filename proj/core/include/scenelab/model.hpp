#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenelab/nn.hpp"
#include "scenelab/rng.hpp"
#include "scenelab/tensor.hpp"

namespace scenelab {

// Residual convolutional encoder, desk-scale stand-in for a full-depth
// backbone. Layout:
//   stem  : 3x3 conv stride 2 -> norm -> relu, channels = stage_widths[0]
//   stage : blocks_per_stage[s] residual blocks at stage_widths[s]; the
//           first block of every stage after the first downsamples (stride 2)
//   block : conv3x3 -> norm -> relu -> conv3x3 -> norm(zero-init scale),
//           plus a 1x1 conv + norm on the skip when shape changes
//   head  : global average pool -> linear to embedding_dim
//
// Trainable parameter count (convs carry no bias, every norm has
// gamma+beta):
//   stem              9*in_ch*W0 + 2*W0
//   block (Cin -> W)  9*Cin*W + 9*W*W + 4*W   [+ Cin*W + 2*W with downsample]
//   embedding head    Wlast*embedding_dim + embedding_dim
struct EncoderConfig {
  int in_h = 64, in_w = 64, in_ch = 3;
  std::vector<int> stage_widths = {16, 32, 64};
  std::vector<int> blocks_per_stage = {2, 2, 2};
  int embedding_dim = 64;
  int norm_groups = 8;
  bool use_batch_norm = false;  // group norm by default; flag for fidelity

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

struct ProjectionConfig {
  int hidden_dim = 128;
  int output_dim = 64;
  bool use_batch_norm = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ProjectionConfig from_json(const nlohmann::json& j);
};

struct ModelConfig {
  EncoderConfig encoder;
  ProjectionConfig projection;
  int num_classes = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  // stable hash of the canonical config serialization
  uint64_t fingerprint() const;
};

// closed-form trainable parameter count of the encoder (stem+stages+head)
int64_t encoder_parameter_count(const EncoderConfig& cfg);

struct Parameter {
  std::string name;
  Tensor tensor;
  bool no_decay = false;  // norm scales/shifts and biases
};

class SceneModel {
 public:
  SceneModel(ModelConfig cfg, Rng& init_rng);

  // images [B, C, H, W] -> embeddings [B, embedding_dim]. Throws
  // NumericError naming the first layer whose output is not finite.
  Tensor encode(const Tensor& images, bool training = true);
  // pretext-only head, embeddings -> [B, projection.output_dim]
  Tensor project(const Tensor& embeddings, bool training = true);
  // unnormalized logits [B, num_classes]
  Tensor classify(const Tensor& embeddings);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  // non-trainable state (batch-norm running stats); empty with group norm
  std::vector<Parameter>& buffers() { return buffers_; }
  const std::vector<Parameter>& buffers() const { return buffers_; }

  const ModelConfig& config() const { return cfg_; }

 private:
  struct NormRef {
    Tensor gamma, beta;
    Tensor run_mean, run_var;  // defined only under batch norm
  };
  struct Block {
    Tensor conv1, conv2, down;
    NormRef norm1, norm2, down_norm;
    int stride = 1;
    bool has_down = false;
  };

  Tensor apply_norm(const Tensor& x, const NormRef& n, bool training);
  NormRef make_norm(const std::string& name, int channels, float gamma_init);
  Tensor conv_init(const std::string& name, int out_ch, int in_ch, int k,
                   Rng& rng);
  Tensor linear_init(const std::string& name, int out_dim, int in_dim,
                     Rng& rng);
  Tensor bias_init(const std::string& name, int dim);

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<Parameter> buffers_;
  Tensor stem_conv_;
  NormRef stem_norm_;
  std::vector<std::vector<Block>> stages_;
  Tensor embed_w_, embed_b_;
  Tensor proj_w1_, proj_b1_, proj_w2_, proj_b2_;
  NormRef proj_norm_;
  Tensor cls_w_, cls_b_;
};

// Serialized model state: all parameter tensors keyed by stable names, the
// producing config, the training-stage lineage, and the run RNG state.
struct Checkpoint {
  uint64_t fingerprint = 0;
  std::string stage;                  // tag of the last completed stage
  std::vector<std::string> lineage;   // stage tags in execution order
  int epoch = 0;
  uint64_t seed = 0;
  std::array<uint64_t, 6> rng_state{};
  nlohmann::json config_json;
  std::vector<std::pair<std::string, Tensor>> params;
};

Checkpoint snapshot(const SceneModel& model, const std::string& stage,
                    std::vector<std::string> lineage, int epoch, uint64_t seed,
                    const std::array<uint64_t, 6>& rng_state);

// Binary container: magic+version, JSON header (fingerprint, lineage, epoch,
// seed, rng state, parameter names+shapes, full config), then raw
// little-endian float32 blocks in header order. Round trips bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into the model. Refuses on fingerprint mismatch
// with a field-by-field diff of the configs.
void apply_checkpoint(SceneModel& model, const Checkpoint& ckpt);

}  // namespace scenelab
