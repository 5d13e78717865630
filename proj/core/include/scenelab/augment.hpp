#pragma once

#include <array>
#include <string>
#include <vector>

#include "scenelab/rng.hpp"
#include "scenelab/tensor.hpp"

namespace scenelab {

enum class TransformKind {
  RandomResizedCrop,
  HorizontalFlip,
  ColorJitter,
  Grayscale,
  GaussianBlur,
  Cutout,
  Rotation,
};

struct TransformDesc {
  TransformKind kind = TransformKind::HorizontalFlip;
  float p = 0.f;
  // random resized crop: area scale and aspect ratio ranges
  float scale_min = 0.2f, scale_max = 1.f;
  float ratio_min = 0.75f, ratio_max = 4.f / 3.f;
  // color jitter strengths
  float brightness = 0.4f, contrast = 0.4f, saturation = 0.4f, hue = 0.1f;
  // gaussian blur
  int kernel = 5;
  float sigma_min = 0.1f, sigma_max = 2.f;
  // cutout square side, pixels
  int cutout_size = 8;
  // rotation, degrees either side
  float degrees = 15.f;

  bool operator==(const TransformDesc&) const = default;
};

// Ordered stochastic view pipeline. Images are float tensors [C,H,W] in
// [0,1]; every view ends with a resize to (out_h, out_w), a clamp to [0,1],
// and channel normalization, so outputs always stay inside the normalized
// range.
struct AugmentPolicy {
  int out_h = 64, out_w = 64;
  std::vector<TransformDesc> transforms;
  std::array<float, 3> norm_mean = {0.5f, 0.5f, 0.5f};
  std::array<float, 3> norm_std = {0.5f, 0.5f, 0.5f};

  bool operator==(const AugmentPolicy&) const = default;

  // crop+flip+jitter+grayscale+blur, plus cutout and rotation at p=0
  static AugmentPolicy simclr_default(int size);
  // no stochastic transforms, unit scale crop: the identity map when the
  // input is already (size x size)
  static AugmentPolicy identity(int size);
  // resize + normalize only, for evaluation paths
  static AugmentPolicy eval_only(int size);

  // exact textual round trip (floats printed to full float32 precision)
  std::string serialize() const;
  static AugmentPolicy parse(const std::string& text);
};

// n_views independent draws; each view consumes its own stream split from
// `rng` by view index.
std::vector<Tensor> make_views(const Tensor& image, const AugmentPolicy& policy,
                               Rng& rng, int n_views);

// single stochastic view (downstream-training augmentation)
Tensor augment_view(const Tensor& image, const AugmentPolicy& policy,
                    Rng& rng);

// deterministic resize + normalize (the evaluation transform)
Tensor apply_eval_transform(const Tensor& image, const AugmentPolicy& policy);

// counter of degenerate-crop fallbacks to the full frame
uint64_t augment_fallback_count();
void reset_augment_fallbacks();

}  // namespace scenelab
