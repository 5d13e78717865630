#pragma once

#include <string>
#include <vector>

#include "scenelab/tensor.hpp"

namespace scenelab {

// Decodes a PNG or JPEG (sniffed by magic bytes) to a [3,H,W] float tensor
// in [0,1]. Grayscale and palette images are expanded to RGB, alpha is
// dropped. Throws std::runtime_error on missing or corrupt files.
Tensor load_image(const std::string& path);

// load_image + bilinear resize to (out_h, out_w)
Tensor load_image_resized(const std::string& path, int out_h, int out_w);

// Writes [C,H,W] (C = 1 or 3) in [0,1] as an 8-bit PNG.
void save_png(const std::string& path, const Tensor& image);

// Bilinear resize with half-pixel centers: src = (dst+0.5)*in/out - 0.5,
// clamped to the frame. Identity when extents already match.
std::vector<float> resize_chw(const std::vector<float>& src, int c, int h,
                              int w, int out_h, int out_w);

}  // namespace scenelab
