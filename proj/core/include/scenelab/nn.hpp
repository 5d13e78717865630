#pragma once

#include "scenelab/tensor.hpp"

namespace scenelab {

// 2-D convolution, NCHW activations, OIHW weights, no bias term (the norm
// affine that follows every conv carries the shift).
// out extent: (H + 2*pad - kh) / stride + 1, floor division.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

// Group normalization over [B,C,H,W]; per (sample, group) statistics.
// gamma/beta are per-channel. channels % groups must be 0.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, float eps = 1e-5f);

// Batch normalization over [B,C,H,W]. In training mode normalizes with
// biased batch statistics and updates running_mean/running_var in place
// (unbiased variance, torch convention); in eval mode uses the running
// buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, float momentum,
                  float eps, bool training);

// [B,C,H,W] -> [B,C], mean over the spatial extent.
Tensor global_avg_pool(const Tensor& x);

// y = x * W^T + b with W stored [out,in]; b optional (undefined Tensor skips).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace scenelab
