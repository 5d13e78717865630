#include "scenelab/nn.hpp"

#include <Eigen/Core>

#include <cmath>

namespace scenelab {

namespace {

using RowD =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  int64_t batch, in_ch, in_h, in_w;
  int64_t out_ch, kh, kw;
  int stride, pad;
  int64_t out_h, out_w;
  int64_t patch() const { return in_ch * kh * kw; }
  int64_t cols() const { return batch * out_h * out_w; }
};

// col[(c*kh+ki)*kw+kj][(b*out_h+oh)*out_w+ow] = x[b,c,ih,iw], zero outside.
void im2col(const std::vector<float>& x, const ConvGeom& g, RowD& col) {
  col.setZero(g.patch(), g.cols());
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t c = 0; c < g.in_ch; ++c) {
      const float* plane = x.data() + (b * g.in_ch + c) * g.in_h * g.in_w;
      for (int64_t ki = 0; ki < g.kh; ++ki) {
        for (int64_t kj = 0; kj < g.kw; ++kj) {
          const int64_t row = (c * g.kh + ki) * g.kw + kj;
          double* dst = col.row(row).data() + b * g.out_h * g.out_w;
          for (int64_t oh = 0; oh < g.out_h; ++oh) {
            const int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int64_t ow = 0; ow < g.out_w; ++ow) {
              const int64_t iw = ow * g.stride - g.pad + kj;
              if (iw < 0 || iw >= g.in_w) continue;
              dst[oh * g.out_w + ow] = plane[ih * g.in_w + iw];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const RowD& col, const ConvGeom& g, std::vector<float>& dx) {
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t c = 0; c < g.in_ch; ++c) {
      float* plane = dx.data() + (b * g.in_ch + c) * g.in_h * g.in_w;
      for (int64_t ki = 0; ki < g.kh; ++ki) {
        for (int64_t kj = 0; kj < g.kw; ++kj) {
          const int64_t row = (c * g.kh + ki) * g.kw + kj;
          const double* src = col.row(row).data() + b * g.out_h * g.out_w;
          for (int64_t oh = 0; oh < g.out_h; ++oh) {
            const int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int64_t ow = 0; ow < g.out_w; ++ow) {
              const int64_t iw = ow * g.stride - g.pad + kj;
              if (iw < 0 || iw >= g.in_w) continue;
              plane[ih * g.in_w + iw] +=
                  static_cast<float>(src[oh * g.out_w + ow]);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  auto xn = x.node();
  auto wn = w.node();
  if (!xn || !wn) throw ContractError("conv2d: undefined operand");
  if (xn->shape.size() != 4 || wn->shape.size() != 4) {
    throw DimensionError("conv2d: expects NCHW x and OIHW w, got " +
                         shape_str(xn->shape) + " and " + shape_str(wn->shape));
  }
  ConvGeom g;
  g.batch = xn->shape[0];
  g.in_ch = xn->shape[1];
  g.in_h = xn->shape[2];
  g.in_w = xn->shape[3];
  g.out_ch = wn->shape[0];
  g.kh = wn->shape[2];
  g.kw = wn->shape[3];
  g.stride = stride;
  g.pad = pad;
  if (wn->shape[1] != g.in_ch) {
    throw DimensionError("conv2d: channel mismatch, x " + shape_str(xn->shape) +
                         " vs w " + shape_str(wn->shape));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  g.out_h = (g.in_h + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.kw) / stride + 1;
  if (g.out_h < 1 || g.out_w < 1) {
    throw DimensionError("conv2d: kernel " + shape_str(wn->shape) +
                         " larger than padded input " + shape_str(xn->shape));
  }

  RowD col;
  im2col(xn->values, g, col);
  RowD wd = Eigen::Map<const RowF>(wn->values.data(), g.out_ch, g.patch())
                .cast<double>();
  RowD y(g.out_ch, g.cols());
  y.noalias() = wd * col;

  std::vector<float> out(
      static_cast<size_t>(g.batch * g.out_ch * g.out_h * g.out_w));
  const int64_t hw = g.out_h * g.out_w;
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t k = 0; k < g.out_ch; ++k) {
      const double* src = y.row(k).data() + b * hw;
      float* dst = out.data() + (b * g.out_ch + k) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(src[i]);
    }
  }

  auto backprop = [g](TensorNode& self) {
    TensorNode* px = self.parents[0].get();
    TensorNode* pw = self.parents[1].get();
    const int64_t hw = g.out_h * g.out_w;
    RowD dy(g.out_ch, g.cols());
    for (int64_t b = 0; b < g.batch; ++b) {
      for (int64_t k = 0; k < g.out_ch; ++k) {
        const float* src = self.grad.data() + (b * g.out_ch + k) * hw;
        double* dst = dy.row(k).data() + b * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i];
      }
    }
    // the im2col buffer is recomputed rather than kept from the forward
    // pass; it is the largest allocation in the graph
    RowD col;
    im2col(px->values, g, col);
    if (pw->requires_grad) {
      pw->ensure_grad();
      RowD dw(g.out_ch, g.patch());
      dw.noalias() = dy * col.transpose();
      Eigen::Map<RowF> dwm(pw->grad.data(), g.out_ch, g.patch());
      dwm += dw.cast<float>();
    }
    if (px->requires_grad) {
      px->ensure_grad();
      RowD wd = Eigen::Map<const RowF>(pw->values.data(), g.out_ch, g.patch())
                    .cast<double>();
      RowD dcol(g.patch(), g.cols());
      dcol.noalias() = wd.transpose() * dy;
      col2im_add(dcol, g, px->grad);
    }
  };

  auto out_node = std::make_shared<TensorNode>();
  out_node->shape = {g.batch, g.out_ch, g.out_h, g.out_w};
  out_node->values = std::move(out);
  out_node->requires_grad =
      GradMode::enabled() && (xn->requires_grad || wn->requires_grad);
  if (out_node->requires_grad) {
    out_node->parents = {xn, wn};
    out_node->backprop = std::move(backprop);
  }
  return Tensor(out_node);
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, float eps) {
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  if (!xn || !gn || !bn) throw ContractError("group_norm: undefined operand");
  if (xn->shape.size() != 4) {
    throw DimensionError("group_norm: expects NCHW, got " +
                         shape_str(xn->shape));
  }
  const int64_t B = xn->shape[0], C = xn->shape[1], H = xn->shape[2],
                W = xn->shape[3];
  if (groups < 1 || C % groups != 0) {
    throw DimensionError("group_norm: channels " + std::to_string(C) +
                         " not divisible by groups " + std::to_string(groups));
  }
  if (gn->numel() != C || bn->numel() != C) {
    throw DimensionError("group_norm: affine params must have " +
                         std::to_string(C) + " entries");
  }
  const int64_t cpg = C / groups;
  const int64_t m = cpg * H * W;  // elements per (sample, group)
  auto stats = std::make_shared<std::vector<double>>(B * groups * 2);
  std::vector<float> out(xn->values.size());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t g = 0; g < groups; ++g) {
      const float* src = xn->values.data() + (b * C + g * cpg) * H * W;
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += src[i];
      mu /= m;
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double d = src[i] - mu;
        var += d * d;
      }
      var /= m;
      const double inv_sd = 1.0 / std::sqrt(var + eps);
      (*stats)[(b * groups + g) * 2] = mu;
      (*stats)[(b * groups + g) * 2 + 1] = inv_sd;
      float* dst = out.data() + (b * C + g * cpg) * H * W;
      for (int64_t c = 0; c < cpg; ++c) {
        const float ga = gn->values[g * cpg + c];
        const float be = bn->values[g * cpg + c];
        const float* sp = src + c * H * W;
        float* dp = dst + c * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          dp[i] = static_cast<float>((sp[i] - mu) * inv_sd) * ga + be;
        }
      }
    }
  }
  auto backprop = [B, C, H, W, groups, cpg, m, stats](TensorNode& self) {
    TensorNode* px = self.parents[0].get();
    TensorNode* pg = self.parents[1].get();
    TensorNode* pb = self.parents[2].get();
    const bool need_x = px->requires_grad;
    if (need_x) px->ensure_grad();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t g = 0; g < groups; ++g) {
        const double mu = (*stats)[(b * groups + g) * 2];
        const double inv_sd = (*stats)[(b * groups + g) * 2 + 1];
        const int64_t base = (b * C + g * cpg) * H * W;
        const float* xv = px->values.data() + base;
        const float* gr = self.grad.data() + base;
        // accumulate affine grads and the two group means
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int64_t c = 0; c < cpg; ++c) {
          const double ga = pg->values[g * cpg + c];
          double dgamma = 0.0, dbeta = 0.0;
          for (int64_t i = 0; i < H * W; ++i) {
            const int64_t j = c * H * W + i;
            const double xh = (xv[j] - mu) * inv_sd;
            const double dy = gr[j];
            dgamma += dy * xh;
            dbeta += dy;
            const double dxh = dy * ga;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          if (pg->requires_grad) {
            pg->grad[g * cpg + c] += static_cast<float>(dgamma);
          }
          if (pb->requires_grad) {
            pb->grad[g * cpg + c] += static_cast<float>(dbeta);
          }
        }
        if (!need_x) continue;
        const double mean_dxh = sum_dxh / m;
        const double mean_dxh_xh = sum_dxh_xh / m;
        float* dx = px->grad.data() + base;
        for (int64_t c = 0; c < cpg; ++c) {
          const double ga = pg->values[g * cpg + c];
          for (int64_t i = 0; i < H * W; ++i) {
            const int64_t j = c * H * W + i;
            const double xh = (xv[j] - mu) * inv_sd;
            const double dxh = static_cast<double>(gr[j]) * ga;
            dx[j] += static_cast<float>(inv_sd *
                                        (dxh - mean_dxh - xh * mean_dxh_xh));
          }
        }
      }
    }
  };
  auto out_node = std::make_shared<TensorNode>();
  out_node->shape = xn->shape;
  out_node->values = std::move(out);
  out_node->requires_grad =
      GradMode::enabled() &&
      (xn->requires_grad || gn->requires_grad || bn->requires_grad);
  if (out_node->requires_grad) {
    out_node->parents = {xn, gn, bn};
    out_node->backprop = std::move(backprop);
  }
  return Tensor(out_node);
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, float momentum,
                  float eps, bool training) {
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  if (!xn || !gn || !bn) throw ContractError("batch_norm: undefined operand");
  if (xn->shape.size() != 4) {
    throw DimensionError("batch_norm: expects NCHW, got " +
                         shape_str(xn->shape));
  }
  const int64_t B = xn->shape[0], C = xn->shape[1], H = xn->shape[2],
                W = xn->shape[3];
  const int64_t m = B * H * W;
  if (gn->numel() != C || bn->numel() != C || running_mean.numel() != C ||
      running_var.numel() != C) {
    throw DimensionError("batch_norm: per-channel params must have " +
                         std::to_string(C) + " entries");
  }
  auto stats = std::make_shared<std::vector<double>>(C * 2);
  for (int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      mu = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const float* sp = xn->values.data() + (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) mu += sp[i];
      }
      mu /= m;
      var = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const float* sp = xn->values.data() + (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          const double d = sp[i] - mu;
          var += d * d;
        }
      }
      var /= m;
      const double unbiased = m > 1 ? var * m / (m - 1) : var;
      auto& rm = running_mean.mutable_values();
      auto& rv = running_var.mutable_values();
      rm[c] = static_cast<float>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] =
          static_cast<float>((1.0 - momentum) * rv[c] + momentum * unbiased);
    } else {
      mu = running_mean.values()[c];
      var = running_var.values()[c];
    }
    (*stats)[c * 2] = mu;
    (*stats)[c * 2 + 1] = 1.0 / std::sqrt(var + eps);
  }
  std::vector<float> out(xn->values.size());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const double mu = (*stats)[c * 2];
      const double inv_sd = (*stats)[c * 2 + 1];
      const float ga = gn->values[c], be = bn->values[c];
      const float* sp = xn->values.data() + (b * C + c) * H * W;
      float* dp = out.data() + (b * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        dp[i] = static_cast<float>((sp[i] - mu) * inv_sd) * ga + be;
      }
    }
  }
  auto backprop = [B, C, H, W, m, stats, training](TensorNode& self) {
    TensorNode* px = self.parents[0].get();
    TensorNode* pg = self.parents[1].get();
    TensorNode* pb = self.parents[2].get();
    const bool need_x = px->requires_grad;
    if (need_x) px->ensure_grad();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int64_t c = 0; c < C; ++c) {
      const double mu = (*stats)[c * 2];
      const double inv_sd = (*stats)[c * 2 + 1];
      const double ga = pg->values[c];
      double dgamma = 0.0, dbeta = 0.0, sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const int64_t base = (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          const double xh = (px->values[base + i] - mu) * inv_sd;
          const double dy = self.grad[base + i];
          dgamma += dy * xh;
          dbeta += dy;
          sum_dxh += dy * ga;
          sum_dxh_xh += dy * ga * xh;
        }
      }
      if (pg->requires_grad) pg->grad[c] += static_cast<float>(dgamma);
      if (pb->requires_grad) pb->grad[c] += static_cast<float>(dbeta);
      if (!need_x) continue;
      const double mean_dxh = sum_dxh / m;
      const double mean_dxh_xh = sum_dxh_xh / m;
      for (int64_t b = 0; b < B; ++b) {
        const int64_t base = (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          const double xh = (px->values[base + i] - mu) * inv_sd;
          const double dxh = static_cast<double>(self.grad[base + i]) * ga;
          // eval mode: running stats are constants, no mean corrections
          const double dx =
              training ? inv_sd * (dxh - mean_dxh - xh * mean_dxh_xh)
                       : inv_sd * dxh;
          px->grad[base + i] += static_cast<float>(dx);
        }
      }
    }
  };
  auto out_node = std::make_shared<TensorNode>();
  out_node->shape = xn->shape;
  out_node->values = std::move(out);
  out_node->requires_grad =
      GradMode::enabled() &&
      (xn->requires_grad || gn->requires_grad || bn->requires_grad);
  if (out_node->requires_grad) {
    out_node->parents = {xn, gn, bn};
    out_node->backprop = std::move(backprop);
  }
  return Tensor(out_node);
}

Tensor global_avg_pool(const Tensor& x) {
  auto xn = x.node();
  if (!xn) throw ContractError("global_avg_pool: undefined operand");
  if (xn->shape.size() != 4) {
    throw DimensionError("global_avg_pool: expects NCHW, got " +
                         shape_str(xn->shape));
  }
  const int64_t B = xn->shape[0], C = xn->shape[1],
                HW = xn->shape[2] * xn->shape[3];
  std::vector<float> out(static_cast<size_t>(B * C));
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const float* sp = xn->values.data() + bc * HW;
    double acc = 0.0;
    for (int64_t i = 0; i < HW; ++i) acc += sp[i];
    out[bc] = static_cast<float>(acc / HW);
  }
  auto backprop = [B, C, HW](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const float g = self.grad[bc] / static_cast<float>(HW);
      float* dp = p->grad.data() + bc * HW;
      for (int64_t i = 0; i < HW; ++i) dp[i] += g;
    }
  };
  auto out_node = std::make_shared<TensorNode>();
  out_node->shape = {B, C};
  out_node->values = std::move(out);
  out_node->requires_grad = GradMode::enabled() && xn->requires_grad;
  if (out_node->requires_grad) {
    out_node->parents = {xn};
    out_node->backprop = std::move(backprop);
  }
  return Tensor(out_node);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, transpose(w));
  if (b.defined()) y = add(y, b);
  return y;
}

}  // namespace scenelab
