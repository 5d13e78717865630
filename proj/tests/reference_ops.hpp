#pragma once

// Pure float64 reference implementations used as independent oracles for
// gradient and forward-value checks. Deliberately written as direct loops
// with no shared code with the library.

#include <cmath>
#include <vector>

namespace scenelab::testref {

using dvec = std::vector<double>;

inline dvec to_dvec(const std::vector<float>& x) {
  return dvec(x.begin(), x.end());
}

inline dvec matmul(const dvec& a, const dvec& b, int m, int k, int n) {
  dvec c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline dvec conv2d(const dvec& x, const dvec& w, int B, int C, int H, int W,
                   int K, int kh, int kw, int stride, int pad) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  dvec y(static_cast<size_t>(B) * K * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int ih = oh * stride - pad + ki;
                const int iw = ow * stride - pad + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((b * C + c) * H + ih) * W + iw] *
                       w[((k * C + c) * kh + ki) * kw + kj];
              }
          y[((b * K + k) * Ho + oh) * Wo + ow] = acc;
        }
  return y;
}

inline dvec group_norm(const dvec& x, const dvec& gamma, const dvec& beta,
                       int B, int C, int H, int W, int groups,
                       double eps = 1e-5) {
  const int cpg = C / groups;
  const int m = cpg * H * W;
  dvec y(x.size());
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const int base = (b * C + g * cpg) * H * W;
      double mu = 0.0;
      for (int i = 0; i < m; ++i) mu += x[base + i];
      mu /= m;
      double var = 0.0;
      for (int i = 0; i < m; ++i) {
        const double d = x[base + i] - mu;
        var += d * d;
      }
      var /= m;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < cpg; ++c)
        for (int i = 0; i < H * W; ++i) {
          const int j = base + c * H * W + i;
          y[j] = (x[j] - mu) * inv * gamma[g * cpg + c] + beta[g * cpg + c];
        }
    }
  return y;
}

inline dvec batch_norm_train(const dvec& x, const dvec& gamma,
                             const dvec& beta, int B, int C, int H, int W,
                             double eps = 1e-5) {
  const int m = B * H * W;
  dvec y(x.size());
  for (int c = 0; c < C; ++c) {
    double mu = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) mu += x[(b * C + c) * H * W + i];
    mu /= m;
    double var = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        const double d = x[(b * C + c) * H * W + i] - mu;
        var += d * d;
      }
    var /= m;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        const int j = (b * C + c) * H * W + i;
        y[j] = (x[j] - mu) * inv * gamma[c] + beta[c];
      }
  }
  return y;
}

inline dvec l2_normalize_rows(const dvec& x, int rows, int cols,
                              double eps = 1e-12) {
  dvec y(x.size());
  for (int r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (int c = 0; c < cols; ++c) sq += x[r * cols + c] * x[r * cols + c];
    const double nrm = std::sqrt(sq);
    const double s = nrm < eps ? 1.0 : 1.0 / nrm;
    for (int c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] * s;
  }
  return y;
}

inline dvec log_softmax_rows(const dvec& x, int rows, int cols) {
  dvec y(x.size());
  for (int r = 0; r < rows; ++r) {
    double m = x[r * cols];
    for (int c = 1; c < cols; ++c) m = std::max(m, x[r * cols + c]);
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += std::exp(x[r * cols + c] - m);
    const double lse = m + std::log(acc);
    for (int c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] - lse;
  }
  return y;
}

inline dvec global_avg_pool(const dvec& x, int B, int C, int HW) {
  dvec y(static_cast<size_t>(B) * C, 0.0);
  for (int bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (int i = 0; i < HW; ++i) acc += x[bc * HW + i];
    y[bc] = acc / HW;
  }
  return y;
}

// y = x * W^T + b, x [rows,in], w [out,in]
inline dvec linear(const dvec& x, const dvec& w, const dvec& b, int rows,
                   int in, int out) {
  dvec y(static_cast<size_t>(rows) * out, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b.empty() ? 0.0 : b[o];
      for (int i = 0; i < in; ++i) acc += x[r * in + i] * w[o * in + i];
      y[r * out + o] = acc;
    }
  return y;
}

inline dvec relu(dvec x) {
  for (auto& v : x) v = v > 0 ? v : 0.0;
  return x;
}

}  // namespace scenelab::testref
