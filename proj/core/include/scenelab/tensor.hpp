#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "scenelab/rng.hpp"

namespace scenelab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Shape or argument mismatch between tensors.
class DimensionError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
// Precondition violated by the caller.
class ContractError : public std::logic_error {
  using std::logic_error::logic_error;
};
// NaN/Inf or other numeric breakdown at runtime.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Floor used when log/div/sqrt would otherwise see a non-positive or zero
// operand. Each clamped element bumps the process-wide warning counter.
void set_numeric_epsilon(float eps);
float numeric_epsilon();
uint64_t numeric_warning_count();
void reset_numeric_warnings();
void bump_numeric_warnings(uint64_t n);

// Thread-local switch: while disabled, ops do not record parents or
// backprop closures (inference mode).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }

 private:
  bool prev_;
};

struct TensorNode {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pulls this node's grad and accumulates into the parents' grads. The
  // closure must not capture a shared_ptr to its own node.
  std::function<void(TensorNode&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad();
};

// Dense float32 tensor with reverse-mode autodiff. Value-semantic handle
// over a shared graph node; the graph is rebuilt on every forward pass.
// Values are immutable after construction except through mutable_values()
// (used by optimizers on leaf parameters, never on graph interiors).
// Reductions and matrix products accumulate in float64 before truncating
// back to float32.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> values,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, Rng& rng, float mean, float sd,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int dim() const;
  bool requires_grad() const;
  void set_requires_grad(bool rg);

  const std::vector<float>& values() const;
  std::vector<float>& mutable_values();
  bool has_grad() const;
  const std::vector<float>& grad() const;
  std::vector<float>& mutable_grad();
  void zero_grad();

  float item() const;  // scalar tensors only
  float at(std::initializer_list<int64_t> idx) const;

  // Same values, cut from the graph (no parents, no grad requirement).
  Tensor detach() const;

  // Reverse pass from a scalar. Grads accumulate across repeated calls
  // until zero_grad() is used.
  void backward() const;

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// elementwise ops. Binary ops broadcast when the shapes are equal, when one
// side is scalar, when one shape is a trailing suffix of the other, or when
// equal-rank shapes differ only in dims of extent 1.
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // denominator epsilon-floored
Tensor add(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // operand epsilon-floored
Tensor sqrt(const Tensor& a);  // negative operand clamped to 0
Tensor pow(const Tensor& a, float exponent);
Tensor relu(const Tensor& a);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, float b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, float b) { return mul(a, b); }
inline Tensor operator*(float a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// reductions / structure
// ---------------------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor max_axis(const Tensor& a, int axis, bool keepdim = false);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop);

// Unit-norm slices along `axis`; zero-norm slices pass through unchanged
// (counted as numeric warnings).
Tensor l2_normalize(const Tensor& a, int axis);

// Numerically stable log-softmax over the last axis.
Tensor log_softmax(const Tensor& a);
Tensor softmax(const Tensor& a);

// float32 data, float64 accumulation: C[m,n] (+)= A[m,k] * B[k,n].
void gemm_f32_acc64(const float* a, const float* b, float* c, int64_t m,
                    int64_t k, int64_t n, bool trans_a, bool trans_b);

}  // namespace scenelab
