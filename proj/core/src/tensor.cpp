#include "scenelab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace scenelab {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::atomic<float> g_epsilon{1e-12f};
std::atomic<uint64_t> g_warnings{0};

void check_shape(const Shape& s, const char* what) {
  for (int64_t d : s) {
    if (d <= 0) {
      throw DimensionError(std::string(what) + ": non-positive extent in " +
                           shape_str(s));
    }
  }
}

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<float> values,
                                      bool requires_grad) {
  check_shape(shape, "tensor");
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_op(
    Shape shape, std::vector<float> values,
    std::vector<std::shared_ptr<TensorNode>> parents,
    std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  if (g_grad_enabled) {
    for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

std::shared_ptr<TensorNode> need(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw ContractError(std::string(op) + ": undefined tensor operand");
  }
  return t.node();
}

// --------------------------------------------------------------------------
// broadcasting
// --------------------------------------------------------------------------

struct BcPlan {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
  int64_t n = 0;
  bool same = false;
};

BcPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BcPlan plan;
  if (a == b) {
    plan.out = a;
    plan.n = shape_numel(a);
    plan.same = true;
    return plan;
  }
  const size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  plan.out.resize(rank);
  for (size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pa[d] == 1 || pb[d] == 1) {
      plan.out[d] = std::max(pa[d], pb[d]);
    } else {
      throw DimensionError(std::string(op) + ": incompatible shapes " +
                           shape_str(a) + " vs " + shape_str(b));
    }
  }
  auto strides_of = [&](const Shape& s) {
    std::vector<int64_t> st(rank, 0);
    int64_t acc = 1;
    for (size_t i = rank; i-- > 0;) {
      st[i] = (s[i] == 1) ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  plan.stride_a = strides_of(pa);
  plan.stride_b = strides_of(pb);
  // broadcast dims contribute stride 0
  for (size_t d = 0; d < rank; ++d) {
    if (pa[d] == 1 && plan.out[d] > 1) plan.stride_a[d] = 0;
    if (pb[d] == 1 && plan.out[d] > 1) plan.stride_b[d] = 0;
  }
  plan.n = shape_numel(plan.out);
  return plan;
}

template <typename F>
void bc_for_each(const BcPlan& p, F&& f) {
  if (p.same) {
    for (int64_t i = 0; i < p.n; ++i) f(i, i, i);
    return;
  }
  const size_t rank = p.out.size();
  std::vector<int64_t> coord(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < p.n; ++io) {
    f(io, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      ++coord[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (coord[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      coord[d] = 0;
    }
  }
}

template <typename FwdF, typename BwdF>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          FwdF fwd, BwdF bwd) {
  auto an = need(a, name);
  auto bn = need(b, name);
  BcPlan plan = broadcast_plan(an->shape, bn->shape, name);
  std::vector<float> out(static_cast<size_t>(plan.n));
  {
    const auto& av = an->values;
    const auto& bv = bn->values;
    bc_for_each(plan, [&](int64_t io, int64_t ia, int64_t ib) {
      out[io] = fwd(av[ia], bv[ib]);
    });
  }
  auto backprop = [plan, bwd](TensorNode& self) {
    TensorNode* pa = self.parents[0].get();
    TensorNode* pb = self.parents[1].get();
    const bool need_a = pa->requires_grad;
    const bool need_b = pb->requires_grad;
    if (need_a) pa->ensure_grad();
    if (need_b) pb->ensure_grad();
    bc_for_each(plan, [&](int64_t io, int64_t ia, int64_t ib) {
      float ga = 0.f, gb = 0.f;
      bwd(pa->values[ia], pb->values[ib], self.grad[io], ga, gb);
      if (need_a) pa->grad[ia] += ga;
      if (need_b) pb->grad[ib] += gb;
    });
  };
  return Tensor(make_op(plan.out, std::move(out), {an, bn}, std::move(backprop)));
}

template <typename FwdF, typename BwdF>
Tensor unary_elementwise(const Tensor& a, const char* name, FwdF fwd,
                         BwdF bwd) {
  auto an = need(a, name);
  std::vector<float> out(an->values.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(an->values[i]);
  auto backprop = [bwd](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.values.size(); ++i) {
      p->grad[i] += bwd(p->values[i], self.values[i], self.grad[i]);
    }
  };
  return Tensor(make_op(an->shape, std::move(out), {an}, std::move(backprop)));
}

// reduce geometry: tensor viewed as [outer, ext, inner] around `axis`
struct AxisGeom {
  int64_t outer = 1, ext = 1, inner = 1;
};

AxisGeom axis_geom(const Shape& s, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  AxisGeom g;
  for (int d = 0; d < axis; ++d) g.outer *= s[d];
  g.ext = s[axis];
  for (size_t d = axis + 1; d < s.size(); ++d) g.inner *= s[d];
  return g;
}

Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
    if (out.empty()) out.push_back(1);
  }
  return out;
}

}  // namespace

// --------------------------------------------------------------------------
// globals
// --------------------------------------------------------------------------

void set_numeric_epsilon(float eps) { g_epsilon.store(eps); }
float numeric_epsilon() { return g_epsilon.load(); }
uint64_t numeric_warning_count() { return g_warnings.load(); }
void reset_numeric_warnings() { g_warnings.store(0); }
void bump_numeric_warnings(uint64_t n) { g_warnings.fetch_add(n); }

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

void TensorNode::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.f);
}

// --------------------------------------------------------------------------
// Tensor
// --------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape),
                          std::vector<float>(static_cast<size_t>(n), 0.f),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape),
                          std::vector<float>(static_cast<size_t>(n), value),
                          requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.f, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values,
                         bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi,
                       bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::normal(Shape shape, Rng& rng, float mean, float sd,
                      bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal(mean, sd));
  return from_data(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return need(*this, "shape")->shape; }
int64_t Tensor::numel() const { return need(*this, "numel")->numel(); }
int Tensor::dim() const {
  return static_cast<int>(need(*this, "dim")->shape.size());
}
bool Tensor::requires_grad() const {
  return need(*this, "requires_grad")->requires_grad;
}

void Tensor::set_requires_grad(bool rg) {
  auto n = need(*this, "set_requires_grad");
  if (n->backprop) {
    throw ContractError("set_requires_grad: only valid on leaf tensors");
  }
  n->requires_grad = rg;
}

const std::vector<float>& Tensor::values() const {
  return need(*this, "values")->values;
}
std::vector<float>& Tensor::mutable_values() {
  return need(*this, "mutable_values")->values;
}

bool Tensor::has_grad() const {
  auto n = need(*this, "has_grad");
  return n->grad.size() == n->values.size();
}

const std::vector<float>& Tensor::grad() const {
  auto n = need(*this, "grad");
  if (n->grad.size() != n->values.size()) {
    throw ContractError("grad: no gradient populated for shape " +
                        shape_str(n->shape));
  }
  return n->grad;
}

std::vector<float>& Tensor::mutable_grad() {
  auto n = need(*this, "mutable_grad");
  n->ensure_grad();
  return n->grad;
}

void Tensor::zero_grad() {
  auto n = need(*this, "zero_grad");
  n->grad.clear();
}

float Tensor::item() const {
  auto n = need(*this, "item");
  if (n->numel() != 1) {
    throw ContractError("item: tensor is not scalar, shape " +
                        shape_str(n->shape));
  }
  return n->values[0];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
  auto n = need(*this, "at");
  if (idx.size() != n->shape.size()) {
    throw DimensionError("at: rank mismatch for " + shape_str(n->shape));
  }
  int64_t flat = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= n->shape[d]) {
      throw DimensionError("at: index out of range for " +
                           shape_str(n->shape));
    }
    flat = flat * n->shape[d] + i;
    ++d;
  }
  return n->values[static_cast<size_t>(flat)];
}

Tensor Tensor::detach() const {
  auto n = need(*this, "detach");
  return Tensor(make_leaf(n->shape, n->values, false));
}

void Tensor::backward() const {
  auto root = need(*this, "backward");
  if (root->numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(root->shape));
  }
  // topological order over the grad-requiring subgraph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // interior grads describe only this call; leaf grads accumulate across calls
  for (TensorNode* n : order) {
    if (n->backprop) n->ensure_grad(), n->grad.assign(n->grad.size(), 0.f);
  }
  root->ensure_grad();
  root->grad[0] = root->backprop ? 1.f : root->grad[0] + 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// --------------------------------------------------------------------------
// elementwise
// --------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float, float, float g, float& ga, float& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float, float, float g, float& ga, float& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float x, float y, float g, float& ga, float& gb) {
        ga = y * g;
        gb = x * g;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  const float eps = numeric_epsilon();
  uint64_t clamped = 0;
  auto floor_den = [eps](float d) {
    if (std::fabs(d) < eps) return d < 0.f ? -eps : eps;
    return d;
  };
  auto out = binary_elementwise(
      a, b, "div",
      [&clamped, floor_den, eps](float x, float y) {
        if (std::fabs(y) < eps) ++clamped;
        return x / floor_den(y);
      },
      [floor_den](float x, float y, float g, float& ga, float& gb) {
        const float d = floor_den(y);
        ga = g / d;
        gb = -x / (d * d) * g;
      });
  if (clamped) bump_numeric_warnings(clamped);
  return out;
}

Tensor add(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](float x) { return std::exp(x); },
      [](float, float y, float g) { return y * g; });
}

Tensor log(const Tensor& a) {
  const float eps = numeric_epsilon();
  uint64_t clamped = 0;
  auto out = unary_elementwise(
      a, "log",
      [&clamped, eps](float x) {
        if (x < eps) ++clamped;
        return std::log(std::max(x, eps));
      },
      [eps](float x, float, float g) { return g / std::max(x, eps); });
  if (clamped) bump_numeric_warnings(clamped);
  return out;
}

Tensor sqrt(const Tensor& a) {
  const float eps = numeric_epsilon();
  uint64_t clamped = 0;
  auto out = unary_elementwise(
      a, "sqrt",
      [&clamped](float x) {
        if (x < 0.f) ++clamped;
        return std::sqrt(std::max(x, 0.f));
      },
      [eps](float, float y, float g) { return 0.5f / std::max(y, eps) * g; });
  if (clamped) bump_numeric_warnings(clamped);
  return out;
}

Tensor pow(const Tensor& a, float exponent) {
  return unary_elementwise(
      a, "pow",
      [exponent](float x) { return std::pow(x, exponent); },
      [exponent](float x, float, float g) {
        return exponent * std::pow(x, exponent - 1.f) * g;
      });
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, "relu", [](float x) { return x > 0.f ? x : 0.f; },
      [](float x, float, float g) { return x > 0.f ? g : 0.f; });
}

Tensor neg(const Tensor& a) {
  return unary_elementwise(
      a, "neg", [](float x) { return -x; },
      [](float, float, float g) { return -g; });
}

// --------------------------------------------------------------------------
// reductions
// --------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto an = need(a, "sum");
  double acc = 0.0;
  for (float v : an->values) acc += v;
  auto backprop = [](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const float g = self.grad[0];
    for (auto& pg : p->grad) pg += g;
  };
  return Tensor(make_op({1}, {static_cast<float>(acc)}, {an}, backprop));
}

Tensor mean(const Tensor& a) {
  auto an = need(a, "mean");
  double acc = 0.0;
  for (float v : an->values) acc += v;
  const double n = static_cast<double>(an->numel());
  auto backprop = [n](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const float g = static_cast<float>(self.grad[0] / n);
    for (auto& pg : p->grad) pg += g;
  };
  return Tensor(make_op({1}, {static_cast<float>(acc / n)}, {an}, backprop));
}

namespace {

Tensor reduce_axis(const Tensor& a, int axis, bool keepdim, bool take_mean,
                   const char* name) {
  auto an = need(a, name);
  const AxisGeom g = axis_geom(an->shape, axis, name);
  const double scale = take_mean ? 1.0 / static_cast<double>(g.ext) : 1.0;
  std::vector<float> out(static_cast<size_t>(g.outer * g.inner));
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t i = 0; i < g.inner; ++i) {
      double acc = 0.0;
      const float* base = an->values.data() + o * g.ext * g.inner + i;
      for (int64_t e = 0; e < g.ext; ++e) acc += base[e * g.inner];
      out[o * g.inner + i] = static_cast<float>(acc * scale);
    }
  }
  auto backprop = [g, scale](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t o = 0; o < g.outer; ++o) {
      for (int64_t i = 0; i < g.inner; ++i) {
        const float gv =
            static_cast<float>(self.grad[o * g.inner + i] * scale);
        float* base = p->grad.data() + o * g.ext * g.inner + i;
        for (int64_t e = 0; e < g.ext; ++e) base[e * g.inner] += gv;
      }
    }
  };
  return Tensor(make_op(reduced_shape(an->shape, axis, keepdim),
                        std::move(out), {an}, std::move(backprop)));
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, false, "sum_axis");
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, true, "mean_axis");
}

Tensor max_axis(const Tensor& a, int axis, bool keepdim) {
  auto an = need(a, "max_axis");
  const AxisGeom g = axis_geom(an->shape, axis, "max_axis");
  std::vector<float> out(static_cast<size_t>(g.outer * g.inner));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t i = 0; i < g.inner; ++i) {
      const float* base = an->values.data() + o * g.ext * g.inner + i;
      float best = base[0];
      int64_t best_e = 0;
      for (int64_t e = 1; e < g.ext; ++e) {
        if (base[e * g.inner] > best) {
          best = base[e * g.inner];
          best_e = e;
        }
      }
      out[o * g.inner + i] = best;
      (*argmax)[o * g.inner + i] = best_e;
    }
  }
  auto backprop = [g, argmax](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t o = 0; o < g.outer; ++o) {
      for (int64_t i = 0; i < g.inner; ++i) {
        const int64_t e = (*argmax)[o * g.inner + i];
        p->grad[o * g.ext * g.inner + e * g.inner + i] +=
            self.grad[o * g.inner + i];
      }
    }
  };
  return Tensor(make_op(reduced_shape(an->shape, axis, keepdim),
                        std::move(out), {an}, std::move(backprop)));
}

// --------------------------------------------------------------------------
// linear algebra / structure
// --------------------------------------------------------------------------

void gemm_f32_acc64(const float* a, const float* b, float* c, int64_t m,
                    int64_t k, int64_t n, bool trans_a, bool trans_b) {
  using RowF =
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowD =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowD ad(m, k), bd(k, n);
  if (!trans_a) {
    ad = Eigen::Map<const RowF>(a, m, k).cast<double>();
  } else {
    ad = Eigen::Map<const RowF>(a, k, m).cast<double>().transpose();
  }
  if (!trans_b) {
    bd = Eigen::Map<const RowF>(b, k, n).cast<double>();
  } else {
    bd = Eigen::Map<const RowF>(b, n, k).cast<double>().transpose();
  }
  RowD cd(m, n);
  cd.noalias() = ad * bd;
  Eigen::Map<RowF> cm(c, m, n);
  cm += cd.cast<float>();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto an = need(a, "matmul");
  auto bn = need(b, "matmul");
  if (an->shape.size() != 2 || bn->shape.size() != 2) {
    throw DimensionError("matmul: expects 2-D operands, got " +
                         shape_str(an->shape) + " and " + shape_str(bn->shape));
  }
  const int64_t m = an->shape[0], k = an->shape[1];
  const int64_t k2 = bn->shape[0], n = bn->shape[1];
  if (k != k2) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(an->shape) + " x " + shape_str(bn->shape));
  }
  std::vector<float> out(static_cast<size_t>(m * n), 0.f);
  gemm_f32_acc64(an->values.data(), bn->values.data(), out.data(), m, k, n,
                 false, false);
  auto backprop = [m, k, n](TensorNode& self) {
    TensorNode* pa = self.parents[0].get();
    TensorNode* pb = self.parents[1].get();
    if (pa->requires_grad) {
      pa->ensure_grad();
      // dA = dC * B^T
      gemm_f32_acc64(self.grad.data(), pb->values.data(), pa->grad.data(), m,
                     n, k, false, true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      // dB = A^T * dC
      gemm_f32_acc64(pa->values.data(), self.grad.data(), pb->grad.data(), k,
                     m, n, true, false);
    }
  };
  return Tensor(make_op({m, n}, std::move(out), {an, bn}, std::move(backprop)));
}

Tensor transpose(const Tensor& a) {
  auto an = need(a, "transpose");
  if (an->shape.size() != 2) {
    throw DimensionError("transpose: expects 2-D, got " +
                         shape_str(an->shape));
  }
  const int64_t r = an->shape[0], c = an->shape[1];
  std::vector<float> out(an->values.size());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = an->values[i * c + j];
  auto backprop = [r, c](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[j * r + i];
  };
  return Tensor(make_op({c, r}, std::move(out), {an}, std::move(backprop)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  auto an = need(a, "reshape");
  check_shape(shape, "reshape");
  if (shape_numel(shape) != an->numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(an->shape) +
                         " as " + shape_str(shape));
  }
  auto backprop = [](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(
      make_op(std::move(shape), an->values, {an}, std::move(backprop)));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(need(p, "concat"));
  const Shape& first = nodes[0]->shape;
  if (axis < 0 || axis >= static_cast<int>(first.size())) {
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(first));
  }
  int64_t ext_total = 0;
  for (const auto& n : nodes) {
    if (n->shape.size() != first.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(first) +
                           " vs " + shape_str(n->shape));
    }
    for (size_t d = 0; d < first.size(); ++d) {
      if (static_cast<int>(d) != axis && n->shape[d] != first[d]) {
        throw DimensionError("concat: shape mismatch " + shape_str(first) +
                             " vs " + shape_str(n->shape));
      }
    }
    ext_total += n->shape[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = ext_total;
  const AxisGeom g = axis_geom(out_shape, axis, "concat");
  std::vector<float> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> offsets(nodes.size());
  int64_t off = 0;
  for (size_t pi = 0; pi < nodes.size(); ++pi) {
    offsets[pi] = off;
    const int64_t ext = nodes[pi]->shape[axis];
    for (int64_t o = 0; o < g.outer; ++o) {
      const float* src = nodes[pi]->values.data() + o * ext * g.inner;
      float* dst = out.data() + (o * g.ext + off) * g.inner;
      std::copy(src, src + ext * g.inner, dst);
    }
    off += ext;
  }
  auto backprop = [g, offsets, axis](TensorNode& self) {
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      TensorNode* p = self.parents[pi].get();
      if (!p->requires_grad) continue;
      p->ensure_grad();
      const int64_t ext = p->shape[axis];
      for (int64_t o = 0; o < g.outer; ++o) {
        const float* src = self.grad.data() + (o * g.ext + offsets[pi]) * g.inner;
        float* dst = p->grad.data() + o * ext * g.inner;
        for (int64_t i = 0; i < ext * g.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return Tensor(make_op(std::move(out_shape), std::move(out), std::move(nodes),
                        std::move(backprop)));
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop) {
  auto an = need(a, "slice");
  const Shape& s = an->shape;
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DimensionError("slice: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  if (start < 0 || stop > s[axis] || start >= stop) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(stop) + ") invalid for " +
                         shape_str(s));
  }
  const AxisGeom g = axis_geom(s, axis, "slice");
  const int64_t ext = stop - start;
  Shape out_shape = s;
  out_shape[axis] = ext;
  std::vector<float> out(static_cast<size_t>(g.outer * ext * g.inner));
  for (int64_t o = 0; o < g.outer; ++o) {
    const float* src = an->values.data() + (o * g.ext + start) * g.inner;
    std::copy(src, src + ext * g.inner, out.data() + o * ext * g.inner);
  }
  auto backprop = [g, start, ext](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t o = 0; o < g.outer; ++o) {
      const float* src = self.grad.data() + o * ext * g.inner;
      float* dst = p->grad.data() + (o * g.ext + start) * g.inner;
      for (int64_t i = 0; i < ext * g.inner; ++i) dst[i] += src[i];
    }
  };
  return Tensor(
      make_op(std::move(out_shape), std::move(out), {an}, std::move(backprop)));
}

Tensor l2_normalize(const Tensor& a, int axis) {
  auto an = need(a, "l2_normalize");
  const AxisGeom g = axis_geom(an->shape, axis, "l2_normalize");
  const float eps = numeric_epsilon();
  std::vector<float> out(an->values.size());
  uint64_t zero_slices = 0;
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t i = 0; i < g.inner; ++i) {
      const float* src = an->values.data() + o * g.ext * g.inner + i;
      double sq = 0.0;
      for (int64_t e = 0; e < g.ext; ++e) {
        const double v = src[e * g.inner];
        sq += v * v;
      }
      const double nrm = std::sqrt(sq);
      const double scale = nrm < eps ? 1.0 : 1.0 / nrm;
      if (nrm < eps) ++zero_slices;
      float* dst = out.data() + o * g.ext * g.inner + i;
      for (int64_t e = 0; e < g.ext; ++e) {
        dst[e * g.inner] = static_cast<float>(src[e * g.inner] * scale);
      }
    }
  }
  if (zero_slices) bump_numeric_warnings(zero_slices);
  auto backprop = [g, eps](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t o = 0; o < g.outer; ++o) {
      for (int64_t i = 0; i < g.inner; ++i) {
        const int64_t base = o * g.ext * g.inner + i;
        double sq = 0.0;
        for (int64_t e = 0; e < g.ext; ++e) {
          const double v = p->values[base + e * g.inner];
          sq += v * v;
        }
        const double nrm = std::sqrt(sq);
        if (nrm < eps) {
          for (int64_t e = 0; e < g.ext; ++e) {
            p->grad[base + e * g.inner] += self.grad[base + e * g.inner];
          }
          continue;
        }
        double dot = 0.0;
        for (int64_t e = 0; e < g.ext; ++e) {
          dot += static_cast<double>(self.grad[base + e * g.inner]) *
                 self.values[base + e * g.inner];
        }
        const double inv = 1.0 / nrm;
        for (int64_t e = 0; e < g.ext; ++e) {
          const double gv = self.grad[base + e * g.inner];
          const double yv = self.values[base + e * g.inner];
          p->grad[base + e * g.inner] +=
              static_cast<float>(inv * (gv - yv * dot));
        }
      }
    }
  };
  return Tensor(make_op(an->shape, std::move(out), {an}, std::move(backprop)));
}

Tensor log_softmax(const Tensor& a) {
  auto an = need(a, "log_softmax");
  if (an->shape.empty()) throw DimensionError("log_softmax: scalar input");
  const int64_t cols = an->shape.back();
  const int64_t rows = an->numel() / cols;
  std::vector<float> out(an->values.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = an->values.data() + r * cols;
    float* dst = out.data() + r * cols;
    float m = src[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, src[c]);
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c) acc += std::exp(static_cast<double>(src[c]) - m);
    const double lse = m + std::log(acc);
    for (int64_t c = 0; c < cols; ++c) {
      dst[c] = static_cast<float>(src[c] - lse);
    }
  }
  auto backprop = [rows, cols](TensorNode& self) {
    TensorNode* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* g = self.grad.data() + r * cols;
      const float* y = self.values.data() + r * cols;
      double gs = 0.0;
      for (int64_t c = 0; c < cols; ++c) gs += g[c];
      float* dst = p->grad.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) {
        dst[c] += static_cast<float>(g[c] - std::exp(static_cast<double>(y[c])) * gs);
      }
    }
  };
  return Tensor(make_op(an->shape, std::move(out), {an}, std::move(backprop)));
}

Tensor softmax(const Tensor& a) { return exp(log_softmax(a)); }

}  // namespace scenelab
