#include "capsvl/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace capsvl::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
using StrideMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using StrideConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local bool g_grad_enabled = true;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::invalid_argument("axis out of range");
  return static_cast<std::size_t>(a);
}

// [outer, n, inner] view of a tensor around one axis.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (g_grad_enabled)
    for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.shared());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Grad buffer of an input, or nullptr if it does not take gradients.
double* grad_of(Node* n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.sa.assign(r, 0);
  bc.sb.assign(r, 0);
  std::vector<std::size_t> da(r, 1), db(r, 1);
  for (std::size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      throw std::invalid_argument("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    bc.out[i] = std::max(da[i], db[i]);
    bc.sa[i] = da[i] == 1 ? 0 : stride_a;
    bc.sb[i] = db[i] == 1 ? 0 : stride_b;
    stride_a *= da[i];
    stride_b *= db[i];
  }
  return bc;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = bc.out[r - 1];
  const std::size_t ia_step = bc.sa[r - 1], ib_step = bc.sb[r - 1];
  std::size_t outer = 1;
  for (std::size_t i = 0; i + 1 < r; ++i) outer *= bc.out[i];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t it = 0; it < outer; ++it) {
    std::size_t ia = oa, ib = ob;
    for (std::size_t j = 0; j < inner; ++j) {
      f(o++, ia, ib);
      ia += ia_step;
      ib += ib_step;
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += bc.sa[d];
      ob += bc.sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.sa[d] * idx[d];
      ob -= bc.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  auto bc = make_broadcast(a.shape(), b.shape());
  std::vector<double> out(numel_of(bc.out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
  }
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(bc.out, std::move(out), {a, b}, [na, nb, bc, bwd](Node& self) {
    double* ga = grad_of(na);
    double* gb = grad_of(nb);
    const double* g = self.grad.data();
    const double* y = self.value.data();
    const double* va = na->value.data();
    const double* vb = nb->value.data();
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      double da = 0, db = 0;
      bwd(va[ia], vb[ib], y[o], g[o], da, db);
      if (ga) ga[ia] += da;
      if (gb) gb[ib] += db;
    });
  });
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  Node* nx = x.node();
  return make_result(x.shape(), std::move(out), {x}, [nx, deriv](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    const double* g = self.grad.data();
    const double* y = self.value.data();
    const double* v = nx->value.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * deriv(v[i], y[i]);
  });
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel_of(shape) != values.size())
    throw std::invalid_argument("constant: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
  const std::size_t n = numel_of(shape);
  return constant(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw std::invalid_argument("at(): rank mismatch");
  std::size_t off = 0, i = 0;
  for (std::size_t v : index) off = off * shape()[i++] + v;
  return node_->value[off];
}

void Tensor::backward() const {
  if (numel() != 1) throw std::invalid_argument("backward() requires a scalar");
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release the graph; parameters (leaves) keep their accumulated grads.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out, double g, double& da, double& db) {
        da = g / y;
        db = -g * out / y;
      });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  // log s(v) = -softplus(-v)
  return unary_op(
      x,
      [](double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(v)); });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(
      x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[ax] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(v.outer * v.inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.n; ++i) {
      const double* row = px + (o * v.n + i) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t j = 0; j < v.inner; ++j) dst[j] += row[j];
    }
  Node* nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [nx, v](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.n; ++i) {
        double* dst = gx + (o * v.n + i) * v.inner;
        const double* src = g + o * v.inner;
        for (std::size_t j = 0; j < v.inner; ++j) dst[j] += src[j];
      }
  });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t n = x.dim(axis);
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& x) {
  const auto xs = x.data();
  double s = 0;
  for (double v : xs) s += v;
  Node* nx = x.node();
  return make_result({}, {s}, {x}, [nx](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < nx->value.size(); ++i) gx[i] += g;
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Node* nx = x.node();
  return make_result(std::move(shape), x.node()->value, {x}, [nx](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const std::size_t r = x.rank();
  if (dims.size() != r) throw std::invalid_argument("permute: rank mismatch");
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[dims[i]];
    strides[i] = in_strides[dims[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
      src[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += strides[d];
        if (idx[d] < out_shape[d]) break;
        off -= strides[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(n);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < n; ++o) out[o] = px[src[o]];
  Node* nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [nx, src = std::move(src)](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
  });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  if (start + length > v.n) throw std::invalid_argument("slice out of range");
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<double> out(v.outer * length * v.inner);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(px + (o * v.n + start) * v.inner, length * v.inner, out.data() + o * length * v.inner);
  Node* nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [nx, v, start, length](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = gx + (o * v.n + start) * v.inner;
      const double* src = self.grad.data() + o * length * v.inner;
      for (std::size_t j = 0; j < length * v.inner; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat of nothing");
  const std::size_t ax = normalize_axis(axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != out_shape.size()) throw std::invalid_argument("concat: rank mismatch");
    total += s[ax];
    s[ax] = out_shape[ax];
    if (s != out_shape) throw std::invalid_argument("concat: shape mismatch");
  }
  out_shape[ax] = total;
  const AxisView v = axis_view(out_shape, ax);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t n = t.shape()[ax];
    const double* px = t.data().data();
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(px + o * n * v.inner, n * v.inner, out.data() + (o * total + off) * v.inner);
    off += n;
  }
  std::vector<Node*> nodes;
  for (const auto& t : xs) nodes.push_back(t.node());
  return make_result(std::move(out_shape), std::move(out), xs, [nodes, offsets, v, total, ax](Node& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      double* gx = grad_of(nodes[k]);
      if (!gx) continue;
      const std::size_t n = nodes[k]->shape[ax];
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* src = self.grad.data() + (o * total + offsets[k]) * v.inner;
        double* dst = gx + o * n * v.inner;
        for (std::size_t j = 0; j < n * v.inner; ++j) dst[j] += src[j];
      }
    }
  });
}

Tensor expand(const Tensor& x, const Shape& shape) { return add(x, Tensor::zeros(shape)); }

Tensor matmul(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0))
    throw std::invalid_argument("matmul " + shape_str(x.shape()) + " @ " + shape_str(w.shape()));
  const std::size_t k = w.dim(0), n = w.dim(1);
  const std::size_t m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = MapConstMat(x.data().data(), m, k) * MapConstMat(w.data().data(), k, n);
  Node* nx = x.node();
  Node* nw = w.node();
  return make_result(std::move(out_shape), std::move(out), {x, w}, [nx, nw, m, k, n](Node& self) {
    MapConstMat g(self.grad.data(), m, n);
    if (double* gx = grad_of(nx)) MapMat(gx, m, k).noalias() += g * MapConstMat(nw->value.data(), k, n).transpose();
    if (double* gw = grad_of(nw)) MapMat(gw, k, n).noalias() += MapConstMat(nx->value.data(), m, k).transpose() * g;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw std::invalid_argument("bmm: rank mismatch");
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.shape()[i] != b.shape()[i]) throw std::invalid_argument("bmm: batch mismatch");
  const std::size_t m = a.shape()[r - 2], k = a.shape()[r - 1];
  const std::size_t kb = transpose_b ? b.shape()[r - 1] : b.shape()[r - 2];
  const std::size_t n = transpose_b ? b.shape()[r - 2] : b.shape()[r - 1];
  if (kb != k) throw std::invalid_argument("bmm: inner mismatch");
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= a.shape()[i];
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  std::vector<double> out(batch * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    MapMat o(out.data() + i * m * n, m, n);
    MapConstMat am(pa + i * m * k, m, k);
    if (transpose_b)
      o.noalias() = am * MapConstMat(pb + i * n * k, n, k).transpose();
    else
      o.noalias() = am * MapConstMat(pb + i * k * n, k, n);
  }
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(std::move(out_shape), std::move(out), {a, b}, [na, nb, batch, m, k, n, transpose_b](Node& self) {
    double* ga = grad_of(na);
    double* gb = grad_of(nb);
    for (std::size_t i = 0; i < batch; ++i) {
      MapConstMat g(self.grad.data() + i * m * n, m, n);
      MapConstMat am(na->value.data() + i * m * k, m, k);
      if (transpose_b) {
        MapConstMat bm(nb->value.data() + i * n * k, n, k);
        if (ga) MapMat(ga + i * m * k, m, k).noalias() += g * bm;
        if (gb) MapMat(gb + i * n * k, n, k).noalias() += g.transpose() * am;
      } else {
        MapConstMat bm(nb->value.data() + i * k * n, k, n);
        if (ga) MapMat(ga + i * m * k, m, k).noalias() += g * bm.transpose();
        if (gb) MapMat(gb + i * k * n, k, n).noalias() += am.transpose() * g;
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.inner; ++j) {
      const std::size_t base = o * v.n * v.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < v.n; ++i) mx = std::max(mx, px[base + i * v.inner]);
      double s = 0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(px[base + i * v.inner] - mx);
        out[base + i * v.inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < v.n; ++i) out[base + i * v.inner] /= s;
    }
  Node* nx = x.node();
  return make_result(x.shape(), std::move(out), {x}, [nx, v](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < v.inner; ++j) {
        const std::size_t base = o * v.n * v.inner + j;
        double dot = 0;
        for (std::size_t i = 0; i < v.n; ++i) dot += g[base + i * v.inner] * y[base + i * v.inner];
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t p = base + i * v.inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.inner; ++j) {
      const std::size_t base = o * v.n * v.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < v.n; ++i) mx = std::max(mx, px[base + i * v.inner]);
      double s = 0;
      for (std::size_t i = 0; i < v.n; ++i) s += std::exp(px[base + i * v.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t i = 0; i < v.n; ++i) out[base + i * v.inner] = px[base + i * v.inner] - lse;
    }
  Node* nx = x.node();
  return make_result(x.shape(), std::move(out), {x}, [nx, v](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < v.inner; ++j) {
        const std::size_t base = o * v.n * v.inner + j;
        double gs = 0;
        for (std::size_t i = 0; i < v.n; ++i) gs += g[base + i * v.inner];
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t p = base + i * v.inner;
          gx[p] += g[p] - std::exp(y[p]) * gs;
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw std::invalid_argument("layer_norm: parameter size");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * is;
      xhat[r * d + i] = h;
      out[r * d + i] = pg[i] * h + pb[i];
    }
  }
  Node* nx = x.node();
  Node* ng = gamma.node();
  Node* nb = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [nx, ng, nb, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       double* gx = grad_of(nx);
                       double* gg = grad_of(ng);
                       double* gb = grad_of(nb);
                       const double* g = self.grad.data();
                       const double* pg = ng->value.data();
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g + r * d;
                         const double* hr = xhat.data() + r * d;
                         if (gg)
                           for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * hr[i];
                         if (gb)
                           for (std::size_t i = 0; i < d; ++i) gb[i] += gr[i];
                         if (!gx) continue;
                         double m1 = 0, m2 = 0;
                         for (std::size_t i = 0; i < d; ++i) {
                           dh[i] = gr[i] * pg[i];
                           m1 += dh[i];
                           m2 += dh[i] * hr[i];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += inv_std[r] * (dh[i] - m1 - hr[i] * m2);
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape prefix) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be 2-D");
  if (numel_of(prefix) != ids.size()) throw std::invalid_argument("embedding: prefix/ids mismatch");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const double* pt = table.data().data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) throw std::out_of_range("embedding id out of range");
    std::copy_n(pt + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  prefix.push_back(d);
  Node* nt = table.node();
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result(std::move(prefix), std::move(out), {table}, [nt, d, id_copy = std::move(id_copy)](Node& self) {
    double* gt = grad_of(nt);
    if (!gt) return;
    for (std::size_t t = 0; t < id_copy.size(); ++t) {
      double* dst = gt + static_cast<std::size_t>(id_copy[t]) * d;
      const double* src = self.grad.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> probs(n * c, 0.0);
  std::size_t active = 0;
  double loss = 0;
  const double* pl = logits.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= c) throw std::out_of_range("cross_entropy target out of range");
    ++active;
    const double* row = pl + r * c;
    double mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t i = 0; i < c; ++i) s += std::exp(row[i] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t i = 0; i < c; ++i) probs[r * c + i] = std::exp(row[i] - lse);
    loss += lse - row[targets[r]];
  }
  if (active > 0) loss /= static_cast<double>(active);
  Node* nl = logits.node();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({}, {loss}, {logits}, [nl, n, c, active, tg = std::move(tg), probs = std::move(probs)](Node& self) {
    double* gl = grad_of(nl);
    if (!gl || active == 0) return;
    const double g = self.grad[0] / static_cast<double>(active);
    for (std::size_t r = 0; r < n; ++r) {
      if (tg[r] < 0) continue;
      for (std::size_t i = 0; i < c; ++i) gl[r * c + i] += g * probs[r * c + i];
      gl[r * c + static_cast<std::size_t>(tg[r])] -= g;
    }
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.numel());
  for (double& v : m) v = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor::constant(x.shape(), std::move(m)));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const unsigned char> key_valid, Tensor* probs) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw std::invalid_argument("attention: expects [B,T,d]");
  const std::size_t B = q.dim(0), Tq = q.dim(1), d = q.dim(2), Tk = k.dim(1);
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != d || v.dim(2) != d || v.dim(1) != Tk)
    throw std::invalid_argument("attention: shape mismatch");
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("attention: d not divisible by heads");
  if (!key_valid.empty() && key_valid.size() != B * Tk) throw std::invalid_argument("attention: key mask size");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(B * Tq * d);
  std::vector<double> P(B * heads * Tq * Tk);
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      StrideConstMap Q(pq + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
      StrideConstMap K(pk + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
      StrideConstMap V(pv + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
      MapMat S(P.data() + (b * heads + h) * Tq * Tk, Tq, Tk);
      S.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < Tq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Tk; ++j)
          if (key_valid.empty() || key_valid[b * Tk + j]) mx = std::max(mx, S(i, j));
        double s = 0;
        for (std::size_t j = 0; j < Tk; ++j) {
          const double e = (key_valid.empty() || key_valid[b * Tk + j]) ? std::exp(S(i, j) - mx) : 0.0;
          S(i, j) = e;
          s += e;
        }
        S.row(i) /= s;
      }
      StrideMap O(out.data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
      O.noalias() = S * V;
    }
  if (probs) *probs = Tensor::constant({B, heads, Tq, Tk}, P);
  Node* nq = q.node();
  Node* nk = k.node();
  Node* nv = v.node();
  return make_result({B, Tq, d}, std::move(out), {q, k, v},
                     [nq, nk, nv, B, Tq, Tk, d, dh, heads, sc, P = std::move(P)](Node& self) {
                       double* gq = grad_of(nq);
                       double* gk = grad_of(nk);
                       double* gv = grad_of(nv);
                       RowMat dP(Tq, Tk);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t h = 0; h < heads; ++h) {
                           const std::size_t qo = b * Tq * d + h * dh, ko = b * Tk * d + h * dh;
                           MapConstMat Pm(P.data() + (b * heads + h) * Tq * Tk, Tq, Tk);
                           StrideConstMap dO(self.grad.data() + qo, Tq, dh, Eigen::OuterStride<>(d));
                           StrideConstMap Q(nq->value.data() + qo, Tq, dh, Eigen::OuterStride<>(d));
                           StrideConstMap K(nk->value.data() + ko, Tk, dh, Eigen::OuterStride<>(d));
                           StrideConstMap V(nv->value.data() + ko, Tk, dh, Eigen::OuterStride<>(d));
                           if (gv) StrideMap(gv + ko, Tk, dh, Eigen::OuterStride<>(d)).noalias() += Pm.transpose() * dO;
                           if (!gq && !gk) continue;
                           dP.noalias() = dO * V.transpose();
                           for (std::size_t i = 0; i < Tq; ++i) {
                             const double dot = dP.row(i).dot(Pm.row(i));
                             for (std::size_t j = 0; j < Tk; ++j) dP(i, j) = Pm(i, j) * (dP(i, j) - dot) * sc;
                           }
                           if (gq) StrideMap(gq + qo, Tq, dh, Eigen::OuterStride<>(d)).noalias() += dP * K;
                           if (gk) StrideMap(gk + ko, Tk, dh, Eigen::OuterStride<>(d)).noalias() += dP.transpose() * Q;
                         }
                     });
}

Tensor unfold2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4 || k % 2 == 0) throw std::invalid_argument("unfold2d: expects [B,h,w,c] and odd kernel");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const long r = static_cast<long>(k / 2);
  const std::size_t kc = k * k * C;
  // src index per output slot; npos for zero padding
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> src(B * H * W * kc, npos);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t di = 0; di < k; ++di)
          for (std::size_t dj = 0; dj < k; ++dj) {
            const long si = static_cast<long>(i + di) - r, sj = static_cast<long>(j + dj) - r;
            if (si < 0 || sj < 0 || si >= static_cast<long>(H) || sj >= static_cast<long>(W)) continue;
            const std::size_t base = ((b * H + i) * W + j) * kc + (di * k + dj) * C;
            const std::size_t sbase = ((b * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj)) * C;
            for (std::size_t c = 0; c < C; ++c) src[base + c] = sbase + c;
          }
  std::vector<double> out(src.size(), 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < src.size(); ++o)
    if (src[o] != npos) out[o] = px[src[o]];
  Node* nx = x.node();
  return make_result({B, H, W, kc}, std::move(out), {x}, [nx, src = std::move(src)](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o)
      if (src[o] != npos) gx[src[o]] += self.grad[o];
  });
}

Tensor patchify(const Tensor& x, std::size_t p) {
  if (x.rank() != 4 || p == 0 || x.dim(1) % p != 0 || x.dim(2) % p != 0)
    throw std::invalid_argument("patchify: raster " + shape_str(x.shape()) + " not divisible by " + std::to_string(p));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t h = H / p, w = W / p, pc = p * p * C;
  std::vector<std::size_t> src(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t I = 0; I < h; ++I)
      for (std::size_t J = 0; J < w; ++J)
        for (std::size_t di = 0; di < p; ++di)
          for (std::size_t dj = 0; dj < p; ++dj)
            for (std::size_t c = 0; c < C; ++c)
              src[((b * h + I) * w + J) * pc + (di * p + dj) * C + c] =
                  ((b * H + I * p + di) * W + J * p + dj) * C + c;
  std::vector<double> out(src.size());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = px[src[o]];
  Node* nx = x.node();
  return make_result({B, h, w, pc}, std::move(out), {x}, [nx, src = std::move(src)](Node& self) {
    double* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
  });
}

Tensor capsule_votes(const Tensor& poses, const Tensor& transforms) {
  if (poses.rank() != 4 || transforms.rank() != 4) throw std::invalid_argument("capsule_votes: rank");
  const std::size_t N = poses.dim(0), Cin = poses.dim(1), K = poses.dim(2);
  const std::size_t Cout = transforms.dim(1);
  if (poses.dim(3) != K || transforms.dim(0) != Cin || transforms.dim(2) != K || transforms.dim(3) != K)
    throw std::invalid_argument("capsule_votes: shape mismatch " + shape_str(poses.shape()) + " x " +
                                shape_str(transforms.shape()));
  const std::size_t KK = K * K;
  std::vector<double> out(N * Cin * Cout * KK, 0.0);
  const double* pp = poses.data().data();
  const double* pw = transforms.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < Cin; ++i) {
      const double* P = pp + (n * Cin + i) * KK;
      for (std::size_t j = 0; j < Cout; ++j) {
        const double* Wm = pw + (i * Cout + j) * KK;
        double* O = out.data() + ((n * Cin + i) * Cout + j) * KK;
        for (std::size_t r = 0; r < K; ++r)
          for (std::size_t t = 0; t < K; ++t) {
            const double pr = P[r * K + t];
            for (std::size_t c = 0; c < K; ++c) O[r * K + c] += pr * Wm[t * K + c];
          }
      }
    }
  Node* np = poses.node();
  Node* nw = transforms.node();
  return make_result({N, Cin, Cout, KK}, std::move(out), {poses, transforms},
                     [np, nw, N, Cin, Cout, K, KK](Node& self) {
                       double* gp = grad_of(np);
                       double* gw = grad_of(nw);
                       const double* pp = np->value.data();
                       const double* pw = nw->value.data();
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t i = 0; i < Cin; ++i) {
                           const double* P = pp + (n * Cin + i) * KK;
                           for (std::size_t j = 0; j < Cout; ++j) {
                             const double* Wm = pw + (i * Cout + j) * KK;
                             const double* G = self.grad.data() + ((n * Cin + i) * Cout + j) * KK;
                             for (std::size_t r = 0; r < K; ++r)
                               for (std::size_t t = 0; t < K; ++t)
                                 for (std::size_t c = 0; c < K; ++c) {
                                   const double g = G[r * K + c];
                                   if (gp) gp[(n * Cin + i) * KK + r * K + t] += g * Wm[t * K + c];
                                   if (gw) gw[(i * Cout + j) * KK + t * K + c] += g * P[r * K + t];
                                 }
                           }
                         }
                     });
}

}  // namespace capsvl::ag
