#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op records a closure that scatters the output
// gradient into its inputs; Tensor::backward() replays them in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace capsvl::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  /// Leaf that accumulates gradients; used for model parameters.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  /// Seeds d(self)/d(self) = 1; self must be a scalar.
  void backward() const;

  /// Value copy without history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording in its scope (eval-mode forward passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS, so repeated training steps reuse pages. No-op outside glibc.
void retain_freed_memory();

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);
/// max(x, lo); gradient passes only where x > lo.
Tensor clamp_min(const Tensor& x, double lo);

Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// Broadcasts x to `shape` (explicit copy).
Tensor expand(const Tensor& x, const Shape& shape);

/// x[..., k] @ w[k, n] -> [..., n]
Tensor matmul(const Tensor& x, const Tensor& w);
/// Batched a[..., m, k] @ b[..., k, n] (or b^T when transpose_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);

/// Normalizes over the last axis, then applies gamma/beta of length d.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);

/// Rows of table[V, d] picked by ids; result shape = prefix + {d}.
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape prefix);

/// Mean softmax cross-entropy of logits[N, C] against targets; rows with
/// target < 0 are ignored. Returns 0 when no row is active.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

/// Multi-head scaled dot-product attention over q[B,Tq,d], k/v[B,Tk,d].
/// key_valid (optional, B*Tk entries) marks usable keys. Returns the
/// attended values [B,Tq,d]; the softmax probabilities [B,H,Tq,Tk] are
/// written to *probs when non-null (as a constant tensor).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const unsigned char> key_valid, Tensor* probs);

/// Same-padded k x k neighbourhood gather: x[B,h,w,c] -> [B,h,w,k*k*c].
Tensor unfold2d(const Tensor& x, std::size_t k);
/// Non-overlapping p x p patches: x[B,H,W,c] -> [B,H/p,W/p,p*p*c].
Tensor patchify(const Tensor& x, std::size_t p);

/// Capsule votes: poses[N,Cin,K,K] x transforms[Cin,Cout,K,K] -> [N,Cin,Cout,K*K],
/// vote(n,i,j) = pose(n,i) * transform(i,j).
Tensor capsule_votes(const Tensor& poses, const Tensor& transforms);

}  // namespace capsvl::ag
