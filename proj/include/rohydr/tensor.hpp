#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rohydr {

using Shape = std::vector<std::size_t>;

// Raised when a caller breaks a documented precondition (shapes, ranges).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Raised when an operand lies outside an operation's mathematical domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Dense row-major array of doubles taking part in reverse-mode
/// differentiation. Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value,
                     bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->is_leaf; }

  // Accumulated gradient; all zeros when nothing reached this tensor.
  std::vector<double> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  // Value copy cut off from the graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed differentiable operations for the current
/// thread. Backward traverses the record in reverse execution order.
class Graph {
 public:
  using Rule = std::function<void(const TensorImpl& out)>;

  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    Rule rule;
  };

  static Graph& current();

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  // Runs the recorded rules from `loss` backwards. Leaf gradients
  // accumulate across calls; intermediate gradients are reset first.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
};

// Clears the current thread's graph on scope exit.
class GraphScope {
 public:
  GraphScope() = default;
  ~GraphScope() { Graph::current().clear(); }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool enabled();

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// ---- elementwise --------------------------------------------------------

enum class BinaryOp { kAdd, kSub, kMul, kDiv, kPow };
enum class UnaryOp { kExp, kLog, kSqrt, kNeg, kSigmoid, kTanh, kRelu };

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(BinaryOp op, const Tensor& a, double b);
Tensor elementwise(UnaryOp op, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

// Gradient passes through where lo <= a <= hi and is zero elsewhere.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator/(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator-(const Tensor& a);

// ---- linear algebra -----------------------------------------------------

// a: [..., m, k]. b: [k, n] (shared across leading dims) or [..., k, n]
// with leading dims equal to a's.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swaps the last two axes.
Tensor transpose(const Tensor& a);

// ---- reductions ---------------------------------------------------------

enum class ReduceOp { kSum, kMean, kMax };
inline constexpr int kAllAxes = -1;

// Removes the reduced axis; reducing everything yields shape {1}.
// kMax routes the gradient to the first maximal entry.
Tensor reduce(ReduceOp op, const Tensor& a, int axis = kAllAxes);
Tensor sum(const Tensor& a, int axis = kAllAxes);
Tensor mean(const Tensor& a, int axis = kAllAxes);
Tensor max(const Tensor& a, int axis = kAllAxes);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, int axis);

// Normalises the last axis to zero mean, unit variance (no affine).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);

// ---- shape manipulation (all copy) -------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length);
// Rows of `a` (axis 0) at `indices`, in order.
Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices);
// Copy of `base` whose axis-0 rows at `indices` are replaced by `rows`.
Tensor merge_rows(const Tensor& base, const std::vector<std::size_t>& indices,
                  const Tensor& rows);

}  // namespace rohydr
