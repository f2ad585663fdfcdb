#include "rohydr/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace rohydr {

namespace {

thread_local bool t_no_grad = false;

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor finish(Shape shape, std::vector<double> data,
              std::vector<ImplPtr> inputs, Graph::Rule rule) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  if (!t_no_grad) {
    for (const auto& in : inputs) track = track || in->requires_grad;
  }
  if (track) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    Graph::current().record({std::move(inputs), impl, std::move(rule)});
  }
  return Tensor(impl);
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw ContractViolation(std::string(op) + ": undefined tensor");
  }
}

// Maps flat indices of a broadcast result back into one operand. Most
// broadcasts in practice are "same shape", "scalar" or "operand is a suffix
// of the result" (biases), which get dedicated loops; anything else falls
// back to an explicit gather table.
struct BIndex {
  enum class Kind { kSame, kScalar, kCyclic, kGather };
  Kind kind = Kind::kSame;
  std::size_t period = 1;        // kCyclic
  std::vector<std::size_t> idx;  // kGather

  std::size_t at(std::size_t i) const {
    switch (kind) {
      case Kind::kSame: return i;
      case Kind::kScalar: return 0;
      case Kind::kCyclic: return i % period;
      case Kind::kGather: return idx[i];
    }
    return i;
  }
};

BIndex broadcast_index(const Shape& in, const Shape& out) {
  BIndex b;
  const std::size_t n = shape_numel(out);
  const std::size_t n_in = shape_numel(in);
  if (n_in == n) return b;  // same data layout, possibly with extra unit axes
  if (n_in == 1) {
    b.kind = BIndex::Kind::kScalar;
    return b;
  }
  Shape stripped = in;
  while (!stripped.empty() && stripped.front() == 1) {
    stripped.erase(stripped.begin());
  }
  if (stripped.size() <= out.size() &&
      std::equal(stripped.begin(), stripped.end(),
                 out.end() - static_cast<std::ptrdiff_t>(stripped.size()))) {
    b.kind = BIndex::Kind::kCyclic;
    b.period = n_in;
    return b;
  }

  b.kind = BIndex::Kind::kGather;
  b.idx.resize(n);
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = rank - 1 - k;
    in_stride[axis_out] = in[axis_in] == 1 ? 0 : s;
    s *= in[axis_in];
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    b.idx[i] = pos;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      pos += in_stride[ax];
      if (counter[ax] < out[ax]) break;
      pos -= in_stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return b;
}

// Calls f(i, j, k) for every output index i with operand indices j and k.
template <class F>
void broadcast_loop(const BIndex& ia, const BIndex& ib, std::size_t n, F&& f) {
  using K = BIndex::Kind;
  if (ia.kind == K::kSame && ib.kind == K::kSame) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (ia.kind == K::kSame && ib.kind == K::kScalar) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
  } else if (ia.kind == K::kScalar && ib.kind == K::kSame) {
    for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
  } else if (ia.kind == K::kSame && ib.kind == K::kCyclic) {
    const std::size_t p = ib.period;
    for (std::size_t o = 0; o < n; o += p) {
      for (std::size_t j = 0; j < p; ++j) f(o + j, o + j, j);
    }
  } else if (ia.kind == K::kCyclic && ib.kind == K::kSame) {
    const std::size_t p = ia.period;
    for (std::size_t o = 0; o < n; o += p) {
      for (std::size_t j = 0; j < p; ++j) f(o + j, j, o + j);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) f(i, ia.at(i), ib.at(i));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  for (auto e : shape) require(e > 0, "tensor extents must be positive");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(shape_numel(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values,
                    bool requires_grad) {
  for (auto e : shape) require(e > 0, "tensor extents must be positive");
  if (shape_numel(shape) != values.size()) {
    throw ContractViolation("shape " + shape_str(shape) + " does not hold " +
                            std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

// ---- Graph --------------------------------------------------------------

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

void Graph::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractViolation("backward: loss must be scalar, got " +
                            shape_str(loss.shape()));
  }
  if (loss.is_leaf() || nodes_.empty()) {
    throw ContractViolation("backward: loss is not the output of a graph");
  }
  for (auto& node : nodes_) node.output->grad.clear();
  loss.impl()->grad_buffer()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->rule(*it->output);
  }
}

void backward(const Tensor& loss) { Graph::current().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }
NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }
bool NoGradGuard::enabled() { return t_no_grad; }

// ---- elementwise --------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ContractViolation("cannot broadcast " + shape_str(a) + " with " +
                              shape_str(b));
    }
    out[rank - 1 - k] = std::max(ea, eb);
  }
  return out;
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  require_defined(a, "elementwise");
  require_defined(b, "elementwise");
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  auto ia = broadcast_index(a.shape(), out_shape);
  auto ib = broadcast_index(b.shape(), out_shape);
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  std::vector<double> out(n);

  switch (op) {
    case BinaryOp::kAdd:
      broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
        out[i] = av[j] + bv[k];
      });
      break;
    case BinaryOp::kSub:
      broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
        out[i] = av[j] - bv[k];
      });
      break;
    case BinaryOp::kMul:
      broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
        out[i] = av[j] * bv[k];
      });
      break;
    case BinaryOp::kDiv:
      for (double d : bv) {
        if (d == 0.0) throw DomainError("div: division by zero");
      }
      broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
        out[i] = av[j] / bv[k];
      });
      break;
    case BinaryOp::kPow:
      if (b.requires_grad()) {
        for (double x : av) {
          if (x <= 0.0) {
            throw DomainError("pow: differentiable exponent needs base > 0");
          }
        }
      }
      broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
        out[i] = std::pow(av[j], bv[k]);
      });
      break;
  }

  auto pa = a.impl();
  auto pb = b.impl();
  std::vector<double> saved = (op == BinaryOp::kPow) ? out : std::vector<double>{};
  return finish(
      std::move(out_shape), std::move(out), {pa, pb},
      [op, pa, pb, ia = std::move(ia), ib = std::move(ib),
       saved = std::move(saved)](const TensorImpl& o) {
        const auto& g = o.grad;
        const std::size_t n = g.size();
        const auto& av = pa->data;
        const auto& bv = pb->data;
        if (pa->requires_grad) {
          double* ga = pa->grad_buffer().data();
          switch (op) {
            case BinaryOp::kAdd:
            case BinaryOp::kSub:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t) {
                ga[j] += g[i];
              });
              break;
            case BinaryOp::kMul:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                ga[j] += g[i] * bv[k];
              });
              break;
            case BinaryOp::kDiv:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                ga[j] += g[i] / bv[k];
              });
              break;
            case BinaryOp::kPow:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                ga[j] += g[i] * bv[k] * std::pow(av[j], bv[k] - 1.0);
              });
              break;
          }
        }
        if (pb->requires_grad) {
          double* gb = pb->grad_buffer().data();
          switch (op) {
            case BinaryOp::kAdd:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t, std::size_t k) {
                gb[k] += g[i];
              });
              break;
            case BinaryOp::kSub:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t, std::size_t k) {
                gb[k] -= g[i];
              });
              break;
            case BinaryOp::kMul:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                gb[k] += g[i] * av[j];
              });
              break;
            case BinaryOp::kDiv:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                gb[k] -= g[i] * av[j] / (bv[k] * bv[k]);
              });
              break;
            case BinaryOp::kPow:
              broadcast_loop(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                gb[k] += g[i] * saved[i] * std::log(av[j]);
              });
              break;
          }
        }
      });
}

Tensor elementwise(BinaryOp op, const Tensor& a, double b) {
  return elementwise(op, a, Tensor::scalar(b));
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  require_defined(a, "elementwise");
  const auto& av = a.impl()->data;
  const std::size_t n = av.size();
  std::vector<double> out(n);
  switch (op) {
    case UnaryOp::kExp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      break;
    case UnaryOp::kLog:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(av[i] > 0.0)) throw DomainError("log: operand must be positive");
        out[i] = std::log(av[i]);
      }
      break;
    case UnaryOp::kSqrt:
      for (std::size_t i = 0; i < n; ++i) {
        if (av[i] < 0.0) throw DomainError("sqrt: negative operand");
        out[i] = std::sqrt(av[i]);
      }
      break;
    case UnaryOp::kNeg:
      for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
      break;
    case UnaryOp::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_value(av[i]);
      break;
    case UnaryOp::kTanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(av[i]);
      break;
    case UnaryOp::kRelu:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
  }
  auto pa = a.impl();
  const bool keep_out = op == UnaryOp::kExp || op == UnaryOp::kSqrt ||
                        op == UnaryOp::kSigmoid || op == UnaryOp::kTanh;
  std::vector<double> saved = keep_out ? out : std::vector<double>{};
  return finish(a.shape(), std::move(out), {pa},
                [op, pa, saved = std::move(saved)](const TensorImpl& o) {
                  const auto& g = o.grad;
                  const auto& x = pa->data;
                  auto& ga = pa->grad_buffer();
                  const std::size_t n = g.size();
                  switch (op) {
                    case UnaryOp::kExp:
                      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * saved[i];
                      break;
                    case UnaryOp::kLog:
                      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
                      break;
                    case UnaryOp::kSqrt:
                      for (std::size_t i = 0; i < n; ++i) {
                        ga[i] += g[i] * 0.5 / saved[i];
                      }
                      break;
                    case UnaryOp::kNeg:
                      for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
                      break;
                    case UnaryOp::kSigmoid:
                      for (std::size_t i = 0; i < n; ++i) {
                        ga[i] += g[i] * saved[i] * (1.0 - saved[i]);
                      }
                      break;
                    case UnaryOp::kTanh:
                      for (std::size_t i = 0; i < n; ++i) {
                        ga[i] += g[i] * (1.0 - saved[i] * saved[i]);
                      }
                      break;
                    case UnaryOp::kRelu:
                      for (std::size_t i = 0; i < n; ++i) {
                        if (x[i] > 0.0) ga[i] += g[i];
                      }
                      break;
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kDiv, a, b); }
Tensor pow(const Tensor& a, double exponent) {
  return elementwise(BinaryOp::kPow, a, exponent);
}
Tensor exp(const Tensor& a) { return elementwise(UnaryOp::kExp, a); }
Tensor log(const Tensor& a) { return elementwise(UnaryOp::kLog, a); }
Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::kSqrt, a); }
Tensor neg(const Tensor& a) { return elementwise(UnaryOp::kNeg, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::kSigmoid, a); }
Tensor tanh(const Tensor& a) { return elementwise(UnaryOp::kTanh, a); }
Tensor relu(const Tensor& a) { return elementwise(UnaryOp::kRelu, a); }

Tensor clamp(const Tensor& a, double lo, double hi) {
  require_defined(a, "clamp");
  require(lo <= hi, "clamp: lo > hi");
  std::vector<double> out(a.numel());
  const auto& av = a.impl()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  auto pa = a.impl();
  return finish(a.shape(), std::move(out), {pa}, [pa, lo, hi](const TensorImpl& o) {
    auto& ga = pa->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = pa->data[i];
      if (x >= lo && x <= hi) ga[i] += o.grad[i];
    }
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return elementwise(BinaryOp::kAdd, a, b); }
Tensor operator-(const Tensor& a, double b) { return elementwise(BinaryOp::kSub, a, b); }
Tensor operator*(const Tensor& a, double b) { return elementwise(BinaryOp::kMul, a, b); }
Tensor operator/(const Tensor& a, double b) { return elementwise(BinaryOp::kDiv, a, b); }
Tensor operator*(double a, const Tensor& b) { return elementwise(BinaryOp::kMul, b, a); }
Tensor operator-(double a, const Tensor& b) { return neg(b) + a; }
Tensor operator-(const Tensor& a) { return neg(a); }

// ---- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands need rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  if (k != kb) {
    throw ContractViolation("matmul: inner extents differ " +
                            shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::size_t batch = 1;
  std::size_t rows = m;
  bool shared_b = b.rank() == 2;
  if (shared_b) {
    rows = a.numel() / k;  // fold leading dims into rows
  } else {
    require(a.rank() == b.rank() &&
                std::equal(a.shape().begin(), a.shape().end() - 2,
                           b.shape().begin()),
            "matmul: batched operands need identical leading dims");
    batch = a.numel() / (m * k);
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(batch * rows * n, 0.0);
  const double* A = a.impl()->data.data();
  const double* B = b.impl()->data.data();
  const int M = static_cast<int>(rows), K = static_cast<int>(k), N = static_cast<int>(n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0, A + bi * rows * k, K,
                B + (shared_b ? 0 : bi * k * n), N, 0.0, out.data() + bi * rows * n, N);
  }
  auto pa = a.impl();
  auto pb = b.impl();
  return finish(std::move(out_shape), std::move(out), {pa, pb},
                [pa, pb, batch, M, K, N, shared_b](const TensorImpl& o) {
                  const double* G = o.grad.data();
                  const double* A = pa->data.data();
                  const double* B = pb->data.data();
                  double* GA = pa->requires_grad ? pa->grad_buffer().data() : nullptr;
                  double* GB = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
                  const std::size_t mk = static_cast<std::size_t>(M) * K;
                  const std::size_t kn = static_cast<std::size_t>(K) * N;
                  const std::size_t mn = static_cast<std::size_t>(M) * N;
                  for (std::size_t bi = 0; bi < batch; ++bi) {
                    const std::size_t boff = shared_b ? 0 : bi * kn;
                    if (GA) {  // dA += dC B^T
                      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, K, N, 1.0,
                                  G + bi * mn, N, B + boff, N, 1.0, GA + bi * mk, K);
                    }
                    if (GB) {  // dB += A^T dC
                      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, N, M, 1.0,
                                  A + bi * mk, K, G + bi * mn, N, 1.0, GB + boff, N);
                    }
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require(a.rank() >= 2, "transpose: rank must be >= 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

// ---- reductions ---------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& a, int axis) {
  require_defined(a, "reduce");
  if (axis != kAllAxes && (axis < 0 || static_cast<std::size_t>(axis) >= a.rank())) {
    throw ContractViolation("reduce: invalid axis " + std::to_string(axis) +
                            " for shape " + shape_str(a.shape()));
  }
  AxisSplit s;
  Shape out_shape;
  if (axis == kAllAxes) {
    s.extent = a.numel();
    out_shape = {1};
  } else {
    s = split_axis(a.shape(), static_cast<std::size_t>(axis));
    out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
  }
  const auto& x = a.impl()->data;
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::kMax) argmax.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double acc = op == ReduceOp::kMax ? x[base] : 0.0;
      std::size_t best = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = x[base + e * s.inner];
        if (op == ReduceOp::kMax) {
          if (v > acc) {
            acc = v;
            best = e;
          }
        } else {
          acc += v;
        }
      }
      if (op == ReduceOp::kMean) acc /= static_cast<double>(s.extent);
      out[o * s.inner + in] = acc;
      if (op == ReduceOp::kMax) argmax[o * s.inner + in] = best;
    }
  }
  auto pa = a.impl();
  return finish(std::move(out_shape), std::move(out), {pa},
                [op, pa, s, argmax = std::move(argmax)](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  const double scale =
                      op == ReduceOp::kMean ? 1.0 / static_cast<double>(s.extent) : 1.0;
                  for (std::size_t oo = 0; oo < s.outer; ++oo) {
                    for (std::size_t in = 0; in < s.inner; ++in) {
                      const std::size_t r = oo * s.inner + in;
                      const std::size_t base = oo * s.extent * s.inner + in;
                      const double g = o.grad[r];
                      if (op == ReduceOp::kMax) {
                        ga[base + argmax[r] * s.inner] += g;
                      } else {
                        for (std::size_t e = 0; e < s.extent; ++e) {
                          ga[base + e * s.inner] += g * scale;
                        }
                      }
                    }
                  }
                });
}

Tensor sum(const Tensor& a, int axis) { return reduce(ReduceOp::kSum, a, axis); }
Tensor mean(const Tensor& a, int axis) { return reduce(ReduceOp::kMean, a, axis); }
Tensor max(const Tensor& a, int axis) { return reduce(ReduceOp::kMax, a, axis); }

Tensor softmax(const Tensor& a, int axis) {
  require_defined(a, "softmax");
  if (axis < 0 || static_cast<std::size_t>(axis) >= a.rank()) {
    throw ContractViolation("softmax: invalid axis");
  }
  const auto s = split_axis(a.shape(), static_cast<std::size_t>(axis));
  const auto& x = a.impl()->data;
  for (double v : x) {
    if (std::isnan(v)) throw DomainError("softmax: NaN input");
  }
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(x[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  auto pa = a.impl();
  std::vector<double> saved = out;
  return finish(a.shape(), std::move(out), {pa},
                [pa, s, y = std::move(saved)](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  const auto& g = o.grad;
                  for (std::size_t oo = 0; oo < s.outer; ++oo) {
                    for (std::size_t in = 0; in < s.inner; ++in) {
                      const std::size_t base = oo * s.extent * s.inner + in;
                      double dot = 0.0;
                      for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t i = base + e * s.inner;
                        dot += g[i] * y[i];
                      }
                      for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t i = base + e * s.inner;
                        ga[i] += y[i] * (g[i] - dot);
                      }
                    }
                  }
                });
}

Tensor layer_norm(const Tensor& a, double eps) {
  require_defined(a, "layer_norm");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  const auto& x = a.impl()->data;
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * is;
  }
  auto pa = a.impl();
  std::vector<double> y = out;
  return finish(a.shape(), std::move(out), {pa},
                [pa, d, rows, y = std::move(y),
                 inv_std = std::move(inv_std)](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  const auto& g = o.grad;
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double gm = 0.0;
                    double gy = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      gm += g[r * d + j];
                      gy += g[r * d + j] * y[r * d + j];
                    }
                    gm *= inv_d;
                    gy *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                      const std::size_t i = r * d + j;
                      ga[i] += inv_std[r] * (g[i] - gm - y[i] * gy);
                    }
                  }
                });
}

// ---- shape manipulation -------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ContractViolation("reshape: " + shape_str(a.shape()) + " -> " +
                            shape_str(shape));
  }
  auto pa = a.impl();
  return finish(shape, a.impl()->data, {pa}, [pa](const TensorImpl& o) {
    auto& ga = pa->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "permute");
  const std::size_t rank = a.rank();
  require(axes.size() == rank, "permute: axis count mismatch");
  std::vector<bool> seen(rank, false);
  for (auto ax : axes) {
    require(ax < rank && !seen[ax], "permute: axes must be a permutation");
    seen[ax] = true;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(rank);
  std::vector<std::size_t> in_stride(rank);
  std::size_t s = 1;
  for (std::size_t k = rank; k-- > 0;) {
    in_stride[k] = s;
    s *= in_shape[k];
  }
  std::vector<std::size_t> stride(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    out_shape[k] = in_shape[axes[k]];
    stride[k] = in_stride[axes[k]];
  }
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = pos;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      pos += stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      pos -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  const auto& x = a.impl()->data;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[src[i]];
  auto pa = a.impl();
  return finish(std::move(out_shape), std::move(out), {pa},
                [pa, src = std::move(src)](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += o.grad[i];
                });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: invalid axis");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& sh = p.shape();
    bool ok = sh.size() == first.size();
    for (std::size_t k = 0; ok && k < sh.size(); ++k) {
      if (k != axis && sh[k] != first[k]) ok = false;
    }
    if (!ok) {
      throw ContractViolation("concat: incompatible shapes " + shape_str(first) +
                              " and " + shape_str(sh));
    }
    extents.push_back(sh[axis]);
    out_shape[axis] += sh[axis];
  }
  const auto s = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<ImplPtr> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& x = parts[p].impl()->data;
    const std::size_t chunk = extents[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + offset));
    }
    offset += chunk;
    inputs.push_back(parts[p].impl());
  }
  auto captured = inputs;
  return finish(std::move(out_shape), std::move(out), std::move(inputs),
                [captured, extents, s](const TensorImpl& o) {
                  std::size_t offset = 0;
                  for (std::size_t p = 0; p < captured.size(); ++p) {
                    const std::size_t chunk = extents[p] * s.inner;
                    if (captured[p]->requires_grad) {
                      auto& g = captured[p]->grad_buffer();
                      for (std::size_t oo = 0; oo < s.outer; ++oo) {
                        const double* src = o.grad.data() + oo * s.extent * s.inner + offset;
                        double* dst = g.data() + oo * chunk;
                        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                      }
                    }
                    offset += chunk;
                  }
                });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length) {
  require_defined(a, "slice");
  require(axis < a.rank(), "slice: invalid axis");
  require(length > 0 && start + length <= a.dim(axis),
          "slice: range out of bounds for " + shape_str(a.shape()));
  const auto s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  const auto& x = a.impl()->data;
  std::vector<double> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + start * s.inner),
                chunk, out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  auto pa = a.impl();
  return finish(std::move(out_shape), std::move(out), {pa},
                [pa, s, start, chunk](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  for (std::size_t oo = 0; oo < s.outer; ++oo) {
                    double* dst = ga.data() + oo * s.extent * s.inner + start * s.inner;
                    const double* src = o.grad.data() + oo * chunk;
                    for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                  }
                });
}

Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices) {
  require_defined(a, "index_select");
  require(!indices.empty(), "index_select: empty index list");
  const std::size_t rows = a.dim(0);
  const std::size_t row = a.numel() / rows;
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * row);
  const auto& x = a.impl()->data;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    require(indices[r] < rows, "index_select: index out of range");
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(indices[r] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  auto pa = a.impl();
  return finish(std::move(out_shape), std::move(out), {pa},
                [pa, indices, row](const TensorImpl& o) {
                  auto& ga = pa->grad_buffer();
                  for (std::size_t r = 0; r < indices.size(); ++r) {
                    for (std::size_t j = 0; j < row; ++j) {
                      ga[indices[r] * row + j] += o.grad[r * row + j];
                    }
                  }
                });
}

Tensor merge_rows(const Tensor& base, const std::vector<std::size_t>& indices,
                  const Tensor& rows) {
  require_defined(base, "merge_rows");
  if (indices.empty()) return base;
  require_defined(rows, "merge_rows");
  const std::size_t n = base.dim(0);
  const std::size_t row = base.numel() / n;
  require(rows.dim(0) == indices.size() && rows.numel() == indices.size() * row,
          "merge_rows: replacement rows do not match base row shape");
  std::vector<std::ptrdiff_t> source(n, -1);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    require(indices[r] < n, "merge_rows: index out of range");
    require(source[indices[r]] < 0, "merge_rows: duplicate index");
    source[indices[r]] = static_cast<std::ptrdiff_t>(r);
  }
  std::vector<double> out = base.impl()->data;
  const auto& rv = rows.impl()->data;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(rv.begin() + static_cast<std::ptrdiff_t>(r * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(indices[r] * row));
  }
  auto pb = base.impl();
  auto pr = rows.impl();
  return finish(base.shape(), std::move(out), {pb, pr},
                [pb, pr, source = std::move(source), row](const TensorImpl& o) {
                  for (std::size_t i = 0; i < source.size(); ++i) {
                    const double* g = o.grad.data() + i * row;
                    if (source[i] < 0) {
                      if (!pb->requires_grad) continue;
                      double* dst = pb->grad_buffer().data() + i * row;
                      for (std::size_t j = 0; j < row; ++j) dst[j] += g[j];
                    } else if (pr->requires_grad) {
                      double* dst = pr->grad_buffer().data() +
                                    static_cast<std::size_t>(source[i]) * row;
                      for (std::size_t j = 0; j < row; ++j) dst[j] += g[j];
                    }
                  }
                });
}

}  // namespace rohydr
