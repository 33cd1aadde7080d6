#include "gridpaint/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <sstream>

namespace gridpaint {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw numeric_error(std::string(op) + ": non-finite output");
  }
}

template <typename T>
BasicTensor<T> new_tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw shape_error("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw shape_error("tensor dimensions must be positive: " + shape_str(shape));
  }
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = detail::next_tensor_id();
  return BasicTensor<T>(std::move(node));
}

template <typename T>
bool tracking(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (active_slot<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
BasicTensor<T> make_output(Shape shape, std::vector<T> data, bool tracked, const char* op) {
  check_finite(data, op);
  return new_tensor<T>(std::move(shape), std::move(data), tracked);
}

// Records `rule` on the active tape. The rule only runs when the output
// actually received a gradient.
template <typename T, typename Rule>
void record(std::initializer_list<const BasicTensor<T>*> inputs, const BasicTensor<T>& out,
            Rule rule) {
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const auto* t : inputs) ids.push_back(t->id());
  NodePtr<T> on = out.node();
  active_slot<T>()->record(std::move(ids), out.id(), [on, rule = std::move(rule)]() {
    if (on->grad.empty()) return;
    rule(on->grad);
  });
}

template <typename T>
std::vector<T>& grad_of(const NodePtr<T>& n) {
  n->ensure_grad();
  return n->grad;
}

void require(bool cond, const char* message) {
  if (!cond) throw shape_error(message);
}

std::size_t last_dim(const Shape& s) { return s.back(); }

// ---------------------------------------------------------------------------
// GEMM kernels (row-major, accumulate into C), backed by Eigen.

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  Map<T>(c, ix(m), ix(n)).noalias() += MapC<T>(a, ix(m), ix(k)) * MapC<T>(b, ix(k), ix(n));
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  Map<T>(c, ix(m), ix(n)).noalias() += MapC<T>(a, ix(m), ix(k)) * MapC<T>(b, ix(n), ix(k)).transpose();
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  Map<T>(c, ix(k), ix(n)).noalias() += MapC<T>(a, ix(m), ix(k)).transpose() * MapC<T>(b, ix(m), ix(n));
}

template <typename T>
T normal_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T normal_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  const bool tracked = tracking<T>({&x});
  std::vector<T> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  auto y = make_output<T>(x.shape(), std::move(out), tracked, name);
  if (tracked) {
    NodePtr<T> xn = x.node(), yn = y.node();
    record<T>({&x}, y, [xn, yn, deriv](const std::vector<T>& g) {
      auto& gx = grad_of(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xn->data[i], yn->data[i]);
    });
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return new_tensor<T>(std::move(shape), std::vector<T>(n, T(0)), false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return new_tensor<T>(std::move(shape), std::vector<T>(n, value), false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values) {
  return new_tensor<T>(std::move(shape), std::move(values), false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return new_tensor<T>(Shape{1}, std::vector<T>{value}, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::parameter(Shape shape, std::vector<T> values) {
  return new_tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw shape_error("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return new_tensor<T>(shape(), node_->data, false);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(std::vector<std::uint64_t> inputs, std::uint64_t output,
                     std::function<void()> backward) {
  entries_.push_back(Entry{std::move(inputs), output, std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw contract_error("backward() requires a scalar loss");
  }
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == loss.id(); });
  if (!on_tape && !loss.requires_grad()) {
    throw contract_error("backward(): loss was not produced on this tape");
  }
  grad_of(loss.node())[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_slot<T>() = previous_;
}

template <typename T>
Tape<T>* active_tape() {
  return active_slot<T>();
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw shape_error("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  const bool tracked = tracking<T>({&a, &b});
  std::vector<T> out(m * n, T(0));
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  auto y = make_output<T>(Shape{m, n}, std::move(out), tracked, "matmul");
  if (tracked) {
    NodePtr<T> an = a.node(), bn = b.node();
    record<T>({&a, &b}, y, [an, bn, m, n, k](const std::vector<T>& g) {
      if (an->requires_grad) gemm_nt(m, k, n, g.data(), bn->data.data(), grad_of(an).data());
      if (bn->requires_grad) gemm_tn(m, n, k, an->data.data(), g.data(), grad_of(bn).data());
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias) {
  require(w.rank() == 2, "linear weight must be rank 2");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (last_dim(x.shape()) != in) throw shape_error("linear input width " + shape_str(x.shape()) +
                                         " does not match weight " + shape_str(w.shape()));
  require(bias.numel() == out_dim, "linear bias width mismatch");
  const std::size_t rows = x.numel() / in;
  const bool tracked = tracking<T>({&x, &w, &bias});
  std::vector<T> out(rows * out_dim);
  const auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bs.begin(), bs.end(), out.begin() + r * out_dim);
  gemm_nn(rows, out_dim, in, x.data().data(), w.data().data(), out.data());
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto y = make_output<T>(std::move(shape), std::move(out), tracked, "linear");
  if (tracked) {
    NodePtr<T> xn = x.node(), wn = w.node(), bn = bias.node();
    record<T>({&x, &w, &bias}, y, [xn, wn, bn, rows, in, out_dim](const std::vector<T>& g) {
      if (xn->requires_grad) gemm_nt(rows, in, out_dim, g.data(), wn->data.data(), grad_of(xn).data());
      if (wn->requires_grad) gemm_tn(rows, out_dim, in, xn->data.data(), g.data(), grad_of(wn).data());
      if (bn->requires_grad) {
        auto& gb = grad_of(bn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_error("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const bool tracked = tracking<T>({&a, &b});
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto y = make_output<T>(a.shape(), std::move(out), tracked, "add");
  if (tracked) {
    NodePtr<T> an = a.node(), bn = b.node();
    record<T>({&a, &b}, y, [an, bn](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = grad_of(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "sub shape mismatch");
  const bool tracked = tracking<T>({&a, &b});
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto y = make_output<T>(a.shape(), std::move(out), tracked, "sub");
  if (tracked) {
    NodePtr<T> an = a.node(), bn = b.node();
    record<T>({&a, &b}, y, [an, bn](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = grad_of(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch");
  const bool tracked = tracking<T>({&a, &b});
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto y = make_output<T>(a.shape(), std::move(out), tracked, "mul");
  if (tracked) {
    NodePtr<T> an = a.node(), bn = b.node();
    record<T>({&a, &b}, y, [an, bn](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& gb = grad_of(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  return unary<T>(a, "scale", [factor](T x) { return x * factor; },
                  [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
  return unary<T>(a, "add_scalar", [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
  return unary<T>(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& a, const BasicTensor<T>& row) {
  const std::size_t width = last_dim(a.shape());
  require(row.numel() == width, "add_row_vector width mismatch");
  const bool tracked = tracking<T>({&a, &row});
  std::vector<T> out(a.data().begin(), a.data().end());
  const std::size_t rows = out.size() / width;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] += row.data()[j];
  auto y = make_output<T>(a.shape(), std::move(out), tracked, "add_row_vector");
  if (tracked) {
    NodePtr<T> an = a.node(), rn = row.node();
    record<T>({&a, &row}, y, [an, rn, rows, width](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (rn->requires_grad) {
        auto& gr = grad_of(rn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < width; ++j) gr[j] += g[r * width + j];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw shape_error("reshape " + shape_str(a.shape()) + " -> " +
                                               shape_str(shape) + " changes element count");
  const bool tracked = tracking<T>({&a});
  auto y = make_output<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
                          tracked, "reshape");
  if (tracked) {
    NodePtr<T> an = a.node();
    record<T>({&a}, y, [an](const std::vector<T>& g) {
      auto& ga = grad_of(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  const bool tracked = tracking<T>({&a});
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto y = make_output<T>(Shape{1}, std::vector<T>{static_cast<T>(acc)}, tracked, "sum");
  if (tracked) {
    NodePtr<T> an = a.node();
    record<T>({&a}, y, [an](const std::vector<T>& g) {
      auto& ga = grad_of(an);
      for (auto& v : ga) v += g[0];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  const bool tracked = tracking<T>({&a});
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  const std::size_t n = a.numel();
  auto y = make_output<T>(Shape{1}, std::vector<T>{static_cast<T>(acc / double(n))}, tracked,
                          "mean");
  if (tracked) {
    NodePtr<T> an = a.node();
    record<T>({&a}, y, [an, n](const std::vector<T>& g) {
      auto& ga = grad_of(an);
      const T s = g[0] / T(n);
      for (auto& v : ga) v += s;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalisation and activations

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw shape_error("softmax axis " + std::to_string(axis) + " out of range for " +
                               shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  const bool tracked = tracking<T>({&x});
  const auto xs = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xs[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xs[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto y = make_output<T>(x.shape(), std::move(out), tracked, "softmax");
  if (tracked) {
    NodePtr<T> xn = x.node(), yn = y.node();
    record<T>({&x}, y, [xn, yn, outer, inner, n](const std::vector<T>& g) {
      auto& gx = grad_of(xn);
      const auto& ys = yn->data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * ys[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += ys[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm eps must be positive");
  const std::size_t width = last_dim(x.shape());
  require(gain.numel() == width && bias.numel() == width, "layer_norm affine width mismatch");
  const std::size_t rows = x.numel() / width;
  const bool tracked = tracking<T>({&x, &gain, &bias});
  const auto xs = x.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= T(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(width);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * width + j] = h;
      out[r * width + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  auto y = make_output<T>(x.shape(), std::move(out), tracked, "layer_norm");
  if (tracked) {
    NodePtr<T> xn = x.node(), gn = gain.node(), bn = bias.node();
    record<T>({&x, &gain, &bias}, y,
              [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), rows,
               width](const std::vector<T>& g) {
                if (gn->requires_grad || bn->requires_grad) {
                  auto& gg = grad_of(gn);
                  auto& gb = grad_of(bn);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < width; ++j) {
                      gg[j] += g[r * width + j] * xhat[r * width + j];
                      gb[j] += g[r * width + j];
                    }
                }
                if (!xn->requires_grad) return;
                auto& gx = grad_of(xn);
                for (std::size_t r = 0; r < rows; ++r) {
                  T mean_d = 0, mean_dh = 0;
                  for (std::size_t j = 0; j < width; ++j) {
                    const T d = g[r * width + j] * gn->data[j];
                    mean_d += d;
                    mean_dh += d * xhat[r * width + j];
                  }
                  mean_d /= T(width);
                  mean_dh /= T(width);
                  for (std::size_t j = 0; j < width; ++j) {
                    const T d = g[r * width + j] * gn->data[j];
                    gx[r * width + j] += rstd[r] * (d - mean_d - xhat[r * width + j] * mean_dh);
                  }
                }
              });
  }
  return y;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  return unary<T>(x, "gelu", [](T v) { return v * normal_cdf(v); },
                  [](T v, T) { return normal_cdf(v) + v * normal_pdf(v); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary<T>(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary<T>(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> huber(const BasicTensor<T>& x) {
  return unary<T>(
      x, "huber", [](T v) { return std::abs(v) <= T(1) ? T(0.5) * v * v : std::abs(v) - T(0.5); },
      [](T v, T) {
        if (std::abs(v) <= T(1)) return v;
        return v > T(0) ? T(1) : T(-1);
      });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
  require(table.rank() == 2, "embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw index_error("embedding id " + std::to_string(id) + " outside [0, " +
                        std::to_string(vocab) + ")");
    }
  }
  const bool tracked = tracking<T>({&table});
  std::vector<T> out(ids.size() * width);
  const auto ts = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(ts.begin() + static_cast<std::size_t>(ids[i]) * width, width,
                out.begin() + i * width);
  auto y = make_output<T>(Shape{ids.size(), width}, std::move(out), tracked, "embedding");
  if (tracked) {
    NodePtr<T> tn = table.node();
    std::vector<int> idv(ids.begin(), ids.end());
    record<T>({&table}, y, [tn, idv = std::move(idv), width](const std::vector<T>& g) {
      auto& gt = grad_of(tn);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += g[i * width + j];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t width = last_dim(x.shape());
  const std::size_t total = x.numel() / width;
  for (std::size_t r : rows) {
    if (r >= total) throw index_error("gather_rows index " + std::to_string(r) + " out of range");
  }
  require(!rows.empty(), "gather_rows needs at least one row");
  const bool tracked = tracking<T>({&x});
  std::vector<T> out(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + rows[i] * width, width, out.begin() + i * width);
  auto y = make_output<T>(Shape{rows.size(), width}, std::move(out), tracked, "gather_rows");
  if (tracked) {
    NodePtr<T> xn = x.node();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    record<T>({&x}, y, [xn, rv = std::move(rv), width](const std::vector<T>& g) {
      auto& gx = grad_of(xn);
      for (std::size_t i = 0; i < rv.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) gx[rv[i] * width + j] += g[i * width + j];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> concat_segments(const BasicTensor<T>& a, const BasicTensor<T>& b,
                               std::size_t batch) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "concat_segments expects [rows, D] operands of equal width");
  require(batch > 0 && a.dim(0) % batch == 0 && b.dim(0) % batch == 0,
          "concat_segments row counts must divide by batch");
  const std::size_t width = a.dim(1), la = a.dim(0) / batch, lb = b.dim(0) / batch;
  const std::size_t seq = la + lb;
  const bool tracked = tracking<T>({&a, &b});
  std::vector<T> out(batch * seq * width);
  for (std::size_t e = 0; e < batch; ++e) {
    std::copy_n(a.data().begin() + e * la * width, la * width, out.begin() + e * seq * width);
    std::copy_n(b.data().begin() + e * lb * width, lb * width,
                out.begin() + (e * seq + la) * width);
  }
  auto y = make_output<T>(Shape{batch * seq, width}, std::move(out), tracked, "concat_segments");
  if (tracked) {
    NodePtr<T> an = a.node(), bn = b.node();
    record<T>({&a, &b}, y, [an, bn, batch, la, lb, seq, width](const std::vector<T>& g) {
      for (std::size_t e = 0; e < batch; ++e) {
        if (an->requires_grad) {
          auto& ga = grad_of(an);
          for (std::size_t i = 0; i < la * width; ++i) ga[e * la * width + i] += g[e * seq * width + i];
        }
        if (bn->requires_grad) {
          auto& gb = grad_of(bn);
          for (std::size_t i = 0; i < lb * width; ++i)
            gb[e * lb * width + i] += g[(e * seq + la) * width + i];
        }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> slice_segments(const BasicTensor<T>& x, std::size_t batch, std::size_t seq,
                              std::size_t start, std::size_t len) {
  require(x.rank() == 2 && x.dim(0) == batch * seq, "slice_segments shape mismatch");
  require(len > 0 && start + len <= seq, "slice_segments range out of bounds");
  const std::size_t width = x.dim(1);
  const bool tracked = tracking<T>({&x});
  std::vector<T> out(batch * len * width);
  for (std::size_t e = 0; e < batch; ++e)
    std::copy_n(x.data().begin() + (e * seq + start) * width, len * width,
                out.begin() + e * len * width);
  auto y = make_output<T>(Shape{batch * len, width}, std::move(out), tracked, "slice_segments");
  if (tracked) {
    NodePtr<T> xn = x.node();
    record<T>({&x}, y, [xn, batch, seq, start, len, width](const std::vector<T>& g) {
      auto& gx = grad_of(xn);
      for (std::size_t e = 0; e < batch; ++e)
        for (std::size_t i = 0; i < len * width; ++i)
          gx[(e * seq + start) * width + i] += g[e * len * width + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, std::size_t batch, std::size_t heads,
                         std::span<const std::uint8_t> key_mask) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention expects rank-2 inputs");
  require(k.shape() == v.shape(), "attention key/value shape mismatch");
  const std::size_t width = q.dim(1);
  require(k.dim(1) == width, "attention query/key width mismatch");
  require(heads > 0 && width % heads == 0, "attention width must divide by heads");
  require(batch > 0 && q.dim(0) % batch == 0 && k.dim(0) % batch == 0,
          "attention rows must divide by batch");
  const std::size_t lq = q.dim(0) / batch, lk = k.dim(0) / batch, hd = width / heads;
  if (!key_mask.empty()) require(key_mask.size() == batch * lk, "attention key mask size mismatch");
  const T scale_factor = T(1) / std::sqrt(T(hd));
  const bool tracked = tracking<T>({&q, &k, &v});

  std::vector<T> probs(batch * heads * lq * lk);
  std::vector<T> out(batch * lq * width, T(0));
  const T* qs = q.data().data();
  const T* ks = k.data().data();
  const T* vs = v.data().data();
  for (std::size_t e = 0; e < batch; ++e) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + ((e * heads + h) * lq) * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qi = qs + (e * lq + i) * width + h * hd;
        T* pi = p + i * lk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          if (!key_mask.empty() && key_mask[e * lk + j] == 0) {
            pi[j] = -std::numeric_limits<T>::infinity();
            continue;
          }
          const T* kj = ks + (e * lk + j) * width + h * hd;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          pi[j] = s * scale_factor;
          mx = std::max(mx, pi[j]);
        }
        if (!std::isfinite(mx)) throw numeric_error("attention: every key is masked");
        T total = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          const T ex = std::isinf(pi[j]) ? T(0) : std::exp(pi[j] - mx);
          pi[j] = ex;
          total += ex;
        }
        T* oi = out.data() + (e * lq + i) * width + h * hd;
        for (std::size_t j = 0; j < lk; ++j) {
          pi[j] /= total;
          const T w = pi[j];
          if (w == T(0)) continue;
          const T* vj = vs + (e * lk + j) * width + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  auto y = make_output<T>(Shape{batch * lq, width}, std::move(out), tracked, "attention");
  if (tracked) {
    NodePtr<T> qn = q.node(), kn = k.node(), vn = v.node();
    record<T>({&q, &k, &v}, y,
              [qn, kn, vn, probs = std::move(probs), batch, heads, lq, lk, hd, width,
               scale_factor](const std::vector<T>& g) {
                std::vector<T>* gq = qn->requires_grad ? &grad_of(qn) : nullptr;
                std::vector<T>* gk = kn->requires_grad ? &grad_of(kn) : nullptr;
                std::vector<T>* gv = vn->requires_grad ? &grad_of(vn) : nullptr;
                std::vector<T> dp(lk);
                for (std::size_t e = 0; e < batch; ++e) {
                  for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + ((e * heads + h) * lq) * lk;
                    for (std::size_t i = 0; i < lq; ++i) {
                      const T* gi = g.data() + (e * lq + i) * width + h * hd;
                      const T* pi = p + i * lk;
                      T dot = 0;
                      for (std::size_t j = 0; j < lk; ++j) {
                        const T* vj = vn->data.data() + (e * lk + j) * width + h * hd;
                        T s = 0;
                        for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
                        dp[j] = s;
                        dot += s * pi[j];
                        if (gv != nullptr && pi[j] != T(0)) {
                          T* gvj = gv->data() + (e * lk + j) * width + h * hd;
                          for (std::size_t c = 0; c < hd; ++c) gvj[c] += pi[j] * gi[c];
                        }
                      }
                      const T* qi = qn->data.data() + (e * lq + i) * width + h * hd;
                      for (std::size_t j = 0; j < lk; ++j) {
                        if (pi[j] == T(0)) continue;
                        const T ds = pi[j] * (dp[j] - dot) * scale_factor;
                        const T* kj = kn->data.data() + (e * lk + j) * width + h * hd;
                        if (gq != nullptr) {
                          T* gqi = gq->data() + (e * lq + i) * width + h * hd;
                          for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
                        }
                        if (gk != nullptr) {
                          T* gkj = gk->data() + (e * lk + j) * width + h * hd;
                          for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
                        }
                      }
                    }
                  }
                }
              });
  }
  return y;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, std::span<const std::uint8_t> keep_mask,
                       T drop_prob) {
  require(keep_mask.size() == x.numel(), "dropout mask size mismatch");
  if (!(drop_prob >= T(0) && drop_prob < T(1))) {
    throw std::invalid_argument("dropout probability must be in [0, 1)");
  }
  const T keep_scale = T(1) / (T(1) - drop_prob);
  const bool tracked = tracking<T>({&x});
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = keep_mask[i] ? x.data()[i] * keep_scale : T(0);
  auto y = make_output<T>(x.shape(), std::move(out), tracked, "dropout");
  if (tracked) {
    NodePtr<T> xn = x.node();
    std::vector<std::uint8_t> mask(keep_mask.begin(), keep_mask.end());
    record<T>({&x}, y, [xn, mask = std::move(mask), keep_scale](const std::vector<T>& g) {
      auto& gx = grad_of(xn);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i]) gx[i] += g[i] * keep_scale;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
BasicTensor<T> cross_entropy_from_logits(const BasicTensor<T>& logits,
                                         std::span<const int> targets) {
  require(logits.rank() == 2, "cross_entropy_from_logits expects [B, C] logits");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  require(targets.size() == rows, "cross_entropy_from_logits target count mismatch");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw index_error("cross-entropy target " + std::to_string(t) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
  }
  const bool tracked = tracking<T>({&logits});
  const auto ls = logits.data();
  std::vector<T> probs(rows * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = ls.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp(static_cast<double>(row[c] - mx));
      probs[r * classes + c] = static_cast<T>(e);
      z += e;
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = static_cast<T>(probs[r * classes + c] / z);
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[targets[r]]);
  }
  auto y = make_output<T>(Shape{1}, std::vector<T>{static_cast<T>(total / double(rows))}, tracked,
                          "cross_entropy_from_logits");
  if (tracked) {
    NodePtr<T> ln = logits.node();
    std::vector<int> tv(targets.begin(), targets.end());
    record<T>({&logits}, y,
              [ln, tv = std::move(tv), probs = std::move(probs), rows, classes](const std::vector<T>& g) {
                auto& gl = grad_of(ln);
                const T s = g[0] / T(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t c = 0; c < classes; ++c) gl[r * classes + c] += s * probs[r * classes + c];
                  gl[r * classes + static_cast<std::size_t>(tv[r])] -= s;
                }
              });
  }
  return y;
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require(pred.shape() == target.shape(), "mse_loss shape mismatch");
  const bool tracked = tracking<T>({&pred, &target});
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
    acc += d * d;
  }
  const std::size_t n = pred.numel();
  auto y = make_output<T>(Shape{1}, std::vector<T>{static_cast<T>(acc / double(n))}, tracked,
                          "mse_loss");
  if (tracked) {
    NodePtr<T> pn = pred.node(), tn = target.node();
    record<T>({&pred, &target}, y, [pn, tn, n](const std::vector<T>& g) {
      const T s = T(2) * g[0] / T(n);
      if (pn->requires_grad) {
        auto& gp = grad_of(pn);
        for (std::size_t i = 0; i < n; ++i) gp[i] += s * (pn->data[i] - tn->data[i]);
      }
      if (tn->requires_grad) {
        auto& gt = grad_of(tn);
        for (std::size_t i = 0; i < n; ++i) gt[i] -= s * (pn->data[i] - tn->data[i]);
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, std::span<const T> labels) {
  require(labels.size() == logits.numel(), "bce_with_logits label count mismatch");
  const bool tracked = tracking<T>({&logits});
  const std::size_t n = logits.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    const double yv = labels[i];
    acc += std::max(z, 0.0) - z * yv + std::log1p(std::exp(-std::abs(z)));
  }
  auto y = make_output<T>(Shape{1}, std::vector<T>{static_cast<T>(acc / double(n))}, tracked,
                          "bce_with_logits");
  if (tracked) {
    NodePtr<T> ln = logits.node();
    std::vector<T> lv(labels.begin(), labels.end());
    record<T>({&logits}, y, [ln, lv = std::move(lv), n](const std::vector<T>& g) {
      auto& gl = grad_of(ln);
      for (std::size_t i = 0; i < n; ++i) {
        const T z = ln->data[i];
        const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
        gl[i] += g[0] * (s - lv[i]) / T(n);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define GRIDPAINT_INSTANTIATE(T)                                                                \
  template class BasicTensor<T>;                                                                \
  template class Tape<T>;                                                                       \
  template class TapeScope<T>;                                                                  \
  template Tape<T>* active_tape<T>();                                                           \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                 const BasicTensor<T>&);                                        \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                      \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> add_row_vector(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> square(const BasicTensor<T>&);                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                           \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                          \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                          \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                     const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                          \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                          \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                       \
  template BasicTensor<T> huber(const BasicTensor<T>&);                                         \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);               \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);     \
  template BasicTensor<T> concat_segments(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                          std::size_t);                                         \
  template BasicTensor<T> slice_segments(const BasicTensor<T>&, std::size_t, std::size_t,       \
                                         std::size_t, std::size_t);                             \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                    const BasicTensor<T>&, std::size_t, std::size_t,            \
                                    std::span<const std::uint8_t>);                             \
  template BasicTensor<T> dropout(const BasicTensor<T>&, std::span<const std::uint8_t>, T);     \
  template BasicTensor<T> cross_entropy_from_logits(const BasicTensor<T>&,                      \
                                                    std::span<const int>);                      \
  template BasicTensor<T> mse_loss(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, std::span<const T>);

GRIDPAINT_INSTANTIATE(float)
GRIDPAINT_INSTANTIATE(double)

#undef GRIDPAINT_INSTANTIATE

}  // namespace gridpaint
