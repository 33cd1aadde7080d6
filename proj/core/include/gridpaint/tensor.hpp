// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every op in this header checks its output for NaN/Inf and throws
// numeric_error. When a Tape is active on the calling thread (see TapeScope)
// and at least one input requires a gradient, the op records a backward rule
// on that tape. Without an active tape ops are plain forward computations.
//
// The library is templated on the scalar type. The pipeline uses float; the
// double instantiation exists so that backward rules can be verified against
// finite differences without f32 rounding noise.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridpaint {

using Shape = std::vector<std::size_t>;

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class index_error : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class contract_error : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

std::uint64_t next_tensor_id();

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor from(Shape shape, std::vector<T> values);
  static BasicTensor scalar(T value);
  /// A leaf that accumulates gradients (a trainable parameter).
  static BasicTensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  std::uint64_t id() const { return node_->id; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T at(std::size_t flat_index) const { return node_->data.at(flat_index); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no gradient tracking.
  BasicTensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of the ops executed during one forward pass.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
  };

  void record(std::vector<std::uint64_t> inputs, std::uint64_t output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, in
  /// reverse recording order. Gradients accumulate into existing buffers.
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Installs a tape as the active tape of the current thread for its lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

// ---------------------------------------------------------------------------
// Ops. Matrices are rank-2; "rows" ops treat a tensor as [numel / last, last].

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x[rows, in] * w[in, out] + bias[out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);
/// Adds a [last]-shaped vector to every row.
template <typename T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& a, const BasicTensor<T>& row);
template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps);
/// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
/// 0.5 x^2 for |x| <= 1, |x| - 0.5 otherwise.
template <typename T>
BasicTensor<T> huber(const BasicTensor<T>& x);

/// Rows of table[V, D] selected by ids -> [ids.size(), D].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);
/// Rows of x[R, D] selected by row indices.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);

/// Interleaves per-example segments: a[B*La, D], b[B*Lb, D] -> [B*(La+Lb), D].
template <typename T>
BasicTensor<T> concat_segments(const BasicTensor<T>& a, const BasicTensor<T>& b,
                               std::size_t batch);
/// Extracts rows [start, start+len) of every length-`seq` segment of x[B*seq, D].
template <typename T>
BasicTensor<T> slice_segments(const BasicTensor<T>& x, std::size_t batch, std::size_t seq,
                              std::size_t start, std::size_t len);

/// Bidirectional multi-head scaled dot-product attention.
/// q[B*Lq, D], k and v [B*Lk, D]; key_mask (B*Lk entries, nonzero = visible)
/// hides padding keys. Output [B*Lq, D].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, std::size_t batch, std::size_t heads,
                         std::span<const std::uint8_t> key_mask = {});

/// Inverted dropout; keep_mask holds one 0/1 entry per element.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, std::span<const std::uint8_t> keep_mask,
                       T drop_prob);

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
BasicTensor<T> cross_entropy_from_logits(const BasicTensor<T>& logits,
                                         std::span<const int> targets);
template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);
/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, std::span<const T> labels);

}  // namespace gridpaint
