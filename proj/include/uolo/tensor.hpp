#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Layout is row-major. Image tensors use the [B, C, H, W] axis order.
//
// Differentiable ops record onto the tape installed for the calling thread by
// a TapeScope. Without an active tape, ops compute values only. A tensor
// produced by a recorded op belongs to one tape generation; once the tape is
// cleared, calling backward on it is an error.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uolo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  /// Rank-0 tensor.
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  /// Only valid on leaves. Allocates (or drops) the gradient buffer.
  void set_requires_grad(bool on);
  bool is_leaf() const;
  /// Gradient buffer; throws UsageError when the tensor does not require grad.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy of the values as a new leaf without gradient.
  Tensor detach() const;

  /// Identity of the underlying storage (shared by copies of the handle).
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed differentiable ops.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Releases every recorded op. Outputs recorded before the clear become stale.
  void clear();
  std::size_t size() const { return entries_.size(); }
  /// Names of recorded ops in execution order.
  std::vector<std::string> op_names() const;

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
  /// loss. Intermediate gradients are reset first, so calling backward twice
  /// without zeroing leaves doubles the leaf gradients.
  void backward(const Tensor& loss);

  struct Entry {
    std::string name;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  // Used by op implementations.
  void record(Entry entry);
  std::uint64_t id() const { return id_; }
  std::uint64_t generation() const { return generation_; }

 private:
  std::vector<Entry> entries_;
  std::uint64_t id_;
  std::uint64_t generation_ = 0;
};

/// Installs a tape as the current thread's recording target.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread: ops compute values only.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* current_tape();

/// backward on the current thread's tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise ops. Operand shapes must match, except that a rank-0 operand
// broadcasts against anything.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reductions and reshaping.

/// Sum of all elements, rank-0 result.
Tensor sum(const Tensor& a);
/// Sum over one axis; the axis is removed from the shape.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 1);
/// Elements [begin, end) along axis.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Numerically stable log-softmax along the last axis.
Tensor log_softmax(const Tensor& a);
/// Average pooling of a [B,C,H,W] tensor down to [B,C,target_h,target_w].
/// The extents must divide evenly.
Tensor spatial_downsample(const Tensor& a, std::size_t target_h, std::size_t target_w);

// ---------------------------------------------------------------------------
// Convolution and normalization.

/// input [B,Cin,H,W], kernel [Cout,Cin,k,k], bias [Cout] (may be undefined).
/// Output extent floor((H + 2*padding - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Adjoint of conv2d with respect to its input: input [B,Cin,H,W],
/// kernel [Cin,Cout,k,k]. Output extent (H-1)*stride - 2*padding + k, so
/// k = stride, padding = 0 gives exactly stride x upsampling.
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride,
                        std::size_t padding);

enum class Mode { kTrain, kInfer };

struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.9;
  double epsilon = 1e-5;
};

/// Per-channel normalization over (B,H,W). Train mode normalizes with the
/// biased batch statistics and folds them into the running statistics
/// (running = momentum*running + (1-momentum)*batch). Infer mode uses the
/// running statistics only.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode);

}  // namespace uolo
