#include "uolo/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "uolo/errors.hpp"

namespace uolo {

namespace detail {

// Aligned to the widest vector width so that Eigen takes the same code path
// (and rounding) regardless of where the allocator places a buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  // Set on outputs of recorded ops.
  std::uint64_t tape_id = 0;
  std::uint64_t tape_generation = 0;
  std::size_t op_index = 0;
};

}  // namespace detail

using detail::Buffer;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

thread_local Tape* g_current_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

ImplPtr make_impl(Shape shape, Buffer data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_current_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Wraps a freshly computed value. When recording, make_backward receives the
// output impl and must return the closure that propagates its gradient.
template <typename MakeBackward>
Tensor finish(const char* name, Shape shape, Buffer data,
              std::initializer_list<const Tensor*> inputs, MakeBackward make_backward) {
  ImplPtr out = make_impl(std::move(shape), std::move(data));
  if (!needs_grad(inputs)) return Tensor(out);
  out->requires_grad = true;
  out->leaf = false;
  out->grad.assign(out->data.size(), 0.0);
  Tape::Entry entry;
  entry.name = name;
  for (const Tensor* t : inputs) {
    if (t->defined()) entry.inputs.push_back(t->impl());
  }
  entry.output = out;
  entry.backward = make_backward(out.get());
  g_current_tape->record(std::move(entry));
  return Tensor(out);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                      " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_to_string(t.shape()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- binary elementwise with rank-0 broadcasting ----

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.rank() == 0) return Broadcast::kLeftScalar;
  if (b.rank() == 0) return Broadcast::kRightScalar;
  check_same_shape(a, b, op);
  return Broadcast::kNone;
}

// Forward f(x, y) and partials (df/dx, df/dy) given (x, y, out).
template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const Broadcast kind = broadcast_kind(a, b, name);
  const Shape shape = kind == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto ad = a.data();
  const auto bd = b.data();
  auto ai = [&](std::size_t i) { return kind == Broadcast::kLeftScalar ? ad[0] : ad[i]; };
  auto bi = [&](std::size_t i) { return kind == Broadcast::kRightScalar ? bd[0] : bd[i]; };
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));
  return finish(name, shape, std::move(out), {&a, &b}, [=](TensorImpl* o) {
    return [=, pa = a.impl().get(), pb = b.impl().get()]() {
      double* ga = pa->requires_grad ? pa->grad.data() : nullptr;
      double* gb = pb->requires_grad ? pb->grad.data() : nullptr;
      const bool a_scalar = kind == Broadcast::kLeftScalar;
      const bool b_scalar = kind == Broadcast::kRightScalar;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = a_scalar ? pa->data[0] : pa->data[i];
        const double y = b_scalar ? pb->data[0] : pb->data[i];
        const double g = o->grad[i];
        if (ga) ga[a_scalar ? 0 : i] += g * dfa(x, y, o->data[i]);
        if (gb) gb[b_scalar ? 0 : i] += g * dfb(x, y, o->data[i]);
      }
    };
  });
}

template <typename F, typename D>
Tensor unary_op(const char* name, const Tensor& a, F f, D df) {
  const auto ad = a.data();
  Buffer out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  return finish(name, a.shape(), std::move(out), {&a}, [=](TensorImpl* o) {
    return [=, pa = a.impl().get()]() {
      for (std::size_t i = 0; i < pa->data.size(); ++i) {
        pa->grad[i] += o->grad[i] * df(pa->data[i], o->data[i]);
      }
    };
  });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// ---- im2col / col2im on a single [C,H,W] image ----

struct ConvGeometry {
  std::size_t channels, height, width;   // image side
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;              // column side
};

// Output columns [lo, hi) whose input coordinate o*stride + k - padding lies in [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t extent, std::size_t out,
                                                const ConvGeometry& g) {
  const auto ceil_div = [](std::ptrdiff_t a, std::ptrdiff_t b) { return a <= 0 ? 0 : (a + b - 1) / b; };
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto shift = static_cast<std::ptrdiff_t>(g.padding) - static_cast<std::ptrdiff_t>(k);
  const auto lo = static_cast<std::size_t>(ceil_div(shift, s));
  const auto hi = static_cast<std::size_t>(ceil_div(static_cast<std::ptrdiff_t>(extent) + shift, s));
  return {std::min(lo, out), std::min(hi, out)};
}

// Writes only the in-bounds entries: col must hold zeros at the padding
// positions, i.e. be freshly zeroed or previously filled with the same geometry.
void im2col(const double* image, const ConvGeometry& g, double* col) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      const auto [y_lo, y_hi] = valid_range(ki, g.height, g.out_h, g);
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const auto [x_lo, x_hi] = valid_range(kj, g.width, g.out_w, g);
        double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
          double* dst = row + oy * g.out_w;
          const std::size_t iy = oy * g.stride + ki - g.padding;
          if (x_lo == x_hi) continue;
          const double* src = image + (c * g.height + iy) * g.width + (x_lo * g.stride + kj - g.padding);
          if (g.stride == 1) {
            std::copy(src, src + (x_hi - x_lo), dst + x_lo);
          } else {
            for (std::size_t t = 0; t < x_hi - x_lo; ++t) dst[x_lo + t] = src[t * g.stride];
          }
        }
      }
    }
  }
}

// Scatter-adds columns back into an image (adjoint of im2col).
void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      const auto [y_lo, y_hi] = valid_range(ki, g.height, g.out_h, g);
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const auto [x_lo, x_hi] = valid_range(kj, g.width, g.out_w, g);
        const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
          const std::size_t iy = oy * g.stride + ki - g.padding;
          if (x_lo == x_hi) continue;
          double* dst = image + (c * g.height + iy) * g.width + (x_lo * g.stride + kj - g.padding);
          const double* src = row + oy * g.out_w + x_lo;
          for (std::size_t t = 0; t < x_hi - x_lo; ++t) dst[t * g.stride] += src[t];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ConfigError("tensor extents must be positive: " + shape_to_string(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw ConfigError("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_to_string(shape));
  }
  Tensor t(make_impl(std::move(shape), Buffer(data.begin(), data.end())));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ConfigError("axis out of range for " + shape_to_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::is_leaf() const { return impl_->leaf; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_->leaf) throw UsageError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  if (on) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

std::span<double> Tensor::grad() {
  if (!impl_->requires_grad) throw UsageError("tensor does not require grad");
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (!impl_->requires_grad) throw UsageError("tensor does not require grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->data)); }

// ---------------------------------------------------------------------------

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}
Tape::~Tape() = default;

void Tape::clear() {
  entries_.clear();
  ++generation_;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.name);
  return names;
}

void Tape::record(Entry entry) {
  entry.output->tape_id = id_;
  entry.output->tape_generation = generation_;
  entry.output->op_index = entries_.size();
  entries_.push_back(std::move(entry));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_to_string(loss.shape()));
  }
  const TensorImpl& l = *loss.impl();
  if (!l.requires_grad) return;  // constant loss
  if (l.leaf) {
    loss.impl()->grad[0] += 1.0;
    return;
  }
  if (l.tape_id != id_ || l.tape_generation != generation_) {
    throw UsageError("backward on a tensor that is not on the current tape (stale or foreign)");
  }
  const std::size_t last = l.op_index;
  for (std::size_t i = 0; i <= last; ++i) {
    auto& g = entries_[i].output->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
  loss.impl()->grad[0] = 1.0;
  for (std::size_t i = last + 1; i-- > 0;) entries_[i].backward();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_current_tape) { g_current_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_current_tape = previous_; }

Tape* current_tape() { return g_current_tape; }

void backward(const Tensor& loss) {
  if (g_current_tape == nullptr) {
    if (loss.defined() && loss.numel() == 1 && !loss.requires_grad()) return;
    throw UsageError("backward called without an active tape");
  }
  g_current_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

Tensor sum(const Tensor& a) {
  const auto ad = a.data();
  const double total = std::accumulate(ad.begin(), ad.end(), 0.0);
  return finish("sum", {}, {total}, {&a}, [=](TensorImpl* o) {
    return [=, pa = a.impl().get()]() {
      for (double& g : pa->grad) g += o->grad[0];
    };
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ConfigError("sum: axis out of range for " + shape_to_string(a.shape()));
  const Shape& in = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t extent = in[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i != axis) out_shape.push_back(in[i]);
  }
  const auto ad = a.data();
  Buffer out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = ad.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return finish("sum_axis", out_shape, std::move(out), {&a}, [=](TensorImpl* op) {
    return [=, pa = a.impl().get()]() {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t e = 0; e < extent; ++e) {
          double* dst = pa->grad.data() + (o * extent + e) * inner;
          const double* src = op->grad.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    };
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                      shape_to_string(shape));
  }
  const auto ad = a.data();
  return finish("reshape", std::move(shape), Buffer(ad.begin(), ad.end()), {&a},
                [=](TensorImpl* o) {
                  return [=, pa = a.impl().get()]() {
                    for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += o->grad[i];
                  };
                });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) throw ConfigError("permute: axis count mismatch");
  std::vector<bool> seen(axes.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw ConfigError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  // source offset for each destination element
  const auto in_strides = strides_of(in);
  const std::size_t n = a.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> index(in.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < index.size(); ++d) off += index[d] * in_strides[axes[d]];
    source[flat] = off;
    for (std::size_t d = index.size(); d-- > 0;) {
      if (++index[d] < out_shape[d]) break;
      index[d] = 0;
    }
  }
  const auto ad = a.data();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[source[i]];
  return finish("permute", out_shape, std::move(out), {&a}, [=](TensorImpl* o) {
    return [=, pa = a.impl().get()]() {
      for (std::size_t i = 0; i < n; ++i) pa->grad[source[i]] += o->grad[i];
    };
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ConfigError("concat: no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ConfigError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ConfigError("concat: operand " + shape_to_string(s) + " incompatible with " +
                        shape_to_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;

  Buffer out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(axis) * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }

  // Recording with a variable number of inputs.
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  ImplPtr result = make_impl(out_shape, std::move(out));
  if (g_current_tape == nullptr || !any_grad) return Tensor(result);
  result->requires_grad = true;
  result->leaf = false;
  result->grad.assign(result->data.size(), 0.0);
  Tape::Entry entry;
  entry.name = "concat";
  std::vector<TensorImpl*> raw;
  for (const Tensor& p : parts) {
    entry.inputs.push_back(p.impl());
    raw.push_back(p.impl().get());
  }
  entry.output = result;
  entry.backward = [raw, offsets, outer, inner, out_row, axis, o = result.get()]() {
    for (std::size_t k = 0; k < raw.size(); ++k) {
      TensorImpl* p = raw[k];
      if (!p->requires_grad) continue;
      const std::size_t row = p->shape[axis] * inner;
      for (std::size_t r = 0; r < outer; ++r) {
        const double* src = o->grad.data() + r * out_row + offsets[k];
        double* dst = p->grad.data() + r * row;
        for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
      }
    }
  };
  g_current_tape->record(std::move(entry));
  return Tensor(result);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = a.shape();
  if (axis >= in.size() || begin >= end || end > in[axis]) {
    throw ConfigError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for axis " + std::to_string(axis) + " of " + shape_to_string(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  const std::size_t in_row = in[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t start = begin * inner;
  const auto ad = a.data();
  Buffer out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + o * in_row + start, out_row, out.data() + o * out_row);
  }
  return finish("slice", out_shape, std::move(out), {&a}, [=](TensorImpl* op) {
    return [=, pa = a.impl().get()]() {
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = pa->grad.data() + o * in_row + start;
        const double* src = op->grad.data() + o * out_row;
        for (std::size_t i = 0; i < out_row; ++i) dst[i] += src[i];
      }
    };
  });
}

Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 0) throw ConfigError("log_softmax: rank-0 input");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  const auto ad = a.data();
  Buffer out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ad.data() + r * width;
    const double m = *std::max_element(x, x + width);
    double s = 0.0;
    for (std::size_t i = 0; i < width; ++i) s += std::exp(x[i] - m);
    const double lse = m + std::log(s);
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = x[i] - lse;
  }
  return finish("log_softmax", a.shape(), std::move(out), {&a}, [=](TensorImpl* o) {
    return [=, pa = a.impl().get()]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* g = o->grad.data() + r * width;
        const double* y = o->data.data() + r * width;
        double gs = 0.0;
        for (std::size_t i = 0; i < width; ++i) gs += g[i];
        for (std::size_t i = 0; i < width; ++i) {
          pa->grad[r * width + i] += g[i] - std::exp(y[i]) * gs;
        }
      }
    };
  });
}

Tensor spatial_downsample(const Tensor& a, std::size_t target_h, std::size_t target_w) {
  require_rank(a, 4, "spatial_downsample");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (target_h == 0 || target_w == 0 || H % target_h != 0 || W % target_w != 0) {
    throw ConfigError("spatial_downsample: " + std::to_string(H) + "x" + std::to_string(W) +
                      " is not evenly divisible into " + std::to_string(target_h) + "x" +
                      std::to_string(target_w));
  }
  const std::size_t fy = H / target_h, fx = W / target_w;
  const double scale = 1.0 / static_cast<double>(fy * fx);
  const auto ad = a.data();
  Buffer out(B * C * target_h * target_w, 0.0);
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const double* src = ad.data() + plane * H * W;
    double* dst = out.data() + plane * target_h * target_w;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) dst[(y / fy) * target_w + x / fx] += src[y * W + x];
    }
    for (std::size_t i = 0; i < target_h * target_w; ++i) dst[i] *= scale;
  }
  return finish("spatial_downsample", {B, C, target_h, target_w}, std::move(out), {&a},
                [=](TensorImpl* o) {
                  return [=, pa = a.impl().get()]() {
                    for (std::size_t plane = 0; plane < B * C; ++plane) {
                      double* dst = pa->grad.data() + plane * H * W;
                      const double* src = o->grad.data() + plane * target_h * target_w;
                      for (std::size_t y = 0; y < H; ++y) {
                        for (std::size_t x = 0; x < W; ++x) {
                          dst[y * W + x] += scale * src[(y / fy) * target_w + x / fx];
                        }
                      }
                    }
                  };
                });
}

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != Cin) {
    throw ConfigError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                      " input channels, input has " + std::to_string(Cin));
  }
  if (kernel.dim(3) != k) throw ConfigError("conv2d: kernel must be square");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ConfigError("conv2d: bias shape " + shape_to_string(bias.shape()) + " does not match " +
                      std::to_string(Cout) + " output channels");
  }
  if (k > H + 2 * padding || k > W + 2 * padding) {
    throw ConfigError("conv2d: kernel larger than padded input");
  }
  const ConvGeometry g{Cin, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                       (W + 2 * padding - k) / stride + 1};
  const std::size_t K = Cin * k * k, P = g.out_h * g.out_w;

  Buffer out(B * Cout * P);
  Buffer col(is_pointwise(g) ? 0 : K * P);
  ConstMatrixMap wmat(kernel.data().data(), static_cast<Eigen::Index>(Cout),
                      static_cast<Eigen::Index>(K));
  const auto in = input.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* src = in.data() + b * Cin * H * W;
    if (!is_pointwise(g)) im2col(src, g, col.data());
    ConstMatrixMap cmat(is_pointwise(g) ? src : col.data(), static_cast<Eigen::Index>(K),
                        static_cast<Eigen::Index>(P));
    MatrixMap omat(out.data() + b * Cout * P, static_cast<Eigen::Index>(Cout),
                   static_cast<Eigen::Index>(P));
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t c = 0; c < Cout; ++c) omat.row(static_cast<Eigen::Index>(c)).array() += bd[c];
    }
  }

  return finish(
      "conv2d", {B, Cout, g.out_h, g.out_w}, std::move(out), {&input, &kernel, &bias},
      [=](TensorImpl* o) {
        return [=, pi = input.impl().get(), pk = kernel.impl().get(),
                pb = bias.defined() ? bias.impl().get() : nullptr]() {
          Buffer col_buf(is_pointwise(g) ? 0 : K * P);
          Buffer dcol(K * P);
          ConstMatrixMap w(pk->data.data(), static_cast<Eigen::Index>(Cout),
                           static_cast<Eigen::Index>(K));
          for (std::size_t b = 0; b < B; ++b) {
            ConstMatrixMap dout(o->grad.data() + b * Cout * P, static_cast<Eigen::Index>(Cout),
                                static_cast<Eigen::Index>(P));
            const double* src = pi->data.data() + b * Cin * H * W;
            if (pk->requires_grad) {
              if (!is_pointwise(g)) im2col(src, g, col_buf.data());
              ConstMatrixMap cmat(is_pointwise(g) ? src : col_buf.data(),
                                  static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
              MatrixMap dw(pk->grad.data(), static_cast<Eigen::Index>(Cout),
                           static_cast<Eigen::Index>(K));
              dw.noalias() += dout * cmat.transpose();
            }
            if (pb != nullptr && pb->requires_grad) {
              for (std::size_t c = 0; c < Cout; ++c) {
                pb->grad[c] += dout.row(static_cast<Eigen::Index>(c)).sum();
              }
            }
            if (pi->requires_grad) {
              double* dst = pi->grad.data() + b * Cin * H * W;
              if (is_pointwise(g)) {
                MatrixMap din(dst, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                din.noalias() += w.transpose() * dout;
              } else {
                MatrixMap dc(dcol.data(), static_cast<Eigen::Index>(K),
                             static_cast<Eigen::Index>(P));
                dc.noalias() = w.transpose() * dout;
                col2im_add(dcol.data(), g, dst);
              }
            }
          }
        };
      });
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride,
                        std::size_t padding) {
  require_rank(input, 4, "conv2d_transpose input");
  require_rank(kernel, 4, "conv2d_transpose kernel");
  if (stride == 0) throw ConfigError("conv2d_transpose: stride must be positive");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = kernel.dim(1), k = kernel.dim(2);
  if (kernel.dim(0) != Cin) {
    throw ConfigError("conv2d_transpose: kernel expects " + std::to_string(kernel.dim(0)) +
                      " input channels, input has " + std::to_string(Cin));
  }
  if (kernel.dim(3) != k) throw ConfigError("conv2d_transpose: kernel must be square");
  if ((H - 1) * stride + k <= 2 * padding || (W - 1) * stride + k <= 2 * padding) {
    throw ConfigError("conv2d_transpose: padding leaves an empty output");
  }
  const std::size_t Ho = (H - 1) * stride + k - 2 * padding;
  const std::size_t Wo = (W - 1) * stride + k - 2 * padding;
  // The output plays the role of a conv2d input whose conv2d output is H x W.
  const ConvGeometry g{Cout, Ho, Wo, k, stride, padding, H, W};
  const std::size_t K = Cout * k * k, P = H * W;

  Buffer out(B * Cout * Ho * Wo, 0.0);
  Buffer col(K * P);
  ConstMatrixMap wmat(kernel.data().data(), static_cast<Eigen::Index>(Cin),
                      static_cast<Eigen::Index>(K));
  const auto in = input.data();
  for (std::size_t b = 0; b < B; ++b) {
    ConstMatrixMap imat(in.data() + b * Cin * P, static_cast<Eigen::Index>(Cin),
                        static_cast<Eigen::Index>(P));
    MatrixMap cmat(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    cmat.noalias() = wmat.transpose() * imat;
    col2im_add(col.data(), g, out.data() + b * Cout * Ho * Wo);
  }

  return finish(
      "conv2d_transpose", {B, Cout, Ho, Wo}, std::move(out), {&input, &kernel},
      [=](TensorImpl* o) {
        return [=, pi = input.impl().get(), pk = kernel.impl().get()]() {
          Buffer dcol(K * P);
          ConstMatrixMap w(pk->data.data(), static_cast<Eigen::Index>(Cin),
                           static_cast<Eigen::Index>(K));
          for (std::size_t b = 0; b < B; ++b) {
            im2col(o->grad.data() + b * Cout * Ho * Wo, g, dcol.data());
            ConstMatrixMap dc(dcol.data(), static_cast<Eigen::Index>(K),
                              static_cast<Eigen::Index>(P));
            if (pi->requires_grad) {
              MatrixMap din(pi->grad.data() + b * Cin * P, static_cast<Eigen::Index>(Cin),
                            static_cast<Eigen::Index>(P));
              din.noalias() += w * dc;
            }
            if (pk->requires_grad) {
              ConstMatrixMap imat(pi->data.data() + b * Cin * P, static_cast<Eigen::Index>(Cin),
                                  static_cast<Eigen::Index>(P));
              MatrixMap dw(pk->grad.data(), static_cast<Eigen::Index>(Cin),
                           static_cast<Eigen::Index>(K));
              dw.noalias() += imat * dc.transpose();
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Batch normalization

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode) {
  require_rank(input, 4, "batch_norm");
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  const Shape channel_shape{C};
  if (gamma.shape() != channel_shape || beta.shape() != channel_shape) {
    throw ConfigError("batch_norm: gamma/beta must have shape " + shape_to_string(channel_shape));
  }
  if (!state.running_mean.defined()) state.running_mean = Tensor::zeros(channel_shape);
  if (!state.running_var.defined()) state.running_var = Tensor::full(channel_shape, 1.0);
  if (state.running_mean.shape() != channel_shape || state.running_var.shape() != channel_shape) {
    throw ConfigError("batch_norm: running statistics do not match channel count");
  }
  const std::size_t count = B * HW;
  if (mode == Mode::kTrain && count < 2) {
    throw ConfigError("batch_norm: train mode needs at least 2 values per channel, got " +
                      std::to_string(count));
  }

  const auto x = input.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  Buffer mu(C), inv_std(C);
  if (mode == Mode::kTrain) {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + state.epsilon);
      rm[c] = state.momentum * rm[c] + (1.0 - state.momentum) * m;
      rv[c] = state.momentum * rv[c] + (1.0 - state.momentum) * v;
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + state.epsilon);
    }
  }

  Buffer xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[base + i] = (x[base + i] - mu[c]) * inv_std[c];
        out[base + i] = xhat[base + i] * gd[c] + bd[c];
      }
    }
  }

  const bool train = mode == Mode::kTrain;
  return finish("batch_norm", input.shape(), std::move(out), {&input, &gamma, &beta},
                [=, xhat = std::move(xhat)](TensorImpl* o) {
                  return [=, pi = input.impl().get(), pg = gamma.impl().get(),
                          pb = beta.impl().get()]() {
                    const double n = static_cast<double>(count);
                    for (std::size_t c = 0; c < C; ++c) {
                      double sum_dy = 0.0, sum_dy_xhat = 0.0;
                      for (std::size_t b = 0; b < B; ++b) {
                        const std::size_t base = (b * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) {
                          sum_dy += o->grad[base + i];
                          sum_dy_xhat += o->grad[base + i] * xhat[base + i];
                        }
                      }
                      if (pg->requires_grad) pg->grad[c] += sum_dy_xhat;
                      if (pb->requires_grad) pb->grad[c] += sum_dy;
                      if (!pi->requires_grad) continue;
                      const double scale = pg->data[c] * inv_std[c];
                      for (std::size_t b = 0; b < B; ++b) {
                        const std::size_t base = (b * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) {
                          const double dy = o->grad[base + i];
                          pi->grad[base + i] +=
                              train ? scale * (dy - sum_dy / n - xhat[base + i] * sum_dy_xhat / n)
                                    : scale * dy;
                        }
                      }
                    }
                  };
                });
}

}  // namespace uolo
