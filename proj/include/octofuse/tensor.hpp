#pragma once

// Dense N-d tensors with reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose node remembers its inputs and a
// backward closure. `backward()` orders the reachable graph topologically and
// replays the closures in reverse, accumulating into `grad` buffers.
//
// Activations are N x C x H x W, conv kernels Cout x Cin x Kh x Kw.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "octofuse/errors.hpp"

namespace octofuse {

#ifdef OCTOFUSE_USE_F32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline void check_finite(std::span<const Real> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                         std::to_string(i));
    }
  }
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Real{0}, requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    std::vector<Real> values(shape_numel(shape), value);
    return from_data(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    detail::check_finite(values, "from_data");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->data.size(), Real{0});
    return Tensor(std::move(node));
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t extent(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const Real> data() const { return node().data; }
  /// Direct write access; reserved for leaves (parameters, running statistics).
  std::span<Real> mutable_data() { return node().data; }
  Real operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag) {
    node().requires_grad = flag;
    if (flag && node().grad.size() != node().data.size()) node().grad.assign(node().data.size(), Real{0});
    if (!flag) node().grad.clear();
  }
  std::span<const Real> grad() const { return node().grad; }
  std::span<Real> mutable_grad() { return node().grad; }
  void zero_grad() { std::fill(node().grad.begin(), node().grad.end(), Real{0}); }

  Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }

  const char* op_name() const { return node().op; }
  bool is_leaf() const { return node().inputs.empty(); }

  /// Copy of the values without any graph history.
  Tensor detach() const { return from_data(shape(), node().data, false); }

  /// dLoss/dT for every reachable tensor with requires_grad. Must be scalar.
  void backward() const;

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& handle() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(Shape, std::vector<Real>, const char*, std::vector<Tensor>,
                               std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

/// Recorded operations reachable from a root, inputs before consumers.
struct Trace {
  std::vector<std::shared_ptr<detail::Node>> ops;
};

inline Trace record_trace(const Tensor& root) {
  Trace trace;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.handle(), 0);
  visited.insert(root.handle().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      trace.ops.push_back(node);
      stack.pop_back();
    }
  }
  return trace;
}

inline void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
  Trace trace = record_trace(*this);
  node().grad[0] += Real{1};
  for (auto it = trace.ops.rbegin(); it != trace.ops.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && n.requires_grad) n.backward(n);
  }
}

inline Tensor make_op_result(Shape shape, std::vector<Real> values, const char* op, std::vector<Tensor> inputs,
                             std::function<void(detail::Node&)> backward) {
  detail::check_finite(values, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->grad.assign(node->data.size(), Real{0});
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw DimensionError(std::string(op) + " expects N x C x H x W, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline bool wants_grad(const Node& n, std::size_t input) { return n.inputs[input]->requires_grad; }
inline std::vector<Real>& input_grad(Node& n, std::size_t input) { return n.inputs[input]->grad; }
inline const std::vector<Real>& input_data(const Node& n, std::size_t input) { return n.inputs[input]->data; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op_result(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(n, k)) continue;
      auto& g = detail::input_grad(n, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_result(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::input_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::input_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_result(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& n) {
    const auto& x = detail::input_data(n, 0);
    const auto& y = detail::input_data(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::input_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::input_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * x[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return make_op_result(a.shape(), std::move(out), "div", {a, b}, [](detail::Node& n) {
    const auto& x = detail::input_data(n, 0);
    const auto& y = detail::input_data(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::input_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / y[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::input_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * x[i] / (y[i] * y[i]);
    }
  });
}

inline Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_op_result(a.shape(), std::move(out), "scale", {a}, [factor](detail::Node& n) {
    auto& g = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * factor;
  });
}

inline Tensor add_scalar(const Tensor& a, Real offset) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + offset;
  return make_op_result(a.shape(), std::move(out), "add_scalar", {a}, [](detail::Node& n) {
    auto& g = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : Real{0};
  return make_op_result(a.shape(), std::move(out), "relu", {a}, [](detail::Node& n) {
    const auto& x = detail::input_data(n, 0);
    auto& g = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0) g[i] += n.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  Real total = 0;
  for (Real v : a.data()) total += v;
  return make_op_result({1}, {total}, "sum", {a}, [](detail::Node& n) {
    auto& g = detail::input_grad(n, 0);
    for (auto& v : g) v += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), Real{1} / static_cast<Real>(a.numel())); }

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, out_h, out_w;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
  detail::require_rank4(input, "conv2d input");
  detail::require_rank4(weight, "conv2d weight");
  if (stride == 0) throw ConfigError("conv2d stride must be positive");
  ConvGeometry g{input.extent(0), input.extent(1), input.extent(2), input.extent(3), weight.extent(0),
                 weight.extent(2), weight.extent(3), stride, padding, 0, 0};
  if (weight.extent(1) != g.cin) {
    throw DimensionError("conv2d: input has " + std::to_string(g.cin) + " channels but weight expects " +
                         std::to_string(weight.extent(1)));
  }
  // Floor semantics: trailing rows/columns that do not fit a full stride are dropped.
  auto out_extent = [&](std::size_t in, std::size_t k, const char* axis) {
    const std::size_t padded = in + 2 * padding;
    if (padded < k) {
      throw ConfigError(std::string("conv2d: ") + axis + " extent " + std::to_string(in) + " with padding " +
                        std::to_string(padding) + " is smaller than kernel extent " + std::to_string(k));
    }
    return (padded - k) / stride + 1;
  };
  g.out_h = out_extent(g.h, g.kh, "height");
  g.out_w = out_extent(g.w, g.kw, "width");
  return g;
}

namespace detail {

// Output columns x for which x*stride - pad + j lands inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const long s = static_cast<long>(g.stride);
  const long p = static_cast<long>(g.pad);
  const long jj = static_cast<long>(j);
  long lo = p - jj <= 0 ? 0 : (p - jj + s - 1) / s;
  long hi_edge = static_cast<long>(g.w) - 1 + p - jj;
  if (hi_edge < 0) return {0, 0};
  long hi = std::min<long>(hi_edge / s + 1, static_cast<long>(g.out_w));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// Direct-loop 2-D cross-correlation. Same contract as conv2d; kept as the
/// reference kernel.
inline Tensor conv2d_direct(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                            std::size_t padding = 0) {
  const ConvGeometry g = conv_geometry(input, weight, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != g.cout)) {
    throw DimensionError("conv2d: bias must have shape [" + std::to_string(g.cout) + "], got " +
                         shape_str(bias.shape()));
  }
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t in_plane = g.h * g.w;
  std::vector<Real> out(g.n * g.cout * out_plane, Real{0});
  const auto x = input.data();
  const auto w = weight.data();

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      Real* dst = out.data() + (n * g.cout + o) * out_plane;
      if (bias.defined()) std::fill(dst, dst + out_plane, bias[o]);
      for (std::size_t c = 0; c < g.cin; ++c) {
        const Real* src = x.data() + (n * g.cin + c) * in_plane;
        const Real* ker = w.data() + (o * g.cin + c) * g.kh * g.kw;
        for (std::size_t i = 0; i < g.kh; ++i) {
          for (std::size_t j = 0; j < g.kw; ++j) {
            const Real wv = ker[i * g.kw + j];
            const auto [x_lo, x_hi] = detail::valid_columns(g, j);
            for (std::size_t y = 0; y < g.out_h; ++y) {
              const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              const Real* row = src + static_cast<std::size_t>(iy) * g.w;
              Real* out_row = dst + y * g.out_w;
              for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
                out_row[ox] += wv * row[ox * g.stride + j - g.pad];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op_result({g.n, g.cout, g.out_h, g.out_w}, std::move(out), "conv2d_direct", std::move(inputs),
                        [g, has_bias, out_plane, in_plane](detail::Node& node) {
    const auto& xd = detail::input_data(node, 0);
    const auto& wd = detail::input_data(node, 1);
    const bool want_x = detail::wants_grad(node, 0);
    const bool want_w = detail::wants_grad(node, 1);
    Real* gx = want_x ? detail::input_grad(node, 0).data() : nullptr;
    Real* gw = want_w ? detail::input_grad(node, 1).data() : nullptr;
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t o = 0; o < g.cout; ++o) {
        const Real* gout = node.grad.data() + (n * g.cout + o) * out_plane;
        for (std::size_t c = 0; c < g.cin; ++c) {
          const Real* src = xd.data() + (n * g.cin + c) * in_plane;
          Real* gsrc = gx ? gx + (n * g.cin + c) * in_plane : nullptr;
          const std::size_t kbase = (o * g.cin + c) * g.kh * g.kw;
          for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
              const Real wv = wd[kbase + i * g.kw + j];
              const auto [x_lo, x_hi] = detail::valid_columns(g, j);
              Real acc = 0;
              for (std::size_t y = 0; y < g.out_h; ++y) {
                const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
                if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                const std::size_t row_off = static_cast<std::size_t>(iy) * g.w;
                const Real* grow = gout + y * g.out_w;
                for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
                  const std::size_t ix = row_off + ox * g.stride + j - g.pad;
                  if (gsrc) gsrc[ix] += wv * grow[ox];
                  acc += src[ix] * grow[ox];
                }
              }
              if (gw) gw[kbase + i * g.kw + j] += acc;
            }
          }
        }
      }
    }
    if (has_bias && detail::wants_grad(node, 2)) {
      auto& gb = detail::input_grad(node, 2);
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.cout; ++o) {
          const Real* gout = node.grad.data() + (n * g.cout + o) * out_plane;
          Real acc = 0;
          for (std::size_t k = 0; k < out_plane; ++k) acc += gout[k];
          gb[o] += acc;
        }
      }
    }
  });
}

namespace detail {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

// Patch matrix of one image: rows (c, i, j), columns output pixels.
inline void im2col(const ConvGeometry& g, const Real* src, Real* cols) {
  const std::size_t out_plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        Real* row = cols + ((c * g.kh + i) * g.kw + j) * out_plane;
        std::fill(row, row + out_plane, Real{0});
        const auto [x_lo, x_hi] = valid_columns(g, j);
        for (std::size_t y = 0; y < g.out_h; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const Real* in_row = src + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = x_lo; ox < x_hi; ++ox) row[y * g.out_w + ox] = in_row[ox * g.stride + j - g.pad];
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& g, const Real* cols, Real* dst) {
  const std::size_t out_plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const Real* row = cols + ((c * g.kh + i) * g.kw + j) * out_plane;
        const auto [x_lo, x_hi] = valid_columns(g, j);
        for (std::size_t y = 0; y < g.out_h; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          Real* out_row = dst + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = x_lo; ox < x_hi; ++ox) out_row[ox * g.stride + j - g.pad] += row[y * g.out_w + ox];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation; out-of-bounds input reads as zero. `bias` may be
/// undefined. Lowered to a patch matrix times the flattened kernel; agrees with
/// conv2d_direct up to summation order.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0) {
  const ConvGeometry g = conv_geometry(input, weight, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != g.cout)) {
    throw DimensionError("conv2d: bias must have shape [" + std::to_string(g.cout) + "], got " +
                         shape_str(bias.shape()));
  }
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t in_plane = g.h * g.w;
  const std::size_t patch = g.cin * g.kh * g.kw;
  const bool pointwise = detail::is_pointwise(g);
  std::vector<Real> out(g.n * g.cout * out_plane);
  std::vector<Real> cols(pointwise ? 0 : patch * out_plane);
  detail::ConstMatrixMap w(weight.data().data(), static_cast<long>(g.cout), static_cast<long>(patch));
  for (std::size_t n = 0; n < g.n; ++n) {
    const Real* src = input.data().data() + n * g.cin * in_plane;
    if (!pointwise) detail::im2col(g, src, cols.data());
    detail::ConstMatrixMap x(pointwise ? src : cols.data(), static_cast<long>(patch), static_cast<long>(out_plane));
    detail::MatrixMap y(out.data() + n * g.cout * out_plane, static_cast<long>(g.cout), static_cast<long>(out_plane));
    y.noalias() = w * x;
    if (bias.defined()) {
      for (std::size_t o = 0; o < g.cout; ++o) y.row(static_cast<long>(o)).array() += bias[o];
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op_result({g.n, g.cout, g.out_h, g.out_w}, std::move(out), "conv2d", std::move(inputs),
                        [g, has_bias, out_plane, in_plane, patch, pointwise](detail::Node& node) {
    const auto& xd = detail::input_data(node, 0);
    const auto& wd = detail::input_data(node, 1);
    const bool want_x = detail::wants_grad(node, 0);
    const bool want_w = detail::wants_grad(node, 1);
    detail::ConstMatrixMap w(wd.data(), static_cast<long>(g.cout), static_cast<long>(patch));
    std::vector<Real> cols(pointwise ? 0 : patch * out_plane);
    std::vector<Real> gcols(pointwise || !want_x ? 0 : patch * out_plane);
    for (std::size_t n = 0; n < g.n; ++n) {
      detail::ConstMatrixMap gy(node.grad.data() + n * g.cout * out_plane, static_cast<long>(g.cout),
                                static_cast<long>(out_plane));
      const Real* src = xd.data() + n * g.cin * in_plane;
      if (want_w) {
        if (!pointwise) detail::im2col(g, src, cols.data());
        detail::ConstMatrixMap x(pointwise ? src : cols.data(), static_cast<long>(patch), static_cast<long>(out_plane));
        detail::MatrixMap gw(detail::input_grad(node, 1).data(), static_cast<long>(g.cout), static_cast<long>(patch));
        gw.noalias() += gy * x.transpose();
      }
      if (want_x) {
        Real* gsrc = detail::input_grad(node, 0).data() + n * g.cin * in_plane;
        if (pointwise) {
          detail::MatrixMap gx(gsrc, static_cast<long>(patch), static_cast<long>(out_plane));
          gx.noalias() += w.transpose() * gy;
        } else {
          detail::MatrixMap gc(gcols.data(), static_cast<long>(patch), static_cast<long>(out_plane));
          gc.noalias() = w.transpose() * gy;
          detail::col2im_add(g, gcols.data(), gsrc);
        }
      }
    }
    if (has_bias && detail::wants_grad(node, 2)) {
      auto& gb = detail::input_grad(node, 2);
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.cout; ++o) {
          const Real* gout = node.grad.data() + (n * g.cout + o) * out_plane;
          Real acc = 0;
          for (std::size_t k = 0; k < out_plane; ++k) acc += gout[k];
          gb[o] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ContractError("concat_channels needs at least one input");
  for (const auto& t : inputs) detail::require_rank4(t, "concat_channels");
  const std::size_t n = inputs[0].extent(0), h = inputs[0].extent(2), w = inputs[0].extent(3);
  std::size_t total = 0;
  for (const auto& t : inputs) {
    if (t.extent(0) != n || t.extent(2) != h || t.extent(3) != w) {
      throw DimensionError("concat_channels: " + shape_str(t.shape()) + " does not match " +
                           shape_str(inputs[0].shape()) + " outside the channel axis");
    }
    total += t.extent(1);
  }
  const std::size_t plane = h * w;
  std::vector<Real> out(n * total * plane);
  std::vector<std::size_t> widths;
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      const std::size_t c = t.extent(1);
      const auto src = t.data().subspan(b * c * plane, c * plane);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<long>((b * total + offset) * plane));
      offset += c;
    }
  }
  for (const auto& t : inputs) widths.push_back(t.extent(1));
  return make_op_result({n, total, h, w}, std::move(out), "concat_channels", inputs,
                        [widths, n, total, plane](detail::Node& node) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t c = widths[k];
      if (detail::wants_grad(node, k)) {
        auto& g = detail::input_grad(node, k);
        for (std::size_t b = 0; b < n; ++b) {
          const Real* src = node.grad.data() + (b * total + offset) * plane;
          Real* dst = g.data() + b * c * plane;
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
}

/// Channels [begin, begin + count) of an N x C x H x W tensor.
inline Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t count) {
  detail::require_rank4(input, "slice_channels");
  const std::size_t n = input.extent(0), c = input.extent(1), plane = input.extent(2) * input.extent(3);
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(c) + " channels");
  }
  std::vector<Real> out(n * count * plane);
  for (std::size_t b = 0; b < n; ++b) {
    const auto src = input.data().subspan((b * c + begin) * plane, count * plane);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<long>(b * count * plane));
  }
  return make_op_result({n, count, input.extent(2), input.extent(3)}, std::move(out), "slice_channels", {input},
                        [n, c, begin, count, plane](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    for (std::size_t b = 0; b < n; ++b) {
      const Real* src = node.grad.data() + b * count * plane;
      Real* dst = g.data() + (b * c + begin) * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

inline std::vector<Tensor> split_channels(const Tensor& input, const std::vector<std::size_t>& widths) {
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (std::size_t w : widths) {
    parts.push_back(slice_channels(input, offset, w));
    offset += w;
  }
  if (offset != input.extent(1)) throw DimensionError("split_channels: widths do not cover the channel axis");
  return parts;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest2x(const Tensor& input) {
  detail::require_rank4(input, "upsample_nearest2x");
  const std::size_t planes = input.extent(0) * input.extent(1), h = input.extent(2), w = input.extent(3);
  std::vector<Real> out(planes * 4 * h * w);
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make_op_result({input.extent(0), input.extent(1), 2 * h, 2 * w}, std::move(out), "upsample_nearest2x",
                        {input}, [planes, h, w](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) {
          g[(p * h + y / 2) * w + xx / 2] += node.grad[(p * 2 * h + y) * 2 * w + xx];
        }
      }
    }
  });
}

namespace detail {

inline void require_even(const Tensor& input, const char* op) {
  require_rank4(input, op);
  if (input.extent(2) % 2 != 0 || input.extent(3) % 2 != 0) {
    throw DimensionError(std::string(op) + " needs even spatial extents, got " + shape_str(input.shape()));
  }
}

}  // namespace detail

inline Tensor avgpool2x(const Tensor& input) {
  detail::require_even(input, "avgpool2x");
  const std::size_t planes = input.extent(0) * input.extent(1), oh = input.extent(2) / 2, ow = input.extent(3) / 2;
  const std::size_t w = input.extent(3);
  std::vector<Real> out(planes * oh * ow);
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = x.data() + p * 4 * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const Real* a = src + 2 * y * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = (a[0] + a[1] + a[w] + a[w + 1]) * Real{0.25};
      }
    }
  }
  return make_op_result({input.extent(0), input.extent(1), oh, ow}, std::move(out), "avgpool2x", {input},
                        [planes, oh, ow, w](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    for (std::size_t p = 0; p < planes; ++p) {
      Real* dst = g.data() + p * 4 * oh * ow;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const Real v = node.grad[(p * oh + y) * ow + xx] * Real{0.25};
          Real* a = dst + 2 * y * w + 2 * xx;
          a[0] += v;
          a[1] += v;
          a[w] += v;
          a[w + 1] += v;
        }
      }
    }
  });
}

/// 2x2 max pooling; ties route the gradient to the first maximum in row-major order.
inline Tensor maxpool2x(const Tensor& input) {
  detail::require_even(input, "maxpool2x");
  const std::size_t planes = input.extent(0) * input.extent(1), oh = input.extent(2) / 2, ow = input.extent(3) / 2;
  const std::size_t w = input.extent(3);
  std::vector<Real> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * 4 * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t corner = base + 2 * y * w + 2 * xx;
        std::size_t best = corner;
        for (std::size_t cand : {corner + 1, corner + w, corner + w + 1}) {
          if (x[cand] > x[best]) best = cand;
        }
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return make_op_result({input.extent(0), input.extent(1), oh, ow}, std::move(out), "maxpool2x", {input},
                        [argmax = std::move(argmax)](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += node.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class Mode { kTrain, kEval };

struct BatchNormOptions {
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);
};

/// Per-channel normalization. Train mode normalizes with batch statistics and
/// updates `running_mean`/`running_var` in place (unbiased variance); eval
/// mode uses the running statistics.
inline Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                        Tensor& running_var, Mode mode, BatchNormOptions opts = {}) {
  detail::require_rank4(input, "batchnorm");
  const std::size_t n = input.extent(0), c = input.extent(1), plane = input.extent(2) * input.extent(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->extent(0) != c) {
      throw DimensionError("batchnorm: per-channel parameter of shape " + shape_str(t->shape()) + " for " +
                           std::to_string(c) + " channels");
    }
  }
  const std::size_t count = n * plane;
  const auto x = input.data();
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(c);
  std::vector<Real> out(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    Real mu, var;
    if (mode == Mode::kTrain) {
      Real acc = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const Real* src = x.data() + (b * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) acc += src[k];
      }
      mu = acc / static_cast<Real>(count);
      Real sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const Real* src = x.data() + (b * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) sq += (src[k] - mu) * (src[k] - mu);
      }
      var = sq / static_cast<Real>(count);
      const Real unbiased = count > 1 ? sq / static_cast<Real>(count - 1) : var;
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = (1 - opts.momentum) * rm[ch] + opts.momentum * mu;
      rv[ch] = (1 - opts.momentum) * rv[ch] + opts.momentum * unbiased;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    inv_std[ch] = Real{1} / std::sqrt(var + opts.eps);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        xhat[off + k] = (x[off + k] - mu) * inv_std[ch];
        out[off + k] = gamma[ch] * xhat[off + k] + beta[ch];
      }
    }
  }
  const bool train = mode == Mode::kTrain;
  return make_op_result(input.shape(), std::move(out), "batchnorm", {input, gamma, beta},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, count,
                         train](detail::Node& node) {
    const auto& gamma_d = detail::input_data(node, 1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          sum_dy += node.grad[off + k];
          sum_dy_xhat += node.grad[off + k] * xhat[off + k];
        }
      }
      if (detail::wants_grad(node, 1)) detail::input_grad(node, 1)[ch] += sum_dy_xhat;
      if (detail::wants_grad(node, 2)) detail::input_grad(node, 2)[ch] += sum_dy;
      if (!detail::wants_grad(node, 0)) continue;
      auto& gx = detail::input_grad(node, 0);
      const Real scale_ = gamma_d[ch] * inv_std[ch];
      const Real m = static_cast<Real>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          if (train) {
            gx[off + k] += scale_ * (node.grad[off + k] - sum_dy / m - xhat[off + k] * sum_dy_xhat / m);
          } else {
            gx[off + k] += scale_ * node.grad[off + k];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Classification heads and losses
// ---------------------------------------------------------------------------

/// Softmax over the channel axis of N x K x H x W.
inline Tensor softmax_channels(const Tensor& logits) {
  detail::require_rank4(logits, "softmax_channels");
  const std::size_t n = logits.extent(0), k = logits.extent(1), plane = logits.extent(2) * logits.extent(3);
  const auto z = logits.data();
  std::vector<Real> out(z.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = b * k * plane + p;
      Real mx = z[base];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[base + c * plane]);
      Real norm = 0;
      for (std::size_t c = 0; c < k; ++c) norm += (out[base + c * plane] = std::exp(z[base + c * plane] - mx));
      for (std::size_t c = 0; c < k; ++c) out[base + c * plane] /= norm;
    }
  }
  return make_op_result(logits.shape(), out, "softmax_channels", {logits},
                        [probs = out, n, k, plane](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = b * k * plane + p;
        Real dot = 0;
        for (std::size_t c = 0; c < k; ++c) dot += node.grad[base + c * plane] * probs[base + c * plane];
        for (std::size_t c = 0; c < k; ++c) {
          g[base + c * plane] += probs[base + c * plane] * (node.grad[base + c * plane] - dot);
        }
      }
    }
  });
}

namespace detail {

inline void check_labels(const Tensor& logits, std::span<const int> labels, int classes, const char* op) {
  const std::size_t pixels = logits.extent(0) * logits.extent(2) * logits.extent(3);
  if (labels.size() != pixels) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(pixels) + " pixels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw DataError(std::string(op) + ": label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace detail

/// Mean pixelwise softmax cross-entropy. `labels` is N x H x W, row-major.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank4(logits, "softmax_cross_entropy");
  const std::size_t n = logits.extent(0), k = logits.extent(1), plane = logits.extent(2) * logits.extent(3);
  if (k < 2) throw ConfigError("softmax_cross_entropy needs at least two classes");
  detail::check_labels(logits, labels, static_cast<int>(k), "softmax_cross_entropy");
  const auto z = logits.data();
  std::vector<Real> probs(z.size());
  Real total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = b * k * plane + p;
      Real mx = z[base];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[base + c * plane]);
      Real norm = 0;
      for (std::size_t c = 0; c < k; ++c) norm += (probs[base + c * plane] = std::exp(z[base + c * plane] - mx));
      for (std::size_t c = 0; c < k; ++c) probs[base + c * plane] /= norm;
      const auto label = static_cast<std::size_t>(labels[b * plane + p]);
      total += std::log(norm) + mx - z[base + label * plane];
    }
  }
  const Real pixels = static_cast<Real>(n * plane);
  std::vector<int> saved(labels.begin(), labels.end());
  return make_op_result({1}, {total / pixels}, "softmax_cross_entropy", {logits},
                        [probs = std::move(probs), saved = std::move(saved), n, k, plane, pixels](detail::Node& node) {
    auto& g = detail::input_grad(node, 0);
    const Real up = node.grad[0] / pixels;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = b * k * plane + p;
        const auto label = static_cast<std::size_t>(saved[b * plane + p]);
        for (std::size_t c = 0; c < k; ++c) {
          g[base + c * plane] += up * (probs[base + c * plane] - (c == label ? Real{1} : Real{0}));
        }
      }
    }
  });
}

/// Mean binary cross-entropy on single-channel logits (labels 0/1).
inline Tensor sigmoid_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank4(logits, "sigmoid_cross_entropy");
  if (logits.extent(1) != 1) throw ConfigError("sigmoid_cross_entropy expects one channel");
  detail::check_labels(logits, labels, 2, "sigmoid_cross_entropy");
  const auto z = logits.data();
  Real total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], Real{0}) - z[i] * static_cast<Real>(labels[i]) + std::log1p(std::exp(-std::abs(z[i])));
  }
  const Real pixels = static_cast<Real>(z.size());
  std::vector<int> saved(labels.begin(), labels.end());
  return make_op_result({1}, {total / pixels}, "sigmoid_cross_entropy", {logits},
                        [saved = std::move(saved), pixels](detail::Node& node) {
    const auto& zd = detail::input_data(node, 0);
    auto& g = detail::input_grad(node, 0);
    const Real up = node.grad[0] / pixels;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real s = Real{1} / (Real{1} + std::exp(-zd[i]));
      g[i] += up * (s - static_cast<Real>(saved[i]));
    }
  });
}

}  // namespace octofuse
