#pragma once

// Differentiable primitives. Every backward rule is written in terms of other
// primitives from this file, so when a backward pass runs with recording
// enabled (create_graph) the gradient itself lands on the tape and can be
// differentiated again.

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmq/tensor.hpp"

namespace mmq {

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  std::vector<float> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sum(const Tensor& a);
Tensor broadcast(const Tensor& s, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor row_sum(const Tensor& a);
Tensor expand_cols(const Tensor& v, std::size_t cols);
Tensor col_sum(const Tensor& a);
Tensor expand_rows(const Tensor& v, std::size_t rows);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 2);
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& x_shape,
                         std::size_t stride);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& w_shape,
                          std::size_t stride);
Tensor channel_sum(const Tensor& x);
Tensor channel_expand(const Tensor& b, const Shape& shape);
Tensor spatial_mean(const Tensor& x);
Tensor spatial_expand_mean(const Tensor& g, std::size_t height, std::size_t width);
Tensor softmax(const Tensor& z);
Tensor log_softmax(const Tensor& z);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor pad_cols(const Tensor& x, std::size_t start, std::size_t total);

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = detail::map_binary(a, b, [](float x, float y) { return x + y; });
  return detail::record(std::move(out), "add", {a, b},
                        [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = detail::map_binary(a, b, [](float x, float y) { return x - y; });
  return detail::record(std::move(out), "sub", {a, b}, [](const Tensor& g) {
    return std::vector<Tensor>{g, scale(g, -1.0f)};
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = detail::map_binary(a, b, [](float x, float y) { return x * y; });
  return detail::record(std::move(out), "mul", {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{a.requires_grad() ? mul(g, b) : Tensor{},
                               b.requires_grad() ? mul(g, a) : Tensor{}};
  });
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (float& v : out) v *= s;
  return detail::record(Tensor(a.shape(), std::move(out)), "scale", {a},
                        [s](const Tensor& g) { return std::vector<Tensor>{scale(g, s)}; });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Shape shape = a.shape();
  return detail::record(Tensor::scalar(static_cast<float>(acc)), "sum", {a},
                        [shape](const Tensor& g) {
                          return std::vector<Tensor>{broadcast(g, shape)};
                        });
}

inline Tensor broadcast(const Tensor& s, const Shape& shape) {
  if (s.numel() != 1) throw DimensionError("broadcast: source must be a scalar");
  return detail::record(Tensor::full(shape, s.at(0)), "broadcast", {s},
                        [](const Tensor& g) { return std::vector<Tensor>{sum(g)}; });
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Shape from = a.shape();
  std::vector<float> data(a.data().begin(), a.data().end());
  return detail::record(Tensor(shape, std::move(data)), "reshape", {a},
                        [from](const Tensor& g) { return std::vector<Tensor>{reshape(g, from)}; });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<float> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::record(Tensor({c, r}, std::move(out)), "transpose", {a},
                        [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  detail::MatMap(out.data(), m, n).noalias() =
      detail::ConstMatMap(a.data().data(), m, k) * detail::ConstMatMap(b.data().data(), k, n);
  return detail::record(Tensor({m, n}, std::move(out)), "matmul", {a, b},
                        [a, b](const Tensor& g) {
                          return std::vector<Tensor>{
                              a.requires_grad() ? matmul(g, transpose(b)) : Tensor{},
                              b.requires_grad() ? matmul(transpose(a), g) : Tensor{}};
                        });
}

inline Tensor row_sum(const Tensor& a) {
  detail::require_rank(a, 2, "row_sum");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<float> out(r, 0.0f);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += x[i * c + j];
    out[i] = static_cast<float>(acc);
  }
  return detail::record(Tensor({r}, std::move(out)), "row_sum", {a},
                        [c](const Tensor& g) { return std::vector<Tensor>{expand_cols(g, c)}; });
}

inline Tensor expand_cols(const Tensor& v, std::size_t cols) {
  detail::require_rank(v, 1, "expand_cols");
  const std::size_t r = v.dim(0);
  std::vector<float> out(r * cols);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = v.data()[i];
  return detail::record(Tensor({r, cols}, std::move(out)), "expand_cols", {v},
                        [](const Tensor& g) { return std::vector<Tensor>{row_sum(g)}; });
}

inline Tensor col_sum(const Tensor& a) {
  detail::require_rank(a, 2, "col_sum");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> acc(c, 0.0);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) acc[j] += x[i * c + j];
  std::vector<float> out(acc.begin(), acc.end());
  return detail::record(Tensor({c}, std::move(out)), "col_sum", {a},
                        [r](const Tensor& g) { return std::vector<Tensor>{expand_rows(g, r)}; });
}

inline Tensor expand_rows(const Tensor& v, std::size_t rows) {
  detail::require_rank(v, 1, "expand_rows");
  const std::size_t c = v.dim(0);
  std::vector<float> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
  return detail::record(Tensor({rows, c}, std::move(out)), "expand_rows", {v},
                        [](const Tensor& g) { return std::vector<Tensor>{col_sum(g)}; });
}

inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  detail::require_rank(a, 2, "add_row_bias");
  if (bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(a.shape()));
  }
  return add(a, expand_rows(bias, a.dim(0)));
}

// x·W + b with W stored [in × out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel()), mask(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = v[i] > 0.0f ? 1.0f : 0.0f;
    out[i] = v[i] * mask[i];
  }
  Tensor m(x.shape(), std::move(mask));
  return detail::record(Tensor(x.shape(), std::move(out)), "relu", {x},
                        [m](const Tensor& g) { return std::vector<Tensor>{mul(g, m)}; });
}

// ---------------------------------------------------------------------------
// Convolution: valid (unpadded) cross-correlation over [N, C, H, W] batches.
// conv2d, conv2d_input_grad and conv2d_weight_grad are mutually adjoint, which
// closes the set under repeated differentiation.

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride) {
  return (in - k) / stride + 1;
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, ho, wo;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                  const char* op) {
  if (x.size() != 4 || w.size() != 4) {
    throw DimensionError(std::string(op) + ": expected [N,C,H,W] input and [O,C,k,k] kernel, got " +
                         shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1] || w[2] != w[3]) {
    throw DimensionError(std::string(op) + ": kernel " + shape_str(w) + " does not fit input " +
                         shape_str(x));
  }
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be positive");
  const std::size_t k = w[2];
  if (x[2] < k || x[3] < k) {
    throw DimensionError(std::string(op) + ": input " + shape_str(x) + " smaller than " +
                         std::to_string(k) + "x" + std::to_string(k) + " kernel");
  }
  return {x[0], x[1], x[2], x[3], w[0], k, stride, conv_out(x[2], k, stride),
          conv_out(x[3], k, stride)};
}

inline void im2col(const float* x, const ConvGeometry& g, float* cols) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        float* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        const float* plane = x + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const float* src = plane + (oy * g.stride + ky) * g.w + kx;
          for (std::size_t ox = 0; ox < g.wo; ++ox) row[oy * g.wo + ox] = src[ox * g.stride];
        }
      }
}

inline void col2im_add(const float* cols, const ConvGeometry& g, float* x) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const float* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        float* plane = x + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          float* dst = plane + (oy * g.stride + ky) * g.w + kx;
          for (std::size_t ox = 0; ox < g.wo; ++ox) dst[ox * g.stride] += row[oy * g.wo + ox];
        }
      }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() == 3) {
    Tensor y = conv2d(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}), w, stride);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
  }
  const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, "conv2d");
  const std::size_t p = g.positions(), kk = g.patch();
  std::vector<float> out(g.n * g.o * p);
  std::vector<float> cols(kk * p);
  detail::ConstMatMap wm(w.data().data(), g.o, kk);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(x.data().data() + n * g.c * g.h * g.w, g, cols.data());
    detail::MatMap(out.data() + n * g.o * p, g.o, p).noalias() =
        wm * detail::ConstMatMap(cols.data(), kk, p);
  }
  Shape xs = x.shape(), ws = w.shape();
  return detail::record(Tensor({g.n, g.o, g.ho, g.wo}, std::move(out)), "conv2d", {x, w},
                        [x, w, xs, ws, stride](const Tensor& grad) {
                          return std::vector<Tensor>{
                              x.requires_grad() ? conv2d_input_grad(grad, w, xs, stride) : Tensor{},
                              w.requires_grad() ? conv2d_weight_grad(x, grad, ws, stride)
                                                : Tensor{}};
                        });
}

inline Tensor conv2d_input_grad(const Tensor& grad, const Tensor& w, const Shape& x_shape,
                                std::size_t stride) {
  const auto g = detail::conv_geometry(x_shape, w.shape(), stride, "conv2d_input_grad");
  if (grad.shape() != Shape{g.n, g.o, g.ho, g.wo}) {
    throw DimensionError("conv2d_input_grad: gradient " + shape_str(grad.shape()) +
                         " does not match output geometry");
  }
  const std::size_t p = g.positions(), kk = g.patch();
  std::vector<float> out(numel(x_shape), 0.0f);
  std::vector<float> cols(kk * p);
  detail::ConstMatMap wm(w.data().data(), g.o, kk);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::MatMap(cols.data(), kk, p).noalias() =
        wm.transpose() * detail::ConstMatMap(grad.data().data() + n * g.o * p, g.o, p);
    detail::col2im_add(cols.data(), g, out.data() + n * g.c * g.h * g.w);
  }
  Shape ws = w.shape();
  return detail::record(Tensor(x_shape, std::move(out)), "conv2d_input_grad", {grad, w},
                        [grad, w, ws, stride](const Tensor& gx) {
                          return std::vector<Tensor>{
                              grad.requires_grad() ? conv2d(gx, w, stride) : Tensor{},
                              w.requires_grad() ? conv2d_weight_grad(gx, grad, ws, stride)
                                                : Tensor{}};
                        });
}

inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const Shape& w_shape,
                                 std::size_t stride) {
  const auto g = detail::conv_geometry(x.shape(), w_shape, stride, "conv2d_weight_grad");
  if (grad.shape() != Shape{g.n, g.o, g.ho, g.wo}) {
    throw DimensionError("conv2d_weight_grad: gradient " + shape_str(grad.shape()) +
                         " does not match output geometry");
  }
  const std::size_t p = g.positions(), kk = g.patch();
  std::vector<float> out(g.o * kk, 0.0f);
  std::vector<float> cols(kk * p);
  detail::MatMap wm(out.data(), g.o, kk);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(x.data().data() + n * g.c * g.h * g.w, g, cols.data());
    wm.noalias() += detail::ConstMatMap(grad.data().data() + n * g.o * p, g.o, p) *
                    detail::ConstMatMap(cols.data(), kk, p).transpose();
  }
  Shape xs = x.shape();
  return detail::record(Tensor(w_shape, std::move(out)), "conv2d_weight_grad", {x, grad},
                        [x, grad, xs, stride](const Tensor& gw) {
                          return std::vector<Tensor>{
                              x.requires_grad() ? conv2d_input_grad(grad, gw, xs, stride)
                                                : Tensor{},
                              grad.requires_grad() ? conv2d(x, gw, stride) : Tensor{}};
                        });
}

inline Tensor channel_sum(const Tensor& x) {
  detail::require_rank(x, 4, "channel_sum");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> acc(c, 0.0);
  auto v = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = v.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) acc[ch] += p[j];
    }
  Shape shape = x.shape();
  return detail::record(Tensor({c}, std::vector<float>(acc.begin(), acc.end())), "channel_sum",
                        {x}, [shape](const Tensor& g) {
                          return std::vector<Tensor>{channel_expand(g, shape)};
                        });
}

inline Tensor channel_expand(const Tensor& b, const Shape& shape) {
  if (shape.size() != 4 || b.rank() != 1 || b.dim(0) != shape[1]) {
    throw DimensionError("channel_expand: bias " + shape_str(b.shape()) + " does not fit " +
                         shape_str(shape));
  }
  const std::size_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  std::vector<float> out(numel(shape));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((i * c + ch) * hw), hw, b.data()[ch]);
  return detail::record(Tensor(shape, std::move(out)), "channel_expand", {b},
                        [](const Tensor& g) { return std::vector<Tensor>{channel_sum(g)}; });
}

inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  return add(x, channel_expand(b, x.shape()));
}

// [N, C, H, W] -> [N, C]
inline Tensor spatial_mean(const Tensor& x) {
  detail::require_rank(x, 4, "spatial_mean");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  std::vector<float> out(n * c);
  auto v = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += v[i * hw + j];
    out[i] = static_cast<float>(acc / static_cast<double>(hw));
  }
  return detail::record(Tensor({n, c}, std::move(out)), "spatial_mean", {x},
                        [h, w](const Tensor& g) {
                          return std::vector<Tensor>{spatial_expand_mean(g, h, w)};
                        });
}

inline Tensor spatial_expand_mean(const Tensor& g, std::size_t height, std::size_t width) {
  detail::require_rank(g, 2, "spatial_expand_mean");
  const std::size_t n = g.dim(0), c = g.dim(1), hw = height * width;
  const float inv = 1.0f / static_cast<float>(hw);
  std::vector<float> out(n * c * hw);
  for (std::size_t i = 0; i < n * c; ++i)
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * hw), hw, g.data()[i] * inv);
  return detail::record(Tensor({n, c, height, width}, std::move(out)), "spatial_expand_mean", {g},
                        [](const Tensor& gg) { return std::vector<Tensor>{spatial_mean(gg)}; });
}

// ---------------------------------------------------------------------------
// Softmax family over the last axis of [N, K].

namespace detail {

inline std::vector<float> softmax_rows(std::span<const float> z, std::size_t rows,
                                       std::size_t cols) {
  std::vector<float> out(z.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const float* zi = z.data() + i * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, zi[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(static_cast<double>(zi[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = static_cast<float>(std::exp(static_cast<double>(zi[j] - mx)) / total);
    }
  }
  return out;
}

}  // namespace detail

inline Tensor softmax(const Tensor& z) {
  detail::require_rank(z, 2, "softmax");
  const std::size_t cols = z.dim(1);
  Tensor out(z.shape(), detail::softmax_rows(z.data(), z.dim(0), cols));
  return detail::record(std::move(out), "softmax", {z}, [z, cols](const Tensor& g) {
    Tensor s = softmax(z);
    Tensor sg = mul(s, g);
    return std::vector<Tensor>{sub(sg, mul(s, expand_cols(row_sum(sg), cols)))};
  });
}

inline Tensor log_softmax(const Tensor& z) {
  detail::require_rank(z, 2, "log_softmax");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  std::vector<float> out(z.numel());
  auto v = z.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const float* zi = v.data() + i * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, zi[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(static_cast<double>(zi[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = static_cast<float>(static_cast<double>(zi[j]) - lse);
    }
  }
  return detail::record(Tensor(z.shape(), std::move(out)), "log_softmax", {z},
                        [z, cols](const Tensor& g) {
                          return std::vector<Tensor>{
                              sub(g, mul(softmax(z), expand_cols(row_sum(g), cols)))};
                        });
}

inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<float> out(labels.size() * classes, 0.0f);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return Tensor({labels.size(), classes}, std::move(out));
}

struct CrossEntropy {
  Tensor loss;   // scalar, mean over rows
  Tensor probs;  // [N, K], not on the tape
};

// Mean softmax cross-entropy. Accepts [K] logits with one label or [N, K].
inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  Tensor z = logits.rank() == 1 ? reshape(logits, {1, logits.dim(0)}) : logits;
  detail::require_rank(z, 2, "softmax_cross_entropy");
  if (labels.size() != z.dim(0)) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(z.shape()));
  }
  Tensor target = one_hot(labels, z.dim(1));
  Tensor loss = scale(sum(mul(target, log_softmax(z))), -1.0f / static_cast<float>(z.dim(0)));
  return {loss, Tensor(z.shape(), detail::softmax_rows(z.data(), z.dim(0), z.dim(1)))};
}

inline CrossEntropy softmax_cross_entropy(const Tensor& logits, int label) {
  const int labels[1] = {label};
  return softmax_cross_entropy(logits, std::span<const int>(labels, 1));
}

// ---------------------------------------------------------------------------
// Column blocks, used for feature concatenation.

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (len == 0 || start + len > cols) {
    throw DimensionError("slice_cols: block [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  }
  std::vector<float> out(rows * len);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x.data()[i * cols + start + j];
  return detail::record(Tensor({rows, len}, std::move(out)), "slice_cols", {x},
                        [start, cols](const Tensor& g) {
                          return std::vector<Tensor>{pad_cols(g, start, cols)};
                        });
}

inline Tensor pad_cols(const Tensor& x, std::size_t start, std::size_t total) {
  detail::require_rank(x, 2, "pad_cols");
  const std::size_t rows = x.dim(0), len = x.dim(1);
  if (start + len > total) throw DimensionError("pad_cols: block does not fit");
  std::vector<float> out(rows * total, 0.0f);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * total + start + j] = x.data()[i * len + j];
  return detail::record(Tensor({rows, total}, std::move(out)), "pad_cols", {x},
                        [start, len](const Tensor& g) {
                          return std::vector<Tensor>{slice_cols(g, start, len)};
                        });
}

inline Tensor concat_cols(std::span<const Tensor> blocks) {
  if (blocks.empty()) throw DimensionError("concat_cols: no blocks");
  const std::size_t rows = blocks[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& b : blocks) {
    detail::require_rank(b, 2, "concat_cols");
    if (b.dim(0) != rows) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(b.dim(1));
    total += b.dim(1);
  }
  std::vector<float> out(rows * total);
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    const std::size_t w = b.dim(1);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = b.data()[i * w + j];
    offset += w;
  }
  return detail::record(Tensor({rows, total}, std::move(out)), "concat_cols",
                        std::vector<Tensor>(blocks.begin(), blocks.end()),
                        [widths](const Tensor& g) {
                          std::vector<Tensor> grads;
                          std::size_t off = 0;
                          for (std::size_t w : widths) {
                            grads.push_back(slice_cols(g, off, w));
                            off += w;
                          }
                          return grads;
                        });
}

}  // namespace mmq
