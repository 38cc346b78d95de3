// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdk/error.hpp"

namespace qdk {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor of doubles. Quantized codes are stored as exact
/// small integers in the same representation.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<double> data, std::string name = {})
      : shape_(std::move(shape)), data_(std::move(data)), name_(std::move(name)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range");
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors; callers guarantee rank 2.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_, name_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  std::string name_;
};

/// One channel of a tensor along a given axis, e.g. x_i of an n×d activation.
class ChannelView {
 public:
  ChannelView(const Tensor& parent, std::size_t axis, std::size_t index)
      : parent_(&parent), axis_(axis), index_(index) {
    if (axis >= parent.rank()) throw ShapeError("channel axis out of range");
    if (index >= parent.dim(axis)) throw ShapeError("channel index out of range");
    extent_ = parent.dim(axis);
    inner_ = 1;
    for (std::size_t a = axis + 1; a < parent.rank(); ++a) inner_ *= parent.dim(a);
    outer_ = parent.size() / (extent_ * inner_);
  }

  std::size_t size() const { return outer_ * inner_; }

  // Flat offset into the parent for the j-th element of this channel.
  std::size_t offset(std::size_t j) const {
    const std::size_t o = j / inner_;
    const std::size_t in = j % inner_;
    return (o * extent_ + index_) * inner_ + in;
  }

  double operator[](std::size_t j) const { return (*parent_)[offset(j)]; }

  std::vector<double> values() const {
    std::vector<double> out(size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = (*this)[j];
    return out;
  }

 private:
  const Tensor* parent_;
  std::size_t axis_;
  std::size_t index_;
  std::size_t extent_ = 0;
  std::size_t inner_ = 1;
  std::size_t outer_ = 1;
};

/// Channel index of every flat element for a channel axis.
inline std::size_t channel_of(const Shape& shape, std::size_t axis, std::size_t flat) {
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  return (flat / inner) % shape[axis];
}

/// Linearly interpolated percentile at fractional index (eps/100)*(n-1).
inline double percentile(std::span<const double> values, double epsilon) {
  if (values.empty()) throw DomainError("percentile of an empty sequence");
  if (!(epsilon > 0.0 && epsilon < 100.0)) {
    throw DomainError("percentile epsilon must lie in (0, 100), got " + std::to_string(epsilon));
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = epsilon / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += aip * b.at(p, j);
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("elementwise add shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("elementwise sub shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (double& v : c.values()) v *= s;
  return c;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

inline double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Horizontal concatenation of rank-2 tensors sharing a row count.
inline Tensor hconcat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("hconcat of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) throw ShapeError("hconcat row mismatch");
    cols += p.cols();
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out.at(r, off + c) = p.at(r, c);
    off += p.cols();
  }
  return out;
}

struct Conv2dGeometry {
  std::size_t channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                      std::size_t padding) {
  if (input.size() != 3 && input.size() != 4) throw ShapeError("conv2d input must be CHW or NCHW");
  if (kernel.size() != 4) throw ShapeError("conv2d kernel must be OIHW");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t off = input.size() == 4 ? 1 : 0;
  if (input.size() == 4 && input[0] != 1) throw ShapeError("conv2d supports batch size 1");
  Conv2dGeometry g{input[off], input[off + 1], input[off + 2], kernel[0], kernel[2], kernel[3],
                   stride, padding, 0, 0};
  if (kernel[1] != g.channels) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(input) + ", kernel " +
                     shape_string(kernel));
  }
  const std::size_t ph = g.height + 2 * padding, pw = g.width + 2 * padding;
  if (ph < g.kernel_h || pw < g.kernel_w) throw ShapeError("conv2d output extent not positive");
  g.out_h = (ph - g.kernel_h) / stride + 1;
  g.out_w = (pw - g.kernel_w) / stride + 1;
  return g;
}

/// Lowers a CHW (or 1×CHW) input to a (C·kh·kw) × (out_h·out_w) patch matrix.
inline Tensor im2col(const Tensor& input, std::size_t kernel_h, std::size_t kernel_w,
                     std::size_t stride, std::size_t padding) {
  const std::size_t off = input.rank() == 4 ? 1 : 0;
  const std::size_t c = input.dim(off);
  const Conv2dGeometry g =
      conv2d_geometry(input.shape(), {1, c, kernel_h, kernel_w}, stride, padding);
  Tensor cols({c * kernel_h * kernel_w, g.out_h * g.out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < kernel_w; ++kx) {
        const std::size_t row = (ch * kernel_h + ky) * kernel_w + kx;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(padding);
            double v = 0.0;
            if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                ix < static_cast<std::ptrdiff_t>(g.width)) {
              v = input[(ch * g.height + static_cast<std::size_t>(iy)) * g.width +
                        static_cast<std::size_t>(ix)];
            }
            cols.at(row, oy * g.out_w + ox) = v;
          }
        }
      }
    }
  }
  return cols;
}

/// Scatters a patch-matrix gradient back onto the input layout (adjoint of im2col).
inline Tensor col2im(const Tensor& cols, const Shape& input_shape, std::size_t kernel_h,
                     std::size_t kernel_w, std::size_t stride, std::size_t padding) {
  const std::size_t off = input_shape.size() == 4 ? 1 : 0;
  const std::size_t c = input_shape[off];
  const Conv2dGeometry g = conv2d_geometry(input_shape, {1, c, kernel_h, kernel_w}, stride, padding);
  Tensor out(input_shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kernel_h; ++ky)
      for (std::size_t kx = 0; kx < kernel_w; ++kx) {
        const std::size_t row = (ch * kernel_h + ky) * kernel_w + kx;
        for (std::size_t oy = 0; oy < g.out_h; ++oy)
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                ix >= static_cast<std::ptrdiff_t>(g.width))
              continue;
            out[(ch * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += cols.at(row, oy * g.out_w + ox);
          }
      }
  return out;
}

/// Direct convolution. Input CHW or 1×CHW, kernel OIHW; output keeps the input's rank.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     std::size_t padding) {
  const Conv2dGeometry g = conv2d_geometry(input.shape(), kernel.shape(), stride, padding);
  Shape out_shape = input.rank() == 4 ? Shape{1, g.out_channels, g.out_h, g.out_w}
                                      : Shape{g.out_channels, g.out_h, g.out_w};
  Tensor out(out_shape);
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.channels; ++c) {
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              acc += kernel[((o * g.channels + c) * g.kernel_h + ky) * g.kernel_w + kx] *
                     input[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                           static_cast<std::size_t>(ix)];
            }
          }
        }
        out[(o * g.out_h + oy) * g.out_w + ox] = acc;
      }
    }
  }
  return out;
}

/// Solves S·X = B for symmetric positive-definite S via Cholesky, without forming S⁻¹.
/// Throws SolverError when S is not numerically positive definite.
inline Tensor cholesky_solve(const Tensor& s, const Tensor& b) {
  if (s.rank() != 2 || s.rows() != s.cols()) throw ShapeError("cholesky_solve needs a square matrix");
  if (b.rank() != 2 || b.rows() != s.rows()) throw ShapeError("cholesky_solve rhs row mismatch");
  const std::size_t n = s.rows();
  Tensor l({n, n});
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(s.at(i, i)));
  const double tiny = max_diag * 1e-14;
  for (std::size_t j = 0; j < n; ++j) {
    double d = s.at(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
    if (!(d > tiny)) {
      throw SolverError("matrix is not positive definite at pivot " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s.at(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = v / ljj;
    }
  }
  Tensor x = b;
  const std::size_t m = b.cols();
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double v = x.at(i, c);
      for (std::size_t k = 0; k < i; ++k) v -= l.at(i, k) * x.at(k, c);
      x.at(i, c) = v / l.at(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double v = x.at(i, c);
      for (std::size_t k = i + 1; k < n; ++k) v -= l.at(k, i) * x.at(k, c);
      x.at(i, c) = v / l.at(i, i);
    }
  }
  return x;
}

}  // namespace qdk
