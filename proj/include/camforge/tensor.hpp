#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "camforge/error.hpp"

namespace camforge {

/// Row-major 2D grid; the value type of saliency maps, overlays and masks.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dims {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  friend bool operator==(const Dims&, const Dims&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
           "," + std::to_string(w) + ")";
  }
};

/// Dense (batch, channel, row, column) array stored contiguously in row-major order.
template <typename Scalar>
class Tensor4 {
 public:
  using value_type = Scalar;

  Tensor4() : Tensor4(Dims{}) {}

  explicit Tensor4(Dims dims, Scalar fill = Scalar(0)) : dims_(check(dims)), data_(dims.size(), fill) {}

  Tensor4(Dims dims, std::vector<Scalar> data) : dims_(check(dims)), data_(std::move(data)) {
    if (data_.size() != dims_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match dims " + dims_.str());
    }
  }

  const Dims& dims() const { return dims_; }
  int n() const { return dims_.n; }
  int c() const { return dims_.c; }
  int h() const { return dims_.h; }
  int w() const { return dims_.w; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }

  Scalar& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  Scalar operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  const std::vector<Scalar>& values() const { return data_; }

  /// View of one (sample, channel) plane as an h x w grid.
  Eigen::Map<Grid<Scalar>> plane(int n, int c) {
    return Eigen::Map<Grid<Scalar>>(data_.data() + index(n, c, 0, 0), dims_.h, dims_.w);
  }
  Eigen::Map<const Grid<Scalar>> plane(int n, int c) const {
    return Eigen::Map<const Grid<Scalar>>(data_.data() + index(n, c, 0, 0), dims_.h, dims_.w);
  }

  /// Same values, new dims of equal total size.
  Tensor4 reshaped(Dims dims) const {
    if (dims.size() != size()) {
      throw DimensionError("cannot reshape " + dims_.str() + " to " + dims.str());
    }
    return Tensor4(dims, data_);
  }

  /// Extracts sample `i` as a batch of one.
  Tensor4 sample(int i) const {
    Dims d{1, dims_.c, dims_.h, dims_.w};
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(index(i, 0, 0, 0));
    return Tensor4(d, std::vector<Scalar>(first, first + static_cast<std::ptrdiff_t>(d.size())));
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    std::vector<Other> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](Scalar v) { return static_cast<Other>(v); });
    return Tensor4<Other>(dims_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  static Dims check(Dims d) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) {
      throw DimensionError("tensor dims must be positive, got " + d.str());
    }
    return d;
  }

  Dims dims_;
  std::vector<Scalar> data_;
};

/// Wraps a grid as a 1x1xHxW tensor.
template <typename Scalar>
Tensor4<Scalar> as_tensor(const Grid<Scalar>& g) {
  std::vector<Scalar> v(g.data(), g.data() + g.size());
  return Tensor4<Scalar>(Dims{1, 1, static_cast<int>(g.rows()), static_cast<int>(g.cols())},
                         std::move(v));
}

/// Concatenates single-sample tensors along the batch axis.
template <typename Scalar>
Tensor4<Scalar> stack(std::span<const Tensor4<Scalar>> samples) {
  if (samples.empty()) throw DimensionError("cannot stack an empty batch");
  Dims d = samples.front().dims();
  d.n = 0;
  std::vector<Scalar> data;
  for (const auto& s : samples) {
    if (s.c() != d.c || s.h() != d.h || s.w() != d.w) {
      throw DimensionError("stack: " + s.dims().str() + " vs " + samples.front().dims().str());
    }
    data.insert(data.end(), s.data().begin(), s.data().end());
    d.n += s.n();
  }
  return Tensor4<Scalar>(d, std::move(data));
}

}  // namespace camforge
