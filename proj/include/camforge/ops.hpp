#pragma once

// Differentiable tensor operations. Every op is a pure function; each
// backward computes exact reverse-mode gradients of its forward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "camforge/error.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

/// Square-kernel convolution parameters. Weights are (out, in, k, k).
template <typename Scalar>
struct ConvParams {
  Tensor4<Scalar> weights;
  std::vector<Scalar> bias;
  int stride = 1;
  int padding = 0;

  int out_channels() const { return weights.n(); }
  int in_channels() const { return weights.c(); }
  int kernel() const { return weights.h(); }

  void check() const {
    if (weights.h() != weights.w()) {
      throw DimensionError("conv kernel must be square, got " + weights.dims().str());
    }
    if (bias.size() != static_cast<std::size_t>(out_channels())) {
      throw DimensionError("conv bias length " + std::to_string(bias.size()) +
                           " != out_channels " + std::to_string(out_channels()));
    }
    if (stride < 1 || padding < 0) throw GeometryError("conv stride must be >= 1, padding >= 0");
  }

  template <typename Other>
  ConvParams<Other> cast() const {
    return {weights.template cast<Other>(), std::vector<Other>(bias.begin(), bias.end()), stride,
            padding};
  }

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

template <typename Scalar>
struct GradientBundle {
  Tensor4<Scalar> input_grad;
  std::optional<Tensor4<Scalar>> weight_grad;
  std::optional<std::vector<Scalar>> bias_grad;
};

inline int conv_output_extent(int extent, int kernel, int stride, int padding) {
  const int span = extent + 2 * padding - kernel;
  if (span < 0 || span % stride != 0) {
    throw GeometryError("conv output size (" + std::to_string(extent) + " + 2*" +
                        std::to_string(padding) + " - " + std::to_string(kernel) + ")/" +
                        std::to_string(stride) + " + 1 is not a positive integer");
  }
  return span / stride + 1;
}

/// Cross-correlation plus per-channel bias. Each output element sums over
/// input channels, then kernel rows, then kernel columns, and adds the bias last.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const ConvParams<Scalar>& p) {
  p.check();
  if (input.c() != p.in_channels()) {
    throw DimensionError("conv2d: input " + input.dims().str() + " vs weights " +
                         p.weights.dims().str());
  }
  const int k = p.kernel();
  const int oh = conv_output_extent(input.h(), k, p.stride, p.padding);
  const int ow = conv_output_extent(input.w(), k, p.stride, p.padding);
  Tensor4<Scalar> out(Dims{input.n(), p.out_channels(), oh, ow});
  std::vector<Scalar> acc(static_cast<std::size_t>(oh) * ow);

  for (int n = 0; n < input.n(); ++n) {
    for (int oc = 0; oc < p.out_channels(); ++oc) {
      std::fill(acc.begin(), acc.end(), Scalar(0));
      for (int ic = 0; ic < p.in_channels(); ++ic) {
        const Scalar* src = &input.data()[input.index(n, ic, 0, 0)];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const Scalar wv = p.weights(oc, ic, ky, kx);
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * p.stride - p.padding + ky;
              if (iy < 0 || iy >= input.h()) continue;
              const Scalar* row = src + static_cast<std::size_t>(iy) * input.w();
              Scalar* dst = acc.data() + static_cast<std::size_t>(oy) * ow;
              const int x0 = std::max(0, (p.padding - kx + p.stride - 1) / p.stride);
              const int x1 = std::min(ow, (input.w() + p.padding - kx + p.stride - 1) / p.stride);
              for (int ox = x0; ox < x1; ++ox) {
                dst[ox] += wv * row[ox * p.stride - p.padding + kx];
              }
            }
          }
        }
      }
      Scalar* o = &out.data()[out.index(n, oc, 0, 0)];
      const Scalar b = p.bias[static_cast<std::size_t>(oc)];
      for (std::size_t i = 0; i < acc.size(); ++i) o[i] = acc[i] + b;
    }
  }
  return out;
}

template <typename Scalar>
GradientBundle<Scalar> conv2d_backward(const Tensor4<Scalar>& input, const ConvParams<Scalar>& p,
                                       const Tensor4<Scalar>& upstream) {
  p.check();
  if (input.c() != p.in_channels()) {
    throw DimensionError("conv2d_backward: input " + input.dims().str() + " vs weights " +
                         p.weights.dims().str());
  }
  const int k = p.kernel();
  const int oh = conv_output_extent(input.h(), k, p.stride, p.padding);
  const int ow = conv_output_extent(input.w(), k, p.stride, p.padding);
  const Dims expected{input.n(), p.out_channels(), oh, ow};
  if (upstream.dims() != expected) {
    throw DimensionError("conv2d_backward: upstream " + upstream.dims().str() + " vs output " +
                         expected.str());
  }

  Tensor4<Scalar> gin(input.dims());
  Tensor4<Scalar> gw(p.weights.dims());
  std::vector<Scalar> gb(static_cast<std::size_t>(p.out_channels()), Scalar(0));

  for (int n = 0; n < input.n(); ++n) {
    for (int oc = 0; oc < p.out_channels(); ++oc) {
      const Scalar* g = &upstream.data()[upstream.index(n, oc, 0, 0)];
      Scalar bsum(0);
      for (int i = 0; i < oh * ow; ++i) bsum += g[i];
      gb[static_cast<std::size_t>(oc)] += bsum;

      for (int ic = 0; ic < p.in_channels(); ++ic) {
        const Scalar* src = &input.data()[input.index(n, ic, 0, 0)];
        Scalar* dsrc = &gin.data()[gin.index(n, ic, 0, 0)];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const Scalar wv = p.weights(oc, ic, ky, kx);
            const int x0 = std::max(0, (p.padding - kx + p.stride - 1) / p.stride);
            const int x1 = std::min(ow, (input.w() + p.padding - kx + p.stride - 1) / p.stride);
            Scalar wsum(0);
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * p.stride - p.padding + ky;
              if (iy < 0 || iy >= input.h()) continue;
              const std::size_t row = static_cast<std::size_t>(iy) * input.w();
              const Scalar* grow = g + static_cast<std::size_t>(oy) * ow;
              for (int ox = x0; ox < x1; ++ox) {
                const std::size_t ix = row + static_cast<std::size_t>(ox * p.stride - p.padding + kx);
                dsrc[ix] += wv * grow[ox];
                wsum += grow[ox] * src[ix];
              }
            }
            gw(oc, ic, ky, kx) += wsum;
          }
        }
      }
    }
  }
  return {std::move(gin), std::move(gw), std::move(gb)};
}

template <typename Scalar>
Tensor4<Scalar> relu(const Tensor4<Scalar>& input) {
  Tensor4<Scalar> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > Scalar(0) ? input[i] : Scalar(0);
  return out;
}

/// Subgradient at exactly zero is zero.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& upstream) {
  if (input.dims() != upstream.dims()) {
    throw DimensionError("relu_backward: " + input.dims().str() + " vs " + upstream.dims().str());
  }
  Tensor4<Scalar> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > Scalar(0) ? upstream[i] : Scalar(0);
  return out;
}

namespace detail {
inline void check_even(const Dims& d) {
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw GeometryError("maxpool2 needs even spatial dims, got " + d.str());
  }
}

// Row-major offset of the first maximum inside a 2x2 window.
template <typename Scalar>
int window_argmax(const Tensor4<Scalar>& t, int n, int c, int y, int x) {
  int best = 0;
  Scalar v = t(n, c, y, x);
  for (int j = 1; j < 4; ++j) {
    const Scalar u = t(n, c, y + j / 2, x + j % 2);
    if (u > v) {
      v = u;
      best = j;
    }
  }
  return best;
}
}  // namespace detail

/// 2x2 max pooling with stride 2.
template <typename Scalar>
Tensor4<Scalar> maxpool2(const Tensor4<Scalar>& input) {
  detail::check_even(input.dims());
  Tensor4<Scalar> out(Dims{input.n(), input.c(), input.h() / 2, input.w() / 2});
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < input.c(); ++c)
      for (int y = 0; y < out.h(); ++y)
        for (int x = 0; x < out.w(); ++x) {
          const int j = detail::window_argmax(input, n, c, 2 * y, 2 * x);
          out(n, c, y, x) = input(n, c, 2 * y + j / 2, 2 * x + j % 2);
        }
  return out;
}

/// Routes each window's gradient to its argmax; ties go to the lowest row-major index.
template <typename Scalar>
Tensor4<Scalar> maxpool2_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& upstream) {
  detail::check_even(input.dims());
  const Dims expected{input.n(), input.c(), input.h() / 2, input.w() / 2};
  if (upstream.dims() != expected) {
    throw DimensionError("maxpool2_backward: upstream " + upstream.dims().str() + " vs " +
                         expected.str());
  }
  Tensor4<Scalar> out(input.dims());
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < input.c(); ++c)
      for (int y = 0; y < expected.h; ++y)
        for (int x = 0; x < expected.w; ++x) {
          const int j = detail::window_argmax(input, n, c, 2 * y, 2 * x);
          out(n, c, 2 * y + j / 2, 2 * x + j % 2) = upstream(n, c, y, x);
        }
  return out;
}

/// Per-channel spatial mean (row-major sum, then one division).
template <typename Scalar>
Tensor4<Scalar> global_avg_pool(const Tensor4<Scalar>& input) {
  Tensor4<Scalar> out(Dims{input.n(), input.c(), 1, 1});
  const Scalar area = static_cast<Scalar>(input.h() * input.w());
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < input.c(); ++c) {
      const Scalar* p = &input.data()[input.index(n, c, 0, 0)];
      Scalar s(0);
      for (int i = 0; i < input.h() * input.w(); ++i) s += p[i];
      out(n, c, 0, 0) = s / area;
    }
  return out;
}

template <typename Scalar>
Tensor4<Scalar> global_avg_pool_backward(const Dims& input_dims, const Tensor4<Scalar>& upstream) {
  const Dims expected{input_dims.n, input_dims.c, 1, 1};
  if (upstream.dims() != expected) {
    throw DimensionError("global_avg_pool_backward: upstream " + upstream.dims().str() + " vs " +
                         expected.str());
  }
  Tensor4<Scalar> out(input_dims);
  const Scalar area = static_cast<Scalar>(input_dims.h * input_dims.w);
  for (int n = 0; n < input_dims.n; ++n)
    for (int c = 0; c < input_dims.c; ++c) out.plane(n, c).setConstant(upstream(n, c, 0, 0) / area);
  return out;
}

/// out_c = sum_k W(c,k) in_k + b_c, accumulated in ascending k, bias added last.
template <typename Scalar>
std::vector<Scalar> fully_connected(std::span<const Scalar> input,
                                    const Eigen::Ref<const MatrixRM<Scalar>>& weights,
                                    std::span<const Scalar> bias) {
  if (static_cast<Eigen::Index>(input.size()) != weights.cols() ||
      static_cast<Eigen::Index>(bias.size()) != weights.rows()) {
    throw DimensionError("fully_connected: input " + std::to_string(input.size()) + ", weights " +
                         std::to_string(weights.rows()) + "x" + std::to_string(weights.cols()) +
                         ", bias " + std::to_string(bias.size()));
  }
  std::vector<Scalar> out(bias.size());
  for (Eigen::Index c = 0; c < weights.rows(); ++c) {
    Scalar acc(0);
    for (Eigen::Index k = 0; k < weights.cols(); ++k) acc += weights(c, k) * input[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(c)] = acc + bias[static_cast<std::size_t>(c)];
  }
  return out;
}

template <typename Scalar>
struct LinearGradients {
  std::vector<Scalar> input_grad;
  MatrixRM<Scalar> weight_grad;
  std::vector<Scalar> bias_grad;
};

template <typename Scalar>
LinearGradients<Scalar> fully_connected_backward(std::span<const Scalar> input,
                                                 const Eigen::Ref<const MatrixRM<Scalar>>& weights,
                                                 std::span<const Scalar> upstream) {
  if (static_cast<Eigen::Index>(input.size()) != weights.cols() ||
      static_cast<Eigen::Index>(upstream.size()) != weights.rows()) {
    throw DimensionError("fully_connected_backward: input " + std::to_string(input.size()) +
                         ", weights " + std::to_string(weights.rows()) + "x" +
                         std::to_string(weights.cols()) + ", upstream " +
                         std::to_string(upstream.size()));
  }
  LinearGradients<Scalar> g{std::vector<Scalar>(input.size(), Scalar(0)),
                            MatrixRM<Scalar>(weights.rows(), weights.cols()),
                            std::vector<Scalar>(upstream.begin(), upstream.end())};
  for (Eigen::Index c = 0; c < weights.rows(); ++c) {
    const Scalar u = upstream[static_cast<std::size_t>(c)];
    for (Eigen::Index k = 0; k < weights.cols(); ++k) {
      g.input_grad[static_cast<std::size_t>(k)] += weights(c, k) * u;
      g.weight_grad(c, k) = u * input[static_cast<std::size_t>(k)];
    }
  }
  return g;
}

/// Max-subtracted softmax.
template <typename Scalar>
std::vector<Scalar> softmax(std::span<const Scalar> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty vector");
  const Scalar m = *std::max_element(logits.begin(), logits.end());
  std::vector<Scalar> out(logits.size());
  Scalar total(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

/// Vector-Jacobian product of softmax: p * (g - <g, p>).
template <typename Scalar>
std::vector<Scalar> softmax_backward(std::span<const Scalar> probs, std::span<const Scalar> upstream) {
  if (probs.size() != upstream.size()) throw DimensionError("softmax_backward: length mismatch");
  Scalar dot(0);
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * upstream[i];
  std::vector<Scalar> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (upstream[i] - dot);
  return out;
}

inline void check_label(std::size_t classes, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw DimensionError("label " + std::to_string(label) + " out of range for " +
                         std::to_string(classes) + " classes");
  }
}

/// -log p_label.
template <typename Scalar>
Scalar cross_entropy(std::span<const Scalar> probs, int label) {
  check_label(probs.size(), label);
  const Scalar p = std::max(probs[static_cast<std::size_t>(label)], std::numeric_limits<Scalar>::min());
  return -std::log(p);
}

/// Loss computed from logits via log-sum-exp.
template <typename Scalar>
Scalar softmax_cross_entropy(std::span<const Scalar> logits, int label) {
  check_label(logits.size(), label);
  const Scalar m = *std::max_element(logits.begin(), logits.end());
  Scalar total(0);
  for (Scalar v : logits) total += std::exp(v - m);
  return std::log(total) + m - logits[static_cast<std::size_t>(label)];
}

/// Gradient of cross_entropy(softmax(logits), label) with respect to the logits.
template <typename Scalar>
std::vector<Scalar> softmax_cross_entropy_backward(std::span<const Scalar> logits, int label) {
  check_label(logits.size(), label);
  auto g = softmax(logits);
  g[static_cast<std::size_t>(label)] -= Scalar(1);
  return g;
}

/// Bilinear resampling with half-pixel centers (align_corners = false);
/// source coordinates are clamped to the valid range.
template <typename Scalar>
Tensor4<Scalar> bilinear_resize(const Tensor4<Scalar>& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw GeometryError("bilinear_resize target must be >= 1x1");
  struct Tap {
    int i0, i1;
    Scalar f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
      double s = (d + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      t[static_cast<std::size_t>(d)] = {i0, std::min(i0 + 1, in - 1), static_cast<Scalar>(s - i0)};
    }
    return t;
  };
  const auto ty = taps(input.h(), out_h);
  const auto tx = taps(input.w(), out_w);
  Tensor4<Scalar> out(Dims{input.n(), input.c(), out_h, out_w});
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < input.c(); ++c)
      for (int y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
          const Tap& b = tx[static_cast<std::size_t>(x)];
          const Scalar top = (Scalar(1) - b.f) * input(n, c, a.i0, b.i0) + b.f * input(n, c, a.i0, b.i1);
          const Scalar bot = (Scalar(1) - b.f) * input(n, c, a.i1, b.i0) + b.f * input(n, c, a.i1, b.i1);
          out(n, c, y, x) = (Scalar(1) - a.f) * top + a.f * bot;
        }
      }
  return out;
}

template <typename Scalar>
Grid<Scalar> bilinear_resize(const Grid<Scalar>& g, int out_h, int out_w) {
  const auto t = bilinear_resize(as_tensor(g), out_h, out_w);
  return t.plane(0, 0);
}

/// (x - min) / (max - min); a constant grid maps to all zeros.
template <typename Scalar>
Grid<Scalar> minmax_normalize(const Grid<Scalar>& g) {
  if (g.size() == 0) return g;
  const Scalar lo = g.minCoeff();
  const Scalar hi = g.maxCoeff();
  if (!(hi > lo)) return Grid<Scalar>::Zero(g.rows(), g.cols());
  return (g - lo) / (hi - lo);
}

}  // namespace camforge
