#pragma once

// Sequential CNN graph: shape inference, forward with activation caching,
// reverse-mode backward and pass accounting.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "camforge/error.hpp"
#include "camforge/ops.hpp"
#include "camforge/rng.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

enum class LayerKind : std::uint8_t {
  Conv = 1,
  ReLU = 2,
  MaxPool2 = 3,
  GlobalAvgPool = 4,
  Flatten = 5,
  FullyConnected = 6,
  PointwiseConvHead = 7,
  SpatialAverage = 8,
  Softmax = 9,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2: return "MaxPool2";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::PointwiseConvHead: return "PointwiseConvHead";
    case LayerKind::SpatialAverage: return "SpatialAverage";
    case LayerKind::Softmax: return "Softmax";
  }
  return "Unknown";
}

inline bool has_params(LayerKind k) {
  return k == LayerKind::Conv || k == LayerKind::FullyConnected ||
         k == LayerKind::PointwiseConvHead;
}

enum class HeadKind { GapFc, BuiltInCam, Other };

inline const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::GapFc: return "GapFc";
    case HeadKind::BuiltInCam: return "BuiltInCam";
    case HeadKind::Other: return "Other";
  }
  return "Unknown";
}

/// One layer. For FullyConnected, in/out channels are the in/out feature counts.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  std::string param;

  static LayerSpec conv(int in, int out, int kernel, int stride, int padding, std::string slot) {
    return {LayerKind::Conv, in, out, kernel, stride, padding, std::move(slot)};
  }
  static LayerSpec fully_connected(int in, int out, std::string slot) {
    return {LayerKind::FullyConnected, in, out, 1, 1, 0, std::move(slot)};
  }
  static LayerSpec pointwise_head(int in, int out, std::string slot) {
    return {LayerKind::PointwiseConvHead, in, out, 1, 1, 0, std::move(slot)};
  }
  static LayerSpec simple(LayerKind kind) { return {kind, 0, 0, 0, 1, 0, {}}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct InputShape {
  int c = 1;
  int h = 1;
  int w = 1;
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct ShapeReport {
  std::vector<Dims> outputs;  // per layer, batch of one
  Dims feature_shape;         // tensor entering the head
  std::size_t head_start = 0;
  HeadKind head_kind = HeadKind::Other;
  int class_count = 0;
};

/// Forward/backward evaluations consumed by one request.
struct PassCounter {
  std::size_t forward_count = 0;
  std::size_t backward_count = 0;

  void reset() { *this = {}; }
  friend bool operator==(const PassCounter&, const PassCounter&) = default;
};

template <typename Scalar>
using ParamStore = std::map<std::string, ConvParams<Scalar>>;

namespace detail {
inline std::uint64_t next_model_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

inline HeadKind classify_tail(const std::vector<LayerSpec>& layers, std::size_t& head_start) {
  const std::size_t n = layers.size();
  auto kind_at = [&](std::size_t back) { return layers[n - back].kind; };
  if (n >= 3 && kind_at(3) == LayerKind::GlobalAvgPool && kind_at(2) == LayerKind::Flatten &&
      kind_at(1) == LayerKind::FullyConnected) {
    head_start = n - 3;
    return HeadKind::GapFc;
  }
  if (n >= 2 && kind_at(2) == LayerKind::PointwiseConvHead &&
      kind_at(1) == LayerKind::SpatialAverage) {
    head_start = n - 2;
    return HeadKind::BuiltInCam;
  }
  head_start = n == 0 ? 0 : n - 1;
  for (std::size_t i = n; i-- > 0;) {
    const auto k = layers[i].kind;
    if (k == LayerKind::Flatten || k == LayerKind::GlobalAvgPool) {
      head_start = i;
      break;
    }
  }
  return HeadKind::Other;
}
}  // namespace detail

/// Propagates shapes through the layer list. Throws ValidationError naming the
/// first offending layer.
template <typename Scalar>
ShapeReport validate(const std::vector<LayerSpec>& layers, const ParamStore<Scalar>& params,
                     const InputShape& input) {
  if (input.c < 1 || input.h < 1 || input.w < 1) {
    throw ValidationError(0, "input shape must be positive");
  }
  ShapeReport report;
  Dims cur{1, input.c, input.h, input.w};
  std::map<std::string, int> used;

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    auto fail = [&](const std::string& what) -> void { throw ValidationError(i, std::string(to_string(l.kind)) + ": " + what); };

    const ConvParams<Scalar>* p = nullptr;
    if (has_params(l.kind)) {
      auto it = params.find(l.param);
      if (it == params.end()) fail("missing parameter slot '" + l.param + "'");
      if (used[l.param]++ > 0) fail("parameter slot '" + l.param + "' used twice");
      p = &it->second;
      const Dims want{l.out_channels, l.in_channels, l.kernel, l.kernel};
      if (p->weights.dims() != want) {
        fail("weights expected " + want.str() + ", actual " + p->weights.dims().str());
      }
      if (p->bias.size() != static_cast<std::size_t>(l.out_channels)) {
        fail("bias expected " + std::to_string(l.out_channels) + ", actual " +
             std::to_string(p->bias.size()));
      }
      if (p->stride != l.stride || p->padding != l.padding) fail("stride/padding disagree with parameters");
    }

    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::PointwiseConvHead: {
        if (l.kind == LayerKind::PointwiseConvHead && (l.kernel != 1 || l.stride != 1 || l.padding != 0)) {
          fail("head must be a 1x1 stride-1 convolution");
        }
        if (cur.c != l.in_channels) {
          fail("expected " + std::to_string(l.in_channels) + " input channels, actual " + cur.str());
        }
        try {
          cur = Dims{1, l.out_channels, conv_output_extent(cur.h, l.kernel, l.stride, l.padding),
                     conv_output_extent(cur.w, l.kernel, l.stride, l.padding)};
        } catch (const GeometryError& e) {
          fail(e.what());
        }
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::MaxPool2:
        if (cur.h % 2 != 0 || cur.w % 2 != 0) fail("odd spatial dims " + cur.str());
        cur.h /= 2;
        cur.w /= 2;
        break;
      case LayerKind::GlobalAvgPool:
      case LayerKind::SpatialAverage:
        cur.h = cur.w = 1;
        break;
      case LayerKind::Flatten:
        cur = Dims{1, cur.c * cur.h * cur.w, 1, 1};
        break;
      case LayerKind::FullyConnected: {
        const Dims want{1, l.in_channels, 1, 1};
        if (cur != want) fail("expected input " + want.str() + ", actual " + cur.str());
        cur = Dims{1, l.out_channels, 1, 1};
        break;
      }
      case LayerKind::Softmax:
        if (cur.h != 1 || cur.w != 1) fail("softmax needs a vector input, actual " + cur.str());
        break;
      default:
        fail("unsupported layer kind");
    }
    report.outputs.push_back(cur);
  }
  for (const auto& [name, _] : params) {
    if (!used.count(name)) throw ValidationError(layers.size(), "unused parameter slot '" + name + "'");
  }
  if (cur.h != 1 || cur.w != 1) {
    throw ValidationError(layers.empty() ? 0 : layers.size() - 1,
                          "final output must be a class vector, actual " + cur.str());
  }
  report.class_count = cur.c;
  report.head_kind = detail::classify_tail(layers, report.head_start);
  report.feature_shape = report.head_start == 0
                             ? Dims{1, input.c, input.h, input.w}
                             : report.outputs[report.head_start - 1];
  return report;
}

/// Validated sequential model. Construction runs shape inference, so every
/// ModelGraph instance can be evaluated.
template <typename Scalar>
class ModelGraph {
 public:
  ModelGraph(std::vector<LayerSpec> layers, ParamStore<Scalar> params, InputShape input)
      : layers_(std::move(layers)),
        params_(std::move(params)),
        input_(input),
        report_(validate(layers_, params_, input_)) {}

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const ParamStore<Scalar>& params() const { return params_; }
  const ConvParams<Scalar>& param(const std::string& slot) const {
    auto it = params_.find(slot);
    if (it == params_.end()) throw Error("no parameter slot '" + slot + "'");
    return it->second;
  }
  const InputShape& input_shape() const { return input_; }
  int class_count() const { return report_.class_count; }
  HeadKind head_kind() const { return report_.head_kind; }
  const ShapeReport& shape_report() const { return report_; }
  std::uint64_t id() const { return id_; }

  /// Parameter update hook for the trainer. Values may change, shapes may not.
  template <typename Fn>
  void update_params(Fn&& fn) {
    fn(params_);
    for (const auto& [name, p] : params_) {
      (void)name;
      p.check();
    }
    id_ = detail::next_model_id();
  }

  template <typename Other>
  ModelGraph<Other> cast() const {
    ParamStore<Other> p;
    for (const auto& [name, v] : params_) p.emplace(name, v.template cast<Other>());
    return ModelGraph<Other>(layers_, std::move(p), input_);
  }

 private:
  std::vector<LayerSpec> layers_;
  ParamStore<Scalar> params_;
  InputShape input_;
  ShapeReport report_;
  std::uint64_t id_ = detail::next_model_id();
};

template <typename Scalar>
const ShapeReport& validate(const ModelGraph<Scalar>& model) {
  return model.shape_report();
}

/// Per-layer activations of one forward pass.
template <typename Scalar>
struct ActivationCache {
  std::uint64_t model_id = 0;
  Tensor4<Scalar> input;
  std::vector<Tensor4<Scalar>> outputs;
  std::size_t head_start = 0;

  const Tensor4<Scalar>& layer_input(std::size_t i) const { return i == 0 ? input : outputs[i - 1]; }
  /// The final feature map consumed by the classification head.
  const Tensor4<Scalar>& feature_map() const { return layer_input(head_start); }
  const Tensor4<Scalar>& logits() const { return outputs.empty() ? input : outputs.back(); }
};

template <typename Scalar>
struct ForwardResult {
  Tensor4<Scalar> logits;  // (n, C, 1, 1)
  std::optional<ActivationCache<Scalar>> cache;
};

template <typename Scalar>
struct ParamGrad {
  Tensor4<Scalar> weights;
  std::vector<Scalar> bias;
};

template <typename Scalar>
struct BackwardResult {
  /// Gradient with respect to each layer's input; element 0 is the batch gradient.
  std::vector<Tensor4<Scalar>> layer_input_grads;
  std::map<std::string, ParamGrad<Scalar>> param_grads;

  const Tensor4<Scalar>& input_grad() const { return layer_input_grads.front(); }
};

/// Row `n` of an (n, C, 1, 1) tensor.
template <typename Scalar>
std::vector<Scalar> row(const Tensor4<Scalar>& t, int n) {
  const auto first = t.data().begin() + static_cast<std::ptrdiff_t>(t.index(n, 0, 0, 0));
  return std::vector<Scalar>(first, first + t.c() * t.h() * t.w());
}

namespace detail {
template <typename Scalar>
Eigen::Map<const MatrixRM<Scalar>> fc_matrix(const ConvParams<Scalar>& p) {
  return Eigen::Map<const MatrixRM<Scalar>>(p.weights.data().data(), p.out_channels(), p.in_channels());
}

template <typename Scalar>
Tensor4<Scalar> apply_layer(const LayerSpec& l, const ModelGraph<Scalar>& model,
                            const Tensor4<Scalar>& x) {
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::PointwiseConvHead:
      return conv2d(x, model.param(l.param));
    case LayerKind::ReLU:
      return relu(x);
    case LayerKind::MaxPool2:
      return maxpool2(x);
    case LayerKind::GlobalAvgPool:
    case LayerKind::SpatialAverage:
      return global_avg_pool(x);
    case LayerKind::Flatten:
      return x.reshaped(Dims{x.n(), x.c() * x.h() * x.w(), 1, 1});
    case LayerKind::FullyConnected: {
      const auto& p = model.param(l.param);
      const auto W = fc_matrix(p);
      Tensor4<Scalar> out(Dims{x.n(), p.out_channels(), 1, 1});
      for (int n = 0; n < x.n(); ++n) {
        const auto in = row(x, n);
        const auto y = fully_connected<Scalar>(in, W, p.bias);
        std::copy(y.begin(), y.end(), out.data().begin() + static_cast<std::ptrdiff_t>(out.index(n, 0, 0, 0)));
      }
      return out;
    }
    case LayerKind::Softmax: {
      Tensor4<Scalar> out(x.dims());
      for (int n = 0; n < x.n(); ++n) {
        const auto y = softmax<Scalar>(row(x, n));
        std::copy(y.begin(), y.end(), out.data().begin() + static_cast<std::ptrdiff_t>(out.index(n, 0, 0, 0)));
      }
      return out;
    }
  }
  throw Error("unsupported layer kind");
}
}  // namespace detail

/// Evaluates the model on a batch. Increments counter.forward_count by one per call.
template <typename Scalar>
ForwardResult<Scalar> forward(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& batch,
                              PassCounter& counter, bool cache = false) {
  const auto& s = model.input_shape();
  if (batch.c() != s.c || batch.h() != s.h || batch.w() != s.w) {
    throw DimensionError("forward: batch " + batch.dims().str() + " vs model input (" +
                         std::to_string(s.c) + "," + std::to_string(s.h) + "," +
                         std::to_string(s.w) + ")");
  }
  ++counter.forward_count;
  ForwardResult<Scalar> result;
  if (!cache) {
    Tensor4<Scalar> x = batch;
    for (const auto& l : model.layers()) x = detail::apply_layer(l, model, x);
    result.logits = std::move(x);
    return result;
  }
  ActivationCache<Scalar> c;
  c.model_id = model.id();
  c.input = batch;
  c.head_start = model.shape_report().head_start;
  c.outputs.reserve(model.layers().size());
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    c.outputs.push_back(detail::apply_layer(model.layers()[i], model, c.layer_input(i)));
  }
  result.logits = c.logits();
  result.cache = std::move(c);
  return result;
}

/// Reverse-mode pass from an upstream gradient on the logits. Increments
/// counter.backward_count by one per call.
template <typename Scalar>
BackwardResult<Scalar> backward(const ModelGraph<Scalar>& model, const ActivationCache<Scalar>& cache,
                                const Tensor4<Scalar>& upstream, PassCounter& counter) {
  if (cache.model_id != model.id() || cache.outputs.size() != model.layers().size()) {
    throw Error("backward: activation cache is missing or stale for this model");
  }
  if (upstream.dims() != cache.logits().dims()) {
    throw DimensionError("backward: upstream " + upstream.dims().str() + " vs logits " +
                         cache.logits().dims().str());
  }
  ++counter.backward_count;
  const auto& layers = model.layers();
  BackwardResult<Scalar> result;
  result.layer_input_grads.resize(layers.size());
  Tensor4<Scalar> g = upstream;

  for (std::size_t i = layers.size(); i-- > 0;) {
    const LayerSpec& l = layers[i];
    const Tensor4<Scalar>& x = cache.layer_input(i);
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::PointwiseConvHead: {
        auto b = conv2d_backward(x, model.param(l.param), g);
        result.param_grads[l.param] = {std::move(*b.weight_grad), std::move(*b.bias_grad)};
        g = std::move(b.input_grad);
        break;
      }
      case LayerKind::ReLU:
        g = relu_backward(x, g);
        break;
      case LayerKind::MaxPool2:
        g = maxpool2_backward(x, g);
        break;
      case LayerKind::GlobalAvgPool:
      case LayerKind::SpatialAverage:
        g = global_avg_pool_backward(x.dims(), g);
        break;
      case LayerKind::Flatten:
        g = g.reshaped(x.dims());
        break;
      case LayerKind::FullyConnected: {
        const auto& p = model.param(l.param);
        const auto W = detail::fc_matrix(p);
        Tensor4<Scalar> gin(x.dims());
        ParamGrad<Scalar> pg{Tensor4<Scalar>(p.weights.dims()),
                             std::vector<Scalar>(p.bias.size(), Scalar(0))};
        for (int n = 0; n < x.n(); ++n) {
          const auto lg = fully_connected_backward<Scalar>(row(x, n), W, row(g, n));
          std::copy(lg.input_grad.begin(), lg.input_grad.end(),
                    gin.data().begin() + static_cast<std::ptrdiff_t>(gin.index(n, 0, 0, 0)));
          for (std::size_t j = 0; j < pg.weights.size(); ++j) pg.weights[j] += lg.weight_grad.data()[j];
          for (std::size_t j = 0; j < pg.bias.size(); ++j) pg.bias[j] += lg.bias_grad[j];
        }
        result.param_grads[l.param] = std::move(pg);
        g = std::move(gin);
        break;
      }
      case LayerKind::Softmax: {
        const auto& y = cache.outputs[i];
        Tensor4<Scalar> gin(x.dims());
        for (int n = 0; n < x.n(); ++n) {
          const auto v = softmax_backward<Scalar>(row(y, n), row(g, n));
          std::copy(v.begin(), v.end(), gin.data().begin() + static_cast<std::ptrdiff_t>(gin.index(n, 0, 0, 0)));
        }
        g = std::move(gin);
        break;
      }
    }
    result.layer_input_grads[i] = g;
  }
  if (layers.empty()) result.layer_input_grads.push_back(g);
  return result;
}

/// Conv weights ~ U(-b, b) with b = sqrt(6 / fan_in), zero biases.
template <typename Scalar>
ConvParams<Scalar> he_uniform(int out, int in, int kernel, int stride, int padding, CounterRng& rng) {
  ConvParams<Scalar> p{Tensor4<Scalar>(Dims{out, in, kernel, kernel}),
                       std::vector<Scalar>(static_cast<std::size_t>(out), Scalar(0)), stride, padding};
  const double bound = std::sqrt(6.0 / (in * kernel * kernel));
  for (auto& v : p.weights.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  return p;
}

/// Reference backbone: three 3x3 conv/ReLU stages with two 2x2 max pools, then GAP and FC.
template <typename Scalar>
ModelGraph<Scalar> tiny_net(InputShape input, int classes, std::uint64_t seed,
                            int features = 16) {
  CounterRng rng(seed, 0, 0x7E11);
  std::vector<LayerSpec> layers{
      LayerSpec::conv(input.c, 8, 3, 1, 1, "conv1"), LayerSpec::simple(LayerKind::ReLU),
      LayerSpec::simple(LayerKind::MaxPool2),
      LayerSpec::conv(8, 16, 3, 1, 1, "conv2"),      LayerSpec::simple(LayerKind::ReLU),
      LayerSpec::simple(LayerKind::MaxPool2),
      LayerSpec::conv(16, features, 3, 1, 1, "conv3"), LayerSpec::simple(LayerKind::ReLU),
      LayerSpec::simple(LayerKind::GlobalAvgPool),   LayerSpec::simple(LayerKind::Flatten),
      LayerSpec::fully_connected(features, classes, "fc")};
  ParamStore<Scalar> params;
  params.emplace("conv1", he_uniform<Scalar>(8, input.c, 3, 1, 1, rng));
  params.emplace("conv2", he_uniform<Scalar>(16, 8, 3, 1, 1, rng));
  params.emplace("conv3", he_uniform<Scalar>(features, 16, 3, 1, 1, rng));
  params.emplace("fc", he_uniform<Scalar>(classes, features, 1, 1, 0, rng));
  return ModelGraph<Scalar>(std::move(layers), std::move(params), input);
}

}  // namespace camforge
