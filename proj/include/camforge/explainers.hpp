#pragma once

// Post-hoc saliency baselines evaluated at the head's input feature map.
// All evaluation goes through forward/backward so pass counts are audited.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "camforge/error.hpp"
#include "camforge/model.hpp"
#include "camforge/ops.hpp"
#include "camforge/surgery.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

enum class Resolution { Feature, Input };

template <typename Scalar>
struct SaliencyMap {
  int class_id = 0;
  Grid<Scalar> grid;
  std::string method;
  PassCounter pass_counts;
  bool normalized = false;
  Resolution resolution = Resolution::Feature;
};

struct ExplainerConfig {
  int ig_steps = 64;
  /// Explicit target class; nullopt explains the predicted class.
  std::optional<int> target_class;
  /// Index of the layer whose input is used as the feature map by the
  /// gradient methods. nullopt means the head's input.
  std::optional<std::size_t> feature_layer;
};

namespace method {
inline constexpr const char* kCam = "cam";
inline constexpr const char* kGradCam = "gradcam";
inline constexpr const char* kLayerCam = "layercam";
inline constexpr const char* kScoreCam = "scorecam";
inline constexpr const char* kIntegratedGradients = "ig";
inline constexpr const char* kBuiltIn = "tte";
}  // namespace method

template <typename Scalar>
int argmax(const std::vector<Scalar>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <typename Scalar>
int resolve_class(const ExplainerConfig& config, const std::vector<Scalar>& logits) {
  if (config.target_class) {
    check_label(logits.size(), *config.target_class);
    return *config.target_class;
  }
  return argmax(logits);
}

namespace detail {
template <typename Scalar>
void check_single(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input, int c) {
  if (input.n() != 1) throw DimensionError("explainers take a single sample, got " + input.dims().str());
  check_label(static_cast<std::size_t>(model.class_count()), c);
}

template <typename Scalar>
Tensor4<Scalar> one_hot(int classes, int c) {
  Tensor4<Scalar> t(Dims{1, classes, 1, 1});
  t[static_cast<std::size_t>(c)] = Scalar(1);
  return t;
}

template <typename Scalar>
std::size_t feature_layer(const ModelGraph<Scalar>& model, const ExplainerConfig& config) {
  const std::size_t i = config.feature_layer.value_or(model.shape_report().head_start);
  if (i >= model.layers().size()) {
    throw Error("feature layer " + std::to_string(i) + " out of range");
  }
  return i;
}

/// sum_k weight_k * A_k, accumulated in ascending k.
template <typename Scalar>
Grid<Scalar> weighted_sum(const Tensor4<Scalar>& features, const std::vector<Scalar>& weights) {
  Grid<Scalar> acc = Grid<Scalar>::Zero(features.h(), features.w());
  for (int k = 0; k < features.c(); ++k) acc += weights[static_cast<std::size_t>(k)] * features.plane(0, k);
  return acc;
}
}  // namespace detail

/// Classification-weighted feature maps, bias excluded.
template <typename Scalar>
SaliencyMap<Scalar> cam(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input, int c) {
  const SurgeryReport report = check_compatibility(model);
  if (!report.compatible) throw HeadKindError("cam: " + report.reason);
  detail::check_single(model, input, c);
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kCam;
  auto fr = forward(model, input, m.pass_counts, true);
  const auto& fc = model.param(model.layers().back().param);
  std::vector<Scalar> w(static_cast<std::size_t>(fc.in_channels()));
  for (int k = 0; k < fc.in_channels(); ++k) w[static_cast<std::size_t>(k)] = fc.weights(c, k, 0, 0);
  m.grid = detail::weighted_sum(fr.cache->feature_map(), w);
  return m;
}

namespace detail {
template <typename Scalar>
struct FeatureGradients {
  Tensor4<Scalar> features;
  Tensor4<Scalar> grads;
};

template <typename Scalar>
FeatureGradients<Scalar> feature_gradients(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input,
                                           int c, const ExplainerConfig& config, PassCounter& counter) {
  const std::size_t layer = feature_layer(model, config);
  auto fr = forward(model, input, counter, true);
  auto br = backward(model, *fr.cache, one_hot<Scalar>(model.class_count(), c), counter);
  return {fr.cache->layer_input(layer), std::move(br.layer_input_grads[layer])};
}
}  // namespace detail

/// ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dy_c/dA_k.
template <typename Scalar>
SaliencyMap<Scalar> grad_cam(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input, int c,
                             const ExplainerConfig& config = {}) {
  detail::check_single(model, input, c);
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kGradCam;
  const auto fg = detail::feature_gradients(model, input, c, config, m.pass_counts);
  const auto alpha = global_avg_pool(fg.grads);
  m.grid = detail::weighted_sum(fg.features, alpha.values()).max(Scalar(0));
  return m;
}

/// ReLU(sum_k ReLU(dy_c/dA_k(i,j)) A_k(i,j)).
template <typename Scalar>
SaliencyMap<Scalar> layer_cam(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input, int c,
                              const ExplainerConfig& config = {}) {
  detail::check_single(model, input, c);
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kLayerCam;
  const auto fg = detail::feature_gradients(model, input, c, config, m.pass_counts);
  Grid<Scalar> acc = Grid<Scalar>::Zero(fg.features.h(), fg.features.w());
  for (int k = 0; k < fg.features.c(); ++k) {
    acc += fg.grads.plane(0, k).max(Scalar(0)) * fg.features.plane(0, k);
  }
  m.grid = acc.max(Scalar(0));
  return m;
}

/// Score-weighted CAM. `features` must come from a cached forward of `model`
/// on `input` (the prediction pass); the explanation itself spends one
/// baseline pass plus one masked pass per feature channel.
template <typename Scalar>
SaliencyMap<Scalar> score_cam(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input,
                              const ActivationCache<Scalar>& features, int c,
                              const ExplainerConfig& config = {}) {
  (void)config;
  detail::check_single(model, input, c);
  if (features.model_id != model.id() || !(features.input == input)) {
    throw Error("score_cam: activation cache does not belong to this model and input");
  }
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kScoreCam;
  const Tensor4<Scalar>& A = features.feature_map();
  const auto prob = [&](const Tensor4<Scalar>& x) {
    const auto logits = row(forward(model, x, m.pass_counts).logits, 0);
    return softmax<Scalar>(logits)[static_cast<std::size_t>(c)];
  };
  const Tensor4<Scalar> baseline(input.dims());
  const Scalar p_base = prob(baseline);

  std::vector<Scalar> scores(static_cast<std::size_t>(A.c()));
  for (int k = 0; k < A.c(); ++k) {
    const Grid<Scalar> mask = minmax_normalize<Scalar>(bilinear_resize<Scalar>(Grid<Scalar>(A.plane(0, k)), input.h(), input.w()));
    Tensor4<Scalar> masked = input;
    for (int ch = 0; ch < input.c(); ++ch) masked.plane(0, ch) *= mask;
    scores[static_cast<std::size_t>(k)] = prob(masked) - p_base;
  }
  const auto weights = softmax<Scalar>(scores);
  m.grid = detail::weighted_sum(A, weights).max(Scalar(0));
  return m;
}

/// Integrated gradients of the class-c logit along the straight path from a
/// zero baseline, right-endpoint Riemann sum with m steps, summed over input
/// channels (signed).
template <typename Scalar>
SaliencyMap<Scalar> integrated_gradients(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input, int c,
                                         const ExplainerConfig& config = {}) {
  detail::check_single(model, input, c);
  const int steps = config.ig_steps;
  if (steps < 2) throw Error("integrated_gradients needs at least 2 steps, got " + std::to_string(steps));
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kIntegratedGradients;
  m.resolution = Resolution::Input;

  const Tensor4<Scalar> baseline(input.dims());
  const auto upstream = detail::one_hot<Scalar>(model.class_count(), c);
  std::vector<double> total(input.size(), 0.0);
  for (int t = 1; t <= steps; ++t) {
    const Scalar alpha = static_cast<Scalar>(t) / static_cast<Scalar>(steps);
    Tensor4<Scalar> x(input.dims());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = baseline[i] + alpha * (input[i] - baseline[i]);
    auto fr = forward(model, x, m.pass_counts, true);
    const auto br = backward(model, *fr.cache, upstream, m.pass_counts);
    const auto& g = br.input_grad();
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += static_cast<double>(g[i]);
  }
  m.grid = Grid<Scalar>::Zero(input.h(), input.w());
  for (int ch = 0; ch < input.c(); ++ch)
    for (int y = 0; y < input.h(); ++y)
      for (int x = 0; x < input.w(); ++x) {
        const std::size_t i = input.index(0, ch, y, x);
        const double diff = static_cast<double>(input[i]) - static_cast<double>(baseline[i]);
        m.grid(y, x) += static_cast<Scalar>(diff * total[i] / steps);
      }
  return m;
}

/// Built-in maps of a transformed model, packaged as a SaliencyMap.
template <typename Scalar>
SaliencyMap<Scalar> builtin_map(const BuiltInExplanation<Scalar>& e, int c) {
  check_label(e.cams.size(), c);
  SaliencyMap<Scalar> m;
  m.class_id = c;
  m.method = method::kBuiltIn;
  m.grid = e.cams[static_cast<std::size_t>(c)];
  m.pass_counts = e.pass_counts;
  return m;
}

/// Input-resolution view in [0, 1]: bilinear upsampling then min-max
/// normalization. Integrated-gradients maps are taken in absolute value first.
template <typename Scalar>
Grid<Scalar> upsample_overlay(const SaliencyMap<Scalar>& map, int height, int width) {
  Grid<Scalar> g = map.method == method::kIntegratedGradients ? Grid<Scalar>(map.grid.abs()) : map.grid;
  if (g.rows() != height || g.cols() != width) g = bilinear_resize<Scalar>(g, height, width);
  return minmax_normalize<Scalar>(g);
}

}  // namespace camforge
