#pragma once

// Test-time head surgery: GAP + FC becomes a weight-transferred 1x1
// convolution whose per-class output maps are averaged into the logits.

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "camforge/error.hpp"
#include "camforge/model.hpp"

namespace camforge {

enum class BiasPolicy { BiasInMap };

struct SurgeryReport {
  bool compatible = false;
  int feature_channels = 0;
  int class_count = 0;
  std::string reason;
  BiasPolicy bias_policy = BiasPolicy::BiasInMap;
};

class SurgeryError : public Error {
 public:
  explicit SurgeryError(SurgeryReport report)
      : Error("model is not compatible with head surgery: " + report.reason),
        report_(std::move(report)) {}
  const SurgeryReport& report() const { return report_; }

 private:
  SurgeryReport report_;
};

template <typename Scalar>
SurgeryReport check_compatibility(const ModelGraph<Scalar>& model) {
  const ShapeReport& s = model.shape_report();
  SurgeryReport r;
  r.feature_channels = s.feature_shape.c;
  r.class_count = s.class_count;
  switch (s.head_kind) {
    case HeadKind::GapFc:
      r.compatible = true;
      return r;
    case HeadKind::BuiltInCam:
      r.reason = "head is already a built-in CAM head";
      return r;
    case HeadKind::Other:
      break;
  }
  const auto& layers = model.layers();
  const std::size_t n = layers.size();
  if (n >= 2 && layers[n - 1].kind == LayerKind::FullyConnected &&
      layers[n - 2].kind == LayerKind::Flatten &&
      (n < 3 || layers[n - 3].kind != LayerKind::GlobalAvgPool)) {
    r.reason = "head consumes spatial layout (Flatten feeds FullyConnected without GlobalAvgPool)";
  } else {
    r.reason = "tail is not [GlobalAvgPool, Flatten, FullyConnected]";
  }
  return r;
}

/// Compatibility of an unvalidated model description. Shape mismatches are
/// reported rather than thrown.
template <typename Scalar>
SurgeryReport check_compatibility(const std::vector<LayerSpec>& layers, const ParamStore<Scalar>& params,
                                  const InputShape& input) {
  try {
    return check_compatibility(ModelGraph<Scalar>(layers, params, input));
  } catch (const ValidationError& e) {
    SurgeryReport r;
    r.reason = std::string("dimension mismatch: ") + e.what();
    for (const auto& l : layers) {
      if (l.kind == LayerKind::FullyConnected) r.class_count = l.out_channels;
    }
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      if (layers[i + 1].kind == LayerKind::GlobalAvgPool) {
        for (std::size_t j = i + 1; j-- > 0;) {
          if (layers[j].kind == LayerKind::Conv) {
            r.feature_channels = layers[j].out_channels;
            break;
          }
        }
      }
    }
    return r;
  }
}

/// Returns a new model whose head is [PointwiseConvHead, SpatialAverage] with
/// the FC weights (C x K) copied into a (C, K, 1, 1) kernel and the bias copied
/// unchanged. The backbone is copied verbatim; the source model is untouched.
template <typename Scalar>
ModelGraph<Scalar> transform(const ModelGraph<Scalar>& model) {
  SurgeryReport report = check_compatibility(model);
  if (!report.compatible) throw SurgeryError(std::move(report));

  const auto& src = model.layers();
  const std::size_t head = model.shape_report().head_start;
  const LayerSpec& fc = src.back();

  std::vector<LayerSpec> layers(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(head));
  layers.push_back(LayerSpec::pointwise_head(fc.in_channels, fc.out_channels, fc.param));
  layers.push_back(LayerSpec::simple(LayerKind::SpatialAverage));

  ParamStore<Scalar> params = model.params();
  ConvParams<Scalar>& w = params.at(fc.param);
  w.weights = w.weights.reshaped(Dims{fc.out_channels, fc.in_channels, 1, 1});
  w.stride = 1;
  w.padding = 0;
  return ModelGraph<Scalar>(std::move(layers), std::move(params), model.input_shape());
}

template <typename Scalar>
struct BuiltInExplanation {
  std::vector<Scalar> logits;
  std::vector<Scalar> probabilities;
  std::vector<Grid<Scalar>> cams;  // one per class at feature resolution, bias included
  PassCounter pass_counts;

  int predicted() const {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
};

/// One forward pass of a transformed model: the head's output maps are the
/// explanation, their spatial means the logits.
template <typename Scalar>
BuiltInExplanation<Scalar> explain_builtin(const ModelGraph<Scalar>& model, const Tensor4<Scalar>& input) {
  if (model.head_kind() != HeadKind::BuiltInCam) {
    throw HeadKindError(std::string("explain_builtin needs a BuiltInCam model, got ") +
                        to_string(model.head_kind()));
  }
  if (input.n() != 1) throw DimensionError("explain_builtin takes a single sample, got " + input.dims().str());
  BuiltInExplanation<Scalar> e;
  auto fr = forward(model, input, e.pass_counts, true);
  const auto& maps = fr.cache->outputs[model.shape_report().head_start];
  for (int c = 0; c < maps.c(); ++c) e.cams.emplace_back(maps.plane(0, c));
  e.logits = row(fr.logits, 0);
  e.probabilities = softmax<Scalar>(e.logits);
  return e;
}

}  // namespace camforge
