#pragma once

// Corpus-level orchestration shared by the CLI and the acceptance suite.

#include <optional>
#include <string>
#include <vector>

#include "camforge/explainers.hpp"
#include "camforge/metrics.hpp"
#include "camforge/model.hpp"
#include "camforge/synthgen.hpp"
#include "camforge/train.hpp"

namespace camforge {

const std::vector<std::string>& known_methods();
bool is_known_method(const std::string& name);

/// Produces one explanation. `builtin` is the transformed model, required for
/// method "tte". The target class is resolved from a separate prediction pass
/// that is not charged to the map's pass counts.
SaliencyMap<float> explain(const ModelGraph<float>& model, const ModelGraph<float>* builtin,
                           const Tensor4<float>& input, const std::string& method, const ExplainerConfig& config);

struct EvalConfig {
  std::vector<std::string> methods{"cam", "tte"};
  int k = 10;
  int ig_steps = 64;
  Split split = Split::Test;
  MaskingPolicy::Kind masking = MaskingPolicy::Kind::ChannelMean;
  std::optional<int> cell_size;  // defaults to the feature stride
  int threads = 1;
};

struct EvalResult {
  MetricsReport report;
  std::vector<SampleMetrics> rows;  // ordered by sample, then method
};

/// Per-channel mean pixel value over the training split.
std::vector<float> corpus_channel_means(const Corpus& corpus);

TrainingSet load_training_set(const Corpus& corpus, Split split);

/// Cell grid aligned with the feature lattice unless `cell_size` overrides it.
CellGrid metric_grid(const ModelGraph<float>& model, std::optional<int> cell_size);

EvalResult evaluate_corpus(const ModelGraph<float>& model, const Corpus& corpus, const EvalConfig& config);

/// Worker count from CAMFORGE_THREADS, capped by the hardware.
int worker_threads();

}  // namespace camforge
