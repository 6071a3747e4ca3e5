#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "camforge/model.hpp"

namespace camforge {

struct TrainConfig {
  int epochs = 20;
  float learning_rate = 0.02f;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

struct TrainingSet {
  std::vector<Tensor4<float>> images;  // each 1 x C x H x W
  std::vector<int> labels;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  float mean_loss = 0.0f;
};

struct TrainResult {
  ModelGraph<float> model;
  std::vector<float> losses;  // mean cross-entropy per epoch
};

using EpochCallback = std::function<void(const EpochStats&, const ModelGraph<float>&)>;

/// Plain minibatch SGD on softmax cross-entropy. Sample order is reshuffled
/// every epoch from `seed`; results are bitwise reproducible. Throws
/// NumericError naming the epoch if the loss becomes non-finite.
TrainResult train(const ModelGraph<float>& model, const TrainingSet& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace camforge
