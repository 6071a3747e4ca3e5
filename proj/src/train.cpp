#include "camforge/train.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "camforge/error.hpp"
#include "camforge/rng.hpp"

namespace camforge {

TrainResult train(const ModelGraph<float>& initial, const TrainingSet& data, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  if (initial.head_kind() != HeadKind::GapFc) {
    throw HeadKindError("training expects a GapFc model");
  }
  if (data.images.size() != data.labels.size() || data.images.empty()) {
    throw DimensionError("training set needs matching, non-empty images and labels");
  }
  for (int label : data.labels) check_label(static_cast<std::size_t>(initial.class_count()), label);
  if (config.epochs < 0 || config.batch_size < 1) throw Error("epochs must be >= 0 and batch_size >= 1");

  TrainResult result{initial, {}};
  ModelGraph<float>& model = result.model;
  const std::size_t n = data.images.size();
  std::vector<std::size_t> order(n);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(config.seed, static_cast<std::uint64_t>(epoch), 0x5EED);
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      std::vector<Tensor4<float>> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(data.images[order[i]]);
        labels.push_back(data.labels[order[i]]);
      }
      const auto x = stack<float>(batch);
      const int bn = x.n();

      PassCounter counter;
      auto fr = forward(model, x, counter, true);
      Tensor4<float> upstream(fr.logits.dims());
      for (int b = 0; b < bn; ++b) {
        const auto logits = row(fr.logits, b);
        loss_sum += softmax_cross_entropy<float>(logits, labels[static_cast<std::size_t>(b)]);
        const auto g = softmax_cross_entropy_backward<float>(logits, labels[static_cast<std::size_t>(b)]);
        for (std::size_t c = 0; c < g.size(); ++c) upstream(b, static_cast<int>(c), 0, 0) = g[c] / static_cast<float>(bn);
      }
      if (!std::isfinite(loss_sum)) {
        throw NumericError("training diverged (non-finite loss) in epoch " + std::to_string(epoch));
      }
      const auto br = backward(model, *fr.cache, upstream, counter);
      const float lr = config.learning_rate;
      model.update_params([&](ParamStore<float>& params) {
        for (auto& [name, p] : params) {
          const auto& g = br.param_grads.at(name);
          for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] -= lr * g.weights[i];
          for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= lr * g.bias[i];
        }
      });
    }
    const float mean = static_cast<float>(loss_sum / static_cast<double>(n));
    result.losses.push_back(mean);
    for (const auto& [name, p] : model.params()) {
      if (!p.weights.all_finite()) {
        throw NumericError("training diverged (non-finite weights in '" + name + "') in epoch " + std::to_string(epoch));
      }
    }
    if (on_epoch) on_epoch(EpochStats{epoch, mean}, model);
  }
  return result;
}

}  // namespace camforge
