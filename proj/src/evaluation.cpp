#include "camforge/evaluation.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "camforge/error.hpp"
#include "camforge/surgery.hpp"

namespace camforge {

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{method::kCam,     method::kGradCam,
                                          method::kLayerCam, method::kScoreCam,
                                          method::kIntegratedGradients, method::kBuiltIn};
  return m;
}

bool is_known_method(const std::string& name) {
  const auto& m = known_methods();
  return std::find(m.begin(), m.end(), name) != m.end();
}

SaliencyMap<float> explain(const ModelGraph<float>& model, const ModelGraph<float>* builtin,
                           const Tensor4<float>& input, const std::string& name, const ExplainerConfig& config) {
  if (name == method::kBuiltIn) {
    if (!builtin) throw HeadKindError("method 'tte' needs a transformed model");
    const auto e = explain_builtin(*builtin, input);
    return builtin_map(e, resolve_class(config, e.logits));
  }
  PassCounter prediction;
  const auto fr = forward(model, input, prediction, true);
  const int c = resolve_class(config, row(fr.logits, 0));
  if (name == method::kCam) return cam(model, input, c);
  if (name == method::kGradCam) return grad_cam(model, input, c, config);
  if (name == method::kLayerCam) return layer_cam(model, input, c, config);
  if (name == method::kScoreCam) return score_cam(model, input, *fr.cache, c, config);
  if (name == method::kIntegratedGradients) return integrated_gradients(model, input, c, config);
  throw Error("unknown method '" + name + "'");
}

std::vector<float> corpus_channel_means(const Corpus& corpus) {
  const auto idx = corpus.indices(Split::Train);
  if (idx.empty()) throw Error("corpus has no training samples");
  std::vector<double> sums(static_cast<std::size_t>(corpus.spec.channels), 0.0);
  double count = 0.0;
  for (std::size_t i : idx) {
    const auto s = corpus.load(i);
    for (int c = 0; c < s.image.c(); ++c) {
      double plane = 0.0;
      for (float v : std::span<const float>(&s.image.data()[s.image.index(0, c, 0, 0)],
                                            static_cast<std::size_t>(s.image.h() * s.image.w()))) {
        plane += v;
      }
      sums[static_cast<std::size_t>(c)] += plane;
    }
    count += static_cast<double>(s.image.h()) * s.image.w();
  }
  std::vector<float> means;
  for (double s : sums) means.push_back(static_cast<float>(s / count));
  return means;
}

TrainingSet load_training_set(const Corpus& corpus, Split split) {
  TrainingSet t;
  for (std::size_t i : corpus.indices(split)) {
    auto s = corpus.load(i);
    t.images.push_back(std::move(s.image));
    t.labels.push_back(s.label);
  }
  return t;
}

CellGrid metric_grid(const ModelGraph<float>& model, std::optional<int> cell_size) {
  const auto& in = model.input_shape();
  const auto& f = model.shape_report().feature_shape;
  if (cell_size) return CellGrid::tiling(in.h, in.w, *cell_size, *cell_size);
  if (in.h % f.h != 0 || in.w % f.w != 0) {
    throw GeometryError("input dims are not a multiple of the feature map dims");
  }
  return CellGrid::tiling(in.h, in.w, in.h / f.h, in.w / f.w);
}

int worker_threads() {
  int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("CAMFORGE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

EvalResult evaluate_corpus(const ModelGraph<float>& model, const Corpus& corpus, const EvalConfig& config) {
  for (const auto& m : config.methods)
    if (!is_known_method(m)) throw Error("unknown method '" + m + "'");
  const CellGrid grid = metric_grid(model, config.cell_size);
  if (config.k < 1 || config.k > grid.count()) {
    throw Error("k = " + std::to_string(config.k) + " must lie in [1, " + std::to_string(grid.count()) + "]");
  }
  const bool needs_builtin =
      std::find(config.methods.begin(), config.methods.end(), method::kBuiltIn) != config.methods.end();
  std::optional<ModelGraph<float>> builtin;
  if (needs_builtin) builtin.emplace(transform(model));

  const MaskingPolicy policy = config.masking == MaskingPolicy::Kind::KeepOriginal
                                   ? MaskingPolicy::keep_original()
                                   : MaskingPolicy::fill(corpus_channel_means(corpus));
  ExplainerConfig ec;
  ec.ig_steps = config.ig_steps;

  const auto samples = corpus.indices(config.split);
  if (samples.empty()) throw Error(std::string("corpus split '") + to_string(config.split) + "' is empty");
  const std::size_t per = config.methods.size();
  std::vector<SampleMetrics> rows(samples.size() * per);
  const auto& in = model.input_shape();

  auto work = [&](std::size_t s) {
    const Sample sample = corpus.load(samples[s]);
    for (std::size_t m = 0; m < per; ++m) {
      const std::string& name = config.methods[m];
      const ModelGraph<float>& scorer = name == method::kBuiltIn ? *builtin : model;
      PassCounter counter;
      const auto logits = row(forward(scorer, sample.image, counter).logits, 0);
      const auto probs = softmax<float>(logits);
      const auto map = explain(model, builtin ? &*builtin : nullptr, sample.image, name, ec);
      const auto overlay = upsample_overlay(map, in.h, in.w);

      SampleMetrics& r = rows[s * per + m];
      r.sample = corpus.entries[samples[s]].index;
      r.method = name;
      r.label = sample.label;
      r.predicted = argmax(logits);
      r.probability = probs.size() > 1 ? probs[1] : probs[0];
      r.topk_sensitivity = topk_sensitivity(scorer, sample.image, overlay, grid, config.k, policy);
      r.has_lesion = !sample.gt.boxes.empty();
      if (r.has_lesion) {
        r.topk_localization = topk_localization(overlay, grid, config.k, sample.gt);
        r.activation_precision = activation_precision(overlay, sample.gt);
      }
    }
  };

  const int threads = std::max(1, std::min<int>(config.threads, static_cast<int>(samples.size())));
  if (threads == 1) {
    for (std::size_t s = 0; s < samples.size(); ++s) work(s);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t s = static_cast<std::size_t>(t); s < samples.size(); s += static_cast<std::size_t>(threads)) {
          try {
            work(s);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  EvalResult result;
  for (std::size_t m = 0; m < per; ++m) {
    std::vector<SampleMetrics> method_rows;
    for (std::size_t s = 0; s < samples.size(); ++s) method_rows.push_back(rows[s * per + m]);
    result.report.records.push_back(aggregate_report(config.methods[m], method_rows, config.k));
  }
  result.rows = std::move(rows);
  return result;
}

}  // namespace camforge
