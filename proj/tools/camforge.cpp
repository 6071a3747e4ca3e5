// camforge: synthetic data generation, training, head surgery, explanation
// and evaluation from the command line.
//
// Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 surgery incompatibility,
// 5 numeric failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "camforge/error.hpp"
#include "camforge/evaluation.hpp"
#include "camforge/explainers.hpp"
#include "camforge/io.hpp"
#include "camforge/metrics.hpp"
#include "camforge/model.hpp"
#include "camforge/surgery.hpp"
#include "camforge/synthgen.hpp"
#include "camforge/train.hpp"

namespace fs = std::filesystem;
using namespace camforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitSurgery = 4;
constexpr int kExitNumeric = 5;

struct UsageError : Error {
  using Error::Error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> parse_methods(const std::string& s) {
  auto methods = split_list(s);
  if (methods.empty()) throw UsageError("no methods given");
  for (const auto& m : methods) {
    if (!is_known_method(m)) {
      std::string valid;
      for (const auto& k : known_methods()) valid += (valid.empty() ? "" : ", ") + k;
      throw UsageError("unknown method '" + m + "'; valid methods: " + valid);
    }
  }
  return methods;
}

fs::path sidecar_path(const fs::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

const std::vector<std::string> kClassNames{"clean", "lesioned"};

// Applies flat JSON keys to options the user did not set on the command line.
void apply_config(CLI::App& app, const std::string& path) {
  if (path.empty()) return;
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = key == "config" ? nullptr : app.get_option_no_throw("--" + key);
    if (!opt) throw UsageError("unknown config key '" + key + "'");
    if (opt->count() > 0) continue;
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& v : value) text += (text.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
    } else {
      text = value.dump();
    }
    opt->add_result(text);
    opt->run_callback();
  }
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string out;
  std::int64_t n = 200;
  SynthSpec spec;
};

int run_gen_data(const GenArgs& a) {
  if (a.n < 2) throw UsageError("--n must be at least 2, got " + std::to_string(a.n));
  a.spec.validate();
  generate_corpus(a.spec, a.n, a.out);
  const auto corpus = load_corpus(a.out);
  std::cout << "wrote " << corpus.entries.size() << " samples to " << a.out << " (train "
            << corpus.indices(Split::Train).size() << ", val " << corpus.indices(Split::Val).size() << ", test "
            << corpus.indices(Split::Test).size() << ")\n";
  return kExitOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string curve;
  TrainConfig config;
};

double split_accuracy(const ModelGraph<float>& model, const TrainingSet& set) {
  std::vector<int> preds;
  for (const auto& img : set.images) {
    PassCounter c;
    preds.push_back(argmax(row(forward(model, img, c).logits, 0)));
  }
  return accuracy(preds, set.labels);
}

int run_train(const TrainArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);
  const TrainingSet train_set = load_training_set(corpus, Split::Train);
  const TrainingSet val_set = load_training_set(corpus, Split::Val);
  if (train_set.images.empty() || val_set.images.empty()) throw UsageError("corpus needs train and val samples");

  const InputShape shape{corpus.spec.channels, corpus.spec.height, corpus.spec.width};
  const auto initial = tiny_net<float>(shape, 2, a.config.seed);

  std::optional<ModelGraph<float>> best;
  double best_acc = -1.0;
  int best_epoch = 0;
  std::ostringstream csv;
  csv.precision(9);
  csv << "epoch,mean_loss,val_accuracy\n";
  auto on_epoch = [&](const EpochStats& s, const ModelGraph<float>& m) {
    const double acc = split_accuracy(m, val_set);
    csv << s.epoch << ',' << s.mean_loss << ',' << acc << '\n';
    std::cout << "epoch " << s.epoch << " loss " << s.mean_loss << " val_acc " << acc << "\n";
    if (acc > best_acc) {
      best_acc = acc;
      best_epoch = s.epoch;
      best.emplace(m);
    }
  };
  const auto result = train(initial, train_set, a.config, on_epoch);
  const ModelGraph<float>& chosen = best ? *best : result.model;

  save_checkpoint(chosen, a.out);
  write_file_atomic(sidecar_path(a.out), model_sidecar_json(chosen, kClassNames));
  const fs::path curve = a.curve.empty() ? fs::path(a.out).replace_extension(".curve.csv") : fs::path(a.curve);
  write_file_atomic(curve, csv.str());
  std::cout << "saved epoch " << best_epoch << " (val accuracy " << best_acc << ") to " << a.out << "\n";
  return kExitOk;
}

// --------------------------------------------------------------- transform

struct TransformArgs {
  std::string in;
  std::string out;
  std::string report;
};

std::string report_json(const SurgeryReport& r) {
  nlohmann::ordered_json j;
  j["compatible"] = r.compatible;
  j["feature_channels"] = r.feature_channels;
  j["class_count"] = r.class_count;
  j["reason"] = r.reason;
  j["bias_policy"] = "BiasInMap";
  return j.dump(2) + "\n";
}

int run_transform(const TransformArgs& a) {
  const auto model = load_checkpoint(a.in);
  const SurgeryReport report = check_compatibility(model);
  if (!a.report.empty()) write_file_atomic(a.report, report_json(report));
  if (!report.compatible) {
    std::cerr << "error: incompatible model: " << report.reason << "\n";
    return kExitSurgery;
  }
  const auto tte = transform(model);
  save_checkpoint(tte, a.out);
  write_file_atomic(sidecar_path(a.out), model_sidecar_json(tte, kClassNames));
  const auto reloaded = load_checkpoint(a.out);
  if (encode_checkpoint(reloaded) != encode_checkpoint(tte)) throw IoError("transformed checkpoint failed round-trip");
  std::cout << "transformed " << a.in << " -> " << a.out << " (K=" << report.feature_channels
            << ", C=" << report.class_count << ")\n";
  return kExitOk;
}

// ----------------------------------------------------------------- explain

struct ExplainArgs {
  std::string model;
  std::vector<std::string> inputs;
  std::string corpus;
  std::vector<std::int64_t> samples;
  std::string methods = "cam,tte";
  std::string target = "predicted";
  int ig_steps = 64;
  std::string out;
};

int run_explain(const ExplainArgs& a) {
  const auto methods = parse_methods(a.methods);
  ExplainerConfig config;
  config.ig_steps = a.ig_steps;
  if (config.ig_steps < 2) throw UsageError("--ig-steps must be >= 2");
  if (a.target != "predicted") {
    try {
      config.target_class = std::stoi(a.target);
    } catch (const std::exception&) {
      throw UsageError("--class must be 'predicted' or a class index");
    }
  }

  const auto model = load_checkpoint(a.model);
  std::optional<ModelGraph<float>> builtin;
  const bool wants_tte = std::find(methods.begin(), methods.end(), method::kBuiltIn) != methods.end();
  if (model.head_kind() == HeadKind::BuiltInCam) {
    if (methods.size() != 1 || !wants_tte) throw UsageError("a transformed checkpoint only supports method 'tte'");
    builtin.emplace(model);
  } else if (wants_tte) {
    const auto report = check_compatibility(model);
    if (!report.compatible) throw SurgeryError(report);
    builtin.emplace(transform(model));
  }

  std::vector<std::pair<std::string, Tensor4<float>>> inputs;
  for (const auto& p : a.inputs) inputs.emplace_back(fs::path(p).stem().string(), read_t4f(p));
  if (!a.corpus.empty()) {
    const Corpus corpus = load_corpus(a.corpus);
    for (auto idx : a.samples) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= corpus.entries.size()) {
        throw UsageError("sample index " + std::to_string(idx) + " out of range");
      }
      char name[32];
      std::snprintf(name, sizeof name, "sample%06lld", static_cast<long long>(idx));
      inputs.emplace_back(name, corpus.load(static_cast<std::size_t>(idx)).image);
    }
  }
  if (inputs.empty()) throw UsageError("no inputs: pass --input files or --corpus with --samples");

  const auto& shape = model.input_shape();
  for (const auto& [name, x] : inputs) {
    if (!x.all_finite()) throw NumericError("input " + name + " contains non-finite values");
    for (const auto& m : methods) {
      const ModelGraph<float>& base = model.head_kind() == HeadKind::BuiltInCam ? *builtin : model;
      const auto map = explain(base, builtin ? &*builtin : nullptr, x, m, config);
      if (!map.grid.allFinite()) throw NumericError("method " + m + " produced non-finite values");
      const fs::path stem = fs::path(a.out) / (name + "_" + m);
      save_saliency(map, stem);
      auto pgm = stem;
      pgm += ".pgm";
      write_file_atomic(pgm, encode_pgm(upsample_overlay(map, shape.h, shape.w)));
      std::cout << name << " " << m << " class " << map.class_id << " passes (" << map.pass_counts.forward_count
                << "," << map.pass_counts.backward_count << ")\n";
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string model;
  std::string corpus;
  std::string methods = "cam,gradcam,layercam,scorecam,ig,tte";
  int k = 10;
  int ig_steps = 64;
  std::string split = "test";
  std::string masking = "mean";
  int cell_size = 0;
  std::string report;
  std::string csv;
};

int run_evaluate(const EvaluateArgs& a) {
  EvalConfig config;
  config.methods = parse_methods(a.methods);
  config.k = a.k;
  config.ig_steps = a.ig_steps;
  if (config.ig_steps < 2) throw UsageError("--ig-steps must be >= 2");
  try {
    config.split = split_from_string(a.split);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (a.masking == "mean") config.masking = MaskingPolicy::Kind::ChannelMean;
  else if (a.masking == "original") config.masking = MaskingPolicy::Kind::KeepOriginal;
  else throw UsageError("--masking must be 'mean' or 'original'");
  if (a.cell_size > 0) config.cell_size = a.cell_size;
  config.threads = worker_threads();

  const auto model = load_checkpoint(a.model);
  if (model.head_kind() != HeadKind::GapFc) {
    const auto report = check_compatibility(model);
    throw SurgeryError(report);
  }
  CellGrid grid;
  try {
    grid = metric_grid(model, config.cell_size);
  } catch (const GeometryError& e) {
    throw UsageError(e.what());
  }
  if (config.k < 1 || config.k > grid.count()) {
    throw UsageError("--k " + std::to_string(config.k) + " must lie in [1, " + std::to_string(grid.count()) + "]");
  }
  const Corpus corpus = load_corpus(a.corpus);
  const auto result = evaluate_corpus(model, corpus, config);

  write_file_atomic(a.report, result.report.to_json());
  const fs::path csv = a.csv.empty() ? fs::path(a.report).replace_extension(".csv") : fs::path(a.csv);
  write_file_atomic(csv, per_sample_csv(result.rows));
  for (const auto& r : result.report.records) {
    std::cout << r.method << ": sens " << r.topk_sensitivity << " loc " << r.topk_localization.mean << " ± "
              << r.topk_localization.sd << " ap " << r.activation_precision.mean << " ± "
              << r.activation_precision.sd << " acc " << r.accuracy << " auc " << r.auc << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camforge: built-in class activation maps via test-time head surgery"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string config_path;
  std::vector<CLI::Option*> required;
  auto need = [&](CLI::Option* opt) {
    opt->description(opt->get_description() + " (required)");
    required.push_back(opt);
    return opt;
  };
  auto owns = [](CLI::App* sub, CLI::Option* opt) {
    for (const CLI::Option* o : sub->get_options()) {
      if (o == opt) return true;
    }
    return false;
  };
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file with flat keys mirroring the flags; flags win")
        ->check(CLI::ExistingFile);
  };

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic lesion corpus");
  need(gen_cmd->add_option("--out", gen.out, "Output corpus directory"));
  gen_cmd->add_option("--n", gen.n, "Number of samples")->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--height", gen.spec.height, "Image height")->capture_default_str();
  gen_cmd->add_option("--width", gen.spec.width, "Image width")->capture_default_str();
  gen_cmd->add_option("--balance", gen.spec.positive_fraction, "Fraction of lesioned samples")->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise_sigma, "Pixel noise sigma")->capture_default_str();
  gen_cmd->add_option("--min-radius", gen.spec.min_radius, "Smallest lesion radius (pixels)")->capture_default_str();
  gen_cmd->add_option("--max-radius", gen.spec.max_radius, "Largest lesion radius (pixels)")->capture_default_str();
  gen_cmd->add_option("--min-lesions", gen.spec.min_lesions, "Fewest lesions per positive image")->capture_default_str();
  gen_cmd->add_option("--max-lesions", gen.spec.max_lesions, "Most lesions per positive image")->capture_default_str();
  gen_cmd->add_option("--lesion-intensity", gen.spec.lesion_intensity, "Lesion amplitude")->capture_default_str();
  gen_cmd->add_option("--feature-stride", gen.spec.feature_stride, "Backbone stride the image dims must divide")
      ->capture_default_str();
  add_config(gen_cmd);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the reference backbone with SGD and keep the best-val checkpoint");
  need(train_cmd->add_option("--corpus", tr.corpus, "Corpus directory"))->check(CLI::ExistingDirectory);
  need(train_cmd->add_option("--out", tr.out, "Output checkpoint (.cgf)"));
  train_cmd->add_option("--curve", tr.curve, "Loss/accuracy CSV (default: <out>.curve.csv)");
  train_cmd->add_option("--epochs", tr.config.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--lr", tr.config.learning_rate, "SGD learning rate")->capture_default_str();
  train_cmd->add_option("--batch", tr.config.batch_size, "Minibatch size")->capture_default_str();
  train_cmd->add_option("--seed", tr.config.seed, "Random seed (init and shuffling)")->capture_default_str();
  add_config(train_cmd);

  TransformArgs tf;
  auto* tf_cmd = app.add_subcommand("transform", "Replace GAP+FC with a weight-transferred 1x1 convolution head");
  need(tf_cmd->add_option("--in", tf.in, "Input GapFc checkpoint"))->check(CLI::ExistingFile);
  need(tf_cmd->add_option("--out", tf.out, "Output BuiltInCam checkpoint"));
  tf_cmd->add_option("--report", tf.report, "Surgery report JSON");
  add_config(tf_cmd);

  ExplainArgs ex;
  auto* ex_cmd = app.add_subcommand("explain", "Write saliency maps, sidecars and PGM overlays");
  need(ex_cmd->add_option("--model", ex.model, "Checkpoint"))->check(CLI::ExistingFile);
  ex_cmd->add_option("--input", ex.inputs, "Input T4F images (1xCxHxW)")->check(CLI::ExistingFile);
  ex_cmd->add_option("--corpus", ex.corpus, "Corpus directory (with --samples)")->check(CLI::ExistingDirectory);
  ex_cmd->add_option("--samples", ex.samples, "Corpus sample indices")->delimiter(',');
  ex_cmd->add_option("--methods", ex.methods, "Comma list of cam,gradcam,layercam,scorecam,ig,tte")->capture_default_str();
  ex_cmd->add_option("--class", ex.target, "'predicted' or a class index")->capture_default_str();
  ex_cmd->add_option("--ig-steps", ex.ig_steps, "Integrated-gradients Riemann steps")->capture_default_str();
  need(ex_cmd->add_option("--out", ex.out, "Output directory"));
  add_config(ex_cmd);

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Compute explanation and predictive metrics over a corpus split");
  need(ev_cmd->add_option("--model", ev.model, "GapFc checkpoint"))->check(CLI::ExistingFile);
  need(ev_cmd->add_option("--corpus", ev.corpus, "Corpus directory"))->check(CLI::ExistingDirectory);
  ev_cmd->add_option("--methods", ev.methods, "Comma list of methods")->capture_default_str();
  ev_cmd->add_option("--k", ev.k, "Number of top cells")->capture_default_str();
  ev_cmd->add_option("--ig-steps", ev.ig_steps, "Integrated-gradients Riemann steps")->capture_default_str();
  ev_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  ev_cmd->add_option("--masking", ev.masking, "Top-k sensitivity fill: 'mean' (train-split channel mean) or 'original'")
      ->capture_default_str();
  ev_cmd->add_option("--cell-size", ev.cell_size, "Metric cell size in pixels (0 = feature stride)")->capture_default_str();
  need(ev_cmd->add_option("--report", ev.report, "MetricsReport JSON output"));
  ev_cmd->add_option("--csv", ev.csv, "Per-sample CSV output (default: <report>.csv)");
  add_config(ev_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    apply_config(*sub, config_path);
    for (CLI::Option* opt : required) {
      if (owns(sub, opt) && opt->count() == 0) {
        throw UsageError(opt->get_name() + " is required");
      }
    }
    if (sub == gen_cmd) return run_gen_data(gen);
    if (sub == train_cmd) return run_train(tr);
    if (sub == tf_cmd) return run_transform(tf);
    if (sub == ex_cmd) return run_explain(ex);
    if (sub == ev_cmd) return run_evaluate(ev);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SurgeryError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitSurgery;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
