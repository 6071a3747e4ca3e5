#include "camforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "camforge/error.hpp"

namespace camforge {

CellGrid CellGrid::tiling(int height, int width, int cell_h, int cell_w) {
  if (cell_h < 1 || cell_w < 1 || height % cell_h != 0 || width % cell_w != 0) {
    throw GeometryError("cells of " + std::to_string(cell_h) + "x" + std::to_string(cell_w) +
                        " do not tile a " + std::to_string(height) + "x" + std::to_string(width) + " input");
  }
  return {cell_h, cell_w, height / cell_h, width / cell_w};
}

namespace {
void check_overlay(const Grid<float>& overlay, const CellGrid& grid) {
  if (overlay.rows() != grid.rows * grid.cell_h || overlay.cols() != grid.cols * grid.cell_w) {
    throw DimensionError("overlay " + std::to_string(overlay.rows()) + "x" + std::to_string(overlay.cols()) +
                         " does not match the cell grid");
  }
}

bool in_boxes(const GroundTruth& gt, int y, int x) {
  for (const auto& b : gt.boxes)
    if (y >= b.row0 && y < b.row1 && x >= b.col0 && x < b.col1) return true;
  return false;
}
}  // namespace

std::vector<double> cell_means(const Grid<float>& overlay, const CellGrid& grid) {
  check_overlay(overlay, grid);
  std::vector<double> means(static_cast<std::size_t>(grid.count()));
  const double area = static_cast<double>(grid.cell_h) * grid.cell_w;
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      double s = 0.0;
      for (int y = r * grid.cell_h; y < (r + 1) * grid.cell_h; ++y)
        for (int x = c * grid.cell_w; x < (c + 1) * grid.cell_w; ++x) s += overlay(y, x);
      means[static_cast<std::size_t>(r * grid.cols + c)] = s / area;
    }
  return means;
}

std::vector<Cell> topk_cells(const Grid<float>& overlay, const CellGrid& grid, int k) {
  if (k < 0 || k > grid.count()) {
    throw Error("k = " + std::to_string(k) + " exceeds the " + std::to_string(grid.count()) + " available cells");
  }
  const auto means = cell_means(overlay, grid);
  std::vector<int> order(means.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return means[static_cast<std::size_t>(a)] > means[static_cast<std::size_t>(b)];
  });
  std::vector<Cell> out;
  for (int i = 0; i < k; ++i) out.push_back({order[static_cast<std::size_t>(i)] / grid.cols, order[static_cast<std::size_t>(i)] % grid.cols});
  return out;
}

Tensor4<float> mask_cells(const Tensor4<float>& input, std::span<const Cell> cells, const CellGrid& grid,
                          const MaskingPolicy& policy) {
  Tensor4<float> out = input;
  if (policy.kind == MaskingPolicy::Kind::KeepOriginal) return out;
  if (policy.channel_means.size() != static_cast<std::size_t>(input.c())) {
    throw DimensionError("masking policy has " + std::to_string(policy.channel_means.size()) +
                         " channel means for a " + std::to_string(input.c()) + "-channel input");
  }
  for (int n = 0; n < input.n(); ++n)
    for (int ch = 0; ch < input.c(); ++ch)
      for (const Cell& cell : cells)
        for (int y = cell.row * grid.cell_h; y < (cell.row + 1) * grid.cell_h; ++y)
          for (int x = cell.col * grid.cell_w; x < (cell.col + 1) * grid.cell_w; ++x)
            out(n, ch, y, x) = policy.channel_means[static_cast<std::size_t>(ch)];
  return out;
}

double topk_sensitivity(const ModelGraph<float>& model, const Tensor4<float>& input, const Grid<float>& overlay,
                        const CellGrid& grid, int k, const MaskingPolicy& policy) {
  PassCounter counter;
  const auto logits = row(forward(model, input, counter).logits, 0);
  const auto probs = softmax<float>(logits);
  const auto c = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const double p = probs[c];
  if (!(p > 0.0)) throw NumericError("predicted-class probability is zero");
  const auto cells = topk_cells(overlay, grid, k);
  const auto masked = mask_cells(input, cells, grid, policy);
  const double q = softmax<float>(row(forward(model, masked, counter).logits, 0))[c];
  return (p - q) / p;
}

double topk_localization(const Grid<float>& overlay, const CellGrid& grid, int k, const GroundTruth& gt) {
  if (gt.mask.rows() != overlay.rows() || gt.mask.cols() != overlay.cols()) {
    throw DimensionError("ground-truth mask does not match the overlay");
  }
  const auto cells = topk_cells(overlay, grid, k);
  if (cells.empty()) return 0.0;
  int hits = 0;
  for (const Cell& cell : cells) {
    const auto block = gt.mask.block(cell.row * grid.cell_h, cell.col * grid.cell_w, grid.cell_h, grid.cell_w);
    hits += (block > 0.0f).any() ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(cells.size());
}

Grid<float> box_union(const GroundTruth& gt, int height, int width) {
  Grid<float> u = Grid<float>::Zero(height, width);
  for (const auto& b : gt.boxes) {
    if (b.row0 < 0 || b.col0 < 0 || b.row1 > height || b.col1 > width || b.row0 > b.row1 || b.col0 > b.col1) {
      throw GeometryError("box outside image bounds");
    }
    u.block(b.row0, b.col0, b.row1 - b.row0, b.col1 - b.col0) = 1.0f;
  }
  return u;
}

double activation_precision(const Grid<float>& overlay, const GroundTruth& gt) {
  const Grid<float> inside = box_union(gt, static_cast<int>(overlay.rows()), static_cast<int>(overlay.cols()));
  double in = 0.0, total = 0.0;
  for (Eigen::Index y = 0; y < overlay.rows(); ++y)
    for (Eigen::Index x = 0; x < overlay.cols(); ++x) {
      total += overlay(y, x);
      if (inside(y, x) > 0.0f) in += overlay(y, x);
    }
  return total > 0.0 ? in / total : 0.0;
}

double activation_precision_thresholded(const Grid<float>& overlay, const GroundTruth& gt, float tau) {
  std::size_t active = 0, hits = 0;
  for (Eigen::Index y = 0; y < overlay.rows(); ++y)
    for (Eigen::Index x = 0; x < overlay.cols(); ++x) {
      if (overlay(y, x) < tau) continue;
      ++active;
      hits += in_boxes(gt, static_cast<int>(y), static_cast<int>(x)) ? 1 : 0;
    }
  return active ? static_cast<double>(hits) / static_cast<double>(active) : 0.0;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw DimensionError("accuracy needs matching, non-empty prediction and label lists");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error("auc needs binary labels");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw Error("auc is undefined when only one class is present");

  // Average ranks over tie groups; the positive rank sum gives U.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum += avg_rank;
    i = j;
  }
  const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

MeanSd mean_sd(std::span<const double> values) {
  if (values.empty()) throw Error("cannot aggregate an empty metric stream");
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

MethodRecord aggregate_report(const std::string& method, std::span<const SampleMetrics> rows, int k) {
  if (rows.empty()) throw Error("cannot aggregate an empty metric stream for '" + method + "'");
  MethodRecord r;
  r.method = method;
  r.k = k;
  r.n = rows.size();
  std::vector<double> sens, loc, ap, scores;
  std::vector<int> preds, labels;
  for (const auto& s : rows) {
    sens.push_back(s.topk_sensitivity);
    scores.push_back(s.probability);
    preds.push_back(s.predicted);
    labels.push_back(s.label);
    if (s.has_lesion) {
      loc.push_back(s.topk_localization);
      ap.push_back(s.activation_precision);
    }
  }
  r.n_lesion = loc.size();
  r.topk_sensitivity = mean_sd(sens).mean;
  if (!loc.empty()) {
    r.topk_localization = mean_sd(loc);
    r.activation_precision = mean_sd(ap);
  }
  r.accuracy = accuracy(preds, labels);
  try {
    r.auc = auc(scores, labels);
  } catch (const Error&) {
    r.auc = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

const MethodRecord& MetricsReport::at(const std::string& method) const {
  for (const auto& r : records)
    if (r.method == method) return r;
  throw Error("no record for method '" + method + "'");
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(); };
  for (const auto& r : records) {
    j[r.method] = {
        {"topk_sensitivity", num(r.topk_sensitivity)},
        {"topk_localization", {{"mean", num(r.topk_localization.mean)}, {"sd", num(r.topk_localization.sd)}}},
        {"activation_precision", {{"mean", num(r.activation_precision.mean)}, {"sd", num(r.activation_precision.sd)}}},
        {"accuracy", num(r.accuracy)},
        {"auc", num(r.auc)},
        {"k", r.k},
        {"n", r.n},
        {"n_lesion", r.n_lesion},
    };
  }
  return j.dump(2) + "\n";
}

std::string per_sample_csv(std::span<const SampleMetrics> rows) {
  std::ostringstream out;
  out.precision(9);
  out << "sample,method,label,predicted,probability,topk_sensitivity,topk_localization,activation_precision\n";
  for (const auto& r : rows) {
    out << r.sample << ',' << r.method << ',' << r.label << ',' << r.predicted << ',' << r.probability << ','
        << r.topk_sensitivity << ',';
    if (r.has_lesion) out << r.topk_localization << ',' << r.activation_precision;
    else out << ',';
    out << '\n';
  }
  return out.str();
}

}  // namespace camforge
