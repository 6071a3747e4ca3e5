#pragma once

// Explanation-quality and predictive metrics.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "camforge/model.hpp"
#include "camforge/synthgen.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

/// Regular tiling of the input into cell_h x cell_w regions.
struct CellGrid {
  int cell_h = 1;
  int cell_w = 1;
  int rows = 1;
  int cols = 1;

  /// Throws GeometryError unless the cells tile the input exactly.
  static CellGrid tiling(int height, int width, int cell_h, int cell_w);
  int count() const { return rows * cols; }
};

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Mean overlay value per cell, row-major, accumulated in double.
std::vector<double> cell_means(const Grid<float>& overlay, const CellGrid& grid);

/// The k cells with the highest mean overlay, descending; ties go to the lower
/// row-major cell index.
std::vector<Cell> topk_cells(const Grid<float>& overlay, const CellGrid& grid, int k);

struct MaskingPolicy {
  enum class Kind { ChannelMean, KeepOriginal };
  Kind kind = Kind::ChannelMean;
  std::vector<float> channel_means;  // fill value per input channel

  static MaskingPolicy fill(std::vector<float> means) { return {Kind::ChannelMean, std::move(means)}; }
  static MaskingPolicy keep_original() { return {Kind::KeepOriginal, {}}; }
};

/// Replaces the pixels of `cells` according to the policy.
Tensor4<float> mask_cells(const Tensor4<float>& input, std::span<const Cell> cells, const CellGrid& grid,
                          const MaskingPolicy& policy);

/// (p - p') / p where p is the predicted-class probability on the input and p'
/// the same class's probability after masking the top-k cells of the overlay.
double topk_sensitivity(const ModelGraph<float>& model, const Tensor4<float>& input, const Grid<float>& overlay,
                        const CellGrid& grid, int k, const MaskingPolicy& policy);

/// Fraction of the top-k cells that touch the ground-truth mask.
double topk_localization(const Grid<float>& overlay, const CellGrid& grid, int k, const GroundTruth& gt);

/// Overlay mass inside the box union over total mass; 0 when the total is 0.
double activation_precision(const Grid<float>& overlay, const GroundTruth& gt);

/// Thresholded variant: fraction of pixels with overlay >= tau that fall inside the boxes.
double activation_precision_thresholded(const Grid<float>& overlay, const GroundTruth& gt, float tau = 0.5f);

/// Union of the boxes as a 0/1 grid.
Grid<float> box_union(const GroundTruth& gt, int height, int width);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Mann-Whitney AUC with ties counted as 1/2. Throws if only one class is present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
};

MeanSd mean_sd(std::span<const double> values);

/// Per-sample, per-method metric row.
struct SampleMetrics {
  std::int64_t sample = 0;
  std::string method;
  int label = 0;
  int predicted = 0;
  double probability = 0.0;  // of the positive class
  double topk_sensitivity = 0.0;
  bool has_lesion = false;
  double topk_localization = 0.0;
  double activation_precision = 0.0;
};

struct MethodRecord {
  std::string method;
  double topk_sensitivity = 0.0;
  MeanSd topk_localization;
  MeanSd activation_precision;
  double accuracy = 0.0;
  double auc = 0.0;  // NaN when undefined
  int k = 0;
  std::size_t n = 0;
  std::size_t n_lesion = 0;
};

struct MetricsReport {
  std::vector<MethodRecord> records;

  const MethodRecord& at(const std::string& method) const;
  std::string to_json() const;
};

/// Aggregates one method's rows. Sensitivity, accuracy and AUC use every row;
/// localization and activation precision use rows with a lesion.
MethodRecord aggregate_report(const std::string& method, std::span<const SampleMetrics> rows, int k);

std::string per_sample_csv(std::span<const SampleMetrics> rows);

}  // namespace camforge
