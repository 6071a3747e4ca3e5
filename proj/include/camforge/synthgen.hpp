#pragma once

// Deterministic synthetic lesion corpus with exact ground truth.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "camforge/tensor.hpp"

namespace camforge {

/// Half-open rectangle [row0, row1) x [col0, col1).
struct Box {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruth {
  Grid<float> mask;  // 0/1 at input resolution
  std::vector<Box> boxes;
};

struct SynthSpec {
  int channels = 3;
  int height = 64;
  int width = 64;
  int feature_stride = 4;
  int min_lesions = 1;
  int max_lesions = 3;
  double min_radius = 3.0;
  double max_radius = 6.0;
  double background_mean = 0.3;
  double background_texture = 0.08;
  double lesion_intensity = 1.0;
  double noise_sigma = 0.05;
  double positive_fraction = 0.5;
  std::uint64_t seed = 0;

  /// Throws camforge::Error on inconsistent settings.
  void validate() const;
};

/// Generating parameters of one blob, in pixel coordinates.
struct Lesion {
  double cy = 0.0;
  double cx = 0.0;
  double radius = 0.0;
};

struct Sample {
  Tensor4<float> image;  // 1 x C x H x W
  int label = 0;         // 0 clean, 1 lesioned
  GroundTruth gt;
  std::vector<Lesion> lesions;  // empty when loaded from disk
};

enum class Split { Train, Val, Test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

/// Label of sample `index`: positives are spread evenly so that any prefix of
/// length n holds round(n * positive_fraction) positives up to one.
int label_for(const SynthSpec& spec, std::int64_t index);

/// Pure function of (spec, index).
Sample generate_sample(const SynthSpec& spec, std::int64_t index);

/// 70/15/15 assignment ordered by a per-index hash.
std::vector<Split> assign_splits(std::uint64_t seed, std::int64_t n);

struct CorpusEntry {
  std::int64_t index = 0;
  int label = 0;
  Split split = Split::Train;
  std::string image;  // paths relative to the corpus root
  std::string mask;
  std::string boxes;
};

struct Corpus {
  std::filesystem::path root;
  SynthSpec spec;
  std::vector<CorpusEntry> entries;

  Sample load(std::size_t i) const;
  std::vector<std::size_t> indices(Split s) const;
};

/// Writes images, masks and boxes plus manifest.json under `root`.
void generate_corpus(const SynthSpec& spec, std::int64_t n, const std::filesystem::path& root);
Corpus load_corpus(const std::filesystem::path& root);

std::string boxes_json(const std::vector<Box>& boxes);

}  // namespace camforge
