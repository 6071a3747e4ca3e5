#include "camforge/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <json.hpp>

#include "camforge/error.hpp"
#include "camforge/io.hpp"
#include "camforge/rng.hpp"

namespace camforge {
namespace {

// Stream tags for the counter-based generator.
constexpr std::uint64_t kTagLesions = 0x1E5;
constexpr std::uint64_t kTagTexture = 0x7E7;
constexpr std::uint64_t kTagNoise = 0x401;
constexpr std::uint64_t kTagSplit = 0x5B1;

constexpr int kFormatVersion = 1;
constexpr double kChannelGain[] = {1.0, 0.7, 0.35};

nlohmann::ordered_json spec_json(const SynthSpec& s) {
  nlohmann::ordered_json j;
  j["channels"] = s.channels;
  j["height"] = s.height;
  j["width"] = s.width;
  j["feature_stride"] = s.feature_stride;
  j["min_lesions"] = s.min_lesions;
  j["max_lesions"] = s.max_lesions;
  j["min_radius"] = s.min_radius;
  j["max_radius"] = s.max_radius;
  j["background_mean"] = s.background_mean;
  j["background_texture"] = s.background_texture;
  j["lesion_intensity"] = s.lesion_intensity;
  j["noise_sigma"] = s.noise_sigma;
  j["positive_fraction"] = s.positive_fraction;
  j["seed"] = s.seed;
  return j;
}

SynthSpec spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.channels = j.at("channels");
  s.height = j.at("height");
  s.width = j.at("width");
  s.feature_stride = j.at("feature_stride");
  s.min_lesions = j.at("min_lesions");
  s.max_lesions = j.at("max_lesions");
  s.min_radius = j.at("min_radius");
  s.max_radius = j.at("max_radius");
  s.background_mean = j.at("background_mean");
  s.background_texture = j.at("background_texture");
  s.lesion_intensity = j.at("lesion_intensity");
  s.noise_sigma = j.at("noise_sigma");
  s.positive_fraction = j.at("positive_fraction");
  s.seed = j.at("seed");
  return s;
}

std::string numbered(const char* dir, std::int64_t index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%06lld.%s", dir, static_cast<long long>(index), ext);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw Error("invalid synthetic spec: " + m); };
  if (channels != 3) fail("channels must be 3");
  if (height < 8 || width < 8) fail("image must be at least 8x8");
  if (feature_stride < 1 || height % feature_stride != 0 || width % feature_stride != 0) {
    fail("image dims must be divisible by the feature stride");
  }
  if (min_lesions < 1 || max_lesions < min_lesions) fail("lesion count range must satisfy 1 <= min <= max");
  if (min_radius < 1.0 || max_radius < min_radius) fail("radius range must satisfy 1 <= min <= max");
  if (!(max_radius < std::min(height, width) / 4.0)) fail("lesion radius must be < min(h, w)/4");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) fail("positive_fraction must lie in [0, 1]");
  if (!(noise_sigma >= 0.0) || !(lesion_intensity > 0.0) || !(background_texture >= 0.0)) {
    fail("intensities must be non-negative");
  }
}

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw Error("unknown split '" + s + "'");
}

int label_for(const SynthSpec& spec, std::int64_t index) {
  const auto count = [&](std::int64_t m) {
    return static_cast<std::int64_t>(std::floor(static_cast<double>(m) * spec.positive_fraction + 1e-9));
  };
  return count(index + 1) - count(index) > 0 ? 1 : 0;
}

Sample generate_sample(const SynthSpec& spec, std::int64_t index) {
  spec.validate();
  const int H = spec.height, W = spec.width, C = spec.channels;
  Sample s;
  s.label = label_for(spec, index);
  s.image = Tensor4<float>(Dims{1, C, H, W});
  s.gt.mask = Grid<float>::Zero(H, W);

  // Smooth background: a few low-frequency plane waves shared across channels.
  std::vector<double> bg(static_cast<std::size_t>(H) * W, spec.background_mean);
  CounterRng tex(spec.seed, static_cast<std::uint64_t>(index), kTagTexture);
  for (int wave = 0; wave < 3; ++wave) {
    const double fy = tex.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / H;
    const double fx = tex.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / W;
    const double phase = tex.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = spec.background_texture / 3.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) bg[static_cast<std::size_t>(y) * W + x] += amp * std::sin(fy * y + fx * x + phase);
  }

  std::vector<double> lesion(static_cast<std::size_t>(H) * W, 0.0);
  if (s.label == 1) {
    CounterRng rng(spec.seed, static_cast<std::uint64_t>(index), kTagLesions);
    const auto count = rng.integer(spec.min_lesions, spec.max_lesions);
    for (std::int64_t b = 0; b < count; ++b) {
      const double r = rng.uniform(spec.min_radius, spec.max_radius);
      const double cy = rng.uniform(r, H - r);
      const double cx = rng.uniform(r, W - r);
      s.lesions.push_back({cy, cx, r});
      Box box{H, W, 0, 0};
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
          if (d >= r) continue;
          // Flat core, cosine taper over the outer half of the radius.
          const double t = d <= 0.5 * r ? 1.0 : 0.5 * (1.0 + std::cos(std::numbers::pi * (d - 0.5 * r) / (0.5 * r)));
          auto& v = lesion[static_cast<std::size_t>(y) * W + x];
          v = std::max(v, t);
          s.gt.mask(y, x) = 1.0f;
          box.row0 = std::min(box.row0, y);
          box.col0 = std::min(box.col0, x);
          box.row1 = std::max(box.row1, y + 1);
          box.col1 = std::max(box.col1, x + 1);
        }
      s.gt.boxes.push_back(box);
    }
  }

  CounterRng noise(spec.seed, static_cast<std::uint64_t>(index), kTagNoise);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        const double v = bg[i] + spec.lesion_intensity * kChannelGain[c] * lesion[i] + spec.noise_sigma * noise.normal();
        s.image(0, c, y, x) = static_cast<float>(v);
      }
  return s;
}

std::vector<Split> assign_splits(std::uint64_t seed, std::int64_t n) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  const auto key = [&](std::int64_t i) { return mix64(mix64(seed ^ kTagSplit) ^ static_cast<std::uint64_t>(i)); };
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    const auto ka = key(a), kb = key(b);
    return ka != kb ? ka < kb : a < b;
  });
  const auto train = static_cast<std::int64_t>(std::llround(0.70 * static_cast<double>(n)));
  const auto val = static_cast<std::int64_t>(std::llround(0.15 * static_cast<double>(n)));
  std::vector<Split> out(static_cast<std::size_t>(n), Split::Test);
  for (std::int64_t r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(r)]);
    out[i] = r < train ? Split::Train : (r < train + val ? Split::Val : Split::Test);
  }
  return out;
}

std::string boxes_json(const std::vector<Box>& boxes) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& b : boxes) j.push_back({b.row0, b.col0, b.row1, b.col1});
  nlohmann::ordered_json root;
  root["boxes"] = j;
  return root.dump() + "\n";
}

void generate_corpus(const SynthSpec& spec, std::int64_t n, const std::filesystem::path& root) {
  spec.validate();
  if (n < 2) throw Error("corpus needs at least 2 samples, got " + std::to_string(n));
  const auto splits = assign_splits(spec.seed, n);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["spec"] = spec_json(spec);
  manifest["n"] = n;
  auto& samples = manifest["samples"] = nlohmann::ordered_json::array();
  for (std::int64_t i = 0; i < n; ++i) {
    const Sample s = generate_sample(spec, i);
    CorpusEntry e{i, s.label, splits[static_cast<std::size_t>(i)], numbered("images", i, "t4f"),
                  numbered("masks", i, "t4f"), numbered("boxes", i, "json")};
    write_t4f(root / e.image, s.image);
    write_t4f(root / e.mask, as_tensor(s.gt.mask));
    write_file_atomic(root / e.boxes, boxes_json(s.gt.boxes));
    samples.push_back({{"index", i},
                       {"label", e.label},
                       {"split", to_string(e.split)},
                       {"image", e.image},
                       {"mask", e.mask},
                       {"boxes", e.boxes}});
  }
  write_file_atomic(root / "manifest.json", manifest.dump(2) + "\n");
}

Corpus load_corpus(const std::filesystem::path& root) {
  const auto bytes = read_file(root / "manifest.json");
  Corpus c;
  c.root = root;
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (j.at("format_version").get<int>() != kFormatVersion) throw FormatError("unsupported corpus format version");
    c.spec = spec_from_json(j.at("spec"));
    for (const auto& s : j.at("samples")) {
      c.entries.push_back({s.at("index").get<std::int64_t>(), s.at("label").get<int>(),
                           split_from_string(s.at("split").get<std::string>()), s.at("image").get<std::string>(),
                           s.at("mask").get<std::string>(), s.at("boxes").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus manifest: ") + e.what());
  }
  return c;
}

Sample Corpus::load(std::size_t i) const {
  const CorpusEntry& e = entries.at(i);
  Sample s;
  s.label = e.label;
  s.image = read_t4f(root / e.image);
  const auto m = read_t4f(root / e.mask);
  s.gt.mask = m.plane(0, 0);
  const auto b = read_file(root / e.boxes);
  try {
    const auto j = nlohmann::json::parse(b.begin(), b.end());
    for (const auto& r : j.at("boxes")) s.gt.boxes.push_back({r.at(0), r.at(1), r.at(2), r.at(3)});
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("boxes " + e.boxes + ": " + ex.what());
  }
  return s;
}

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(i);
  return out;
}

}  // namespace camforge
