#include "camforge/io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "camforge/error.hpp"

namespace camforge {
namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  Bytes take() { return std::move(out_); }
  const Bytes& bytes() const { return out_; }

 private:
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("truncated data at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void magic(const char (&m)[5], const char* what) {
    need(4);
    if (std::memcmp(b_.data() + pos_, m, 4) != 0) throw FormatError(std::string("bad magic for ") + what);
    pos_ += 4;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void put_t4f(Writer& w, const Tensor4<float>& t) {
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("T4F1"), 4));
  const Dims& d = t.dims();
  for (int v : {d.n, d.c, d.h, d.w}) w.u32(static_cast<std::uint32_t>(v));
  for (float v : t.data()) w.f32(v);
}

Tensor4<float> get_t4f(Reader& r) {
  r.magic("T4F1", "T4F tensor");
  std::uint32_t d[4];
  std::uint64_t count = 1;
  for (auto& v : d) {
    v = r.u32();
    if (v == 0 || v > (1u << 30)) throw FormatError("T4F dims must be positive and sane");
    count *= v;
  }
  if (count > (std::uint64_t{1} << 31)) throw FormatError("T4F tensor too large");
  r.need(count * 4);
  std::vector<float> data(count);
  for (auto& v : data) v = r.f32();
  return Tensor4<float>(Dims{static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2]),
                             static_cast<int>(d[3])},
                        std::move(data));
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

Bytes encode_t4f(const Tensor4<float>& t) {
  Writer w;
  put_t4f(w, t);
  return w.take();
}

Tensor4<float> decode_t4f(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto t = get_t4f(r);
  if (!r.done()) throw FormatError("trailing bytes after T4F tensor");
  return t;
}

Bytes encode_checkpoint(const ModelGraph<float>& model) {
  Writer w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CGF1"), 4));
  w.u32(kCheckpointVersion);
  const auto& s = model.input_shape();
  for (int v : {s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(model.layers().size()));
  std::uint32_t param_count = 0;
  for (const auto& l : model.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    for (int v : {l.in_channels, l.out_channels, l.kernel, l.stride, l.padding}) {
      w.u32(static_cast<std::uint32_t>(v));
    }
    w.str(l.param);
    param_count += has_params(l.kind) ? 1 : 0;
  }
  w.u32(param_count);
  for (const auto& l : model.layers()) {
    if (!has_params(l.kind)) continue;
    const auto& p = model.param(l.param);
    put_t4f(w, p.weights);
    put_t4f(w, Tensor4<float>(Dims{1, 1, 1, static_cast<int>(p.bias.size())}, p.bias));
  }
  w.u32(crc32(w.bytes()));
  return w.take();
}

ModelGraph<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint truncated");
  {
    Reader head(bytes);
    head.magic("CGF1", "CGF checkpoint");
    const std::uint32_t version = head.u32();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  if (tail.u32() != crc32(body)) throw FormatError("checkpoint checksum failure (corrupted or truncated file)");

  Reader r(body);
  r.magic("CGF1", "CGF checkpoint");
  r.u32();
  InputShape input;
  input.c = static_cast<int>(r.u32());
  input.h = static_cast<int>(r.u32());
  input.w = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  std::vector<LayerSpec> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint8_t tag = r.u8();
    if (tag < static_cast<std::uint8_t>(LayerKind::Conv) || tag > static_cast<std::uint8_t>(LayerKind::Softmax)) {
      throw UnsupportedLayerError("unsupported layer kind tag " + std::to_string(tag) + " at layer " +
                                  std::to_string(i));
    }
    LayerSpec l;
    l.kind = static_cast<LayerKind>(tag);
    l.in_channels = static_cast<int>(r.u32());
    l.out_channels = static_cast<int>(r.u32());
    l.kernel = static_cast<int>(r.u32());
    l.stride = static_cast<int>(r.u32());
    l.padding = static_cast<int>(r.u32());
    l.param = r.str();
    layers.push_back(std::move(l));
  }
  const std::uint32_t param_count = r.u32();
  ParamStore<float> params;
  std::uint32_t seen = 0;
  for (const auto& l : layers) {
    if (!has_params(l.kind)) continue;
    if (seen++ >= param_count) throw FormatError("parameter count disagrees with layer table");
    ConvParams<float> p;
    p.weights = get_t4f(r);
    const auto bias = get_t4f(r);
    p.bias = bias.values();
    p.stride = l.stride;
    p.padding = l.padding;
    params.emplace(l.param, std::move(p));
  }
  if (seen != param_count || !r.done()) throw FormatError("checkpoint has unexpected trailing content");
  try {
    return ModelGraph<float>(std::move(layers), std::move(params), input);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint describes an invalid model: ") + e.what());
  }
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_t4f(const std::filesystem::path& path, const Tensor4<float>& t) {
  write_file_atomic(path, encode_t4f(t));
}

Tensor4<float> read_t4f(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return decode_t4f(b);
}

void save_checkpoint(const ModelGraph<float>& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

ModelGraph<float> load_checkpoint(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return decode_checkpoint(b);
}

std::string model_sidecar_json(const ModelGraph<float>& model, const std::vector<std::string>& class_names) {
  nlohmann::ordered_json j;
  const auto& s = model.input_shape();
  j["format"] = "CGF1";
  j["version"] = kCheckpointVersion;
  j["input_shape"] = {s.c, s.h, s.w};
  j["class_count"] = model.class_count();
  j["class_names"] = class_names;
  j["head_kind"] = to_string(model.head_kind());
  const auto& f = model.shape_report().feature_shape;
  j["feature_shape"] = {f.c, f.h, f.w};
  return j.dump(2) + "\n";
}

void save_saliency(const SaliencyMap<float>& map, const std::filesystem::path& stem) {
  auto t4f = stem;
  t4f += ".t4f";
  auto json = stem;
  json += ".json";
  write_t4f(t4f, as_tensor(map.grid));
  nlohmann::ordered_json j;
  j["method"] = map.method;
  j["class_id"] = map.class_id;
  j["forward_passes"] = map.pass_counts.forward_count;
  j["backward_passes"] = map.pass_counts.backward_count;
  j["normalized"] = map.normalized;
  write_file_atomic(json, j.dump(2) + "\n");
}

SaliencyMap<float> load_saliency(const std::filesystem::path& stem) {
  auto t4f = stem;
  t4f += ".t4f";
  auto json = stem;
  json += ".json";
  const auto t = read_t4f(t4f);
  if (t.n() != 1 || t.c() != 1) throw FormatError("saliency tensor must be 1x1xHxW");
  const auto text = read_file(json);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("saliency sidecar: ") + e.what());
  }
  SaliencyMap<float> m;
  m.grid = t.plane(0, 0);
  m.method = j.at("method").get<std::string>();
  m.class_id = j.at("class_id").get<int>();
  m.pass_counts.forward_count = j.at("forward_passes").get<std::size_t>();
  m.pass_counts.backward_count = j.at("backward_passes").get<std::size_t>();
  m.normalized = j.at("normalized").get<bool>();
  m.resolution = m.method == method::kIntegratedGradients ? Resolution::Input : Resolution::Feature;
  return m;
}

std::string encode_pgm(const Grid<float>& overlay) {
  std::ostringstream out;
  out << "P5\n" << overlay.cols() << " " << overlay.rows() << "\n255\n";
  std::string s = out.str();
  for (Eigen::Index y = 0; y < overlay.rows(); ++y)
    for (Eigen::Index x = 0; x < overlay.cols(); ++x) {
      const float v = std::clamp(overlay(y, x), 0.0f, 1.0f);
      s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  return s;
}

}  // namespace camforge
