#pragma once

// Binary formats (little-endian):
//   T4F  "T4F1" | u32 n, c, h, w | n*c*h*w f32, row-major
//   CGF  "CGF1" | u32 version | u32 c, h, w | u32 layer count |
//        per layer: u8 kind, u32 in, out, kernel, stride, padding, u32 slot length, slot bytes |
//        u32 parameter count | per parametric layer: weights T4F, bias T4F (1x1x1xC) |
//        u32 CRC32 of everything before it

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "camforge/explainers.hpp"
#include "camforge/model.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

Bytes encode_t4f(const Tensor4<float>& t);
Tensor4<float> decode_t4f(std::span<const std::uint8_t> bytes);

Bytes encode_checkpoint(const ModelGraph<float>& model);
ModelGraph<float> decode_checkpoint(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

void write_t4f(const std::filesystem::path& path, const Tensor4<float>& t);
Tensor4<float> read_t4f(const std::filesystem::path& path);

void save_checkpoint(const ModelGraph<float>& model, const std::filesystem::path& path);
ModelGraph<float> load_checkpoint(const std::filesystem::path& path);

/// JSON metadata written next to a checkpoint: input shape, class names, head kind.
std::string model_sidecar_json(const ModelGraph<float>& model, const std::vector<std::string>& class_names);

/// Writes `<stem>.t4f` (1x1xHxW) and `<stem>.json` {method, class_id, forward_passes,
/// backward_passes, normalized}.
void save_saliency(const SaliencyMap<float>& map, const std::filesystem::path& stem);
SaliencyMap<float> load_saliency(const std::filesystem::path& stem);

/// 8-bit binary PGM; overlay value 1.0 maps to 255.
std::string encode_pgm(const Grid<float>& overlay);

}  // namespace camforge
