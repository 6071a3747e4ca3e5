#include <gtest/gtest.h>

#include <filesystem>

#include "camforge/io.hpp"
#include "camforge/surgery.hpp"
#include "support/oracles.hpp"

namespace camforge {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("camforge_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_u32(Bytes& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

void reseal(Bytes& b) { put_u32(b, b.size() - 4, crc32(std::span<const std::uint8_t>(b).first(b.size() - 4))); }

TEST(Crc32, KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())),
            0xCBF43926u);
}

TEST(T4f, LayoutAndRoundTrip) {
  const Tensor4<float> t(Dims{1, 2, 1, 2}, std::vector<float>{1.0f, -2.0f, 0.5f, 3.25f});
  const auto b = encode_t4f(t);
  ASSERT_EQ(b.size(), 4u + 16u + 16u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "T4F1");
  EXPECT_EQ(b[4 + 4], 2u);
  // 1.0f little-endian: 00 00 80 3f
  EXPECT_EQ(b[20], 0x00);
  EXPECT_EQ(b[22], 0x80);
  EXPECT_EQ(b[23], 0x3f);
  EXPECT_EQ(decode_t4f(b), t);
  auto cut = b;
  cut.pop_back();
  EXPECT_THROW(decode_t4f(cut), FormatError);
  auto bad = b;
  bad[0] = 'X';
  EXPECT_THROW(decode_t4f(bad), FormatError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto m = tiny_net<float>(InputShape{3, 16, 16}, 2, 9);
  const auto b = encode_checkpoint(m);
  const auto back = decode_checkpoint(b);
  EXPECT_EQ(back.layers(), m.layers());
  EXPECT_EQ(back.params(), m.params());
  EXPECT_EQ(back.input_shape(), m.input_shape());
  EXPECT_EQ(encode_checkpoint(back), b);
  CounterRng rng(1);
  const auto x = testing::random_tensor<float>(Dims{3, 3, 16, 16}, rng);
  PassCounter c;
  EXPECT_EQ(forward(m, x, c).logits, forward(back, x, c).logits);

  const auto t = transform(m);
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(t)).head_kind(), HeadKind::BuiltInCam);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = scratch("ckpt");
  const auto m = tiny_net<float>(InputShape{3, 8, 8}, 3, 2);
  save_checkpoint(m, dir / "m.cgf");
  EXPECT_FALSE(fs::exists(dir / "m.cgf.tmp"));
  EXPECT_EQ(load_checkpoint(dir / "m.cgf").params(), m.params());
  EXPECT_THROW(load_checkpoint(dir / "missing.cgf"), IoError);
}

TEST(Checkpoint, TruncatedAtEveryLength) {
  const auto b = encode_checkpoint(testing::fixture_f1<float>());
  for (std::size_t n = 0; n < b.size(); ++n) {
    EXPECT_THROW(decode_checkpoint(std::span<const std::uint8_t>(b).first(n)), FormatError) << n;
  }
}

TEST(Checkpoint, CorruptedByte) {
  auto b = encode_checkpoint(tiny_net<float>(InputShape{3, 8, 8}, 2, 1));
  b[b.size() / 2] ^= 0x40;
  try {
    decode_checkpoint(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, UnknownLayerTag) {
  auto b = encode_checkpoint(testing::fixture_f1<float>());
  b[24] = 42;  // first layer tag
  reseal(b);
  EXPECT_THROW(decode_checkpoint(b), UnsupportedLayerError);
}

TEST(Checkpoint, VersionMismatch) {
  auto b = encode_checkpoint(testing::fixture_f1<float>());
  put_u32(b, 4, 2);
  reseal(b);
  try {
    decode_checkpoint(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Saliency, RoundTrip) {
  const auto dir = scratch("sal");
  SaliencyMap<float> m;
  m.class_id = 1;
  m.method = method::kScoreCam;
  m.grid = Grid<float>::Constant(4, 3, 0.25f);
  m.grid(2, 1) = -1.5f;
  m.pass_counts.forward_count = 17;
  m.normalized = false;
  save_saliency(m, dir / "s");
  const auto back = load_saliency(dir / "s");
  EXPECT_TRUE((back.grid == m.grid).all());
  EXPECT_EQ(back.method, m.method);
  EXPECT_EQ(back.class_id, 1);
  EXPECT_EQ(back.pass_counts.forward_count, 17u);
  EXPECT_EQ(back.pass_counts.backward_count, 0u);
  EXPECT_FALSE(back.normalized);
}

TEST(Pgm, Encoding) {
  Grid<float> g(2, 3);
  g << 0.0f, 0.5f, 1.0f, 1.0f, 0.0f, 0.25f;
  const auto s = encode_pgm(g);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(s.size(), header.size() + 6);
  EXPECT_EQ(s.substr(0, header.size()), header);
  const auto* px = reinterpret_cast<const unsigned char*>(s.data() + header.size());
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[1], 128);
  EXPECT_EQ(px[2], 255);
  EXPECT_EQ(px[5], 64);
}

}  // namespace
}  // namespace camforge
