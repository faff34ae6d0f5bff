#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "swiftsr/checkpoint.hpp"

using namespace swiftsr;
namespace fs = std::filesystem;

namespace {

// Reflected CRC-32 (poly 0xEDB88320), bit at a time.
std::uint32_t crc32_bitwise(const unsigned char* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

template <class T>
void put(std::vector<unsigned char>& b, T v) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  b.insert(b.end(), raw, raw + sizeof(T));
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "swiftsr_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

GeneratorConfig tiny() {
  GeneratorConfig c;
  c.base_channels = 6;
  c.num_residual_blocks = 2;
  return c;
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Archive, ByteLayoutMatchesHandEncoding) {
  const Tensor a(Shape{2, 3, 1, 1}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensor b(Shape{1, 1, 1, 1}, 7.5f);
  std::vector<unsigned char> want{'S', 'S', 'R', 'G'};
  put<std::uint32_t>(want, 1);
  put<std::uint32_t>(want, 2);
  put<std::uint16_t>(want, 1);
  want.push_back('a');
  want.push_back(0);
  want.push_back(2);
  put<std::uint32_t>(want, 2);
  put<std::uint32_t>(want, 3);
  for (float v : a.data()) put<float>(want, v);
  put<std::uint16_t>(want, 2);
  want.push_back('b');
  want.push_back('b');
  want.push_back(0);
  want.push_back(1);
  put<std::uint32_t>(want, 1);
  put<float>(want, 7.5f);
  put<std::uint32_t>(want, crc32_bitwise(want.data() + 12, want.size() - 12));
  EXPECT_EQ(encode_archive({{"a", a}, {"bb", b}}), want);
}

TEST(Archive, RoundTripIsBitwise) {
  Tensor odd(Shape{1, 2, 3, 4});
  for (std::size_t i = 0; i < odd.size(); ++i) odd[i] = std::nextafter(static_cast<float>(i), 1e9f) * -1e-3f;
  odd[0] = -0.0f;
  odd[1] = 1e-40f;  // subnormal
  const NamedTensors in{{"x", odd}, {"y.z", oracle::random_tensor({5, 1, 1, 1}, 1)}};
  const NamedTensors out = decode_archive(encode_archive(in));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].first, "x");
  EXPECT_EQ(out[1].first, "y.z");
  EXPECT_EQ(std::memcmp(out[0].second.ptr(), odd.ptr(), odd.size() * 4), 0);
  EXPECT_EQ(out[0].second.shape(), odd.shape());
  EXPECT_EQ(out[1].second, in[1].second);
}

TEST(Archive, ModelRoundTripReproducesOutputs) {
  ModelGraph g = build_generator(tiny(), 9);
  // Make the running statistics non-trivial.
  g.forward(oracle::random_tensor({2, 3, 6, 6}, 3), Pass::train());
  const fs::path p = temp_path("g.ssrg");
  save_checkpoint(g, p);
  LoadedCheckpoint loaded = load_checkpoint(p);
  auto a = g.parameters(), b = loaded.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
  }
  const Tensor x = oracle::random_tensor({1, 3, 5, 7}, 4);
  EXPECT_EQ(g.forward(x, Pass::eval()), loaded.model.forward(x, Pass::eval()));
  // Save of the reloaded model is byte-identical.
  const fs::path q = temp_path("g2.ssrg");
  save_checkpoint(loaded.model, q);
  EXPECT_EQ(slurp(p), slurp(q));
}

TEST(Archive, CorruptMagicIsRejected) {
  ModelGraph g = build_generator(tiny(), 1);
  const fs::path p = temp_path("magic.ssrg");
  save_checkpoint(g, p);
  auto bytes = slurp(p);
  bytes[0] = 'X';
  spit(p, bytes);
  try {
    load_checkpoint(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(Archive, FlippedPayloadBitFailsCrc) {
  ModelGraph g = build_generator(tiny(), 1);
  const fs::path p = temp_path("crc.ssrg");
  save_checkpoint(g, p);
  const auto clean = slurp(p);
  for (std::size_t off : {std::size_t{12}, clean.size() / 2, clean.size() - 5}) {
    auto bytes = clean;
    bytes[off] ^= 0x10;
    spit(p, bytes);
    try {
      load_checkpoint(p);
      FAIL() << off;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos) << e.what();
    }
  }
}

TEST(Archive, TruncationAndVersionAreRejected) {
  const auto good = encode_archive({{"a", Tensor(Shape{4, 1, 1, 1}, 1.0f)}});
  auto cut = good;
  cut.resize(10);
  EXPECT_THROW(decode_archive(cut), FormatError);
  auto ver = good;
  ver[4] = 2;
  EXPECT_THROW(decode_archive(ver), FormatError);
  // A consistent CRC over a lying tensor count: reader runs out of bytes.
  auto lie = good;
  lie[8] = 2;
  EXPECT_THROW(decode_archive(lie), FormatError);
  EXPECT_THROW(read_archive(temp_path("does_not_exist.ssrg")), Error);
}

TEST(Archive, CrossTopologyLoadNamesTheMismatch) {
  ModelGraph g = build_generator(tiny(), 1);
  DiscriminatorConfig dc;
  dc.block_channels = {4, 4, 4, 4, 4, 4, 4, 4};
  dc.hidden_units = 8;
  ModelGraph d = build_discriminator(dc, 2);
  const fs::path p = temp_path("disc.ssrg");
  save_checkpoint(d, p);
  try {
    load_checkpoint_into(g, p);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("generator"), std::string::npos) << msg;
    EXPECT_NE(msg.find("initial.conv.depthwise.weight"), std::string::npos) << msg;
  }
  // Standard twin vs separable: different tensor names.
  ModelGraph t = build_standard_conv_twin(tiny(), 1);
  const fs::path q = temp_path("twin.ssrg");
  save_checkpoint(t, q);
  EXPECT_THROW(load_checkpoint_into(g, q), FormatError);
  // Same topology, other width: shape mismatch names the tensor.
  GeneratorConfig wide = tiny();
  wide.base_channels = 8;
  ModelGraph w = build_generator(wide, 1);
  const fs::path r = temp_path("wide.ssrg");
  save_checkpoint(w, r);
  try {
    load_checkpoint_into(g, r);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("initial.conv.pointwise.weight"), std::string::npos) << e.what();
  }
}

TEST(Archive, UnexpectedTensorIsRejected) {
  ModelGraph g = build_generator(tiny(), 1);
  NamedTensors all = state_dict(g);
  all.emplace_back("trunk.block9.extra", Tensor(Shape{1, 1, 1, 1}));
  try {
    load_state(g, all);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("trunk.block9.extra"), std::string::npos);
  }
}
