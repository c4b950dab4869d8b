#include <bit>
#include <cstring>
#include <limits>

#include "compomerge/errors.hpp"
#include "compomerge/safetensors.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace compomerge;
namespace st = compomerge::safetensors;
using nlohmann::json;

namespace {

st::File sample_file() {
  st::File f;
  f.tensors.emplace("b.weight", testing::random_tensor({3, 5}, 1));
  f.tensors.emplace("a.bias", testing::random_tensor({4}, 2));
  f.tensors.emplace("c", TensorF32::vector({0.0f, -0.0f, std::numeric_limits<float>::denorm_min(), 1e-38f,
                                            std::numeric_limits<float>::max()}));
  f.metadata = {{"format", "test"}, {"note", "x"}};
  return f;
}

std::uint64_t header_len(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | bytes[i];
  return n;
}

json header_of(const std::vector<std::uint8_t>& bytes) {
  const auto n = header_len(bytes);
  return json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)));
}

std::vector<std::uint8_t> with_header(const json& h, std::size_t data_bytes) {
  std::string text = h.dump();
  std::vector<std::uint8_t> out(8);
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(text.size()) >> (8 * i));
  out.insert(out.end(), text.begin(), text.end());
  out.resize(out.size() + data_bytes, 0);
  return out;
}

bool bits_equal(const TensorF32& a, const TensorF32& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("round trip is bit exact") {
  const auto f = sample_file();
  const auto g = st::decode(st::encode(f));
  CHECK(g.metadata == f.metadata);
  REQUIRE(g.tensors.size() == f.tensors.size());
  for (const auto& [name, t] : f.tensors) CHECK(bits_equal(g.tensors.at(name), t));
}

TEST_CASE("layout: header length, padding, sorted packed offsets") {
  const auto f = sample_file();
  const auto bytes = st::encode(f);
  const auto n = header_len(bytes);
  CHECK(n % 8 == 0);
  const auto h = header_of(bytes);
  CHECK(h["__metadata__"]["format"] == "test");

  std::uint64_t cursor = 0;
  for (const auto& [name, t] : f.tensors) {  // std::map iterates in name order
    const auto& e = h.at(name);
    CHECK(e["dtype"] == "F32");
    CHECK(e["shape"].get<Shape>() == t.shape());
    const auto offs = e["data_offsets"].get<std::vector<std::uint64_t>>();
    CHECK(offs[0] == cursor);
    CHECK(offs[1] == cursor + 4 * t.size());
    // little-endian payload at the stated offset
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[8 + n + offs[0] + 4 * i + b]) << (8 * b);
      CHECK(bits == std::bit_cast<std::uint32_t>(t[i]));
    }
    cursor = offs[1];
  }
  CHECK(bytes.size() == 8 + n + cursor);
}

TEST_CASE("encoding is deterministic") {
  CHECK(st::encode(sample_file()) == st::encode(sample_file()));
}

TEST_CASE("write and read through the filesystem") {
  testing::TempDir dir;
  const auto f = sample_file();
  const auto n = st::write(dir / "x.safetensors", f);
  CHECK(n == std::filesystem::file_size(dir / "x.safetensors"));
  const auto g = st::read(dir / "x.safetensors");
  for (const auto& [name, t] : f.tensors) CHECK(bits_equal(g.tensors.at(name), t));
  CHECK_THROWS_AS(st::read(dir / "missing.safetensors"), IoError);
  CHECK_THROWS_AS(st::write(dir / "no/such/dir/x.safetensors", f), IoError);
}

TEST_CASE("malformed file battery") {
  const auto good = st::encode(sample_file());

  SUBCASE("shorter than length prefix") {
    CHECK_THROWS_AS(st::decode({1, 2, 3}), ParseError);
  }
  SUBCASE("header length beyond file") {
    auto b = good;
    b[0] = 0xFF;
    b[5] = 0x01;
    CHECK_THROWS_AS(st::decode(b), ParseError);
  }
  SUBCASE("header is not JSON") {
    auto b = good;
    b[8] = '#';
    CHECK_THROWS_AS(st::decode(b), ParseError);
  }
  SUBCASE("header is not an object") {
    CHECK_THROWS_AS(st::decode(with_header(json::array({1, 2}), 0)), ParseError);
  }
  SUBCASE("missing fields") {
    CHECK_THROWS_AS(st::decode(with_header({{"t", {{"dtype", "F32"}, {"shape", {1}}}}}, 4)), ParseError);
  }
  SUBCASE("unsupported dtype") {
    CHECK_THROWS_AS(
        st::decode(with_header({{"t", {{"dtype", "F16"}, {"shape", {2}}, {"data_offsets", {0, 4}}}}}, 4)),
        ParseError);
  }
  SUBCASE("shape disagrees with byte length") {
    CHECK_THROWS_AS(
        st::decode(with_header({{"t", {{"dtype", "F32"}, {"shape", {3}}, {"data_offsets", {0, 8}}}}}, 8)),
        ParseError);
  }
  SUBCASE("non-integer shape") {
    CHECK_THROWS_AS(
        st::decode(with_header({{"t", {{"dtype", "F32"}, {"shape", {-1}}, {"data_offsets", {0, 4}}}}}, 4)),
        ParseError);
  }
  SUBCASE("gap between tensors") {
    const json h = {{"a", {{"dtype", "F32"}, {"shape", {1}}, {"data_offsets", {0, 4}}}},
                    {"b", {{"dtype", "F32"}, {"shape", {1}}, {"data_offsets", {8, 12}}}}};
    CHECK_THROWS_AS(st::decode(with_header(h, 12)), ParseError);
  }
  SUBCASE("overlapping tensors") {
    const json h = {{"a", {{"dtype", "F32"}, {"shape", {2}}, {"data_offsets", {0, 8}}}},
                    {"b", {{"dtype", "F32"}, {"shape", {1}}, {"data_offsets", {4, 8}}}}};
    CHECK_THROWS_AS(st::decode(with_header(h, 8)), ParseError);
  }
  SUBCASE("trailing bytes") {
    auto b = good;
    b.push_back(0);
    CHECK_THROWS_AS(st::decode(b), ParseError);
  }
  SUBCASE("non-string metadata") {
    CHECK_THROWS_AS(st::decode(with_header({{"__metadata__", {{"k", 1}}}}, 0)), ParseError);
  }
  SUBCASE("truncated data names the tensor") {
    auto b = good;
    b.resize(b.size() - 3);
    try {
      (void)st::decode(b);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("'c'") != std::string::npos);
    }
  }
}

TEST_CASE("reserved tensor name is rejected on write") {
  st::File f;
  f.tensors.emplace("__metadata__", TensorF32::vector({1}));
  CHECK_THROWS_AS(st::encode(f), ValidationError);
}

TEST_CASE("bf16 storage") {
  CHECK(st::f32_to_bf16(1.0f) == 0x3F80);
  CHECK(st::f32_to_bf16(-2.0f) == 0xC000);
  // halfway cases round to the even neighbour
  CHECK(st::f32_to_bf16(std::bit_cast<float>(0x3F808000u)) == 0x3F80);
  CHECK(st::f32_to_bf16(std::bit_cast<float>(0x3F818000u)) == 0x3F82);
  CHECK(st::f32_to_bf16(std::bit_cast<float>(0x3F808001u)) == 0x3F81);
  CHECK(st::bf16_to_f32(0x3F80) == 1.0f);

  st::File f;
  f.tensors.emplace("t", TensorF32::vector({1.0f, -0.5f, 3.0f, 0.15625f}));
  const auto bytes = st::encode(f, st::Dtype::bf16);
  CHECK(bytes.size() == 8 + header_len(bytes) + 2 * 4);
  CHECK(header_of(bytes)["t"]["dtype"] == "BF16");
  CHECK(st::decode(bytes).tensors.at("t") == f.tensors.at("t"));  // exactly representable values

  const auto r = testing::random_tensor({64}, 9);
  st::File g;
  g.tensors.emplace("r", r);
  const auto back = st::decode(st::encode(g, st::Dtype::bf16)).tensors.at("r");
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(back[i] - r[i]) <= std::abs(r[i]) * 0x1p-8f);
}
