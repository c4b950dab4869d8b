#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "compomerge/tensor.hpp"

namespace compomerge::safetensors {

/// On-disk element type. Tensors are always F32 in memory; BF16 is an
/// optional storage encoding (round-to-nearest-even on write, exact upcast on read).
enum class Dtype { f32, bf16 };

struct File {
  std::map<std::string, TensorF32> tensors;  // sorted by name
  std::map<std::string, std::string> metadata;
  /// On-disk dtype per tensor, filled by decode(); encode() ignores it.
  std::map<std::string, Dtype> stored;
};

/// Serialize to the safetensors byte layout:
///   u64 little-endian header length N, N bytes of JSON header (space padded
///   to an 8-byte boundary), then tightly packed little-endian payloads in
///   lexicographic tensor-name order.
std::vector<std::uint8_t> encode(const File& file, Dtype dtype = Dtype::f32);

/// Parse and validate a byte buffer. Throws ParseError on any inconsistency.
File decode(const std::vector<std::uint8_t>& bytes);

/// Writes the file; returns the number of bytes written.
std::size_t write(const std::filesystem::path& path, const File& file, Dtype dtype = Dtype::f32);
File read(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

std::uint16_t f32_to_bf16(float v);
float bf16_to_f32(std::uint16_t v);

}  // namespace compomerge::safetensors
