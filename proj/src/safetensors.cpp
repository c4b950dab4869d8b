#include "compomerge/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace compomerge::safetensors {

using nlohmann::json;

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 2; }

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "F32" : "BF16"; }

struct Entry {
  std::string name;
  Dtype dtype;
  Shape shape;
  std::uint64_t begin;
  std::uint64_t end;
};

}  // namespace

std::uint16_t f32_to_bf16(float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  // round to nearest even on the dropped 16 bits
  const std::uint32_t rounding = 0x7FFF + ((bits >> 16) & 1);
  bits += rounding;
  return static_cast<std::uint16_t>(bits >> 16);
}

float bf16_to_f32(std::uint16_t v) { return std::bit_cast<float>(static_cast<std::uint32_t>(v) << 16); }

std::vector<std::uint8_t> encode(const File& file, Dtype dtype) {
  json header = json::object();
  std::uint64_t offset = 0;
  const std::size_t esize = dtype_size(dtype);
  for (const auto& [name, t] : file.tensors) {
    if (name == "__metadata__") throw ValidationError("tensor name '__metadata__' is reserved");
    const std::uint64_t nbytes = t.size() * esize;
    header[name] = {{"dtype", dtype_name(dtype)}, {"shape", t.shape()}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!file.metadata.empty()) header["__metadata__"] = file.metadata;

  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : file.tensors) {
    for (float v : t.data()) {
      if (dtype == Dtype::f32) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      } else {
        const std::uint16_t bits = f32_to_bf16(v);
        out.push_back(static_cast<std::uint8_t>(bits));
        out.push_back(static_cast<std::uint8_t>(bits >> 8));
      }
    }
  }
  return out;
}

File decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw ParseError("safetensors: file shorter than the 8-byte header length");
  const std::uint64_t n = get_u64(bytes.data());
  if (n > bytes.size() - 8) {
    throw ParseError("safetensors: header length " + std::to_string(n) + " exceeds file size " +
                     std::to_string(bytes.size()));
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const json::exception& e) {
    throw ParseError(std::string("safetensors: malformed header JSON: ") + e.what());
  }
  if (!header.is_object()) throw ParseError("safetensors: header is not a JSON object");

  File file;
  std::vector<Entry> entries;
  for (const auto& [name, spec] : header.items()) {
    if (name == "__metadata__") {
      if (!spec.is_object()) throw ParseError("safetensors: __metadata__ must be a string map");
      for (const auto& [k, v] : spec.items()) {
        if (!v.is_string()) throw ParseError("safetensors: __metadata__ value for '" + k + "' is not a string");
        file.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    const auto fail = [&](const std::string& why) { return ParseError("safetensors: tensor '" + name + "': " + why); };
    if (!spec.is_object() || !spec.contains("dtype") || !spec.contains("shape") || !spec.contains("data_offsets")) {
      throw fail("missing dtype/shape/data_offsets");
    }
    Entry e;
    e.name = name;
    const auto& dt = spec["dtype"];
    if (dt == "F32") {
      e.dtype = Dtype::f32;
    } else if (dt == "BF16") {
      e.dtype = Dtype::bf16;
    } else {
      throw fail("unsupported dtype " + dt.dump());
    }
    try {
      e.shape = spec["shape"].get<Shape>();
      const auto offs = spec["data_offsets"].get<std::vector<std::uint64_t>>();
      if (offs.size() != 2) throw fail("data_offsets must have two entries");
      e.begin = offs[0];
      e.end = offs[1];
    } catch (const json::exception&) {
      throw fail("shape/data_offsets are not unsigned integer lists");
    }
    if (e.shape.empty() || e.shape.size() > 2) throw fail("rank must be 1 or 2, got " + shape_str(e.shape));
    if (e.end < e.begin) throw fail("data_offsets end before begin");
    if (e.end - e.begin != shape_numel(e.shape) * dtype_size(e.dtype)) {
      throw fail("byte length " + std::to_string(e.end - e.begin) + " does not match shape " + shape_str(e.shape));
    }
    entries.push_back(std::move(e));
  }

  const std::uint64_t data_size = bytes.size() - 8 - n;
  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) { return a->begin < b->begin; });
  std::uint64_t cursor = 0;
  for (const Entry* e : by_offset) {
    if (e->end > data_size) {
      throw ParseError("safetensors: tensor '" + e->name + "' data [" + std::to_string(e->begin) + "," +
                       std::to_string(e->end) + ") runs past the data section of " + std::to_string(data_size) +
                       " bytes (truncated file?)");
    }
    if (e->begin != cursor) {
      throw ParseError("safetensors: tensor '" + e->name + "' offsets leave a gap or overlap at byte " +
                       std::to_string(cursor));
    }
    cursor = e->end;
  }
  if (cursor != data_size) {
    throw ParseError("safetensors: " + std::to_string(data_size - cursor) + " trailing bytes after last tensor");
  }

  const std::uint8_t* base = bytes.data() + 8 + n;
  for (const auto& e : entries) {
    std::vector<float> values(shape_numel(e.shape));
    const std::uint8_t* p = base + e.begin;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (e.dtype == Dtype::f32) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
        values[i] = std::bit_cast<float>(bits);
      } else {
        const auto bits = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
        values[i] = bf16_to_f32(bits);
      }
    }
    file.tensors.emplace(e.name, TensorF32(e.shape, std::move(values)));
    file.stored.emplace(e.name, e.dtype);
  }
  return file;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return bytes;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

std::size_t write(const std::filesystem::path& path, const File& file, Dtype dtype) {
  const auto bytes = encode(file, dtype);
  write_bytes(path, bytes);
  return bytes.size();
}

File read(const std::filesystem::path& path) { return decode(read_bytes(path)); }

}  // namespace compomerge::safetensors
