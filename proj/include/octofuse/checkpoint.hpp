#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "OCTO"                      4 bytes magic
//   version                     u32 (currently 1)
//   manifest_length             u64
//   manifest                    UTF-8 JSON, manifest_length bytes
//   value buffers               raw little-endian reals, back to back
//
// The manifest holds {"dtype": "f64"|"f32", "params": [{"name", "shape",
// "offset", "bytes"}], "meta": {...}}. Offsets are relative to the first byte
// after the manifest.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "octofuse/tensor.hpp"

namespace octofuse {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

template <typename T>
void put_values(std::string& out, std::span<const T> values) {
  out.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

/// Bounds-checked little-endian reader over an in-memory file.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  void need(std::size_t count, const std::string& what) const {
    if (pos_ + count > bytes_.size()) {
      throw FormatError("truncated file reading " + what + ": expected " + std::to_string(pos_ + count) +
                            " bytes, file has " + std::to_string(bytes_.size()),
                        pos_);
    }
  }
  std::string_view take(std::size_t count, const std::string& what) {
    need(count, what);
    auto view = bytes_.substr(pos_, count);
    pos_ += count;
    return view;
  }
  std::uint32_t u32(const std::string& what) {
    std::uint32_t v;
    std::memcpy(&v, take(4, what).data(), 4);
    return v;
  }
  std::uint64_t u64(const std::string& what) {
    std::uint64_t v;
    std::memcpy(&v, take(8, what).data(), 8);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline nlohmann::json parse_manifest(Reader& r, std::string_view magic) {
  auto got = r.take(4, "magic");
  if (got != magic) throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", 0);
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != 1) throw FormatError("unsupported version " + std::to_string(version), version_at);
  const std::uint64_t length = r.u64("manifest length");
  const std::size_t manifest_at = r.pos();
  auto text = r.take(length, "manifest");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), manifest_at + e.byte);
  }
}

template <typename T>
std::vector<Real> decode_values(std::string_view raw) {
  std::vector<T> tmp(raw.size() / sizeof(T));
  std::memcpy(tmp.data(), raw.data(), raw.size());
  return std::vector<Real>(tmp.begin(), tmp.end());
}

}  // namespace io

inline constexpr const char* native_dtype() { return sizeof(Real) == 8 ? "f64" : "f32"; }

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["dtype"] = native_dtype();
  manifest["meta"] = ckpt.meta;
  manifest["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, value] : ckpt.tensors) {
    const std::uint64_t bytes = value.numel() * sizeof(Real);
    manifest["params"].push_back({{"name", name}, {"shape", value.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = manifest.dump();
  std::string out = "OCTO";
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, text.size());
  out += text;
  for (const auto& entry : ckpt.tensors) io::put_values(out, entry.value.data());
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  io::Reader r(bytes);
  const nlohmann::json manifest = io::parse_manifest(r, "OCTO");
  const std::size_t payload_at = r.pos();
  Checkpoint ckpt;
  std::string dtype;
  std::size_t width = 0;
  try {
    dtype = manifest.at("dtype").get<std::string>();
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest missing fields: ") + e.what(), payload_at);
  }
  if (dtype == "f64") {
    width = 8;
  } else if (dtype == "f32") {
    width = 4;
  } else {
    throw FormatError("unknown dtype \"" + dtype + "\"", payload_at);
  }
  std::uint64_t expected_end = payload_at;
  for (const auto& entry : manifest.at("params")) {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0, length = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
      length = entry.at("bytes").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed parameter entry: ") + e.what(), payload_at);
    }
    if (shape_numel(shape) * width != length) {
      throw FormatError("parameter " + name + " of shape " + shape_str(shape) + " declares " + std::to_string(length) +
                            " bytes",
                        payload_at);
    }
    const std::uint64_t begin = payload_at + offset;
    if (begin + length > bytes.size()) {
      throw FormatError("truncated file: parameter " + name + " needs bytes up to " + std::to_string(begin + length) +
                            ", file has " + std::to_string(bytes.size()),
                        bytes.size());
    }
    auto raw = bytes.substr(begin, length);
    std::vector<Real> values = width == 8 ? io::decode_values<double>(raw) : io::decode_values<float>(raw);
    try {
      ckpt.tensors.push_back({name, Tensor::from_data(shape, std::move(values))});
    } catch (const Error& e) {
      throw FormatError("parameter " + name + ": " + e.what(), begin);
    }
    expected_end = std::max(expected_end, begin + length);
  }
  if (expected_end != bytes.size()) {
    throw FormatError("file has " + std::to_string(bytes.size()) + " bytes but manifest accounts for " +
                          std::to_string(expected_end),
                      expected_end);
  }
  return ckpt;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace octofuse
