#pragma once
// "IQVC" checkpoint files: a magic tag, a format version, then named tensor
// records until end of file. Each record is
//
//   u16 name length | name bytes | u32 rank | u32 extent * rank | f32 payload
//
// with every integer and float little-endian.

#include <filesystem>
#include <map>
#include <string>

#include "iqvae/binary_io.hpp"
#include "iqvae/tensor.hpp"

namespace iqvae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::map<std::string, TensorF>;

inline std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  ByteWriter w;
  w.bytes("IQVC");
  w.u32(kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw FormatError("checkpoint: tensor name too long: " + name.substr(0, 32) + "...");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : t.data()) w.f32(v);
  }
  return w.buffer();
}

inline NamedTensors decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes), what);
  if (r.remaining() < 4 || r.bytes(4) != "IQVC") throw FormatError(what + ": bad magic, not an IQVC checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  NamedTensors out;
  while (!r.done()) {
    const auto len = r.u16();
    auto name = r.bytes(len);
    const auto rank = r.u32();
    if (rank > 8) throw FormatError(what + ": tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const auto n = numel(shape);
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    if (out.contains(name)) throw FormatError(what + ": duplicate tensor '" + name + "'");
    out.emplace(std::move(name), TensorF(std::move(shape), std::move(data)));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// Copies stored values into existing parameters, checking names and shapes.
inline void assign_from(const NamedTensors& stored, const NamedTensors& params, const std::string& prefix = "") {
  for (const auto& [name, p] : params) {
    auto it = stored.find(prefix + name);
    if (it == stored.end()) throw FormatError("checkpoint: missing tensor '" + prefix + name + "'");
    if (it->second.shape() != p.shape()) {
      throw FormatError("checkpoint: tensor '" + prefix + name + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(p.shape()));
    }
    TensorF dst = p;
    std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
  }
}

}  // namespace iqvae
