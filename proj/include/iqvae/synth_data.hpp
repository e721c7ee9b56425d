#pragma once
// Procedural paired data: 16x16 grayscale images made of a few rectangles and
// discs, each paired with a condition map derived from the shape geometry only.
// Intensities do not enter the condition, so one condition corresponds to many
// images.
//
// Sample i of a dataset draws from Rng(sample_seed(seed, i)), so generation is
// a pure function of (seed, index). Geometry is integer-valued; intensities
// are uniform draws rounded to float.
//
// .iqds layout (little-endian):
//   "IQDS" | u32 version | u32 count |
//   count * ( u8 mode | 256 f32 image | 256 f32 condition )

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iqvae/binary_io.hpp"
#include "iqvae/rng.hpp"

namespace iqvae {

inline constexpr int kSide = 16;
inline constexpr std::size_t kPixels = kSide * kSide;
inline constexpr std::uint32_t kDatasetVersion = 1;

using Grid = std::array<float, kPixels>;

enum class ConditionMode : std::uint8_t { edge = 0, segmentation = 1 };

enum class ShapeKind : std::uint8_t { rectangle = 1, disc = 2 };

struct ShapeParams {
  ShapeKind kind = ShapeKind::rectangle;
  // Rectangle: columns [x, x + w), rows [y, y + h). Disc: centre (x, y), radius r.
  int x = 0, y = 0, w = 0, h = 0, r = 0;
  float intensity = 1.0f;

  bool covers(int row, int col) const {
    if (kind == ShapeKind::rectangle) return col >= x && col < x + w && row >= y && row < y + h;
    return (col - x) * (col - x) + (row - y) * (row - y) <= r * r;
  }
};

struct PairedSample {
  ConditionMode mode = ConditionMode::edge;
  Grid image{};
  Grid condition{};
  std::vector<ShapeParams> shapes;  // generating parameters; not stored in .iqds
};

struct DatasetSpec {
  std::size_t n_samples = 512;
  std::uint64_t seed = 1;
  ConditionMode mode = ConditionMode::edge;
  int min_shapes = 1;
  int max_shapes = 3;
  double intensity_lo = 0.3;
  double intensity_hi = 1.0;

  void validate() const {
    if (n_samples < 1) throw Error("DatasetSpec: n_samples must be at least 1");
    if (min_shapes < 0 || max_shapes < min_shapes) throw Error("DatasetSpec: bad shape count range");
    if (!(intensity_lo >= 0 && intensity_hi <= 1 && intensity_lo <= intensity_hi)) {
      throw Error("DatasetSpec: intensity range must lie within [0, 1]");
    }
  }
};

inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
  return SplitMix64(seed ^ (index * 0xd1b54a32d192ed03ULL)).next();
}

inline std::vector<ShapeParams> draw_shapes(Rng& rng, const DatasetSpec& spec) {
  const int count = rng.range(spec.min_shapes, spec.max_shapes);
  std::vector<ShapeParams> shapes;
  for (int s = 0; s < count; ++s) {
    ShapeParams p;
    p.kind = rng.bernoulli(0.5) ? ShapeKind::rectangle : ShapeKind::disc;
    if (p.kind == ShapeKind::rectangle) {
      p.w = rng.range(3, 8);
      p.h = rng.range(3, 8);
      p.x = rng.range(0, kSide - p.w);
      p.y = rng.range(0, kSide - p.h);
    } else {
      p.r = rng.range(2, 4);
      p.x = rng.range(p.r, kSide - 1 - p.r);
      p.y = rng.range(p.r, kSide - 1 - p.r);
    }
    p.intensity = static_cast<float>(rng.uniform(spec.intensity_lo, spec.intensity_hi));
    shapes.push_back(p);
  }
  return shapes;
}

// Later shapes paint over earlier ones. Edge pixels are shape pixels with a
// 4-neighbour of a different owner; segmentation labels are the shape kind.
inline PairedSample render(std::vector<ShapeParams> shapes, ConditionMode mode) {
  PairedSample out;
  out.mode = mode;
  std::array<int, kPixels> owner{};
  for (std::size_t s = 0; s < shapes.size(); ++s)
    for (int row = 0; row < kSide; ++row)
      for (int col = 0; col < kSide; ++col)
        if (shapes[s].covers(row, col)) owner[static_cast<std::size_t>(row * kSide + col)] = static_cast<int>(s) + 1;
  for (std::size_t i = 0; i < kPixels; ++i) {
    const int o = owner[i];
    out.image[i] = o ? shapes[static_cast<std::size_t>(o - 1)].intensity : 0.0f;
    if (mode == ConditionMode::segmentation) {
      out.condition[i] = o ? static_cast<float>(shapes[static_cast<std::size_t>(o - 1)].kind) : 0.0f;
    }
  }
  if (mode == ConditionMode::edge) {
    for (int row = 0; row < kSide; ++row)
      for (int col = 0; col < kSide; ++col) {
        const int o = owner[static_cast<std::size_t>(row * kSide + col)];
        if (!o) continue;
        bool edge = false;
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4 && !edge; ++k) {
          const int r2 = row + dr[k], c2 = col + dc[k];
          if (r2 < 0 || r2 >= kSide || c2 < 0 || c2 >= kSide) continue;
          edge = owner[static_cast<std::size_t>(r2 * kSide + c2)] != o;
        }
        out.condition[static_cast<std::size_t>(row * kSide + col)] = edge ? 1.0f : 0.0f;
      }
  }
  out.shapes = std::move(shapes);
  return out;
}

inline PairedSample generate_sample(Rng& rng, const DatasetSpec& spec) { return render(draw_shapes(rng, spec), spec.mode); }

inline std::vector<PairedSample> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<PairedSample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    Rng rng(sample_seed(spec.seed, i));
    out.push_back(generate_sample(rng, spec));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_dataset(std::span<const PairedSample> samples) {
  ByteWriter w;
  w.bytes("IQDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    w.u8(static_cast<std::uint8_t>(s.mode));
    for (float v : s.image) w.f32(v);
    for (float v : s.condition) w.f32(v);
  }
  return w.buffer();
}

inline std::vector<PairedSample> decode_dataset(std::vector<std::uint8_t> bytes, const std::string& what = "dataset") {
  ByteReader r(std::move(bytes), what);
  if (r.remaining() < 4 || r.bytes(4) != "IQDS") throw FormatError(what + ": bad magic, not an IQDS file");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.u32();
  constexpr std::size_t record = 1 + 2 * kPixels * 4;
  if (r.remaining() != static_cast<std::size_t>(count) * record) {
    throw FormatError(what + ": header declares " + std::to_string(count) + " samples but the payload holds " +
                      std::to_string(r.remaining()) + " bytes (" + std::to_string(record) + " per sample)");
  }
  std::vector<PairedSample> out(count);
  for (auto& s : out) {
    const auto mode = r.u8();
    if (mode > 1) throw FormatError(what + ": unknown condition mode " + std::to_string(mode));
    s.mode = static_cast<ConditionMode>(mode);
    for (auto& v : s.image) v = r.f32();
    for (auto& v : s.condition) v = r.f32();
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& path, std::span<const PairedSample> samples) {
  write_file_atomic(path, encode_dataset(samples));
}

inline std::vector<PairedSample> load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path), path.string());
}

}  // namespace iqvae
