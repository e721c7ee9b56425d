#include <gtest/gtest.h>

#include <filesystem>

#include "iqvae/checkpoint.hpp"
#include "iqvae/synth_data.hpp"

using namespace iqvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "iqvae_test_data";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(SynthData, ZeroShapesGiveBlankPair) {
  DatasetSpec spec;
  spec.min_shapes = spec.max_shapes = 0;
  Rng rng(1);
  const auto s = generate_sample(rng, spec);
  for (std::size_t i = 0; i < kPixels; ++i) {
    EXPECT_EQ(s.image[i], 0.0f);
    EXPECT_EQ(s.condition[i], 0.0f);
  }
}

TEST(SynthData, SameSeedSamePair) {
  DatasetSpec spec;
  Rng a(42), b(42);
  const auto s1 = generate_sample(a, spec), s2 = generate_sample(b, spec);
  EXPECT_EQ(s1.image, s2.image);
  EXPECT_EQ(s1.condition, s2.condition);
  const auto d1 = generate_dataset({.n_samples = 20, .seed = 3});
  const auto d2 = generate_dataset({.n_samples = 20, .seed = 3});
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(d1[i].image, d2[i].image);
}

TEST(SynthData, SharedGeometryDifferentIntensityIsOneToMany) {
  DatasetSpec spec;
  spec.min_shapes = spec.max_shapes = 2;
  Rng rng(5);
  auto shapes = draw_shapes(rng, spec);
  auto other = shapes;
  for (auto& s : other) s.intensity = s.intensity > 0.6f ? 0.35f : 0.95f;
  for (auto mode : {ConditionMode::edge, ConditionMode::segmentation}) {
    const auto a = render(shapes, mode), b = render(other, mode);
    EXPECT_EQ(a.condition, b.condition);
    EXPECT_NE(a.image, b.image);
  }
}

TEST(SynthData, RangesAndSelfConsistency) {
  for (auto mode : {ConditionMode::edge, ConditionMode::segmentation}) {
    const auto data = generate_dataset({.n_samples = 200, .seed = 9, .mode = mode});
    for (const auto& s : data) {
      EXPECT_GE(s.shapes.size(), 1u);
      EXPECT_LE(s.shapes.size(), 3u);
      for (std::size_t i = 0; i < kPixels; ++i) {
        EXPECT_GE(s.image[i], 0.0f);
        EXPECT_LE(s.image[i], 1.0f);
        if (mode == ConditionMode::edge) {
          EXPECT_TRUE(s.condition[i] == 0.0f || s.condition[i] == 1.0f);
        } else {
          EXPECT_TRUE(s.condition[i] == 0.0f || s.condition[i] == 1.0f || s.condition[i] == 2.0f);
        }
      }
      // Condition is recomputable from the stored shape parameters.
      EXPECT_EQ(render(s.shapes, mode).condition, s.condition);
    }
  }
}

TEST(SynthData, EdgeMapOfASingleRectangle) {
  ShapeParams rect{.kind = ShapeKind::rectangle, .x = 2, .y = 3, .w = 4, .h = 3, .intensity = 0.5f};
  const auto s = render({rect}, ConditionMode::edge);
  // A 4x3 box has 10 boundary pixels and 2 interior ones.
  int edges = 0;
  for (float v : s.condition) edges += v == 1.0f;
  EXPECT_EQ(edges, 10);
  EXPECT_EQ(s.condition[4 * kSide + 3], 0.0f);
  EXPECT_EQ(s.condition[3 * kSide + 2], 1.0f);
  EXPECT_EQ(s.image[4 * kSide + 3], 0.5f);
}

TEST(DatasetFile, RoundTripIsByteExact) {
  const auto data = generate_dataset({.n_samples = 17, .seed = 4});
  const auto p1 = temp_path("a.iqds"), p2 = temp_path("b.iqds");
  save_dataset(p1, data);
  const auto loaded = load_dataset(p1);
  ASSERT_EQ(loaded.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(loaded[i].image, data[i].image);
    EXPECT_EQ(loaded[i].condition, data[i].condition);
  }
  save_dataset(p2, loaded);
  EXPECT_EQ(read_file(p1), read_file(p2));
  EXPECT_EQ(fs::file_size(p1), 12u + 17u * (1 + 2 * 256 * 4));
}

TEST(DatasetFile, EmptyDatasetRoundTrips) {
  const auto p = temp_path("empty.iqds");
  save_dataset(p, std::vector<PairedSample>{});
  EXPECT_TRUE(load_dataset(p).empty());
  EXPECT_EQ(fs::file_size(p), 12u);
}

TEST(DatasetFile, CorruptionIsReported) {
  auto bytes = encode_dataset(generate_dataset({.n_samples = 2, .seed = 4}));
  auto bad_count = bytes;
  bad_count[8] = 200;  // count field
  EXPECT_THROW(decode_dataset(bad_count), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_dataset(bad_version), FormatError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_dataset(truncated), FormatError);
  EXPECT_THROW(decode_dataset({}), FormatError);
  auto bad_mode = bytes;
  bad_mode[12] = 7;
  EXPECT_THROW(decode_dataset(bad_mode), FormatError);
}

TEST(Checkpoint, LayoutAndRoundTrip) {
  NamedTensors t;
  t.emplace("w", TensorF({2, 3}, {1, 2, 3, 4, 5, 6}));
  t.emplace("b", TensorF({1}, {-0.5f}));
  const auto bytes = encode_checkpoint(t);
  // magic + version, then "b": 2 + 1 + 4 + 4 + 4 bytes, then "w": 2 + 1 + 4 + 8 + 24 bytes.
  EXPECT_EQ(bytes.size(), 8u + 15u + 39u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "IQVC");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);    // name length of "b", low byte
  EXPECT_EQ(bytes[10], 'b');
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("w").shape(), (Shape{2, 3}));
  EXPECT_EQ(back.at("w").values(), t.at("w").values());
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto p = temp_path("x.ckpt");
  save_checkpoint(p, t);
  EXPECT_EQ(read_file(p), bytes);
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
}

TEST(Checkpoint, RejectsDamage) {
  NamedTensors t;
  t.emplace("w", TensorF({2}, {1, 2}));
  auto bytes = encode_checkpoint(t);
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
  auto magic = bytes;
  magic[1] = 'Z';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);

  NamedTensors target;
  target.emplace("w", TensorF({3}, {0, 0, 0}));
  EXPECT_THROW(assign_from(decode_checkpoint(bytes), target), FormatError);
  NamedTensors missing;
  missing.emplace("v", TensorF({2}, {0, 0}));
  EXPECT_THROW(assign_from(decode_checkpoint(bytes), missing), FormatError);
}
