#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "iqvae/pipeline.hpp"

using namespace iqvae;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  auto c = default_config();
  c.data.n_samples = 48;
  c.heldout = 8;
  c.iqvae_train.epochs = 2;
  c.iqvae_train.batch = 16;
  c.ar_train.steps = 12;
  c.ar_train.batch = 4;
  c.eval.diversity_conditions = 2;
  c.eval.diversity_samples = 3;
  c.eval.latent_batch = 8;
  c.eval.projections = 16;
  resolve(c);
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("iqvae_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file(p);
  return {b.begin(), b.end()};
}

std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, TextRoundTripIsExact) {
  auto c = default_config();
  c.seed = 99;
  c.iqvae.weights.reg = 0.125;
  c.ar_train.lr = 1.0 / 3.0;
  c.data.mode = ConditionMode::segmentation;
  c.ar_train.gumbel.enabled = false;
  resolve(c);
  const auto text = to_text(c);
  const auto back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.ar_train.lr, c.ar_train.lr);
  EXPECT_EQ(back.data.mode, ConditionMode::segmentation);
  EXPECT_FALSE(back.ar_train.gumbel.enabled);
}

TEST(Config, EveryKeyIsWritten) {
  const auto text = to_text(default_config());
  for (const auto& f : detail::config_fields()) EXPECT_NE(text.find("\n" + f.key + " = "), std::string::npos) << f.key;
}

TEST(Config, CommentsBlankLinesAndSpacing) {
  const auto c = parse_config("# note\n\n  gumbel.threshold=0.75  \nseed =7\n");
  EXPECT_EQ(c.ar_train.gumbel.threshold, 0.75);
  EXPECT_EQ(c.seed, 7u);
}

TEST(Config, ErrorsNameTheKeyPath) {
  EXPECT_NE(error_message([] { parse_config("gumbel.thresold = 0.5\n"); }).find("'gumbel.thresold'"), std::string::npos);
  EXPECT_NE(error_message([] { parse_config("ar.steps = many\n"); }).find("'ar.steps'"), std::string::npos);
  EXPECT_NE(error_message([] { parse_config("data.mode = photo\n"); }).find("'data.mode'"), std::string::npos);
  EXPECT_NE(error_message([] { parse_config("sample.k = 0\n"); }).find("'sample.k'"), std::string::npos);
  EXPECT_NE(error_message([] { parse_config("iqvae.patch = 5\n"); }).find("'iqvae.patch'"), std::string::npos);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(parse_config("gumbel.enabled = maybe\n"), ConfigError);
}

TEST(Config, DerivedFieldsFollowPrimaryOnes) {
  const auto c = parse_config("iqvae.codebook_size = 16\niqvae.patch = 2\nseed = 5\n");
  EXPECT_EQ(c.ar.image_vocab, 16u);
  EXPECT_EQ(c.ar.cond_vocab, 16u);
  EXPECT_EQ(c.ar.seq_len, 64u);
  EXPECT_NE(c.iqvae_train.seed, parse_config("seed = 6\n").iqvae_train.seed);
}

TEST(Pipeline, MissingArtifactsNameTheStage) {
  const auto cfg = tiny_config();
  const RunDir d{fresh_dir("missing")};
  auto stage_of = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const StageError& e) {
      return e.stage();
    }
    return std::string("none");
  };
  EXPECT_EQ(stage_of([&] { stage_train_iqvae(d, cfg); }), "gen-data");
  stage_gen_data(d, cfg);
  EXPECT_EQ(stage_of([&] { stage_train_ar(d, cfg); }), "train-iqvae");
  stage_train_iqvae(d, cfg);
  EXPECT_EQ(stage_of([&] { stage_eval(d, cfg); }), "train-ar");
  fs::remove_all(d.root);
}

TEST(Pipeline, RunDirectoryContentsAndReproducibility) {
  const auto cfg = tiny_config();
  const RunDir a{fresh_dir("repro_a")}, b{fresh_dir("repro_b")};
  const auto ra = run_pipeline(a, cfg);
  for (const auto& p : {a.config(), a.train_data(), a.heldout_data(), a.iqvae_ckpt(), a.ar_ckpt(), a.metrics(),
                        a.ar_metrics(), a.eval()})
    EXPECT_TRUE(fs::exists(p)) << p;
  const auto rb = run_pipeline(b, load_config(a.config()));
  EXPECT_EQ(slurp(a.metrics()), slurp(b.metrics()));
  EXPECT_EQ(slurp(a.ar_metrics()), slurp(b.ar_metrics()));
  EXPECT_EQ(slurp(a.eval()), slurp(b.eval()));
  EXPECT_EQ(read_file(a.ar_ckpt()), read_file(b.ar_ckpt()));
  EXPECT_EQ(ra.to_json(), rb.to_json());
  // One JSON object per line with the documented keys.
  std::istringstream lines(slurp(a.metrics()));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "l_total", "l_reg", "l_recon", "l_quan", "codebook_usage"}) EXPECT_TRUE(j.contains(k));
    ++n;
  }
  EXPECT_EQ(n, cfg.iqvae_train.epochs);
  fs::remove_all(a.root);
  fs::remove_all(b.root);
}

TEST(Pipeline, CheckpointShapeMismatchNamesConfigKeys) {
  const auto cfg = tiny_config();
  const RunDir d{fresh_dir("mismatch")};
  stage_gen_data(d, cfg);
  stage_train_iqvae(d, cfg);
  auto other = cfg;
  other.iqvae.embed_dim = 8;
  const auto msg = error_message([&] { load_iqvae(d, other); });
  EXPECT_NE(msg.find("iqvae."), std::string::npos) << msg;
  EXPECT_THROW(load_iqvae(d, other), ConfigError);
  fs::remove_all(d.root);
}

TEST(Pipeline, GreedySamplingIsRepeatable) {
  const auto cfg = tiny_config();
  const RunDir d{fresh_dir("greedy")};
  stage_gen_data(d, cfg);
  stage_train_iqvae(d, cfg);
  stage_train_ar(d, cfg);
  const auto vae = load_iqvae(d, cfg);
  const auto ar = load_ar(d, cfg);
  const auto held = load_dataset(d.heldout_data());
  Rng r1(1), r2(2);
  EXPECT_EQ(sample_images(vae, ar, held[0].condition, 3, 1, 1.0, r1), sample_images(vae, ar, held[0].condition, 3, 1, 1.0, r2));
  fs::remove_all(d.root);
}

TEST(Ablation, FourRowsWithSharedSeeds) {
  auto cfg = tiny_config();
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto res = run_ablation(cfg, seeds);
  const auto j = res.to_json();
  ASSERT_EQ(j["rows"].size(), 4u);
  std::set<std::string> labels;
  for (const auto& row : j["rows"]) {
    labels.insert(row["label"].get<std::string>());
    for (const char* k : {"tf_nll", "fr_nll", "recon_mse", "swd", "diversity", "latent_sgw", "regularizer", "gumbel"})
      EXPECT_TRUE(row.contains(k)) << k;
    ASSERT_EQ(row["per_seed"].size(), 2u);
  }
  EXPECT_EQ(labels, (std::set<std::string>{"baseline", "+reg", "+gumbel", "+reg+gumbel"}));
  // Cells sharing a regularizer setting share the IQ-VAE.
  EXPECT_EQ(res.cell(true, false).reports[0].recon_mse, res.cell(true, true).reports[0].recon_mse);
  EXPECT_NE(res.cell(false, false).reports[0].latent_sgw, res.cell(true, false).reports[0].latent_sgw);
}

TEST(ImageIo, PgmHeaderAndClamping) {
  Grid g{};
  g[0] = -1.0f;
  g[1] = 0.5f;
  g[2] = 2.0f;
  const auto bytes = encode_pgm(g);
  const std::string header = "P5\n16 16\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + kPixels);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
  EXPECT_EQ(bytes[header.size()], 0);
  EXPECT_EQ(bytes[header.size() + 1], 128);
  EXPECT_EQ(bytes[header.size() + 2], 255);
  const auto raw = encode_f32(g);
  ASSERT_EQ(raw.size(), kPixels * 4);
  ByteReader r(raw, "f32");
  EXPECT_EQ(r.f32(), -1.0f);
  EXPECT_EQ(r.f32(), 0.5f);
}

#ifdef IQVAE_CLI_PATH
// End-to-end through the executable: exit codes, stderr JSON, artifacts.
class Cli : public ::testing::Test {
 protected:
  static int run(const std::string& args, const fs::path& err = {}) {
    std::string cmd = std::string(IQVAE_CLI_PATH) + " " + args + " > /dev/null";
    cmd += err.empty() ? " 2> /dev/null" : " 2> " + err.string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }
};

TEST_F(Cli, StagesErrorsAndSampling) {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  const auto cfg_path = dir / "tiny.txt";
  write_text_atomic(cfg_path, to_text(tiny_config()));
  const auto run_dir = dir / "run";
  const auto err = dir / "err.json";

  EXPECT_EQ(run("train-ar --out " + run_dir.string(), err), 3);
  const auto j = nlohmann::json::parse(slurp(err));
  EXPECT_EQ(j["error"], "missing_stage");
  EXPECT_EQ(j["stage"], "gen-data");

  EXPECT_EQ(run("gen-data --config " + cfg_path.string() + " --out " + run_dir.string()), 0);
  EXPECT_EQ(run("train-iqvae --quiet --out " + run_dir.string()), 0);
  EXPECT_EQ(run("train-ar --quiet --out " + run_dir.string() + " --set gumbel.threshold=2", err), 4);
  EXPECT_NE(slurp(err).find("gumbel"), std::string::npos);
  EXPECT_EQ(run("train-ar --quiet --out " + run_dir.string()), 0);
  EXPECT_EQ(run("eval --out " + run_dir.string()), 0);
  EXPECT_TRUE(fs::exists(run_dir / "eval.json"));

  const auto s1 = dir / "s1", s2 = dir / "s2";
  EXPECT_EQ(run("sample --out " + run_dir.string() + " --k 1 --count 2 --dest " + s1.string()), 0);
  EXPECT_EQ(run("sample --out " + run_dir.string() + " --k 1 --count 2 --dest " + s2.string()), 0);
  for (const char* f : {"sample_00.pgm", "sample_00.f32", "sample_01.f32", "condition.pgm"})
    EXPECT_EQ(read_file(s1 / f), read_file(s2 / f)) << f;

  EXPECT_EQ(run("ot --method gw-bruteforce --n 7 --a " + (run_dir / "heldout.iqds").string(), err), 1);
  EXPECT_EQ(run("ot --method sliced-w --n 8 --projections 8 --a " + (run_dir / "heldout.iqds").string()), 0);
  EXPECT_EQ(run("no-such-command", err), 2);
  EXPECT_EQ(nlohmann::json::parse(slurp(err))["error"], "usage");
  fs::remove_all(dir);
}
#endif
