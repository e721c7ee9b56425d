#pragma once
// Two-stage pipeline over a run directory.
//
//   gen-data     train.iqds, heldout.iqds
//   train-iqvae  iqvae.ckpt, metrics.jsonl      (needs gen-data)
//   train-ar     ar.ckpt, ar_metrics.jsonl      (needs gen-data, train-iqvae)
//   eval         eval.json                      (needs all of the above)
//
// Every stage writes the resolved config.txt. All randomness derives from the
// config, so a saved config reproduces every metrics file byte for byte.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iqvae/checkpoint.hpp"
#include "iqvae/config.hpp"

namespace iqvae {

// A required artifact is missing; `stage()` names the command that makes it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Salts for seeds derived from the run seed.
namespace seeds {
inline constexpr std::uint64_t iqvae_init = 3;
inline constexpr std::uint64_t ar_init = 4;
inline constexpr std::uint64_t eval = 5;
inline constexpr std::uint64_t sample = 6;
inline constexpr std::uint64_t heldout_data = 0x686f6c64;
}  // namespace seeds

struct RunDir {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.txt"; }
  std::filesystem::path train_data() const { return root / "train.iqds"; }
  std::filesystem::path heldout_data() const { return root / "heldout.iqds"; }
  std::filesystem::path iqvae_ckpt() const { return root / "iqvae.ckpt"; }
  std::filesystem::path ar_ckpt() const { return root / "ar.ckpt"; }
  std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
  std::filesystem::path ar_metrics() const { return root / "ar_metrics.jsonl"; }
  std::filesystem::path eval() const { return root / "eval.json"; }
};

struct Datasets {
  std::vector<PairedSample> train;
  std::vector<PairedSample> heldout;
};

inline DatasetSpec heldout_spec(const RunConfig& c) {
  DatasetSpec s = c.data;
  s.n_samples = c.heldout;
  s.seed = sample_seed(c.data.seed, seeds::heldout_data);
  return s;
}

inline Datasets make_datasets(const RunConfig& c) { return {generate_dataset(c.data), generate_dataset(heldout_spec(c))}; }

inline IqVae init_iqvae(const RunConfig& c) {
  Rng rng(sample_seed(c.seed, seeds::iqvae_init));
  return IqVae(c.iqvae, rng);
}

inline ArModel init_ar(const RunConfig& c) {
  Rng rng(sample_seed(c.seed, seeds::ar_init));
  return ArModel(c.ar, rng);
}

namespace detail {

inline void require(const std::filesystem::path& p, const std::string& stage) {
  if (!std::filesystem::exists(p)) {
    throw StageError(stage, "missing " + p.filename().string() + " in " + p.parent_path().string() + ": run '" + stage +
                                "' first");
  }
}

inline void load_into(const std::filesystem::path& path, const NamedTensors& params, const std::string& keys) {
  try {
    assign_from(load_checkpoint(path), params);
  } catch (const FormatError& e) {
    throw ConfigError("config keys " + keys + " do not match " + path.filename().string() + ": " + e.what());
  }
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : path_(path) {}
  void add(const nlohmann::json& j) { text_ += j.dump() + "\n"; }
  void flush() const { write_text_atomic(path_, text_); }

 private:
  std::filesystem::path path_;
  std::string text_;
};

}  // namespace detail

inline void save_config(const RunDir& d, const RunConfig& c) {
  std::filesystem::create_directories(d.root);
  write_text_atomic(d.config(), to_text(c));
}

inline Datasets load_datasets(const RunDir& d) {
  detail::require(d.train_data(), "gen-data");
  detail::require(d.heldout_data(), "gen-data");
  return {load_dataset(d.train_data()), load_dataset(d.heldout_data())};
}

inline IqVae load_iqvae(const RunDir& d, const RunConfig& c) {
  detail::require(d.iqvae_ckpt(), "train-iqvae");
  auto m = init_iqvae(c);
  detail::load_into(d.iqvae_ckpt(), m.parameters(), "iqvae.{codebook_size,embed_dim,hidden,patch}");
  return m;
}

inline ArModel load_ar(const RunDir& d, const RunConfig& c) {
  detail::require(d.ar_ckpt(), "train-ar");
  auto m = init_ar(c);
  detail::load_into(d.ar_ckpt(), m.parameters(), "ar.{width,heads,blocks,mlp_hidden} or iqvae.codebook_size");
  return m;
}

// ---- stages ---------------------------------------------------------------

inline Datasets stage_gen_data(const RunDir& d, const RunConfig& c) {
  save_config(d, c);
  auto ds = make_datasets(c);
  save_dataset(d.train_data(), ds.train);
  save_dataset(d.heldout_data(), ds.heldout);
  return ds;
}

inline std::vector<EpochMetrics> stage_train_iqvae(const RunDir& d, const RunConfig& c,
                                                   const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  const auto ds = load_datasets(d);
  save_config(d, c);
  auto m = init_iqvae(c);
  detail::JsonlWriter out(d.metrics());
  const auto hist = train_iqvae(m, ds.train, c.iqvae_train, [&](const EpochMetrics& e) {
    out.add(e.to_json());
    if (on_epoch) on_epoch(e);
  });
  out.flush();
  save_checkpoint(d.iqvae_ckpt(), m.parameters());
  return hist;
}

inline std::vector<ArStepMetrics> stage_train_ar(const RunDir& d, const RunConfig& c,
                                                 const std::function<void(const ArStepMetrics&)>& on_step = {}) {
  const auto ds = load_datasets(d);
  const auto vae = load_iqvae(d, c);
  save_config(d, c);
  const auto tokens = tokenize_all(vae, ds.train);
  auto ar = init_ar(c);
  detail::JsonlWriter out(d.ar_metrics());
  const auto hist = train_ar(ar, tokens, vae.codebook_x, c.ar_train, [&](const ArStepMetrics& s) {
    out.add(s.to_json());
    if (on_step) on_step(s);
  });
  out.flush();
  save_checkpoint(d.ar_ckpt(), ar.parameters());
  return hist;
}

// ---- evaluation -------------------------------------------------------------

struct EvalReport {
  std::size_t heldout = 0;
  double tf_nll = 0;       // teacher-forced NLL per token
  double fr_nll = 0;       // gold NLL while feeding back top-k samples
  double recon_mse = 0;    // IQ-VAE reconstruction of held-out images
  double swd = 0;          // sliced Wasserstein, one generated image per held-out condition vs held-out images
  double diversity = 0;    // mean pairwise MSE among samples for the same condition
  double latent_sgw = 0;   // sliced GW between image and condition features

  nlohmann::json to_json() const {
    return {{"heldout", heldout}, {"tf_nll", tf_nll},       {"fr_nll", fr_nll},         {"recon_mse", recon_mse},
            {"swd", swd},         {"diversity", diversity}, {"latent_sgw", latent_sgw}};
  }
};

inline double grid_mse(const Grid& a, const Grid& b) {
  double s = 0;
  for (std::size_t i = 0; i < kPixels; ++i) s += (a[i] - b[i]) * static_cast<double>(a[i] - b[i]);
  return s / static_cast<double>(kPixels);
}

// `count` decoded images for one condition map, drawn with top-k sampling.
inline std::vector<Grid> sample_images(const IqVae& vae, const ArModel& ar, const Grid& condition, std::size_t count,
                                       std::size_t k, double temperature, Rng& rng) {
  const PairedSample probe{.condition = condition};
  const auto cond_tokens = tokenize(vae, probe).cond;
  std::vector<Grid> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(decode_tokens(vae, generate(ar, cond_tokens, k, temperature, rng), condition));
  return out;
}

inline EvalReport evaluate(const RunConfig& c, const IqVae& vae, const ArModel& ar, std::span<const PairedSample> held) {
  if (held.empty()) throw Error("evaluate: empty held-out set");
  const auto& e = c.eval;
  EvalReport r;
  r.heldout = held.size();
  const auto tokens = tokenize_all(vae, held);
  const std::uint64_t base = sample_seed(c.seed, seeds::eval);

  std::vector<float> gen, real;
  for (std::size_t i = 0; i < held.size(); ++i) {
    r.tf_nll += nll(ar, tokens[i].cond, tokens[i].image);
    Rng fr(sample_seed(base, 2 * i));
    r.fr_nll += free_running_nll(ar, tokens[i].cond, tokens[i].image, e.k, e.temperature, fr);
    Rng gr(sample_seed(base, 2 * i + 1));
    const auto img = decode_tokens(vae, generate(ar, tokens[i].cond, e.k, e.temperature, gr), held[i].condition);
    gen.insert(gen.end(), img.begin(), img.end());
    real.insert(real.end(), held[i].image.begin(), held[i].image.end());
  }
  const auto n = static_cast<double>(held.size());
  r.tf_nll /= n;
  r.fr_nll /= n;
  r.recon_mse = reconstruction_mse(vae, held);
  const auto img_dirs = sample_directions<float>(kPixels, e.projections, e.projection_seed);
  r.swd = sliced_wasserstein(PointSet<float>(held.size(), kPixels, gen), PointSet<float>(held.size(), kPixels, real),
                             img_dirs);

  const std::size_t nc = std::min(e.diversity_conditions, held.size());
  if (nc > 0 && e.diversity_samples >= 2) {
    double s = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < nc; ++i) {
      Rng rng(sample_seed(base ^ 0xd1e5, i));
      const auto imgs = sample_images(vae, ar, held[i].condition, e.diversity_samples, e.k, e.temperature, rng);
      for (std::size_t a = 0; a < imgs.size(); ++a)
        for (std::size_t b = a + 1; b < imgs.size(); ++b, ++pairs) s += grid_mse(imgs[a], imgs[b]);
    }
    r.diversity = s / static_cast<double>(pairs);
  }

  const auto lat = held.first(std::min(e.latent_batch, held.size()));
  const auto lat_dirs = sample_directions<float>(c.iqvae.embed_dim, e.projections, e.projection_seed);
  r.latent_sgw = latent_sliced_gw(vae, lat, lat_dirs);
  return r;
}

inline EvalReport stage_eval(const RunDir& d, const RunConfig& c) {
  const auto ds = load_datasets(d);
  const auto vae = load_iqvae(d, c);
  const auto ar = load_ar(d, c);
  const auto r = evaluate(c, vae, ar, ds.heldout);
  write_text_atomic(d.eval(), r.to_json().dump(2) + "\n");
  return r;
}

// Runs every stage in order.
inline EvalReport run_pipeline(const RunDir& d, const RunConfig& c) {
  stage_gen_data(d, c);
  stage_train_iqvae(d, c);
  stage_train_ar(d, c);
  return stage_eval(d, c);
}

// 8-bit binary PGM (P5) with values clamped to [0, 1].
inline std::vector<std::uint8_t> encode_pgm(const Grid& g) {
  ByteWriter w;
  w.bytes("P5\n" + std::to_string(kSide) + " " + std::to_string(kSide) + "\n255\n");
  for (float v : g) w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return w.buffer();
}

// 256 little-endian f32 values, row-major.
inline std::vector<std::uint8_t> encode_f32(const Grid& g) {
  ByteWriter w;
  for (float v : g) w.f32(v);
  return w.buffer();
}

// ---- ablation -------------------------------------------------------------

struct AblationCell {
  bool regularizer = false;
  bool gumbel = false;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> reports;  // one per seed

  std::string label() const {
    if (!regularizer && !gumbel) return "baseline";
    if (regularizer && !gumbel) return "+reg";
    if (!regularizer) return "+gumbel";
    return "+reg+gumbel";
  }

  EvalReport mean() const {
    EvalReport m;
    const auto n = static_cast<double>(reports.size());
    for (const auto& r : reports) {
      m.heldout = r.heldout;
      m.tf_nll += r.tf_nll / n;
      m.fr_nll += r.fr_nll / n;
      m.recon_mse += r.recon_mse / n;
      m.swd += r.swd / n;
      m.diversity += r.diversity / n;
      m.latent_sgw += r.latent_sgw / n;
    }
    return m;
  }

  nlohmann::json to_json() const {
    auto j = mean().to_json();
    j["label"] = label();
    j["regularizer"] = regularizer;
    j["gumbel"] = gumbel;
    auto& per = j["per_seed"] = nlohmann::json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      auto r = reports[i].to_json();
      r["seed"] = seeds[i];
      per.push_back(std::move(r));
    }
    return j;
  }
};

struct AblationResult {
  std::vector<AblationCell> rows;  // baseline, +reg, +gumbel, +reg+gumbel

  const AblationCell& cell(bool reg, bool gumbel) const {
    for (const auto& r : rows)
      if (r.regularizer == reg && r.gumbel == gumbel) return r;
    throw Error("ablation: missing cell");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"rows", nlohmann::json::array()}};
    for (const auto& r : rows) j["rows"].push_back(r.to_json());
    return j;
  }
};

// The 2x2 grid {regularizer off/on} x {Gumbel sampling off/on}. For each seed
// all four cells share data and run seed; the two cells with the same
// regularizer setting also share the trained IQ-VAE. When `out` is set every
// cell is written as a run directory under out/seed<s>/<label>.
inline AblationResult run_ablation(const RunConfig& base, std::span<const std::uint64_t> run_seeds,
                                   const std::optional<std::filesystem::path>& out = {},
                                   const std::function<void(const std::string&)>& log = {}) {
  AblationResult res;
  for (bool reg : {false, true})
    for (bool gs : {false, true}) res.rows.push_back({reg, gs, {}, {}});
  const double reg_weight = base.iqvae.weights.reg > 0 ? base.iqvae.weights.reg : 1.0;
  const auto ds = make_datasets(base);
  for (const auto seed : run_seeds) {
    for (bool reg : {false, true}) {
      RunConfig c = base;
      c.seed = seed;
      c.iqvae.weights.reg = reg ? reg_weight : 0.0;
      resolve(c);
      auto vae = init_iqvae(c);
      const auto vae_hist = train_iqvae(vae, ds.train, c.iqvae_train);
      const auto tokens = tokenize_all(vae, ds.train);
      for (bool gs : {false, true}) {
        RunConfig cc = c;
        cc.ar_train.gumbel.enabled = gs;
        auto ar = init_ar(cc);
        const auto ar_hist = train_ar(ar, tokens, vae.codebook_x, cc.ar_train);
        const auto rep = evaluate(cc, vae, ar, ds.heldout);
        for (auto& row : res.rows) {
          if (row.regularizer != reg || row.gumbel != gs) continue;
          row.seeds.push_back(seed);
          row.reports.push_back(rep);
          if (log) log("seed " + std::to_string(seed) + " " + row.label() + ": " + rep.to_json().dump());
          if (out) {
            const RunDir d{*out / ("seed" + std::to_string(seed)) / row.label()};
            save_config(d, cc);
            detail::JsonlWriter m(d.metrics()), a(d.ar_metrics());
            for (const auto& e : vae_hist) m.add(e.to_json());
            for (const auto& s : ar_hist) a.add(s.to_json());
            m.flush();
            a.flush();
            save_checkpoint(d.iqvae_ckpt(), vae.parameters());
            save_checkpoint(d.ar_ckpt(), ar.parameters());
            write_text_atomic(d.eval(), rep.to_json().dump(2) + "\n");
          }
        }
      }
    }
  }
  return res;
}

}  // namespace iqvae
