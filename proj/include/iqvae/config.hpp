#pragma once
// Run configuration: every tunable of a run, readable from and written to a
// plain `key = value` text file. Lines starting with '#' are comments. Keys
// use dotted section paths (for example `gumbel.threshold`). Unknown keys and
// unparsable values are errors that name the offending key.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iqvae/binary_io.hpp"
#include "iqvae/gumbel.hpp"
#include "iqvae/iq_vae.hpp"
#include "iqvae/synth_data.hpp"

namespace iqvae {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct EvalConfig {
  std::size_t k = 8;
  double temperature = 1.0;
  std::size_t projections = 128;      // directions for sliced distances at evaluation
  std::uint64_t projection_seed = 7;  // fixed so evaluations are comparable across runs
  std::size_t diversity_conditions = 16;
  std::size_t diversity_samples = 8;
  std::size_t latent_batch = 32;  // held-out samples pooled for the latent discrepancy
};

struct RunConfig {
  std::uint64_t seed = 1;
  DatasetSpec data{.n_samples = 512, .seed = 1};
  std::size_t heldout = 256;
  IqVaeConfig iqvae;
  IqVaeTrainConfig iqvae_train;
  ArConfig ar;
  ArTrainConfig ar_train;
  EvalConfig eval;

  void validate() const;
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <class T, class Get>
ConfigField number(std::string key, Get getter) {
  auto k = key;
  return {std::move(key),
          [getter](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt_double(getter(const_cast<RunConfig&>(c)));
            } else {
              return std::to_string(getter(const_cast<RunConfig&>(c)));
            }
          },
          [getter, k](RunConfig& c, const std::string& s) { getter(c) = parse_number<T>(k, s); }};
}

template <class Get>
ConfigField boolean(std::string key, Get getter) {
  auto k = key;
  return {std::move(key), [getter](const RunConfig& c) { return getter(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [getter, k](RunConfig& c, const std::string& s) { getter(c) = parse_bool(k, s); }};
}

inline ConfigField mode_field() {
  return {"data.mode",
          [](const RunConfig& c) { return std::string(c.data.mode == ConditionMode::edge ? "edge" : "segmentation"); },
          [](RunConfig& c, const std::string& s) {
            if (s == "edge") {
              c.data.mode = ConditionMode::edge;
            } else if (s == "segmentation") {
              c.data.mode = ConditionMode::segmentation;
            } else {
              throw ConfigError("config key 'data.mode': expected edge or segmentation, got '" + s + "'");
            }
          }};
}

#define IQVAE_NUM(T, key, member) number<T>(key, [](RunConfig& c) -> T& { return c.member; })
#define IQVAE_BOOL(key, member) boolean(key, [](RunConfig& c) -> bool& { return c.member; })

inline const std::vector<ConfigField>& config_fields() {
  using u64 = std::uint64_t;
  using sz = std::size_t;
  static const std::vector<ConfigField> fields{
      IQVAE_NUM(u64, "seed", seed),
      IQVAE_NUM(sz, "data.n_samples", data.n_samples),
      IQVAE_NUM(u64, "data.seed", data.seed),
      mode_field(),
      IQVAE_NUM(int, "data.min_shapes", data.min_shapes),
      IQVAE_NUM(int, "data.max_shapes", data.max_shapes),
      IQVAE_NUM(double, "data.intensity_lo", data.intensity_lo),
      IQVAE_NUM(double, "data.intensity_hi", data.intensity_hi),
      IQVAE_NUM(sz, "data.heldout", heldout),
      IQVAE_NUM(sz, "iqvae.codebook_size", iqvae.codebook_size),
      IQVAE_NUM(sz, "iqvae.embed_dim", iqvae.embed_dim),
      IQVAE_NUM(sz, "iqvae.hidden", iqvae.hidden),
      IQVAE_NUM(sz, "iqvae.patch", iqvae.patch),
      IQVAE_NUM(double, "iqvae.beta_commit", iqvae.beta_commit),
      IQVAE_NUM(double, "iqvae.lambda_reg", iqvae.weights.reg),
      IQVAE_NUM(double, "iqvae.lambda_recon", iqvae.weights.recon),
      IQVAE_NUM(double, "iqvae.lambda_quan", iqvae.weights.quan),
      IQVAE_NUM(double, "iqvae.lambda_perc", iqvae.weights.perc),
      IQVAE_NUM(double, "iqvae.lambda_dis", iqvae.weights.dis),
      IQVAE_NUM(sz, "iqvae.projections", iqvae.projections),
      IQVAE_NUM(sz, "iqvae.epochs", iqvae_train.epochs),
      IQVAE_NUM(sz, "iqvae.batch", iqvae_train.batch),
      IQVAE_NUM(double, "iqvae.lr", iqvae_train.lr),
      IQVAE_NUM(double, "iqvae.weight_decay", iqvae_train.weight_decay),
      IQVAE_NUM(double, "iqvae.clip", iqvae_train.clip),
      IQVAE_BOOL("iqvae.init_codebook_from_data", iqvae_train.init_codebook_from_data),
      IQVAE_NUM(sz, "ar.width", ar.width),
      IQVAE_NUM(sz, "ar.heads", ar.heads),
      IQVAE_NUM(sz, "ar.blocks", ar.blocks),
      IQVAE_NUM(sz, "ar.mlp_hidden", ar.mlp_hidden),
      IQVAE_NUM(double, "ar.init_std", ar.init_std),
      IQVAE_NUM(sz, "ar.steps", ar_train.steps),
      IQVAE_NUM(sz, "ar.batch", ar_train.batch),
      IQVAE_NUM(double, "ar.lr", ar_train.lr),
      IQVAE_NUM(double, "ar.weight_decay", ar_train.weight_decay),
      IQVAE_NUM(double, "ar.clip", ar_train.clip),
      IQVAE_BOOL("gumbel.enabled", ar_train.gumbel.enabled),
      IQVAE_NUM(double, "gumbel.tau_start", ar_train.gumbel.tau_start),
      IQVAE_NUM(double, "gumbel.tau_end", ar_train.gumbel.tau_end),
      IQVAE_NUM(double, "gumbel.threshold", ar_train.gumbel.threshold),
      IQVAE_NUM(sz, "gumbel.every", ar_train.gumbel.every),
      IQVAE_NUM(double, "gumbel.mix_max", ar_train.gumbel.mix_max),
      IQVAE_NUM(double, "gumbel.ramp_fraction", ar_train.gumbel.ramp_fraction),
      IQVAE_NUM(sz, "sample.k", eval.k),
      IQVAE_NUM(double, "sample.temperature", eval.temperature),
      IQVAE_NUM(sz, "eval.projections", eval.projections),
      IQVAE_NUM(u64, "eval.projection_seed", eval.projection_seed),
      IQVAE_NUM(sz, "eval.diversity_conditions", eval.diversity_conditions),
      IQVAE_NUM(sz, "eval.diversity_samples", eval.diversity_samples),
      IQVAE_NUM(sz, "eval.latent_batch", eval.latent_batch),
  };
  return fields;
}

#undef IQVAE_NUM
#undef IQVAE_BOOL

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline void RunConfig::validate() const {
  auto need = [](bool ok, const char* key, const char* rule) {
    if (!ok) throw ConfigError(std::string("config key '") + key + "': " + rule);
  };
  need(data.n_samples >= 1, "data.n_samples", "must be at least 1");
  need(data.min_shapes >= 0, "data.min_shapes", "must be non-negative");
  need(data.max_shapes >= data.min_shapes, "data.max_shapes", "must be at least data.min_shapes");
  need(data.intensity_lo >= 0 && data.intensity_lo <= data.intensity_hi, "data.intensity_lo",
       "must lie in [0, data.intensity_hi]");
  need(data.intensity_hi <= 1, "data.intensity_hi", "must be at most 1");
  need(iqvae.weights.reg >= 0, "iqvae.lambda_reg", "must be non-negative");
  need(iqvae.weights.recon >= 0, "iqvae.lambda_recon", "must be non-negative");
  need(iqvae.weights.quan >= 0, "iqvae.lambda_quan", "must be non-negative");
  need(iqvae.weights.perc == 0, "iqvae.lambda_perc", "perceptual loss is not available; must be 0");
  need(iqvae.weights.dis == 0, "iqvae.lambda_dis", "adversarial loss is not available; must be 0");
  const auto& gs = ar_train.gumbel;
  need(gs.tau_start > 0, "gumbel.tau_start", "must be positive");
  need(gs.tau_end > 0, "gumbel.tau_end", "must be positive");
  need(gs.threshold >= 0 && gs.threshold <= 1, "gumbel.threshold", "must lie in [0, 1]");
  need(gs.every >= 1, "gumbel.every", "must be at least 1");
  need(gs.mix_max >= 0 && gs.mix_max <= 1, "gumbel.mix_max", "must lie in [0, 1]");
  need(gs.ramp_fraction > 0 && gs.ramp_fraction <= 1, "gumbel.ramp_fraction", "must lie in (0, 1]");
  if (heldout < 1) throw ConfigError("config key 'data.heldout': must be at least 1");
  if (iqvae.codebook_size != ar.image_vocab || iqvae.codebook_size != ar.cond_vocab) {
    throw ConfigError("config key 'iqvae.codebook_size': transformer vocabularies must match the codebook size");
  }
  if (iqvae.patch == 0 || kSide % iqvae.patch != 0) {
    throw ConfigError("config key 'iqvae.patch': 16 is not divisible by " + std::to_string(iqvae.patch));
  }
  const std::size_t tokens = (kSide / iqvae.patch) * (kSide / iqvae.patch);
  if (ar.seq_len != tokens || ar.cond_len != tokens) {
    throw ConfigError("config key 'iqvae.patch': transformer sequence lengths must equal the token count");
  }
  if (iqvae_train.epochs < 1 || iqvae_train.batch < 1) throw ConfigError("config key 'iqvae.epochs': must be positive");
  if (ar_train.batch < 1) throw ConfigError("config key 'ar.batch': must be at least 1");
  if (!(iqvae_train.lr > 0)) throw ConfigError("config key 'iqvae.lr': must be positive");
  if (!(ar_train.lr > 0)) throw ConfigError("config key 'ar.lr': must be positive");
  if (eval.k < 1 || eval.k > ar.image_vocab) throw ConfigError("config key 'sample.k': must lie in [1, codebook_size]");
  if (!(eval.temperature > 0)) throw ConfigError("config key 'sample.temperature': must be positive");
  try {
    ar.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config key 'ar.heads': ") + e.what());
  }
}

// Keeps derived fields (vocabularies, sequence lengths, training seeds) in step
// with the primary ones.
inline void resolve(RunConfig& c) {
  c.ar.image_vocab = c.ar.cond_vocab = c.iqvae.codebook_size;
  const std::size_t side = c.iqvae.patch ? kSide / c.iqvae.patch : 0;
  c.ar.seq_len = c.ar.cond_len = side * side;
  c.iqvae_train.seed = sample_seed(c.seed, 1);
  c.ar_train.seed = sample_seed(c.seed, 2);
}

inline std::string to_text(const RunConfig& c) {
  std::ostringstream os;
  os << "# iqvae run configuration\n";
  std::string section;
  for (const auto& f : detail::config_fields()) {
    const auto dot = f.key.find('.');
    const std::string s = dot == std::string::npos ? "" : f.key.substr(0, dot);
    if (s != section) {
      os << "\n";
      section = s;
    }
    os << f.key << " = " << f.get(c) << "\n";
  }
  return os.str();
}

// Applies `key = value` lines on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}, const std::string& origin = "config") {
  std::map<std::string, const detail::ConfigField*> index;
  for (const auto& f : detail::config_fields()) index[f.key] = &f;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
    }
    const auto key = detail::trim(t.substr(0, eq));
    const auto value = detail::trim(t.substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
    it->second->set(base, value);
  }
  resolve(base);
  base.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()), {}, path.string());
}

inline RunConfig default_config() {
  RunConfig c;
  resolve(c);
  return c;
}

}  // namespace iqvae
