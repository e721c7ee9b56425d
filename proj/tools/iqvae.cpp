// iqvae command-line driver. Run `iqvae <command> --help` for flags.
//
// Config resolution for every command: --config FILE if given, otherwise
// <out>/config.txt if present, otherwise built-in defaults. --set KEY=VALUE
// and the dedicated flags are applied on top, and the resolved config is
// written back to <out>/config.txt.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iqvae/pipeline.hpp"

namespace {

using namespace iqvae;
namespace fs = std::filesystem;

struct Common {
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  auto* o = cmd->add_option("--out", c.out, "Run directory");
  if (needs_out) o->required();
  cmd->add_option("--config", c.config, "Config file (key = value lines)");
  cmd->add_option("--set", c.sets, "Override one config key, KEY=VALUE (repeatable)");
  cmd->add_flag("--quiet", c.quiet, "No progress output on stderr");
}

// Applies overrides as config text so they get the same key checking.
RunConfig resolve_config(const Common& c, std::vector<std::string> extra = {}) {
  RunConfig cfg = default_config();
  if (!c.config.empty()) {
    cfg = load_config(c.config);
  } else if (!c.out.empty() && fs::exists(RunDir{c.out}.config())) {
    cfg = load_config(RunDir{c.out}.config());
  }
  if (c.seed) extra.insert(extra.begin(), "seed = " + std::to_string(*c.seed));
  extra.insert(extra.end(), c.sets.begin(), c.sets.end());
  std::string text;
  for (const auto& s : extra) text += s + "\n";
  return parse_config(text, cfg, "command line");
}

void progress(const Common& c, const std::string& line) {
  if (!c.quiet) std::cerr << line << "\n";
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

nlohmann::json error_json(const std::string& kind, const std::string& message) {
  return {{"error", kind}, {"message", message}};
}

PointSet<float> field_points(const std::vector<PairedSample>& ds, const std::string& field, std::size_t n,
                             const std::string& path) {
  if (n == 0) n = ds.size();
  if (n > ds.size()) {
    throw Error("ot: " + path + " holds " + std::to_string(ds.size()) + " samples, " + std::to_string(n) + " requested");
  }
  std::vector<float> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = field == "image" ? ds[i].image : ds[i].condition;
    pts.insert(pts.end(), g.begin(), g.end());
  }
  return PointSet<float>(n, kPixels, std::move(pts));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Paired-domain generation: IQ-VAE tokenizer plus autoregressive transformer"};
  app.require_subcommand(1);

  Common gen;
  std::optional<std::size_t> gen_n;
  std::string gen_mode;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate train.iqds and heldout.iqds");
  add_common(cmd_gen, gen);
  cmd_gen->add_option("--seed", gen.seed, "Dataset seed (sets data.seed)");
  cmd_gen->add_option("--n", gen_n, "Training samples (sets data.n_samples)");
  cmd_gen->add_option("--mode", gen_mode, "Condition type")->check(CLI::IsMember({"edge", "segmentation"}));

  Common tv;
  std::optional<std::size_t> tv_epochs;
  auto* cmd_tv = app.add_subcommand("train-iqvae", "Train the IQ-VAE (stage 1)");
  add_common(cmd_tv, tv);
  cmd_tv->add_option("--seed", tv.seed, "Run seed");
  cmd_tv->add_option("--epochs", tv_epochs, "Epochs (sets iqvae.epochs)");

  Common ta;
  std::optional<std::size_t> ta_steps;
  std::optional<bool> ta_gumbel;
  auto* cmd_ta = app.add_subcommand("train-ar", "Train the transformer on IQ-VAE tokens (stage 2)");
  add_common(cmd_ta, ta);
  cmd_ta->add_option("--seed", ta.seed, "Run seed");
  cmd_ta->add_option("--steps", ta_steps, "Optimizer steps (sets ar.steps)");
  cmd_ta->add_option("--gumbel", ta_gumbel, "Two-pass Gumbel sampling on or off (sets gumbel.enabled)");

  Common sm;
  std::size_t sm_index = 0, sm_count = 8;
  std::optional<std::size_t> sm_k;
  std::optional<double> sm_temp;
  std::string sm_dest;
  auto* cmd_sm = app.add_subcommand("sample", "Decode sampled images for one held-out condition");
  add_common(cmd_sm, sm);
  cmd_sm->add_option("--seed", sm.seed, "Run seed");
  cmd_sm->add_option("--index", sm_index, "Held-out sample whose condition is used")->capture_default_str();
  cmd_sm->add_option("--count", sm_count, "Images to draw")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_sm->add_option("--k", sm_k, "Top-k (sets sample.k)");
  cmd_sm->add_option("--temperature", sm_temp, "Sampling temperature (sets sample.temperature)");
  cmd_sm->add_option("--dest", sm_dest, "Output directory (default <out>/samples)");

  Common ev;
  auto* cmd_ev = app.add_subcommand("eval", "Held-out NLL, free-running NLL, reconstruction, SWD, diversity");
  add_common(cmd_ev, ev);
  cmd_ev->add_option("--seed", ev.seed, "Run seed");

  std::string ot_method = "sliced-gw", ot_a, ot_b, ot_field = "image";
  std::size_t ot_n = 0, ot_l = 512;
  std::uint64_t ot_seed = 1;
  auto* cmd_ot = app.add_subcommand("ot", "GW / sliced GW / sliced W between point sets from .iqds files");
  cmd_ot->add_option("--method", ot_method, "Estimator")
      ->check(CLI::IsMember({"gw-bruteforce", "sliced-gw", "sliced-w"}))
      ->capture_default_str();
  cmd_ot->add_option("--a", ot_a, "First dataset (.iqds)")->required();
  cmd_ot->add_option("--b", ot_b, "Second dataset (default: the first)");
  cmd_ot->add_option("--field", ot_field, "Grid used as a 256-d point")
      ->check(CLI::IsMember({"image", "condition"}))
      ->capture_default_str();
  cmd_ot->add_option("--n", ot_n, "Use the first n samples of each file (0 = all)")->capture_default_str();
  cmd_ot->add_option("--projections", ot_l, "Directions for sliced estimators")->capture_default_str();
  cmd_ot->add_option("--seed", ot_seed, "Direction seed")->capture_default_str();

  Common ab;
  std::vector<std::uint64_t> ab_seeds{1, 2, 3};
  bool ab_keep = false;
  auto* cmd_ab = app.add_subcommand("ablate", "2x2 grid {regularizer} x {Gumbel sampling} over several seeds");
  add_common(cmd_ab, ab, false);
  cmd_ab->add_option("--seeds", ab_seeds, "Run seeds")->delimiter(',')->capture_default_str();
  cmd_ab->add_flag("--keep-runs", ab_keep, "Write every cell as a run directory under --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_json("usage", e.what()).dump() << "\n";
    return 2;
  }

  try {
    if (*cmd_gen) {
      std::vector<std::string> extra;
      if (gen.seed) extra.push_back("data.seed = " + std::to_string(*gen.seed));
      if (gen_n) extra.push_back("data.n_samples = " + std::to_string(*gen_n));
      if (!gen_mode.empty()) extra.push_back("data.mode = " + gen_mode);
      Common c = gen;
      c.seed.reset();
      const auto cfg = resolve_config(c, extra);
      const RunDir d{gen.out};
      const auto ds = stage_gen_data(d, cfg);
      print_json({{"train", d.train_data().string()}, {"heldout", d.heldout_data().string()},
                  {"train_samples", ds.train.size()}, {"heldout_samples", ds.heldout.size()}});
    } else if (*cmd_tv) {
      std::vector<std::string> extra;
      if (tv_epochs) extra.push_back("iqvae.epochs = " + std::to_string(*tv_epochs));
      const auto cfg = resolve_config(tv, extra);
      const auto hist = stage_train_iqvae(RunDir{tv.out}, cfg, [&](const EpochMetrics& e) { progress(tv, e.to_json().dump()); });
      print_json(hist.back().to_json());
    } else if (*cmd_ta) {
      std::vector<std::string> extra;
      if (ta_steps) extra.push_back("ar.steps = " + std::to_string(*ta_steps));
      if (ta_gumbel) extra.push_back(std::string("gumbel.enabled = ") + (*ta_gumbel ? "true" : "false"));
      const auto cfg = resolve_config(ta, extra);
      const auto hist = stage_train_ar(RunDir{ta.out}, cfg, [&](const ArStepMetrics& s) {
        if (s.step % 50 == 0 || s.step + 1 == cfg.ar_train.steps) progress(ta, s.to_json().dump());
      });
      double tail = 0;
      const std::size_t w = std::min<std::size_t>(20, hist.size());
      for (std::size_t i = hist.size() - w; i < hist.size(); ++i) tail += hist[i].nll / static_cast<double>(w);
      print_json({{"steps", hist.size()}, {"final_nll_mean20", tail}});
    } else if (*cmd_sm) {
      std::vector<std::string> extra;
      if (sm_k) extra.push_back("sample.k = " + std::to_string(*sm_k));
      if (sm_temp) extra.push_back("sample.temperature = " + detail::fmt_double(*sm_temp));
      const auto cfg = resolve_config(sm, extra);
      const RunDir d{sm.out};
      const auto ds = load_datasets(d);
      const auto vae = load_iqvae(d, cfg);
      const auto ar = load_ar(d, cfg);
      if (sm_index >= ds.heldout.size()) {
        throw Error("sample: --index " + std::to_string(sm_index) + " out of range for " +
                    std::to_string(ds.heldout.size()) + " held-out samples");
      }
      const fs::path dest = sm_dest.empty() ? d.root / "samples" : fs::path(sm_dest);
      fs::create_directories(dest);
      Rng rng(sample_seed(sample_seed(cfg.seed, seeds::sample), sm_index));
      const auto& cond = ds.heldout[sm_index].condition;
      const auto imgs = sample_images(vae, ar, cond, sm_count, cfg.eval.k, cfg.eval.temperature, rng);
      write_file_atomic(dest / "condition.pgm", encode_pgm(cond));
      nlohmann::json files = nlohmann::json::array();
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "sample_%02zu", i);
        write_file_atomic(dest / (std::string(stem) + ".pgm"), encode_pgm(imgs[i]));
        write_file_atomic(dest / (std::string(stem) + ".f32"), encode_f32(imgs[i]));
        files.push_back(stem);
      }
      print_json({{"dest", dest.string()}, {"index", sm_index}, {"k", cfg.eval.k}, {"samples", files}});
    } else if (*cmd_ev) {
      const auto cfg = resolve_config(ev);
      print_json(stage_eval(RunDir{ev.out}, cfg).to_json());
    } else if (*cmd_ot) {
      const auto a = load_dataset(ot_a);
      const auto b = ot_b.empty() ? a : load_dataset(ot_b);
      const auto pa = field_points(a, ot_field, ot_n, ot_a);
      const auto pb = field_points(b, ot_field, ot_n, ot_b.empty() ? ot_a : ot_b);
      nlohmann::json j{{"method", ot_method}, {"field", ot_field}, {"n", pa.n}, {"d", pa.d}};
      if (ot_method == "gw-bruteforce") {
        const auto r = gw_bruteforce(pa, pb);
        j["value"] = r.cost;
        j["permutation"] = r.permutation;
      } else {
        const auto dirs = sample_directions<float>(kPixels, ot_l, ot_seed);
        j["projections"] = ot_l;
        j["value"] = ot_method == "sliced-gw" ? sliced_gw(pa, pb, dirs) : sliced_wasserstein(pa, pb, dirs);
      }
      print_json(j);
    } else if (*cmd_ab) {
      const auto cfg = resolve_config(ab);
      std::optional<fs::path> keep;
      if (ab_keep) {
        if (ab.out.empty()) throw Error("ablate: --keep-runs needs --out");
        keep = ab.out;
      }
      const auto res = run_ablation(cfg, ab_seeds, keep, [&](const std::string& s) { progress(ab, s); });
      const auto j = res.to_json();
      if (!ab.out.empty()) {
        save_config(RunDir{ab.out}, cfg);
        write_text_atomic(fs::path(ab.out) / "ablation.json", j.dump(2) + "\n");
      }
      print_json(j);
    }
  } catch (const StageError& e) {
    auto j = error_json("missing_stage", e.what());
    j["stage"] = e.stage();
    std::cerr << j.dump() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << error_json("config", e.what()).dump() << "\n";
    return 4;
  } catch (const FormatError& e) {
    std::cerr << error_json("format", e.what()).dump() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << error_json("runtime", e.what()).dump() << "\n";
    return 1;
  }
  return 0;
}
