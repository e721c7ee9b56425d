#pragma once
// Two-pass scheduled sampling with Gumbel noise.
//
// Every `every`-th step runs the transformer once on the gold sequence without
// recording, scores each position's prediction by how close its expected
// codebook embedding lies to the gold embedding, and replaces a random subset
// of the reliable input positions with Gumbel-max samples. The second pass
// sees the mixed inputs, is scored against the gold targets, and is the only
// pass that receives gradients. The other steps are plain teacher forcing.

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "iqvae/autoregressor.hpp"
#include "iqvae/iq_vae.hpp"
#include "iqvae/optim.hpp"

namespace iqvae {

struct GumbelConfig {
  bool enabled = true;
  double tau_start = 1.0;
  double tau_end = 0.1;
  double threshold = 0.9;
  std::size_t every = 4;
  double mix_max = 0.5;
  double ramp_fraction = 0.5;  // share of training spent ramping the mix probability

  void validate() const {
    if (!(tau_start > 0) || !(tau_end > 0)) throw Error("GumbelConfig: temperatures must be positive");
    if (threshold < 0 || threshold > 1) throw Error("GumbelConfig: threshold must lie in [0, 1]");
    if (every < 1) throw Error("GumbelConfig: every must be at least 1");
    if (mix_max < 0 || mix_max > 1) throw Error("GumbelConfig: mix_max must lie in [0, 1]");
    if (!(ramp_fraction > 0) || ramp_fraction > 1) throw Error("GumbelConfig: ramp_fraction must lie in (0, 1]");
  }
};

inline constexpr double kGumbelEps = 1e-12;

// -log(-log u) with u kept inside (eps, 1 - eps) so the result is finite.
inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, kGumbelEps, 1.0 - kGumbelEps);
  return -std::log(-std::log(u));
}

inline double gumbel_draw(Rng& rng) { return gumbel_from_uniform(rng.uniform()); }

inline std::vector<double> gumbel_noise(Rng& rng, std::size_t count) {
  std::vector<double> out(count);
  for (auto& v : out) v = gumbel_draw(rng);
  return out;
}

// softmax((log(p + eps) + g) / tau) row-wise; p and g are [N, K].
template <class T>
Tensor<T> gumbel_softmax_sample(Graph<T>& g, const Tensor<T>& p, T tau, const Tensor<T>& noise) {
  if (!(tau > 0)) throw Error("gumbel_softmax_sample: tau must be positive");
  if (p.shape() != noise.shape()) {
    throw ShapeError("gumbel_softmax_sample: probabilities " + shape_str(p.shape()) + " vs noise " + shape_str(noise.shape()));
  }
  const auto logits = g.add(g.log(g.add_scalar(p, T(kGumbelEps))), noise);
  return g.softmax(g.scale(logits, T(1) / tau), p.rank() - 1);
}

// Hard Gumbel-max token: argmax(log(p + eps) + g), lowest index on ties.
inline int gumbel_argmax(std::span<const float> p, std::span<const double> noise) {
  int best = 0;
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double v = std::log(static_cast<double>(p[j]) + kGumbelEps) + noise[j];
    if (v > top) {
      top = v;
      best = static_cast<int>(j);
    }
  }
  return best;
}

// R_i = sum_j p_ij <u_j, u_gold_i> over unit-normalized codebook rows, clamped to [0, 1].
inline std::vector<float> reliability(const std::vector<CategoricalDist>& dists, const Codebook& cb,
                                      std::span<const int> gold) {
  if (dists.size() != gold.size()) throw ShapeError("reliability: one gold token per distribution required");
  const std::size_t k = cb.size(), d = cb.dim();
  const auto u = cb.normalized();
  std::vector<float> out(dists.size());
  for (std::size_t i = 0; i < dists.size(); ++i) {
    if (dists[i].size() != k) throw ShapeError("reliability: distribution size differs from codebook size");
    const auto gi = static_cast<std::size_t>(gold[i]);
    if (gold[i] < 0 || gi >= k) throw ShapeError("reliability: gold token " + std::to_string(gold[i]) + " out of range");
    double r = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (dists[i][j] == 0) continue;
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(u[j * d + c]) * u[gi * d + c];
      r += dists[i][j] * dot;
    }
    out[i] = static_cast<float>(std::clamp(r, 0.0, 1.0));
  }
  return out;
}

// Linear ramp 0 -> mix_max over the first ramp_fraction of training, then flat.
inline double mix_schedule(std::size_t step, std::size_t total_steps, const GumbelConfig& cfg) {
  if (total_steps == 0) return cfg.mix_max;
  const double ramp = cfg.ramp_fraction * static_cast<double>(total_steps);
  return cfg.mix_max * std::min(1.0, static_cast<double>(step) / ramp);
}

// Exponential decay tau_start -> tau_end across training.
inline double tau_schedule(std::size_t step, std::size_t total_steps, const GumbelConfig& cfg) {
  if (total_steps == 0) return cfg.tau_end;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, f);
}

struct StepResult {
  TensorF loss;
  bool gumbel_pass = false;
  std::size_t active_positions = 0;  // inputs replaced by model samples
  double mean_reliability = 0;       // over all scored positions of pass 1
  std::vector<TokenSeq> inputs;      // image inputs fed to the scored pass
};

inline StepResult two_pass_step(GraphF& g, const ArModel& m, const std::vector<TokenSeq>& cond,
                                const std::vector<TokenSeq>& gold, const Codebook& cb, const GumbelConfig& cfg,
                                std::size_t step, std::size_t total_steps, Rng& rng) {
  cfg.validate();
  StepResult r;
  const auto targets = flatten_targets(gold);
  ArBatch batch = teacher_batch(cond, gold);
  std::vector<SoftInput> soft;
  if (cfg.enabled && step % cfg.every == 0) {
    r.gumbel_pass = true;
    GraphF frozen(false);
    const auto dists = softmax_rows(ar_logits(frozen, m, batch));
    const auto rel = reliability(dists, cb, targets);
    r.mean_reliability = std::accumulate(rel.begin(), rel.end(), 0.0) / static_cast<double>(rel.size());
    const double mix = mix_schedule(step, total_steps, cfg);
    const auto tau = static_cast<float>(tau_schedule(step, total_steps, cfg));
    const std::size_t n = m.config().seq_len, k = m.config().image_vocab;
    for (std::size_t b = 0; b < gold.size(); ++b) {
      // x_i is an input only for i < n - 1.
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t row = b * n + i;
        if (rel[row] < cfg.threshold || !rng.bernoulli(mix)) continue;
        const auto noise = gumbel_noise(rng, k);
        const auto tok = gumbel_argmax(dists[row], noise);
        TensorF p({1, k}, dists[row]);
        TensorF gn({1, k}, std::vector<float>(noise.begin(), noise.end()));
        const auto relaxed = gumbel_softmax_sample(frozen, p, tau, gn);
        batch.image[b][i] = tok;
        soft.push_back({b, i, relaxed.values()});
        ++r.active_positions;
      }
    }
  }
  r.loss = g.cross_entropy_loss(ar_logits(g, m, batch, soft), targets);
  r.inputs = std::move(batch.image);
  return r;
}

struct ArTrainConfig {
  std::size_t steps = 400;
  std::size_t batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double clip = 1.0;
  std::uint64_t seed = 1;
  GumbelConfig gumbel;
};

struct ArStepMetrics {
  std::size_t step = 0;
  double nll = 0;
  bool gumbel_pass = false;
  std::size_t gumbel_active_positions = 0;
  double mean_reliability = 0;
  double seconds = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"nll", nll}, {"gumbel_pass", gumbel_pass},
                     {"gumbel_active_positions", gumbel_active_positions}};
    j["mean_reliability"] = gumbel_pass ? nlohmann::json(mean_reliability) : nlohmann::json(nullptr);
    return j;
  }
};

// Steps a model through training on (condition, image) token pairs. Steps
// are numbered from 0. The model, data and codebook must outlive the trainer.
class ArTrainer {
 public:
  ArTrainer(ArModel& m, std::span<const TokenPair> data, const Codebook& image_cb, const ArTrainConfig& tc)
      : m_(m), data_(data), cb_(image_cb), tc_(tc), rng_(tc.seed), mix_rng_(rng_.fork(0x6d6978)),
        params_(param_list(m.parameters())), opt_(params_, {.lr = tc.lr, .weight_decay = tc.weight_decay}),
        order_(data.size()), cursor_(data.size()) {
    if (data.empty()) throw Error("train_ar: empty token dataset");
    if (tc.batch < 1) throw Error("train_ar: batch must be at least 1");
    tc_.gumbel.validate();
    std::iota(order_.begin(), order_.end(), 0);
  }

  bool done() const { return step_ >= tc_.steps; }

  ArStepMetrics step() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<TokenSeq> cond, gold;
    for (std::size_t b = 0; b < std::min(tc_.batch, data_.size()); ++b) {
      if (cursor_ == order_.size()) {
        for (std::size_t i = order_.size() - 1; i > 0; --i) std::swap(order_[i], order_[rng_.below(i + 1)]);
        cursor_ = 0;
      }
      cond.push_back(data_[order_[cursor_]].cond);
      gold.push_back(data_[order_[cursor_]].image);
      ++cursor_;
    }
    GraphF g;
    const auto r = two_pass_step(g, m_, cond, gold, cb_, tc_.gumbel, step_, tc_.steps, mix_rng_);
    const double loss = r.loss.item();
    if (!std::isfinite(loss)) throw NumericError("train_ar: loss became non-finite at step " + std::to_string(step_));
    opt_.zero_grad();
    g.backward(r.loss);
    if (tc_.clip > 0) clip_grad_norm(params_, tc_.clip);
    opt_.step();
    return {step_++, loss, r.gumbel_pass, r.active_positions, r.mean_reliability,
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
  }

 private:
  ArModel& m_;
  std::span<const TokenPair> data_;
  const Codebook& cb_;
  ArTrainConfig tc_;
  Rng rng_;
  Rng mix_rng_;
  std::vector<TensorF> params_;
  AdamW opt_;
  std::vector<std::size_t> order_;
  std::size_t cursor_;
  std::size_t step_ = 0;
};

inline std::vector<ArStepMetrics> train_ar(ArModel& m, std::span<const TokenPair> data, const Codebook& image_cb,
                                           const ArTrainConfig& tc,
                                           const std::function<void(const ArStepMetrics&)>& on_step = {}) {
  ArTrainer trainer(m, data, image_cb, tc);
  std::vector<ArStepMetrics> history;
  history.reserve(tc.steps);
  while (!trainer.done()) {
    history.push_back(trainer.step());
    if (on_step) on_step(history.back());
  }
  return history;
}

}  // namespace iqvae
