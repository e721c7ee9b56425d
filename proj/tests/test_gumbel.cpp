#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numbers>

#include "fixtures.hpp"
#include "iqvae/grad_check.hpp"
#include "iqvae/gumbel.hpp"
#include "stats.hpp"

using namespace iqvae;

namespace {

Codebook identity_codebook(std::size_t k) {
  std::vector<float> v(k * k, 0.0f);
  for (std::size_t i = 0; i < k; ++i) v[i * k + i] = 1.0f;
  return Codebook{TensorF({k, k}, std::move(v))};
}

std::vector<double> random_simplex(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0;
  for (auto& v : p) s += v = rng.uniform(0.05, 1.0);
  for (auto& v : p) v /= s;
  return p;
}

struct TinySetup {
  ArModel model;
  std::vector<TokenSeq> cond, gold;
  Codebook cb;

  TinySetup() : model(make()), cb(TensorF::full({32, 4}, 0.0f)) {
    Rng rng(5);
    for (int b = 0; b < 4; ++b) {
      TokenSeq c(16), x(16);
      for (auto& t : c) t = static_cast<int>(rng.below(32));
      for (auto& t : x) t = static_cast<int>(rng.below(32));
      cond.push_back(c);
      gold.push_back(x);
    }
    cb.embeddings = TensorF::randn({32, 4}, rng, 1.0);
  }

  static ArModel make() {
    Rng rng(6);
    ArConfig cfg;
    cfg.init_std = 0.2;
    return ArModel(cfg, rng);
  }
};

}  // namespace

TEST(GumbelNoise, ClampKeepsValuesFinite) {
  EXPECT_TRUE(std::isfinite(gumbel_from_uniform(0.0)));
  EXPECT_TRUE(std::isfinite(gumbel_from_uniform(1.0)));
  EXPECT_NEAR(gumbel_from_uniform(0.0), -std::log(-std::log(1e-12)), 1e-9);
  Rng rng(1);
  for (double g : gumbel_noise(rng, 10000)) ASSERT_TRUE(std::isfinite(g));
}

TEST(GumbelNoise, MomentsMatchStandardGumbel) {
  Rng rng(2);
  const auto g = gumbel_noise(rng, 100000);
  double mean = 0;
  for (double v : g) mean += v;
  mean /= static_cast<double>(g.size());
  double var = 0;
  for (double v : g) var += (v - mean) * (v - mean);
  var /= static_cast<double>(g.size() - 1);
  EXPECT_NEAR(mean, 0.5772156649, 0.02);
  EXPECT_NEAR(var, std::numbers::pi * std::numbers::pi / 6, 0.05);
}

TEST(GumbelMax, ReproducesCategorical) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_simplex(rng, 6);
    const std::vector<float> pf(p.begin(), p.end());
    std::vector<long> counts(6);
    for (int i = 0; i < 100000; ++i) ++counts[gumbel_argmax(pf, gumbel_noise(rng, 6))];
    EXPECT_GT(teststats::chi_square_p(counts, p), 0.01) << "trial " << trial;
  }
}

TEST(GumbelSoftmax, OneHotAlwaysWins) {
  Rng rng(4);
  GraphF g(false);
  for (float tau : {0.05f, 0.5f, 1.0f, 5.0f}) {
    for (int i = 0; i < 50; ++i) {
      const TensorF p({1, 5}, {0, 0, 1, 0, 0});
      const auto n = gumbel_noise(rng, 5);
      const auto s = gumbel_softmax_sample(g, p, tau, TensorF({1, 5}, std::vector<float>(n.begin(), n.end())));
      EXPECT_EQ(std::max_element(s.data().begin(), s.data().end()) - s.data().begin(), 2);
    }
  }
}

TEST(GumbelSoftmax, SumsToOneAcrossTemperatures) {
  Rng rng(5);
  GraphF g(false);
  for (float tau : {0.05f, 0.1f, 0.3f, 1.0f, 2.0f, 5.0f}) {
    const auto p = random_simplex(rng, 8);
    const auto n = gumbel_noise(rng, 8);
    const auto s = gumbel_softmax_sample(g, TensorF({1, 8}, std::vector<float>(p.begin(), p.end())), tau,
                                         TensorF({1, 8}, std::vector<float>(n.begin(), n.end())));
    double total = 0;
    for (float v : s.data()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-5) << "tau " << tau;
  }
}

TEST(GumbelSoftmax, ZeroProbabilityIsFinite) {
  GraphF g(false);
  const auto s = gumbel_softmax_sample(g, TensorF({1, 3}, {0.0f, 0.5f, 0.5f}), 0.5f, TensorF({1, 3}, {3.0f, 0.0f, 0.0f}));
  for (float v : s.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(GumbelSoftmax, ArgmaxFrequenciesAtLowTemperature) {
  Rng rng(6);
  const auto p = random_simplex(rng, 5);
  const TensorF pt({1, 5}, std::vector<float>(p.begin(), p.end()));
  std::vector<long> counts(5);
  GraphF g(false);
  for (int i = 0; i < 10000; ++i) {
    const auto n = gumbel_noise(rng, 5);
    const auto s = gumbel_softmax_sample(g, pt, 0.1f, TensorF({1, 5}, std::vector<float>(n.begin(), n.end())));
    ++counts[std::max_element(s.data().begin(), s.data().end()) - s.data().begin()];
  }
  EXPECT_GT(teststats::chi_square_p(counts, p), 0.01);
}

TEST(GumbelSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (double tau : {0.3, 1.0, 3.0}) {
    const auto p0 = random_simplex(rng, 6);
    const TensorD p({2, 3}, p0, true);
    const auto n = gumbel_noise(rng, 6);
    const TensorD noise({2, 3}, n);
    const auto w = TensorD::randn({2, 3}, rng, 1.0);
    const auto err = grad_check<double>(
        [&](GraphD& g, const std::vector<TensorD>& in) { return g.sum(g.mul(gumbel_softmax_sample(g, in[0], tau, noise), w)); },
        {p});
    EXPECT_LT(err, 1e-3) << "tau " << tau;
  }
}

TEST(Reliability, Examples) {
  const auto cb = identity_codebook(4);
  const std::vector<int> gold{2, 2};
  // one-hot on gold, one-hot on an orthogonal token
  const auto r = reliability({{0, 0, 1, 0}, {1, 0, 0, 0}}, cb, gold);
  EXPECT_FLOAT_EQ(r[0], 1.0f);
  EXPECT_FLOAT_EQ(r[1], 0.0f);
  const auto u = reliability({{0.25f, 0.25f, 0.25f, 0.25f}}, cb, std::vector<int>{1});
  EXPECT_NEAR(u[0], 0.25, 1e-7);
}

TEST(Reliability, ScaleInvariantAndClamped) {
  // Rows of different length; the opposite row gives a negative raw value.
  const Codebook cb{TensorF({3, 2}, {3, 0, 0, 0.5f, -2, 0})};
  const auto r = reliability({{0, 0, 1}, {0.5f, 0.5f, 0}, {0.2f, 0, 0.8f}}, cb, std::vector<int>{0, 0, 0});
  EXPECT_FLOAT_EQ(r[0], 0.0f);
  EXPECT_NEAR(r[1], 0.5, 1e-7);
  EXPECT_FLOAT_EQ(r[2], 0.0f);
}

TEST(Reliability, ZeroNormRowIsAnError) {
  const Codebook cb{TensorF({2, 2}, {1, 0, 0, 0})};
  EXPECT_THROW(reliability({{1, 0}}, cb, std::vector<int>{0}), NumericError);
}

TEST(Schedules, MixRampThenFlat) {
  GumbelConfig cfg;
  EXPECT_EQ(mix_schedule(0, 400, cfg), 0.0);
  EXPECT_DOUBLE_EQ(mix_schedule(100, 400, cfg), 0.25);
  EXPECT_DOUBLE_EQ(mix_schedule(200, 400, cfg), 0.5);
  EXPECT_DOUBLE_EQ(mix_schedule(400, 400, cfg), 0.5);
  double prev = -1;
  for (std::size_t s = 0; s <= 400; ++s) {
    const double m = mix_schedule(s, 400, cfg);
    EXPECT_GE(m, prev);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
    prev = m;
  }
}

TEST(Schedules, TemperatureAnnealsExponentially) {
  GumbelConfig cfg;
  EXPECT_DOUBLE_EQ(tau_schedule(0, 100, cfg), 1.0);
  EXPECT_NEAR(tau_schedule(100, 100, cfg), 0.1, 1e-12);
  EXPECT_NEAR(tau_schedule(50, 100, cfg), std::sqrt(0.1), 1e-12);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LT(tau_schedule(s, 100, cfg), tau_schedule(s - 1, 100, cfg));
}

TEST(Schedules, ConfigValidation) {
  GumbelConfig cfg;
  cfg.every = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.tau_end = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.threshold = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(TwoPass, ZeroMixIsTeacherForcing) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 0.0;
  cfg.mix_max = 0.0;
  Rng rng(1);
  GraphF g1(false), g2(false);
  const auto r = two_pass_step(g1, s.model, s.cond, s.gold, s.cb, cfg, 0, 100, rng);
  EXPECT_TRUE(r.gumbel_pass);
  EXPECT_EQ(r.active_positions, 0u);
  EXPECT_EQ(r.loss.item(), nll_loss(g2, s.model, s.cond, s.gold).item());
}

TEST(TwoPass, FullThresholdLeavesNothingEligible) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 1.0;
  cfg.mix_max = 1.0;
  Rng rng(2);
  GraphF g1(false), g2(false);
  const auto r = two_pass_step(g1, s.model, s.cond, s.gold, s.cb, cfg, 80, 100, rng);
  EXPECT_EQ(r.active_positions, 0u);
  EXPECT_EQ(r.loss.item(), nll_loss(g2, s.model, s.cond, s.gold).item());
}

TEST(TwoPass, OffStepsAreTeacherForcing) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 0.0;
  cfg.mix_max = 1.0;
  Rng rng(3);
  GraphF g1(false), g2(false);
  const auto r = two_pass_step(g1, s.model, s.cond, s.gold, s.cb, cfg, 81, 100, rng);
  EXPECT_FALSE(r.gumbel_pass);
  EXPECT_EQ(r.loss.item(), nll_loss(g2, s.model, s.cond, s.gold).item());
}

TEST(TwoPass, MixedInputsGoldTargets) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 0.0;
  cfg.mix_max = 1.0;
  Rng rng(4);
  GraphF g1(false);
  const auto r = two_pass_step(g1, s.model, s.cond, s.gold, s.cb, cfg, 60, 100, rng);
  // Every input position is eligible and mixed with probability 1.
  EXPECT_EQ(r.active_positions, 4u * 15u);
  ASSERT_EQ(r.inputs.size(), 4u);
  bool differs = false;
  for (std::size_t b = 0; b < 4; ++b) {
    ASSERT_EQ(r.inputs[b].size(), 15u);
    differs |= r.inputs[b] != TokenSeq(s.gold[b].begin(), s.gold[b].end() - 1);
  }
  EXPECT_TRUE(differs);
  // The scored pass equals cross-entropy of the mixed inputs against the gold targets.
  GraphF g2(false);
  const auto logits = ar_logits(g2, s.model, ArBatch{s.cond, r.inputs});
  EXPECT_EQ(r.loss.item(), g2.cross_entropy_loss(logits, flatten_targets(s.gold)).item());
}

TEST(TwoPass, GradientOnlyFromScoredPassWithSoftEmbeddingPath) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 0.0;
  cfg.mix_max = 1.0;
  Rng rng(5);
  GraphF g;
  const auto r = two_pass_step(g, s.model, s.cond, s.gold, s.cb, cfg, 60, 100, rng);
  g.backward(r.loss);
  // Every image-token row receives gradient through the relaxed samples,
  // including tokens absent from the hard inputs.
  const auto grad = s.model.tok_emb.grad();
  const std::size_t w = s.model.config().width;
  for (std::size_t tok = 0; tok < 32; ++tok) {
    double norm = 0;
    for (std::size_t j = 0; j < w; ++j) norm += std::fabs(grad[tok * w + j]);
    EXPECT_GT(norm, 0.0) << "token " << tok;
  }
}

TEST(TwoPass, SameSeedSameMixAndLoss) {
  TinySetup s;
  GumbelConfig cfg;
  cfg.threshold = 0.0;
  Rng a(9), b(9);
  GraphF g1(false), g2(false);
  const auto r1 = two_pass_step(g1, s.model, s.cond, s.gold, s.cb, cfg, 40, 100, a);
  const auto r2 = two_pass_step(g2, s.model, s.cond, s.gold, s.cb, cfg, 40, 100, b);
  EXPECT_GT(r1.active_positions, 0u);
  EXPECT_EQ(r1.inputs, r2.inputs);
  EXPECT_EQ(r1.loss.item(), r2.loss.item());
}

TEST(Training, ActivatesOnlyAfterReliabilityRises) {
  const auto& hist = fixtures::with_gumbel().history;
  std::size_t first = 0;
  bool found = false;
  for (const auto& h : hist)
    if (h.gumbel_active_positions > 0) {
      first = h.step;
      found = true;
      break;
    }
  ASSERT_TRUE(found) << "Gumbel sampling never activated";
  EXPECT_GT(first, 0u);
  EXPECT_LT(hist.front().mean_reliability, 0.9);
  EXPECT_GT(hist.back().gumbel_pass ? hist.back().mean_reliability : hist[hist.size() - 4].mean_reliability,
            hist.front().mean_reliability);
}

TEST(Training, SameSeedSameMetricStream) {
  const auto& p = fixtures::with_gumbel();
  auto run = [&] {
    Rng rng(31);
    ArModel m(ArConfig{}, rng);
    ArTrainConfig tc;
    tc.steps = 24;
    tc.batch = 8;
    tc.gumbel.threshold = 0.0;
    std::string out;
    train_ar(m, p.train_tokens, p.vae.codebook_x, tc, [&](const ArStepMetrics& s) { out += s.to_json().dump() + "\n"; });
    return out;
  };
  const auto a = run();
  EXPECT_NE(a.find("\"gumbel_active_positions\":"), std::string::npos);
  EXPECT_EQ(a, run());
}

TEST(Training, OverheadOfEveryFourthStep) {
  // Both trainers advance in lockstep so machine drift hits them equally.
  const auto& p = fixtures::with_gumbel();
  Rng r1(41), r2(41);
  ArModel base(ArConfig{}, r1), gum(ArConfig{}, r2);
  ArTrainConfig on, off;
  on.steps = off.steps = 200;
  off.gumbel.enabled = false;
  ArTrainer tb(base, p.train_tokens, p.vae.codebook_x, off), tg(gum, p.train_tokens, p.vae.codebook_x, on);
  double t_base = 0, t_gum = 0;
  while (!tb.done()) {
    t_base += tb.step().seconds;
    t_gum += tg.step().seconds;
  }
  EXPECT_LE(t_gum / t_base, 1.15) << "gumbel " << t_gum / 200 << " s/step, baseline " << t_base / 200 << " s/step";
}
