#pragma once
// A small trained autoencoder + transformer shared by the tests of one binary.

#include "iqvae/gumbel.hpp"

namespace fixtures {

struct TrainedPipeline {
  std::vector<iqvae::PairedSample> train, held;
  iqvae::IqVae vae;
  std::vector<iqvae::TokenPair> train_tokens, held_tokens;
  iqvae::ArModel ar;
  std::vector<iqvae::ArStepMetrics> history;

  explicit TrainedPipeline(bool gumbel) : vae(make_vae()), ar(make_ar()) {
    using namespace iqvae;
    train = generate_dataset({.n_samples = 512, .seed = 1});
    held = generate_dataset({.n_samples = 64, .seed = 2024});
    IqVaeTrainConfig tc;
    tc.seed = 3;
    train_iqvae(vae, train, tc);
    train_tokens = tokenize_all(vae, train);
    held_tokens = tokenize_all(vae, held);
    ArTrainConfig ac;
    ac.seed = 4;
    ac.gumbel.enabled = gumbel;
    history = train_ar(ar, train_tokens, vae.codebook_x, ac);
  }

  static iqvae::IqVae make_vae() {
    iqvae::Rng rng(21);
    return iqvae::IqVae(iqvae::IqVaeConfig{}, rng);
  }
  static iqvae::ArModel make_ar() {
    iqvae::Rng rng(22);
    return iqvae::ArModel(iqvae::ArConfig{}, rng);
  }
};

inline const TrainedPipeline& teacher_forced() {
  static const TrainedPipeline p(false);
  return p;
}

inline const TrainedPipeline& with_gumbel() {
  static const TrainedPipeline p(true);
  return p;
}

}  // namespace fixtures
