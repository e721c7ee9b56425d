#pragma once
// Integrated-quantization autoencoder.
//
// Two patch encoders map an image and its condition map to grids of
// d-dimensional features, one token per FxF patch. Each domain snaps its
// features to its own K-entry codebook. The image decoder sees the quantized
// image features concatenated with the (continuous) encoded condition
// features; a second decoder reconstructs the condition from its quantized
// features. Training minimizes
//
//   w_reg * SGW(Zc, Zx) + w_recon * (MSE_image + MSE_condition) + w_quan * (commit_x + commit_c)
//
// where SGW is the sliced Gromov-Wasserstein distance between the two sets of
// pre-quantization features.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iqvae/layers.hpp"
#include "iqvae/optim.hpp"
#include "iqvae/ot.hpp"
#include "iqvae/synth_data.hpp"

namespace iqvae {

struct LossWeights {
  double reg = 1.0;
  double recon = 1.0;
  double quan = 1.0;
  double perc = 0.0;  // perceptual term is not implemented; must stay 0
  double dis = 0.0;   // adversarial term is not implemented; must stay 0

  void validate() const {
    if (reg < 0 || recon < 0 || quan < 0) throw Error("LossWeights: weights must be nonnegative");
    if (perc != 0 || dis != 0) throw Error("LossWeights: perceptual and discriminator weights must be 0");
  }
};

struct IqVaeConfig {
  std::size_t codebook_size = 32;  // K
  std::size_t embed_dim = 16;      // d
  std::size_t hidden = 64;
  std::size_t patch = 4;  // F
  double beta_commit = 0.25;
  LossWeights weights;
  std::size_t projections = 64;  // directions per training step
};

struct Codebook {
  TensorF embeddings;  // K x d

  std::size_t size() const { return embeddings.dim(0); }
  std::size_t dim() const { return embeddings.dim(1); }

  // Row-normalized copy, K x d.
  std::vector<float> normalized() const {
    const std::size_t k = size(), d = dim();
    std::vector<float> out(k * d);
    for (std::size_t r = 0; r < k; ++r) {
      double norm = 0;
      for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(embeddings.at(r, j)) * embeddings.at(r, j);
      norm = std::sqrt(norm);
      if (norm == 0) throw NumericError("Codebook: entry " + std::to_string(r) + " has zero norm");
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(embeddings.at(r, j) / norm);
    }
    return out;
  }
};

struct QuantizeResult {
  std::vector<int> indices;
  TensorF quantized;         // codebook rows; gradient reaches the codebook
  TensorF straight_through;  // same values; gradient passes to the features as identity
  TensorF commit_loss;       // scalar
};

// Rows of an n x d feature tensor snapped to their nearest codebook entry
// (lowest index on ties).
inline std::vector<int> nearest_codes(std::span<const float> z, std::size_t n, const Codebook& cb) {
  const std::size_t k = cb.size(), d = cb.dim();
  std::vector<int> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z[i * d + j]) - cb.embeddings.at(c, j);
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = static_cast<int>(c);
      }
    }
    idx[i] = arg;
  }
  return idx;
}

// Forward value q, backward identity onto z.
inline TensorF straight_through(GraphF& g, const TensorF& z, const TensorF& q) {
  if (z.shape() != q.shape()) throw ShapeError("straight_through: " + shape_str(z.shape()) + " vs " + shape_str(q.shape()));
  TensorF out = q.detach();
  return g.record("straight_through", {z}, out, [z, out] {
    auto gz = z.mutable_grad();
    auto go = out.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gz[i] += go[i];
  });
}

inline QuantizeResult quantize(GraphF& g, const TensorF& z, const Codebook& cb, double beta_commit = 0.25) {
  if (z.rank() != 2 || z.dim(1) != cb.dim()) {
    throw ShapeError("quantize: features " + shape_str(z.shape()) + " against codebook " + shape_str(cb.embeddings.shape()));
  }
  QuantizeResult r;
  r.indices = nearest_codes(z.data(), z.dim(0), cb);
  r.quantized = g.embedding_gather(cb.embeddings, r.indices);
  r.straight_through = straight_through(g, z, r.quantized);
  r.commit_loss = g.add(g.mse_loss(z.detach(), r.quantized),
                        g.scale(g.mse_loss(z, r.quantized.detach()), static_cast<float>(beta_commit)));
  return r;
}

inline TensorF dequantize(std::span<const int> indices, const Codebook& cb) {
  GraphF g(false);
  for (int i : indices)
    if (i < 0 || static_cast<std::size_t>(i) >= cb.size()) {
      throw ShapeError("dequantize: token " + std::to_string(i) + " outside codebook of size " + std::to_string(cb.size()));
    }
  return g.embedding_gather(cb.embeddings, indices);
}

// One row per FxF patch (row-major patch order, row-major pixels inside).
inline TensorF patchify(std::span<const float> pixels, std::size_t h, std::size_t w, std::size_t f) {
  if (pixels.size() != h * w) throw ShapeError("patchify: " + std::to_string(pixels.size()) + " pixels for a " +
                                              std::to_string(h) + "x" + std::to_string(w) + " grid");
  if (f == 0 || h % f != 0 || w % f != 0) {
    throw ShapeError("patchify: a " + std::to_string(h) + "x" + std::to_string(w) + " grid is not divisible into " +
                     std::to_string(f) + "x" + std::to_string(f) + " patches");
  }
  const std::size_t ph = h / f, pw = w / f;
  std::vector<float> out(h * w);
  for (std::size_t pr = 0; pr < ph; ++pr)
    for (std::size_t pc = 0; pc < pw; ++pc)
      for (std::size_t r = 0; r < f; ++r)
        for (std::size_t c = 0; c < f; ++c)
          out[((pr * pw + pc) * f + r) * f + c] = pixels[(pr * f + r) * w + pc * f + c];
  return TensorF({ph * pw, f * f}, std::move(out));
}

inline std::vector<float> unpatchify(std::span<const float> patches, std::size_t h, std::size_t w, std::size_t f) {
  const std::size_t pw = w / f;
  std::vector<float> out(h * w);
  for (std::size_t p = 0; p < (h / f) * pw; ++p)
    for (std::size_t r = 0; r < f; ++r)
      for (std::size_t c = 0; c < f; ++c) out[((p / pw) * f + r) * w + (p % pw) * f + c] = patches[(p * f + r) * f + c];
  return out;
}

// Stacks the patch rows of several 16x16 grids.
inline TensorF patchify_batch(const std::vector<const Grid*>& grids, std::size_t f) {
  std::vector<float> out;
  Shape shape{0, f * f};
  for (const Grid* grid : grids) {
    auto p = patchify(*grid, kSide, kSide, f);
    out.insert(out.end(), p.data().begin(), p.data().end());
    shape[0] += p.dim(0);
  }
  return TensorF(std::move(shape), std::move(out));
}

class IqVae {
 public:
  IqVae(const IqVaeConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.weights.validate();
    if (cfg_.codebook_size < 2) throw Error("IqVae: codebook needs at least 2 entries");
    const std::size_t px = cfg_.patch * cfg_.patch, d = cfg_.embed_dim, hid = cfg_.hidden;
    enc_x = Mlp(px, hid, d, rng);
    enc_c = Mlp(px, hid, d, rng);
    dec_x = Mlp(2 * d, hid, px, rng);
    dec_c = Mlp(d, hid, px, rng);
    codebook_x.embeddings = TensorF::randn({cfg_.codebook_size, d}, rng, 1.0, true);
    codebook_c.embeddings = TensorF::randn({cfg_.codebook_size, d}, rng, 1.0, true);
  }

  const IqVaeConfig& config() const { return cfg_; }
  std::size_t tokens_per_grid() const { return (kSide / cfg_.patch) * (kSide / cfg_.patch); }

  NamedTensors parameters() const {
    NamedTensors out;
    enc_x.collect(out, "iqvae.enc_x");
    enc_c.collect(out, "iqvae.enc_c");
    dec_x.collect(out, "iqvae.dec_x");
    dec_c.collect(out, "iqvae.dec_c");
    out.emplace("iqvae.codebook_x", codebook_x.embeddings);
    out.emplace("iqvae.codebook_c", codebook_c.embeddings);
    return out;
  }

  Mlp enc_x, enc_c, dec_x, dec_c;
  Codebook codebook_x, codebook_c;

 private:
  IqVaeConfig cfg_;
};

struct Encoded {
  TensorF zx;  // N x d image features
  TensorF zc;  // N x d condition features
};

inline Encoded encode(GraphF& g, const IqVae& m, const TensorF& image_patches, const TensorF& cond_patches) {
  return {m.enc_x(g, image_patches), m.enc_c(g, cond_patches)};
}

// Image patches in [0, 1] from aligned quantized image and condition features.
inline TensorF decode(GraphF& g, const IqVae& m, const TensorF& zq_image, const TensorF& zq_cond) {
  if (zq_image.rank() != 2 || zq_cond.rank() != 2 || zq_image.dim(0) != zq_cond.dim(0)) {
    throw ShapeError("decode: image features " + shape_str(zq_image.shape()) + " not aligned with condition features " +
                     shape_str(zq_cond.shape()));
  }
  return g.sigmoid(m.dec_x(g, g.concat({zq_image, zq_cond}, 1)));
}

inline TensorF decode_condition(GraphF& g, const IqVae& m, const TensorF& zq_cond) {
  return g.sigmoid(m.dec_c(g, zq_cond));
}

inline TensorF variational_regularizer(GraphF& g, const TensorF& zx, const TensorF& zc, const ProjectionSet<float>& proj) {
  return sliced_gw(g, zc, zx, proj);
}

struct LossComponents {
  double total = 0, reg = 0, recon = 0, quan = 0;
};

struct LossResult {
  TensorF total;
  LossComponents parts;
  Encoded z;
  QuantizeResult qx, qc;
  TensorF image_out;  // decoded image patches
};

inline LossResult iqvae_loss(GraphF& g, const IqVae& m, const TensorF& image_patches, const TensorF& cond_patches,
                             const ProjectionSet<float>& proj) {
  const auto& cfg = m.config();
  const auto& w = cfg.weights;
  w.validate();
  LossResult r;
  r.z = encode(g, m, image_patches, cond_patches);
  r.qx = quantize(g, r.z.zx, m.codebook_x, cfg.beta_commit);
  r.qc = quantize(g, r.z.zc, m.codebook_c, cfg.beta_commit);
  r.image_out = decode(g, m, r.qx.straight_through, r.z.zc);
  const auto cond_out = decode_condition(g, m, r.qc.straight_through);
  const auto reg = variational_regularizer(g, r.z.zx, r.z.zc, proj);
  const auto recon = g.add(g.mse_loss(r.image_out, image_patches), g.mse_loss(cond_out, cond_patches));
  const auto quan = g.add(r.qx.commit_loss, r.qc.commit_loss);
  r.total = g.add(g.add(g.scale(reg, static_cast<float>(w.reg)), g.scale(recon, static_cast<float>(w.recon))),
                  g.scale(quan, static_cast<float>(w.quan)));
  r.parts = {r.total.item(), reg.item(), recon.item(), quan.item()};
  return r;
}

struct TokenPair {
  std::vector<int> cond;
  std::vector<int> image;
};

inline TokenPair tokenize(const IqVae& m, const PairedSample& s) {
  GraphF g(false);
  const auto f = m.config().patch;
  const auto z = encode(g, m, patchify(s.image, kSide, kSide, f), patchify(s.condition, kSide, kSide, f));
  return {nearest_codes(z.zc.data(), z.zc.dim(0), m.codebook_c), nearest_codes(z.zx.data(), z.zx.dim(0), m.codebook_x)};
}

inline std::vector<TokenPair> tokenize_all(const IqVae& m, std::span<const PairedSample> samples) {
  std::vector<TokenPair> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(tokenize(m, s));
  return out;
}

inline TensorF encode_condition(GraphF& g, const IqVae& m, const Grid& condition) {
  return m.enc_c(g, patchify(condition, kSide, kSide, m.config().patch));
}

// Decoded 16x16 image for a sequence of image tokens under a condition map.
inline Grid decode_tokens(const IqVae& m, std::span<const int> image_tokens, const Grid& condition) {
  GraphF g(false);
  const auto patches = decode(g, m, dequantize(image_tokens, m.codebook_x), encode_condition(g, m, condition));
  const auto px = unpatchify(patches.data(), kSide, kSide, m.config().patch);
  Grid out{};
  std::copy(px.begin(), px.end(), out.begin());
  return out;
}

inline Grid reconstruct(const IqVae& m, const PairedSample& s) {
  return decode_tokens(m, tokenize(m, s).image, s.condition);
}

inline double reconstruction_mse(const IqVae& m, std::span<const PairedSample> samples) {
  double s = 0;
  for (const auto& x : samples) {
    const auto r = reconstruct(m, x);
    for (std::size_t i = 0; i < kPixels; ++i) s += (r[i] - x.image[i]) * static_cast<double>(r[i] - x.image[i]);
  }
  return s / static_cast<double>(samples.size() * kPixels);
}

// Fraction of entries used at least once, taking the smaller of the two books.
inline double codebook_usage(const IqVae& m, std::span<const TokenPair> tokens) {
  std::set<int> ux, uc;
  for (const auto& t : tokens) {
    ux.insert(t.image.begin(), t.image.end());
    uc.insert(t.cond.begin(), t.cond.end());
  }
  const double k = static_cast<double>(m.config().codebook_size);
  return std::min(static_cast<double>(ux.size()), static_cast<double>(uc.size())) / k;
}

// Sliced GW between the pre-quantization image and condition features of a
// sample set, with a fixed evaluation direction set.
inline double latent_sliced_gw(const IqVae& m, std::span<const PairedSample> samples, const ProjectionSet<float>& proj) {
  std::vector<const Grid*> imgs, conds;
  for (const auto& s : samples) {
    imgs.push_back(&s.image);
    conds.push_back(&s.condition);
  }
  GraphF g(false);
  const auto z = encode(g, m, patchify_batch(imgs, m.config().patch), patchify_batch(conds, m.config().patch));
  return sliced_gw(PointSet<float>::from_tensor(z.zc, Domain::condition), PointSet<float>::from_tensor(z.zx, Domain::image),
                   proj);
}

struct IqVaeTrainConfig {
  std::size_t epochs = 12;
  std::size_t batch = 32;
  double lr = 2e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double clip = 1.0;
  bool init_codebook_from_data = true;
  std::uint64_t seed = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_total = 0, l_reg = 0, l_recon = 0, l_quan = 0, codebook_usage = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"l_total", l_total}, {"l_reg", l_reg}, {"l_recon", l_recon}, {"l_quan", l_quan},
            {"codebook_usage", codebook_usage}};
  }
};

namespace detail {

// Seeds each codebook with distinct feature rows drawn from a batch.
inline void init_codebook(Codebook& cb, const TensorF& z, Rng& rng) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  for (std::size_t k = 0; k < cb.size(); ++k) {
    const std::size_t src = order[k % n];
    for (std::size_t j = 0; j < d; ++j)
      cb.embeddings.at(k, j) = z.at(src, j) + static_cast<float>(0.01 * rng.normal());
  }
}

}  // namespace detail

// Trains in place. `on_epoch` receives each epoch's metrics as they complete.
inline std::vector<EpochMetrics> train_iqvae(IqVae& m, std::span<const PairedSample> data, const IqVaeTrainConfig& tc,
                                             const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  if (data.empty()) throw Error("train_iqvae: empty dataset");
  Rng rng(tc.seed);
  const auto params = param_list(m.parameters());
  AdamW opt(params, {.lr = tc.lr, .beta1 = tc.beta1, .beta2 = tc.beta2, .weight_decay = tc.weight_decay});
  const std::size_t f = m.config().patch;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  auto batch_tensors = [&](std::size_t begin, std::size_t end) {
    std::vector<const Grid*> imgs, conds;
    for (std::size_t i = begin; i < end; ++i) {
      imgs.push_back(&data[order[i]].image);
      conds.push_back(&data[order[i]].condition);
    }
    return std::pair{patchify_batch(imgs, f), patchify_batch(conds, f)};
  };

  if (tc.init_codebook_from_data) {
    const auto [xi, ci] = batch_tensors(0, std::min(data.size(), std::max(tc.batch, m.config().codebook_size)));
    GraphF g(false);
    const auto z = encode(g, m, xi, ci);
    detail::init_codebook(m.codebook_x, z.zx, rng);
    detail::init_codebook(m.codebook_c, z.zc, rng);
  }

  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch) {
      const auto [xi, ci] = batch_tensors(b, std::min(order.size(), b + tc.batch));
      const auto proj = sample_directions<float>(m.config().embed_dim, m.config().projections, rng.next());
      GraphF g;
      LossResult lr;
      try {
        lr = iqvae_loss(g, m, xi, ci, proj);
      } catch (const NumericError& e) {
        throw NumericError("train_iqvae: non-finite value in epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      if (!std::isfinite(lr.parts.total)) {
        throw NumericError("train_iqvae: loss became non-finite in epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      g.backward(lr.total);
      if (tc.clip > 0) clip_grad_norm(params, tc.clip);
      opt.step();
      em.l_total += lr.parts.total;
      em.l_reg += lr.parts.reg;
      em.l_recon += lr.parts.recon;
      em.l_quan += lr.parts.quan;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    em.l_total /= nb;
    em.l_reg /= nb;
    em.l_recon /= nb;
    em.l_quan /= nb;
    em.codebook_usage = codebook_usage(m, tokenize_all(m, data));
    history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return history;
}

}  // namespace iqvae
