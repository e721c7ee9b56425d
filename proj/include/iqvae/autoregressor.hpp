#pragma once
// Decoder-only transformer over token sequences
//
//   [c_1 .. c_n, START, x_1 .. x_{n-1}]
//
// Condition tokens are offset past the image vocabulary so the two vocabularies
// never collide. The causal mask is plain lower-triangular over the whole
// sequence, which makes every condition token visible to every image position.
// The hidden state at START predicts x_1, the state at x_t predicts x_{t+1}.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "iqvae/layers.hpp"

namespace iqvae {

using TokenSeq = std::vector<int>;
using CategoricalDist = std::vector<float>;

struct ArConfig {
  std::size_t image_vocab = 32;  // K
  std::size_t cond_vocab = 32;
  std::size_t seq_len = 16;   // image tokens per sequence
  std::size_t cond_len = 16;  // condition tokens per sequence
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t mlp_hidden = 256;
  double init_std = 0.02;
  bool zero_head = false;  // start from the uniform predictor

  void validate() const {
    if (image_vocab < 2 || cond_vocab < 1) throw Error("ArConfig: vocabularies too small");
    if (seq_len < 1) throw Error("ArConfig: seq_len must be at least 1");
    if (heads == 0 || width % heads != 0) {
      throw Error("ArConfig: width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
    }
  }
  std::size_t max_positions() const { return cond_len + seq_len; }
};

struct ArBlock {
  TensorF ln1_g, ln1_b, ln2_g, ln2_b;
  Linear qkv, proj, fc1, fc2;
};

class ArModel {
 public:
  ArModel(const ArConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t w = cfg_.width;
    const double s = cfg_.init_std;
    tok_emb = TensorF::randn({cfg_.image_vocab + cfg_.cond_vocab + 1, w}, rng, s, true);
    pos_emb = TensorF::randn({cfg_.max_positions(), w}, rng, s, true);
    // Residual projections are scaled down with depth as in GPT-2.
    const double sr = s / std::sqrt(2.0 * static_cast<double>(cfg_.blocks));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      ArBlock blk;
      blk.ln1_g = TensorF::full({w}, 1.0f, true);
      blk.ln1_b = TensorF::zeros({w}, true);
      blk.ln2_g = TensorF::full({w}, 1.0f, true);
      blk.ln2_b = TensorF::zeros({w}, true);
      blk.qkv = Linear(w, 3 * w, rng, s);
      blk.proj = Linear(w, w, rng, sr);
      blk.fc1 = Linear(w, cfg_.mlp_hidden, rng, s);
      blk.fc2 = Linear(cfg_.mlp_hidden, w, rng, sr);
      blocks.push_back(std::move(blk));
    }
    lnf_g = TensorF::full({w}, 1.0f, true);
    lnf_b = TensorF::zeros({w}, true);
    head = Linear(w, cfg_.image_vocab, rng, s);
    if (cfg_.zero_head) head.zero();
  }

  const ArConfig& config() const { return cfg_; }
  int start_token() const { return static_cast<int>(cfg_.image_vocab + cfg_.cond_vocab); }

  NamedTensors parameters() const {
    NamedTensors out;
    out.emplace("ar.tok_emb", tok_emb);
    out.emplace("ar.pos_emb", pos_emb);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "ar.block" + std::to_string(b);
      const auto& blk = blocks[b];
      out.emplace(p + ".ln1_g", blk.ln1_g);
      out.emplace(p + ".ln1_b", blk.ln1_b);
      out.emplace(p + ".ln2_g", blk.ln2_g);
      out.emplace(p + ".ln2_b", blk.ln2_b);
      blk.qkv.collect(out, p + ".qkv");
      blk.proj.collect(out, p + ".proj");
      blk.fc1.collect(out, p + ".fc1");
      blk.fc2.collect(out, p + ".fc2");
    }
    out.emplace("ar.lnf_g", lnf_g);
    out.emplace("ar.lnf_b", lnf_b);
    head.collect(out, "ar.head");
    return out;
  }

  TensorF tok_emb, pos_emb;
  std::vector<ArBlock> blocks;
  TensorF lnf_g, lnf_b;
  Linear head;

 private:
  ArConfig cfg_;
};

// An image input position whose embedding is a hard token in the forward pass
// but whose gradient is routed through a relaxed one-hot over the image
// vocabulary (straight-through).
struct SoftInput {
  std::size_t sequence = 0;
  std::size_t position = 0;  // index into the image input tokens
  std::vector<float> relaxed;  // length K, sums to 1
};

struct ArBatch {
  std::vector<TokenSeq> cond;
  std::vector<TokenSeq> image;  // image input tokens; all sequences share one length
};

namespace detail {

inline TensorF causal_mask(std::size_t len) {
  std::vector<float> m(len * len, 0.0f);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = -1e9f;
  return TensorF({len, len}, std::move(m));
}

// Copy of `base` with the listed rows taken from `rows` instead.
inline TensorF replace_rows(GraphF& g, const TensorF& base, const std::vector<std::size_t>& at, const TensorF& rows) {
  const std::size_t w = base.dim(1);
  TensorF out = base.detach();
  for (std::size_t r = 0; r < at.size(); ++r)
    for (std::size_t j = 0; j < w; ++j) out.at(at[r], j) = rows.at(r, j);
  return g.record("replace_rows", {base, rows}, out, [base, rows, at, out, w] {
    auto go = out.grad();
    std::vector<bool> replaced(base.dim(0), false);
    for (auto a : at) replaced[a] = true;
    if (rows.requires_grad()) {
      auto gr = rows.mutable_grad();
      for (std::size_t r = 0; r < at.size(); ++r)
        for (std::size_t j = 0; j < w; ++j) gr[r * w + j] += go[at[r] * w + j];
    }
    if (base.requires_grad()) {
      auto gb = base.mutable_grad();
      for (std::size_t i = 0; i < base.dim(0); ++i)
        if (!replaced[i])
          for (std::size_t j = 0; j < w; ++j) gb[i * w + j] += go[i * w + j];
    }
  });
}

}  // namespace detail

inline void check_tokens(std::span<const int> tokens, std::size_t vocab, const char* what) {
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ShapeError(std::string(what) + ": token " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
}

// Logits for a batch, [B * P, K] with P = min(prefix + 1, n) rows per sequence.
inline TensorF ar_logits(GraphF& g, const ArModel& m, const ArBatch& batch, const std::vector<SoftInput>& soft = {}) {
  const auto& cfg = m.config();
  const std::size_t bsz = batch.cond.size();
  if (bsz == 0 || batch.image.size() != bsz) throw ShapeError("ar_logits: batch needs matching condition and image lists");
  const std::size_t prefix = batch.image[0].size();
  if (prefix > cfg.seq_len) {
    throw ShapeError("ar_logits: image prefix of " + std::to_string(prefix) + " exceeds " + std::to_string(cfg.seq_len));
  }
  const std::size_t used = std::min(prefix, cfg.seq_len - 1);
  const std::size_t outs = used + 1;
  const std::size_t len = cfg.cond_len + 1 + used;
  const std::size_t w = cfg.width, nh = cfg.heads, dh = w / nh;

  std::vector<int> ids;
  std::vector<int> pos;
  ids.reserve(bsz * len);
  for (std::size_t b = 0; b < bsz; ++b) {
    const auto& c = batch.cond[b];
    const auto& x = batch.image[b];
    if (c.size() != cfg.cond_len) {
      throw ShapeError("ar_logits: condition of length " + std::to_string(c.size()) + ", expected " +
                       std::to_string(cfg.cond_len));
    }
    if (x.size() != prefix) throw ShapeError("ar_logits: image prefixes differ in length within a batch");
    check_tokens(c, cfg.cond_vocab, "ar_logits condition");
    check_tokens(x, cfg.image_vocab, "ar_logits image");
    for (int t : c) ids.push_back(t + static_cast<int>(cfg.image_vocab));
    ids.push_back(m.start_token());
    for (std::size_t t = 0; t < used; ++t) ids.push_back(x[t]);
    for (std::size_t p = 0; p < len; ++p) pos.push_back(static_cast<int>(p));
  }

  TensorF h = g.embedding_gather(m.tok_emb, ids);
  std::vector<SoftInput> live;
  for (const auto& s : soft)
    if (s.position < used) live.push_back(s);
  if (!live.empty()) {
    std::vector<std::size_t> rows;
    std::vector<float> relaxed;
    std::vector<int> hard;
    for (const auto& s : live) {
      if (s.relaxed.size() != cfg.image_vocab) throw ShapeError("ar_logits: relaxed input has the wrong vocabulary size");
      rows.push_back(s.sequence * len + cfg.cond_len + 1 + s.position);
      relaxed.insert(relaxed.end(), s.relaxed.begin(), s.relaxed.end());
      hard.push_back(batch.image[s.sequence][s.position]);
    }
    const auto image_rows = g.slice(m.tok_emb, 0, 0, cfg.image_vocab);
    const auto soft_emb = g.matmul(TensorF({live.size(), cfg.image_vocab}, std::move(relaxed)), image_rows);
    const auto hard_emb = g.embedding_gather(m.tok_emb, hard);
    // straight-through: forward value of the hard embedding, gradient into the soft mixture
    const TensorF st = hard_emb.detach();
    const auto mixed = g.record("straight_through", {soft_emb}, st, [soft_emb, st] {
      auto gs = soft_emb.mutable_grad();
      auto go = st.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gs[i] += go[i];
    });
    h = detail::replace_rows(g, h, rows, mixed);
  }
  h = g.add(h, g.embedding_gather(m.pos_emb, pos));

  const auto mask = detail::causal_mask(len);
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (const auto& blk : m.blocks) {
    const auto qkv = blk.qkv(g, g.layer_norm(h, blk.ln1_g, blk.ln1_b));
    std::vector<TensorF> seqs;
    seqs.reserve(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      const auto rows = g.slice(qkv, 0, b * len, (b + 1) * len);
      std::vector<TensorF> heads;
      heads.reserve(nh);
      for (std::size_t hd = 0; hd < nh; ++hd) {
        const auto q = g.slice(rows, 1, hd * dh, (hd + 1) * dh);
        const auto k = g.slice(rows, 1, w + hd * dh, w + (hd + 1) * dh);
        const auto v = g.slice(rows, 1, 2 * w + hd * dh, 2 * w + (hd + 1) * dh);
        const auto att = g.softmax(g.add(g.scale(g.matmul(q, g.transpose(k)), att_scale), mask), 1);
        heads.push_back(g.matmul(att, v));
      }
      seqs.push_back(g.concat(heads, 1));
    }
    h = g.add(h, blk.proj(g, g.concat(seqs, 0)));
    h = g.add(h, blk.fc2(g, g.gelu(blk.fc1(g, g.layer_norm(h, blk.ln2_g, blk.ln2_b)))));
  }

  std::vector<int> out_rows;
  out_rows.reserve(bsz * outs);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t t = 0; t < outs; ++t) out_rows.push_back(static_cast<int>(b * len + cfg.cond_len + t));
  const auto picked = g.embedding_gather(h, out_rows);
  return m.head(g, g.layer_norm(picked, m.lnf_g, m.lnf_b));
}

inline std::vector<CategoricalDist> softmax_rows(const TensorF& logits) {
  GraphF g(false);
  const auto p = g.softmax(logits, 1);
  const std::size_t k = p.dim(1);
  std::vector<CategoricalDist> out(p.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r].assign(p.data().begin() + r * k, p.data().begin() + (r + 1) * k);
  return out;
}

// One distribution per image position 1..min(|prefix| + 1, n).
inline std::vector<CategoricalDist> ar_forward(const ArModel& m, const TokenSeq& cond, const TokenSeq& prefix) {
  GraphF g(false);
  return softmax_rows(ar_logits(g, m, ArBatch{{cond}, {prefix}}));
}

// Inputs and targets for teacher forcing on full gold sequences.
inline ArBatch teacher_batch(const std::vector<TokenSeq>& cond, const std::vector<TokenSeq>& gold) {
  ArBatch b;
  b.cond = cond;
  for (const auto& x : gold) b.image.emplace_back(x.begin(), x.end() - (x.empty() ? 0 : 1));
  return b;
}

inline std::vector<int> flatten_targets(const std::vector<TokenSeq>& gold) {
  std::vector<int> out;
  for (const auto& x : gold) out.insert(out.end(), x.begin(), x.end());
  return out;
}

// Mean teacher-forced negative log-likelihood over a batch, as a graph node.
inline TensorF nll_loss(GraphF& g, const ArModel& m, const std::vector<TokenSeq>& cond, const std::vector<TokenSeq>& gold) {
  for (const auto& x : gold)
    if (x.size() != m.config().seq_len) {
      throw ShapeError("nll: gold sequence of length " + std::to_string(x.size()) + ", expected " +
                       std::to_string(m.config().seq_len));
    }
  return g.cross_entropy_loss(ar_logits(g, m, teacher_batch(cond, gold)), flatten_targets(gold));
}

inline double nll(const ArModel& m, const TokenSeq& cond, const TokenSeq& gold) {
  GraphF g(false);
  return nll_loss(g, m, {cond}, {gold}).item();
}

// Top-k sampling. Temperature divides the log-probabilities; the k largest
// (ties to the lower index) are renormalized and sampled by inverse CDF.
inline int sample_topk(const CategoricalDist& dist, std::size_t k, double temperature, Rng& rng) {
  if (k < 1 || k > dist.size()) {
    throw Error("sample_topk: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(dist.size()) + "]");
  }
  if (!(temperature > 0)) throw Error("sample_topk: temperature must be positive");
  std::vector<double> logit(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) logit[i] = std::log(std::max<double>(dist[i], 1e-300)) / temperature;
  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logit[a] > logit[b]; });
  order.resize(k);
  const double top = logit[order[0]];
  std::vector<double> w(k);
  double z = 0;
  for (std::size_t i = 0; i < k; ++i) z += w[i] = std::exp(logit[order[i]] - top);
  const double u = rng.uniform() * z;
  double acc = 0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += w[i];
    if (u < acc) return static_cast<int>(order[i]);
  }
  return static_cast<int>(order[k - 1]);
}

inline TokenSeq generate(const ArModel& m, const TokenSeq& cond, std::size_t k, double temperature, Rng& rng) {
  TokenSeq out;
  for (std::size_t t = 0; t < m.config().seq_len; ++t) {
    const auto dists = ar_forward(m, cond, out);
    out.push_back(sample_topk(dists.back(), k, temperature, rng));
  }
  return out;
}

// Gold NLL under distributions produced while the model consumes its own
// samples: position t is scored with -log p(gold_t | C, sampled x_{<t}).
inline double free_running_nll(const ArModel& m, const TokenSeq& cond, const TokenSeq& gold, std::size_t k,
                               double temperature, Rng& rng) {
  TokenSeq prefix;
  double s = 0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    const auto d = ar_forward(m, cond, prefix).back();
    s -= std::log(std::max<double>(d[static_cast<std::size_t>(gold[t])], 1e-30));
    prefix.push_back(sample_topk(d, k, temperature, rng));
  }
  return s / static_cast<double>(gold.size());
}

}  // namespace iqvae
