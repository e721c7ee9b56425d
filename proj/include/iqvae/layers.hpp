#pragma once
// Small parameterized building blocks shared by the autoencoder and the
// transformer.

#include <cmath>
#include <string>
#include <vector>

#include "iqvae/checkpoint.hpp"
#include "iqvae/tensor.hpp"

namespace iqvae {

// y + 1 b, expressed with a rank-1 matmul so that no broadcasting op is needed.
inline TensorF add_bias(GraphF& g, const TensorF& y, const TensorF& bias) {
  const auto ones = TensorF::full({y.dim(0), 1}, 1.0f);
  return g.add(y, g.matmul(ones, bias));
}

struct Linear {
  TensorF weight;  // in x out
  TensorF bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev)
      : weight(TensorF::randn({in, out}, rng, stddev, true)), bias(TensorF::zeros({1, out}, true)) {}

  TensorF operator()(GraphF& g, const TensorF& x) const { return add_bias(g, g.matmul(x, weight), bias); }

  void zero() {
    std::fill(weight.data().begin(), weight.data().end(), 0.0f);
    std::fill(bias.data().begin(), bias.data().end(), 0.0f);
  }

  void collect(NamedTensors& out, const std::string& prefix) const {
    out.emplace(prefix + ".weight", weight);
    out.emplace(prefix + ".bias", bias);
  }
};

// Position-wise network: in -> hidden -> hidden -> out with gelu between.
struct Mlp {
  Linear l1, l2, l3;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : l1(in, hidden, rng, 1.0 / std::sqrt(static_cast<double>(in))),
        l2(hidden, hidden, rng, 1.0 / std::sqrt(static_cast<double>(hidden))),
        l3(hidden, out, rng, 1.0 / std::sqrt(static_cast<double>(hidden))) {}

  TensorF operator()(GraphF& g, const TensorF& x) const { return l3(g, g.gelu(l2(g, g.gelu(l1(g, x))))); }

  void collect(NamedTensors& out, const std::string& prefix) const {
    l1.collect(out, prefix + ".l1");
    l2.collect(out, prefix + ".l2");
    l3.collect(out, prefix + ".l3");
  }
};

inline std::vector<TensorF> param_list(const NamedTensors& named) {
  std::vector<TensorF> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

// Rescales gradients so their global L2 norm is at most max_norm.
inline double clip_grad_norm(const std::vector<TensorF>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (float v : p.grad()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const auto& p : params)
      if (p.has_grad())
        for (auto& v : p.mutable_grad()) v *= s;
  }
  return norm;
}

}  // namespace iqvae
