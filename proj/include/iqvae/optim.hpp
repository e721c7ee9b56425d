#pragma once
// AdamW with decoupled weight decay.

#include <cmath>
#include <vector>

#include "iqvae/tensor.hpp"

namespace iqvae {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(std::vector<TensorF> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    validate(cfg_.lr);
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  void set_lr(double lr) {
    validate(lr);
    cfg_.lr = lr;
  }

  // Applies one update from the accumulated gradients. Parameters without a
  // gradient buffer are treated as having zero gradient.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto data = p.data();
      auto grad = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const float g = grad.empty() ? 0.0f : grad[i];
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double update = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * data[i];
        data[i] = static_cast<float>(data[i] - cfg_.lr * update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  static void validate(double lr) {
    if (!(lr > 0)) throw Error("AdamW: learning rate must be positive, got " + std::to_string(lr));
  }

  std::vector<TensorF> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace iqvae
