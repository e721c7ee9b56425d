#pragma once
// Central finite-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "iqvae/tensor.hpp"

namespace iqvae {

template <class T>
using GraphFn = std::function<Tensor<T>(Graph<T>&, const std::vector<Tensor<T>>&)>;

struct GradCheckOptions {
  double step = 1e-3;
  double floor = 1e-8;  // relative error denominator is max(|a|, |b|, floor)
};

// Worst relative error between backward() gradients and central differences,
// over every element of every input. `skip(input, element)` may exclude
// elements that sit on a non-differentiable boundary (sort ties, relu kinks).
template <class T>
double grad_check(const GraphFn<T>& f, std::vector<Tensor<T>> inputs, GradCheckOptions opt = {},
                  const std::function<bool(std::size_t, std::size_t)>& skip = {}) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Graph<T> g;
    auto loss = f(g, inputs);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph<T> g(false);
    return static_cast<double>(f(g, inputs).item());
  };
  double worst = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    std::vector<T> analytic(inputs[t].size(), T(0));
    if (inputs[t].has_grad()) std::copy(inputs[t].grad().begin(), inputs[t].grad().end(), analytic.begin());
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      if (skip && skip(t, i)) continue;
      const T saved = inputs[t][i];
      inputs[t][i] = static_cast<T>(saved + opt.step);
      const double plus = eval();
      inputs[t][i] = static_cast<T>(saved - opt.step);
      const double minus = eval();
      inputs[t][i] = saved;
      const double numeric = (plus - minus) / (2 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace iqvae
