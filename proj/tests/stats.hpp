#pragma once
// Chi-square goodness of fit for sampler tests.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace teststats {

// Regularized upper incomplete gamma Q(a, x): series below a + 1, continued
// fraction above.
inline double gamma_q(double a, double x) {
  if (x <= 0) return 1.0;
  const double lg = std::lgamma(a);
  if (x < a + 1) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 10000; ++n) {
      ap += 1;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
  }
  double b = x + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

// p-value of Pearson's statistic for observed counts against probabilities.
// Categories with zero probability must have zero counts.
inline double chi_square_p(const std::vector<long>& counts, const std::vector<double>& probs) {
  long total = 0;
  for (long c : counts) total += c;
  double stat = 0;
  int df = -1;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (probs[i] == 0) {
      if (counts[i] != 0) return 0.0;
      continue;
    }
    const double e = probs[i] * static_cast<double>(total);
    stat += (counts[i] - e) * (counts[i] - e) / e;
    ++df;
  }
  if (df < 1) throw std::invalid_argument("chi_square_p: need at least two categories");
  return gamma_q(df / 2.0, stat / 2.0);
}

}  // namespace teststats
