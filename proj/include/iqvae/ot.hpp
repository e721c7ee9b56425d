#pragma once
// Gromov-Wasserstein machinery on small point clouds.
//
// Costs follow the squared-difference-of-distances objective
//
//   sum_{i,j,k,l} | M(c_i, c_k) - M(x_j, x_l) |^2  G_ij G_kl
//
// with Euclidean M. The exact minimum over couplings is only available here by
// enumerating permutation couplings (n <= 6), which is exact whenever a
// permutation optimum exists and an upper bound otherwise. The sliced
// estimator averages closed-form 1D costs over random unit directions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "iqvae/rng.hpp"
#include "iqvae/tensor.hpp"

namespace iqvae {

enum class Domain : std::uint8_t { condition, image, other };

template <class T>
struct PointSet {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<T> points;  // n x d, row-major
  Domain domain = Domain::other;

  PointSet() = default;
  PointSet(std::size_t n_, std::size_t d_, std::vector<T> pts, Domain dom = Domain::other)
      : n(n_), d(d_), points(std::move(pts)), domain(dom) {
    validate();
  }

  static PointSet from_tensor(const Tensor<T>& t, Domain dom = Domain::other) {
    if (t.rank() != 2) throw ShapeError("PointSet: expected an n x d tensor, got " + shape_str(t.shape()));
    return PointSet(t.dim(0), t.dim(1), t.values(), dom);
  }

  void validate() const {
    if (n < 1 || d < 1) throw ShapeError("PointSet: need n >= 1 and d >= 1");
    if (points.size() != n * d) throw ShapeError("PointSet: " + std::to_string(points.size()) + " values for " +
                                                 std::to_string(n) + " x " + std::to_string(d));
    for (T v : points)
      if (!std::isfinite(v)) throw NumericError("PointSet: non-finite coordinate");
  }

  std::span<const T> row(std::size_t i) const { return std::span<const T>(points).subspan(i * d, d); }
};

struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t k) const { return values[i * n + k]; }
};

struct Coupling {
  std::size_t n = 0, m = 0;
  std::vector<double> gamma;  // n x m
  std::vector<double> alpha, beta;

  double operator()(std::size_t i, std::size_t j) const { return gamma[i * m + j]; }

  static Coupling uniform(std::size_t n, std::size_t m) {
    Coupling c;
    c.n = n;
    c.m = m;
    c.gamma.assign(n * m, 1.0 / static_cast<double>(n * m));
    c.alpha.assign(n, 1.0 / static_cast<double>(n));
    c.beta.assign(m, 1.0 / static_cast<double>(m));
    return c;
  }

  // Maps point i to perm[i] with mass 1/n.
  static Coupling permutation(std::span<const std::size_t> perm) {
    const std::size_t n = perm.size();
    Coupling c;
    c.n = c.m = n;
    c.gamma.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) c.gamma[i * n + perm[i]] = 1.0 / static_cast<double>(n);
    c.alpha.assign(n, 1.0 / static_cast<double>(n));
    c.beta.assign(n, 1.0 / static_cast<double>(n));
    return c;
  }

  void validate(double tol = 1e-6) const {
    if (gamma.size() != n * m || alpha.size() != n || beta.size() != m) throw ShapeError("Coupling: inconsistent sizes");
    const double sa = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    const double sb = std::accumulate(beta.begin(), beta.end(), 0.0);
    if (std::abs(sa - 1.0) > tol || std::abs(sb - 1.0) > tol) throw Error("Coupling: marginal weights must sum to 1");
    for (double g : gamma)
      if (g < 0) throw Error("Coupling: negative transport mass");
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += gamma[i * m + j];
      if (std::abs(s - alpha[i]) > tol) throw Error("Coupling: row " + std::to_string(i) + " violates its marginal");
    }
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += gamma[i * m + j];
      if (std::abs(s - beta[j]) > tol) throw Error("Coupling: column " + std::to_string(j) + " violates its marginal");
    }
  }
};

template <class T>
struct ProjectionSet {
  std::size_t count = 0;  // L
  std::size_t d = 0;
  std::vector<T> directions;  // L x d, unit rows
  std::uint64_t seed = 0;

  std::span<const T> direction(std::size_t m) const { return std::span<const T>(directions).subspan(m * d, d); }
};

// L directions, each a normalized isotropic Gaussian draw.
template <class T = float>
ProjectionSet<T> sample_directions(std::size_t d, std::size_t count, std::uint64_t seed) {
  if (d < 1 || count < 1) throw ShapeError("sample_directions: need d >= 1 and L >= 1");
  Rng rng(seed);
  ProjectionSet<T> p;
  p.count = count;
  p.d = d;
  p.seed = seed;
  p.directions.resize(count * d);
  std::vector<double> v(d);
  for (std::size_t m = 0; m < count; ++m) {
    double norm = 0;
    do {
      norm = 0;
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (std::size_t k = 0; k < d; ++k) p.directions[m * d + k] = static_cast<T>(v[k] / norm);
  }
  return p;
}

template <class T>
ProjectionSet<T> explicit_directions(std::size_t d, std::vector<T> dirs) {
  ProjectionSet<T> p;
  p.d = d;
  p.count = dirs.size() / d;
  p.directions = std::move(dirs);
  return p;
}

template <class T>
DistanceMatrix pairwise_dist(const PointSet<T>& ps) {
  DistanceMatrix m;
  m.n = ps.n;
  m.values.assign(ps.n * ps.n, 0.0);
  for (std::size_t i = 0; i < ps.n; ++i)
    for (std::size_t k = i + 1; k < ps.n; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < ps.d; ++j) {
        const double diff = static_cast<double>(ps.points[i * ps.d + j]) - static_cast<double>(ps.points[k * ps.d + j]);
        s += diff * diff;
      }
      m.values[i * ps.n + k] = m.values[k * ps.n + i] = std::sqrt(s);
    }
  return m;
}

// Full four-index objective for an arbitrary coupling.
inline double gw_objective(const DistanceMatrix& mc, const DistanceMatrix& mx, const Coupling& g) {
  if (g.n != mc.n || g.m != mx.n) {
    throw ShapeError("gw_objective: coupling " + std::to_string(g.n) + "x" + std::to_string(g.m) +
                     " does not match distance matrices " + std::to_string(mc.n) + " and " + std::to_string(mx.n));
  }
  g.validate();
  double cost = 0;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.m; ++j) {
      const double gij = g(i, j);
      if (gij == 0) continue;
      for (std::size_t k = 0; k < g.n; ++k)
        for (std::size_t l = 0; l < g.m; ++l) {
          const double diff = mc(i, k) - mx(j, l);
          cost += diff * diff * gij * g(k, l);
        }
    }
  return cost;
}

struct GwResult {
  double cost = 0;
  Coupling coupling;
  std::vector<std::size_t> permutation;
};

inline constexpr std::size_t kBruteForceMaxPoints = 6;

// Minimum of the objective over the n! permutation couplings.
template <class T>
GwResult gw_bruteforce(const PointSet<T>& c, const PointSet<T>& x) {
  if (c.n != x.n) throw ShapeError("gw_bruteforce: point counts differ (" + std::to_string(c.n) + " vs " + std::to_string(x.n) + ")");
  if (c.n > kBruteForceMaxPoints) {
    throw Error("gw_bruteforce: n = " + std::to_string(c.n) + " exceeds the enumeration limit of " +
                std::to_string(kBruteForceMaxPoints));
  }
  const auto mc = pairwise_dist(c);
  const auto mx = pairwise_dist(x);
  const std::size_t n = c.n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  GwResult best;
  best.cost = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double diff = mc(i, k) - mx(perm[i], perm[k]);
        s += diff * diff;
      }
    s /= static_cast<double>(n * n);
    if (s < best.cost) {
      best.cost = s;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.coupling = Coupling::permutation(best.permutation);
  return best;
}

struct Projection {
  std::vector<double> values;       // ascending
  std::vector<std::size_t> order;   // values[r] is the projection of point order[r]
};

template <class T>
Projection project(const PointSet<T>& ps, std::span<const T> dir) {
  if (dir.size() != ps.d) throw ShapeError("project: direction of dimension " + std::to_string(dir.size()) +
                                           " for points of dimension " + std::to_string(ps.d));
  std::vector<double> raw(ps.n);
  for (std::size_t i = 0; i < ps.n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < ps.d; ++k) s += static_cast<double>(ps.points[i * ps.d + k]) * static_cast<double>(dir[k]);
    raw[i] = s;
  }
  Projection p;
  p.order.resize(ps.n);
  std::iota(p.order.begin(), p.order.end(), 0);
  std::stable_sort(p.order.begin(), p.order.end(), [&](std::size_t a, std::size_t b) { return raw[a] < raw[b]; });
  p.values.resize(ps.n);
  for (std::size_t r = 0; r < ps.n; ++r) p.values[r] = raw[p.order[r]];
  return p;
}

enum class Matching : std::uint8_t { ascending, descending };

struct Gw1dResult {
  double cost = 0;
  Matching matching = Matching::ascending;
  // d cost / d a[r] and d cost / d b[r] for the chosen matching.
  std::vector<double> grad_a, grad_b;
};

namespace detail {

// Permutation-coupling cost when every pairwise difference keeps its sign:
// (1/n^2) sum_{i,k} (d_i - d_k)^2 = (2/n) sum_i (d_i - mean d)^2.
inline double centered_cost(std::span<const double> d, std::vector<double>* grad) {
  const double n = static_cast<double>(d.size());
  double mean = 0;
  for (double v : d) mean += v;
  mean /= n;
  double s = 0;
  for (double v : d) s += (v - mean) * (v - mean);
  if (grad) {
    grad->resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) (*grad)[i] = 4.0 / n * (d[i] - mean);
  }
  return 2.0 / n * s;
}

}  // namespace detail

// 1D GW between two ascending samples of equal size: the better of the
// ascending-ascending and ascending-descending matchings. Ties pick ascending.
inline Gw1dResult gw_1d_detail(std::span<const double> a, std::span<const double> b, bool with_grad = false) {
  if (a.size() != b.size()) {
    throw ShapeError("gw_1d: lengths differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw ShapeError("gw_1d: empty samples");
  const std::size_t n = a.size();
  std::vector<double> up(n), down(n), gup, gdown;
  for (std::size_t r = 0; r < n; ++r) {
    up[r] = a[r] - b[r];
    // Reflecting b keeps its pairwise distances and makes it ascending again.
    down[r] = a[r] + b[n - 1 - r];
  }
  const double cu = detail::centered_cost(up, with_grad ? &gup : nullptr);
  const double cd = detail::centered_cost(down, with_grad ? &gdown : nullptr);
  Gw1dResult res;
  res.matching = cd < cu ? Matching::descending : Matching::ascending;
  res.cost = std::min(cu, cd);
  if (with_grad) {
    res.grad_a.resize(n);
    res.grad_b.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      if (res.matching == Matching::ascending) {
        res.grad_a[r] = gup[r];
        res.grad_b[r] = -gup[r];
      } else {
        res.grad_a[r] = gdown[r];
        res.grad_b[n - 1 - r] = gdown[r];
      }
    }
  }
  return res;
}

inline double gw_1d(std::span<const double> a, std::span<const double> b) { return gw_1d_detail(a, b).cost; }

namespace detail {

// Shared body of the value-only and differentiable sliced GW. Gradients are
// accumulated into grad_c / grad_x (n x d) when non-null; the sort order is
// held fixed, which is exact away from projection ties.
template <class T>
double sliced_gw_core(std::span<const T> c, std::span<const T> x, std::size_t n, std::size_t d,
                      const ProjectionSet<T>& proj, double* grad_c, double* grad_x) {
  if (proj.d != d) {
    throw ShapeError("sliced_gw: directions of dimension " + std::to_string(proj.d) + " for points of dimension " +
                     std::to_string(d));
  }
  const bool with_grad = grad_c || grad_x;
  const double inv_l = 1.0 / static_cast<double>(proj.count);
  std::vector<double> pc(n), px(n), a(n), b(n);
  std::vector<std::size_t> oc(n), ox(n);
  double total = 0;
  for (std::size_t m = 0; m < proj.count; ++m) {
    const auto dir = proj.direction(m);
    for (std::size_t i = 0; i < n; ++i) {
      double sc = 0, sx = 0;
      for (std::size_t k = 0; k < d; ++k) {
        sc += static_cast<double>(c[i * d + k]) * static_cast<double>(dir[k]);
        sx += static_cast<double>(x[i * d + k]) * static_cast<double>(dir[k]);
      }
      pc[i] = sc;
      px[i] = sx;
    }
    std::iota(oc.begin(), oc.end(), 0);
    std::iota(ox.begin(), ox.end(), 0);
    std::stable_sort(oc.begin(), oc.end(), [&](std::size_t p, std::size_t q) { return pc[p] < pc[q]; });
    std::stable_sort(ox.begin(), ox.end(), [&](std::size_t p, std::size_t q) { return px[p] < px[q]; });
    for (std::size_t r = 0; r < n; ++r) {
      a[r] = pc[oc[r]];
      b[r] = px[ox[r]];
    }
    const auto res = gw_1d_detail(a, b, with_grad);
    total += res.cost;
    if (!with_grad) continue;
    for (std::size_t r = 0; r < n; ++r) {
      const double ga = res.grad_a[r] * inv_l, gb = res.grad_b[r] * inv_l;
      for (std::size_t k = 0; k < d; ++k) {
        if (grad_c) grad_c[oc[r] * d + k] += ga * static_cast<double>(dir[k]);
        if (grad_x) grad_x[ox[r] * d + k] += gb * static_cast<double>(dir[k]);
      }
    }
  }
  return total * inv_l;
}

}  // namespace detail

template <class T>
double sliced_gw(const PointSet<T>& c, const PointSet<T>& x, const ProjectionSet<T>& proj) {
  if (c.n != x.n) {
    throw ShapeError("sliced_gw: point counts differ (" + std::to_string(c.n) + " vs " + std::to_string(x.n) + ")");
  }
  if (c.d != x.d) {
    throw ShapeError("sliced_gw: dimensions differ (" + std::to_string(c.d) + " vs " + std::to_string(x.d) + ")");
  }
  return detail::sliced_gw_core<T>(c.points, x.points, c.n, c.d, proj, nullptr, nullptr);
}

// Differentiable sliced GW between the rows of two n x d tensors.
template <class T>
Tensor<T> sliced_gw(Graph<T>& g, const Tensor<T>& c, const Tensor<T>& x, const ProjectionSet<T>& proj) {
  if (c.rank() != 2 || x.rank() != 2 || c.shape() != x.shape()) {
    throw ShapeError("sliced_gw: expected equal n x d inputs, got " + shape_str(c.shape()) + " and " + shape_str(x.shape()));
  }
  const std::size_t n = c.dim(0), d = c.dim(1);
  const bool need = g.recording() && (c.requires_grad() || x.requires_grad());
  std::vector<double> gc(need ? n * d : 0, 0.0), gx(need ? n * d : 0, 0.0);
  const double v = detail::sliced_gw_core<T>(c.data(), x.data(), n, d, proj, need ? gc.data() : nullptr,
                                             need ? gx.data() : nullptr);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(v));
  return g.record("sliced_gw", {c, x}, out, [c, x, out, gc = std::move(gc), gx = std::move(gx)]() mutable {
    const double go = out.grad()[0];
    if (c.requires_grad()) {
      auto gr = c.mutable_grad();
      for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += static_cast<T>(go * gc[i]);
    }
    if (x.requires_grad()) {
      auto gr = x.mutable_grad();
      for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += static_cast<T>(go * gx[i]);
    }
  });
}

// Mean over directions of the mean squared gap between sorted projections.
template <class T>
double sliced_wasserstein(const PointSet<T>& a, const PointSet<T>& b, const ProjectionSet<T>& proj) {
  if (a.n != b.n) {
    throw ShapeError("sliced_wasserstein: point counts differ (" + std::to_string(a.n) + " vs " + std::to_string(b.n) + ")");
  }
  if (a.d != b.d || proj.d != a.d) throw ShapeError("sliced_wasserstein: dimension mismatch");
  double total = 0;
  for (std::size_t m = 0; m < proj.count; ++m) {
    const auto pa = project(a, proj.direction(m));
    const auto pb = project(b, proj.direction(m));
    double s = 0;
    for (std::size_t r = 0; r < a.n; ++r) s += (pa.values[r] - pb.values[r]) * (pa.values[r] - pb.values[r]);
    total += s / static_cast<double>(a.n);
  }
  return total / static_cast<double>(proj.count);
}

}  // namespace iqvae
