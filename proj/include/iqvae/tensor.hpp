#pragma once
// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage. A Graph records
// every op whose inputs require gradients, in execution order, and backward()
// replays the tape in exact reverse order. Graphs are rebuilt for every forward
// pass and are not shared between threads.
//
// Broadcasting is limited to scalar-tensor ops (add_scalar, scale); every other
// binary op requires identical shapes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqvae/rng.hpp"

namespace iqvae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage<T>>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                       " values but " + std::to_string(data.size()) + " were given");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  const std::vector<T>& values() const { return s_->data; }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * s_->shape.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * s_->shape.back() + c]; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) const { s_->requires_grad = v; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }

  // Gradient buffer, allocated (zero-filled) on first use. Constness is
  // shallow: the handle is const, the shared storage is not.
  std::span<T> mutable_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }

  void zero_grad() const { s_->grad.clear(); }

  // Copy of the values, cut off from any graph.
  Tensor detach() const { return Tensor(shape(), s_->data, false); }

  bool same(const Tensor& o) const { return s_ == o.s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class T>
class Graph {
 public:
  struct Op {
    std::string name;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Graph() = default;
  explicit Graph(bool recording) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::size_t size() const { return ops_.size(); }
  const std::vector<Op>& ops() const { return ops_; }
  void clear() { ops_.clear(); }

  // Appends a custom op. The output requires grad and the rule runs during
  // backward only when recording is on and some input requires grad.
  Tensor<T> record(std::string name, std::vector<Tensor<T>> inputs, Tensor<T> output,
                   std::function<void()> backward) {
    check_finite(name, output);
    if (!recording_) return output;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (!any) return output;
    output.set_requires_grad(true);
    ops_.push_back(Op{std::move(name), std::move(inputs), output, std::move(backward)});
    return output;
  }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      ops_.clear();
      return;
    }
    loss.mutable_grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    ops_.clear();
  }

  // c[m x n] += A b, where A(i, p) = a[i * rs + p * cs] and b is [k x n]
  // row-major. Four output rows share each load of b. Every output row sees
  // the same sequence of operations regardless of blocking.
  static void gemm_acc(const T* a, std::size_t rs, std::size_t cs, const T* b, T* c, std::size_t m, std::size_t k,
                       std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* c0 = c + i * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[i * rs + p * cs], a1 = a[(i + 1) * rs + p * cs];
        const T a2 = a[(i + 2) * rs + p * cs], a3 = a[(i + 3) * rs + p * cs];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * rs + p * cs];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  // ---------------------------------------------------------------- linear

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm_acc(a.data().data(), k, 1, b.data().data(), out.data().data(), m, k, n);
    return record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const T* gc = out.grad().data();
      if (a.requires_grad()) {
        // ga += gc b^T, with b transposed once so rows stay contiguous
        const T* pb = b.data().data();
        std::vector<T> bt(n * k);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = pb[p * n + j];
        gemm_acc(gc, n, 1, bt.data(), a.mutable_grad().data(), m, n, k);
      }
      if (b.requires_grad()) gemm_acc(a.data().data(), 1, k, gc, b.mutable_grad().data(), k, m, n);
    });
  }

  Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return record("transpose", {a}, out, [a, out, r, c]() mutable {
      if (!a.requires_grad()) return;
      auto ga = a.mutable_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
    });
  }

  // ---------------------------------------------------------- elementwise

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    same_shape("add", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return record("add", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->mutable_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
    });
  }

  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    same_shape("sub", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return record("sub", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
      }
    });
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    same_shape("mul", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return record("mul", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * b[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * a[i];
      }
    });
  }

  Tensor<T> scale(const Tensor<T>& a, T s) {
    return unary("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
  }

  Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
  }

  Tensor<T> relu(const Tensor<T>& a) {
    return unary("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                 [](T x, T) { return x > T(0) ? T(1) : T(0); });
  }

  // tanh approximation, as in GPT-2.
  Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    return unary(
        "gelu", a,
        [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
        [](T x, T) {
          const T t = std::tanh(c * (x + k * x * x * x));
          return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
        });
  }

  Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary("sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                 [](T, T y) { return y * (T(1) - y); });
  }

  Tensor<T> log(const Tensor<T>& a) {
    return unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
  }

  Tensor<T> exp(const Tensor<T>& a) {
    return unary("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
  }

  // --------------------------------------------------------- normalization

  Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.rank()) {
      throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
    }
    const auto [outer, len, inner] = split_axis(a.shape(), axis);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T mx = a[base];
        for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, a[base + l * inner]);
        T z = 0;
        for (std::size_t l = 0; l < len; ++l) {
          const T e = std::exp(a[base + l * inner] - mx);
          out[base + l * inner] = e;
          z += e;
        }
        for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= z;
      }
    return record("softmax", {a}, out, [a, out, outer, len, inner]() mutable {
      if (!a.requires_grad()) return;
      auto ga = a.mutable_grad();
      auto go = out.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t l = 0; l < len; ++l) dot += go[base + l * inner] * out[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t i = base + l * inner;
            ga[i] += out[i] * (go[i] - dot);
          }
        }
    });
  }

  // Normalizes over the last axis, then applies per-feature gain and bias.
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t c = x.shape().back();
    if (gamma.size() != c || beta.size() != c) {
      throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                       " and beta " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.size() / c;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat(x.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* px = x.data().data() + r * c;
      T mean = 0;
      for (std::size_t j = 0; j < c; ++j) mean += px[j];
      mean /= T(c);
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) var += (px[j] - mean) * (px[j] - mean);
      var /= T(c);
      rstd[r] = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j) {
        xhat[r * c + j] = (px[j] - mean) * rstd[r];
        out[r * c + j] = xhat[r * c + j] * gamma[j] + beta[j];
      }
    }
    return record("layer_norm", {x, gamma, beta}, out,
                  [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, c]() mutable {
                    auto go = out.grad();
                    if (gamma.requires_grad() || beta.requires_grad()) {
                      std::vector<T> gg(c, T(0)), gb(c, T(0));
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < c; ++j) {
                          gg[j] += go[r * c + j] * xhat[r * c + j];
                          gb[j] += go[r * c + j];
                        }
                      if (gamma.requires_grad()) {
                        auto g = gamma.mutable_grad();
                        for (std::size_t j = 0; j < c; ++j) g[j] += gg[j];
                      }
                      if (beta.requires_grad()) {
                        auto g = beta.mutable_grad();
                        for (std::size_t j = 0; j < c; ++j) g[j] += gb[j];
                      }
                    }
                    if (!x.requires_grad()) return;
                    auto gx = x.mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      T sum_d = 0, sum_dx = 0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = go[r * c + j] * gamma[j];
                        sum_d += d;
                        sum_dx += d * xhat[r * c + j];
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = go[r * c + j] * gamma[j];
                        gx[r * c + j] += rstd[r] * (d - sum_d / T(c) - xhat[r * c + j] * sum_dx / T(c));
                      }
                    }
                  });
  }

  // ------------------------------------------------------------ structural

  Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const int> indices) {
    if (table.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t v = table.dim(0), c = table.dim(1);
    std::vector<int> idx(indices.begin(), indices.end());
    Tensor<T> out = Tensor<T>::zeros({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
        throw ShapeError("embedding_gather: index " + std::to_string(idx[i]) + " outside table of " +
                         std::to_string(v) + " rows");
      }
      std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    return record("embedding_gather", {table}, out, [table, out, idx = std::move(idx), c]() mutable {
      if (!table.requires_grad()) return;
      auto g = table.mutable_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[static_cast<std::size_t>(idx[i]) * c + j] += go[i * c + j];
    });
  }

  Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) {
      throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor<T> out(std::move(shape), a.values());
    return record("reshape", {a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      auto g = a.mutable_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    });
  }

  Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    Shape shape = ref;
    shape[axis] = 0;
    for (const auto& p : parts) {
      bool ok = p.rank() == ref.size();
      for (std::size_t d = 0; ok && d < ref.size(); ++d) ok = d == axis || p.dim(d) == ref[d];
      if (!ok) throw ShapeError("concat: " + shape_str(p.shape()) + " does not match " + shape_str(ref) + " off axis " + std::to_string(axis));
      shape[axis] += p.dim(axis);
    }
    const auto [outer, total, inner] = split_axis(shape, axis);
    Tensor<T> out = Tensor<T>::zeros(shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(axis);
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                    out.data().begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
      offset += len;
    }
    return record("concat", parts, out, [parts, out, axis, outer, total, inner]() mutable {
      auto go = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t len = p.dim(axis);
        if (p.requires_grad()) {
          auto g = p.mutable_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i) g[o * len * inner + i] += go[(o * total + offset) * inner + i];
        }
        offset += len;
      }
    });
  }

  // Elements [begin, end) along `axis`.
  Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank() || begin > end || end > a.dim(axis)) {
      throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                       std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    }
    const auto [outer, total, inner] = split_axis(a.shape(), axis);
    Shape shape = a.shape();
    shape[axis] = end - begin;
    const std::size_t len = end - begin;
    Tensor<T> out = Tensor<T>::zeros(shape);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>((o * total + begin) * inner), len * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    return record("slice", {a}, out, [a, out, outer, total, inner, begin, len]() mutable {
      if (!a.requires_grad()) return;
      auto g = a.mutable_grad();
      auto go = out.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i) g[(o * total + begin) * inner + i] += go[o * len * inner + i];
    });
  }

  // ------------------------------------------------------------ reductions

  Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    return record("sum", {a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const T go = out.grad()[0];
      for (auto& g : a.mutable_grad()) g += go;
    });
  }

  Tensor<T> mean(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    const T n = T(a.size());
    Tensor<T> out = Tensor<T>::scalar(s / n);
    return record("mean", {a}, out, [a, out, n]() mutable {
      if (!a.requires_grad()) return;
      const T go = out.grad()[0] / n;
      for (auto& g : a.mutable_grad()) g += go;
    });
  }

  // mean((a - b)^2)
  Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    same_shape("mse_loss", a, b);
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    const T n = T(a.size());
    Tensor<T> out = Tensor<T>::scalar(s / n);
    return record("mse_loss", {a, b}, out, [a, b, out, n]() mutable {
      const T go = out.grad()[0] * T(2) / n;
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (a[i] - b[i]);
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go * (a[i] - b[i]);
      }
    });
  }

  // Mean over rows of -log softmax(logits[row])[target[row]].
  Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> targets) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
      throw ShapeError("cross_entropy_loss: logits " + shape_str(logits.shape()) + " with " +
                       std::to_string(targets.size()) + " targets");
    }
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<T> probs(n * v);
    T total = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) {
        throw ShapeError("cross_entropy_loss: target " + std::to_string(tgt[r]) + " outside " + std::to_string(v) + " classes");
      }
      const T* row = logits.data().data() + r * v;
      const T mx = *std::max_element(row, row + v);
      T z = 0;
      for (std::size_t j = 0; j < v; ++j) {
        probs[r * v + j] = std::exp(row[j] - mx);
        z += probs[r * v + j];
      }
      for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
      total += std::log(z) + mx - row[tgt[r]];
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(n));
    return record("cross_entropy_loss", {logits}, out,
                  [logits, out, probs = std::move(probs), tgt = std::move(tgt), n, v]() mutable {
                    if (!logits.requires_grad()) return;
                    const T go = out.grad()[0] / T(n);
                    auto g = logits.mutable_grad();
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < v; ++j) {
                        const T onehot = static_cast<std::size_t>(tgt[r]) == j ? T(1) : T(0);
                        g[r * v + j] += go * (probs[r * v + j] - onehot);
                      }
                  });
  }

 private:
  template <class F, class D>
  Tensor<T> unary(const char* name, const Tensor<T>& a, F f, D df) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return record(name, {a}, out, [a, out, df]() mutable {
      if (!a.requires_grad()) return;
      auto g = a.mutable_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * df(a[i], out[i]);
    });
  }

  static void same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }

  static void check_finite(const std::string& op, const Tensor<T>& t) {
    for (T v : t.data()) {
      if (!std::isfinite(v)) throw NumericError(op + ": produced a non-finite value");
    }
  }

  struct AxisSplit {
    std::size_t outer, len, inner;
  };
  static AxisSplit split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    return {outer, s[axis], inner};
  }

  bool recording_ = true;
  std::vector<Op> ops_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace iqvae
