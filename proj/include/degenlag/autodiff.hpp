#pragma once

// Differentiation engine.
//
// Two layers compose:
//   * `Var` is a reverse-mode scalar recorded on a thread-local `Tape`. It is
//     used for gradients with respect to network parameters.
//   * `Jet<S>` is a forward-mode scalar carrying value, gradient and Hessian
//     with respect to at most four phase-space coordinates. It is generic over
//     its element type, so `Jet<double>` gives input derivatives and
//     `Jet<Var>` gives parameter gradients *of* input derivatives.
//
// Linear solves on `Var` matrices are a single tape operation whose backward
// pass solves with the transposed matrix; the inverse is never formed.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "degenlag/errors.hpp"
#include "degenlag/linalg.hpp"

namespace degenlag::ad {

inline constexpr std::uint32_t kNoNode = 0xFFFFFFFFu;

class CustomBackward {
 public:
  virtual ~CustomBackward() = default;
  virtual void backward(std::span<double> adjoint) const = 0;
};

class Tape {
 public:
  Tape() { reserve(1 << 16); }

  void reserve(std::size_t nodes) {
    edge_end_.reserve(nodes);
    parents_.reserve(nodes * 2);
    partials_.reserve(nodes * 2);
  }

  std::uint32_t leaf() { return close_node(); }

  void push_edge(std::uint32_t parent, double partial) {
    if (parent == kNoNode) return;
    parents_.push_back(parent);
    partials_.push_back(partial);
  }

  /// Closes the node whose edges were pushed since the previous node.
  std::uint32_t close_node() {
    edge_end_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return static_cast<std::uint32_t>(edge_end_.size() - 1);
  }

  /// Number of edges pushed for the node currently being assembled.
  [[nodiscard]] std::size_t pending_edges() const {
    const std::size_t begin = edge_end_.empty() ? 0 : edge_end_.back();
    return parents_.size() - begin;
  }

  std::uint32_t custom(std::unique_ptr<CustomBackward> op) {
    const std::uint32_t id = close_node();
    customs_.emplace_back(id, std::move(op));
    return id;
  }

  /// Reverse sweep from `output`; afterwards `adjoint(i)` holds d output / d node i.
  void backward(std::uint32_t output, double seed = 1.0) {
    adjoints_.assign(edge_end_.size(), 0.0);
    if (output == kNoNode) return;
    adjoints_[output] = seed;
    std::size_t next_custom = customs_.size();
    while (next_custom > 0 && customs_[next_custom - 1].first > output) --next_custom;
    for (std::int64_t i = output; i >= 0; --i) {
      const auto k = static_cast<std::uint32_t>(i);
      if (next_custom > 0 && customs_[next_custom - 1].first == k) {
        customs_[next_custom - 1].second->backward(adjoints_);
        --next_custom;
        continue;
      }
      const double a = adjoints_[k];
      if (a == 0.0) continue;
      const std::uint32_t begin = k == 0 ? 0 : edge_end_[k - 1];
      const std::uint32_t end = edge_end_[k];
      for (std::uint32_t e = begin; e < end; ++e) adjoints_[parents_[e]] += partials_[e] * a;
    }
  }

  [[nodiscard]] double adjoint(std::uint32_t node) const {
    return node == kNoNode ? 0.0 : adjoints_[node];
  }

  void clear() {
    edge_end_.clear();
    parents_.clear();
    partials_.clear();
    customs_.clear();
    adjoints_.clear();
  }

  [[nodiscard]] std::size_t size() const noexcept { return edge_end_.size(); }

 private:
  std::vector<std::uint32_t> edge_end_;
  std::vector<std::uint32_t> parents_;
  std::vector<double> partials_;
  std::vector<std::pair<std::uint32_t, std::unique_ptr<CustomBackward>>> customs_;
  std::vector<double> adjoints_;
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target of the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(active_tape()) { active_tape() = &tape; }
  ~TapeScope() { active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

struct Var {
  double value = 0.0;
  std::uint32_t node = kNoNode;

  Var() = default;
  Var(double v) : value(v) {}  // NOLINT(google-explicit-constructor): constants
  Var(double v, std::uint32_t n) : value(v), node(n) {}

  [[nodiscard]] bool is_constant() const noexcept { return node == kNoNode; }

  /// A fresh independent variable on the active tape.
  static Var independent(double v) { return {v, active_tape()->leaf()}; }
};

inline double value_of(double v) { return v; }
inline double value_of(const Var& v) { return v.value; }

namespace detail {

inline Var unary(const Var& a, double value, double partial) {
  if (a.is_constant()) return Var(value);
  Tape& t = *active_tape();
  t.push_edge(a.node, partial);
  return {value, t.close_node()};
}

inline Var binary(const Var& a, double pa, const Var& b, double pb, double value) {
  if (a.is_constant() && b.is_constant()) return Var(value);
  Tape& t = *active_tape();
  t.push_edge(a.node, pa);
  t.push_edge(b.node, pb);
  return {value, t.close_node()};
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(a, 1.0, b, 1.0, a.value + b.value);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(a, 1.0, b, -1.0, a.value - b.value);
}
inline Var operator-(const Var& a) { return detail::unary(a, -a.value, -1.0); }
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(a, b.value, b, a.value, a.value * b.value);
}
inline Var operator/(const Var& a, const Var& b) {
  const double inv = 1.0 / b.value;
  return detail::binary(a, inv, b, -a.value * inv * inv, a.value * inv);
}
inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var tanh(const Var& a) {
  const double t = std::tanh(a.value);
  return detail::unary(a, t, 1.0 - t * t);
}
inline Var cos(const Var& a) { return detail::unary(a, std::cos(a.value), -std::sin(a.value)); }
inline Var sin(const Var& a) { return detail::unary(a, std::sin(a.value), std::cos(a.value)); }
inline Var log(const Var& a) { return detail::unary(a, std::log(a.value), 1.0 / a.value); }
inline Var exp(const Var& a) {
  const double e = std::exp(a.value);
  return detail::unary(a, e, e);
}
inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.value);
  return detail::unary(a, s, 0.5 / s);
}

// Generic spellings so templates can call `tanh(x)` for both double and Var.
using std::cos;
using std::exp;
using std::log;
using std::sin;
using std::sqrt;
using std::tanh;

/// sum_k a_k * b_k as one tape node.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  double v = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) v += a[k].value * b[k].value;
  Tape* t = active_tape();
  if (t == nullptr) return Var(v);
  for (std::size_t k = 0; k < a.size(); ++k) {
    t->push_edge(a[k].node, b[k].value);
    t->push_edge(b[k].node, a[k].value);
  }
  if (t->pending_edges() == 0) return Var(v);
  return {v, t->close_node()};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double v = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) v += a[k] * b[k];
  return v;
}

/// sum_k p_k.first * p_k.second, recorded as one tape node for `Var`.
template <class S>
S sum_of_products(std::initializer_list<std::pair<S, S>> terms) {
  if constexpr (std::is_same_v<S, Var>) {
    double v = 0.0;
    for (const auto& [x, y] : terms) v += x.value * y.value;
    Tape* t = active_tape();
    if (t == nullptr) return Var(v);
    for (const auto& [x, y] : terms) {
      t->push_edge(x.node, y.value);
      t->push_edge(y.node, x.value);
    }
    if (t->pending_edges() == 0) return Var(v);
    return {v, t->close_node()};
  } else {
    S v(0.0);
    for (const auto& [x, y] : terms) v += x * y;
    return v;
  }
}

// ---------------------------------------------------------------------------
// Linear solve and condition number on tape matrices.

namespace detail {

class SolveBackward final : public CustomBackward {
 public:
  SolveBackward(Mat<double> lu, std::vector<int> perm, Vec<double> x,
                std::vector<std::uint32_t> a_nodes, std::vector<std::uint32_t> b_nodes,
                std::uint32_t first_output)
      : lu_(std::move(lu)),
        perm_(std::move(perm)),
        x_(std::move(x)),
        a_nodes_(std::move(a_nodes)),
        b_nodes_(std::move(b_nodes)),
        first_output_(first_output) {}

  void backward(std::span<double> adjoint) const override {
    const int n = lu_.rows();
    Vec<double> xbar(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) xbar[static_cast<std::size_t>(i)] = adjoint[first_output_ + i];
    // Adjoint identity: lambda = A^{-T} xbar, bbar = lambda, Abar = -lambda x^T.
    const Vec<double> lambda = degenlag::detail::lu_solve_transposed(lu_, perm_, xbar);
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (b_nodes_[ui] != kNoNode) adjoint[b_nodes_[ui]] += lambda[ui];
      for (int k = 0; k < n; ++k) {
        const std::uint32_t node = a_nodes_[static_cast<std::size_t>(i * n + k)];
        if (node != kNoNode) adjoint[node] -= lambda[ui] * x_[static_cast<std::size_t>(k)];
      }
    }
  }

 private:
  Mat<double> lu_;
  std::vector<int> perm_;
  Vec<double> x_;
  std::vector<std::uint32_t> a_nodes_;
  std::vector<std::uint32_t> b_nodes_;
  std::uint32_t first_output_;
};

}  // namespace detail

inline Mat<double> values(const Mat<Var>& a) {
  Mat<double> out(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) = a(i, j).value;
  return out;
}

inline Mat<double> values(const Mat<double>& a) { return a; }

inline Vec<double> values(const Vec<Var>& a) {
  Vec<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].value;
  return out;
}

inline Vec<double> values(const Vec<double>& a) { return a; }

/// Solves A x = b; the backward pass uses the transposed factorisation.
inline Vec<Var> solve(const Mat<Var>& a, const Vec<Var>& b) {
  const int n = a.rows();
  Mat<double> lu = values(a);
  std::vector<int> perm;
  degenlag::detail::lu_factor(lu, perm);
  Vec<double> x = degenlag::detail::lu_solve(lu, perm, values(b));

  std::vector<std::uint32_t> a_nodes(static_cast<std::size_t>(n * n));
  bool any = false;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      a_nodes[static_cast<std::size_t>(i * n + k)] = a(i, k).node;
      any = any || !a(i, k).is_constant();
    }
  std::vector<std::uint32_t> b_nodes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    b_nodes[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)].node;
    any = any || !b[static_cast<std::size_t>(i)].is_constant();
  }

  Vec<Var> out(static_cast<std::size_t>(n));
  if (!any) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = Var(x[static_cast<std::size_t>(i)]);
    return out;
  }
  Tape& t = *active_tape();
  const auto first_output = static_cast<std::uint32_t>(t.size() + 1);
  t.custom(std::make_unique<detail::SolveBackward>(std::move(lu), std::move(perm), x,
                                                   std::move(a_nodes), std::move(b_nodes),
                                                   first_output));
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = Var(x[static_cast<std::size_t>(i)], t.leaf());
  return out;
}

inline Vec<Var> solve_transposed(const Mat<Var>& a, const Vec<Var>& b) {
  return solve(a.transpose(), b);
}

/// log10 of the spectral condition number, differentiated through the singular vectors.
inline double log10_condition(const Mat<double>& j) { return std::log10(condition_number(j)); }

inline Var log10_condition(const Mat<Var>& j) {
  const Mat<double> jv = values(j);
  if (!all_finite(jv.data())) throw SingularMatrixError("non-finite Jacobian");
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(degenlag::detail::to_eigen(jv),
                                              Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const Eigen::Index last = s.size() - 1;
  if (s(last) == 0.0)
    throw SingularMatrixError("singular Jacobian", std::numeric_limits<double>::infinity());
  const double value = std::log10(s(0) / s(last));
  Tape* t = active_tape();
  if (t == nullptr) return Var(value);
  const auto& u = svd.matrixU();
  const auto& v = svd.matrixV();
  const double c = 1.0 / std::numbers::ln10;
  for (int a = 0; a < j.rows(); ++a)
    for (int b = 0; b < j.cols(); ++b)
      t->push_edge(j(a, b).node,
                   c * (u(a, 0) * v(b, 0) / s(0) - u(a, last) * v(b, last) / s(last)));
  if (t->pending_edges() == 0) return Var(value);
  return {value, t->close_node()};
}

// ---------------------------------------------------------------------------
// Forward-mode second-order jets.

inline constexpr int kMaxJetVars = 4;
inline constexpr int kMaxJetHess = kMaxJetVars * (kMaxJetVars + 1) / 2;

/// Packed index of the symmetric Hessian entry (a, b).
constexpr int hess_index(int a, int b) {
  return a <= b ? b * (b + 1) / 2 + a : a * (a + 1) / 2 + b;
}

template <class S>
struct Jet {
  S v{};
  std::array<S, kMaxJetVars> g{};
  std::array<S, kMaxJetHess> h{};
  int n = 0;
  bool second = true;

  Jet() = default;
  Jet(S value, int vars, bool with_second) : v(value), n(vars), second(with_second) {}

  /// Independent coordinate number `k` among `vars`.
  static Jet variable(S value, int k, int vars, bool with_second) {
    Jet j(value, vars, with_second);
    j.g[static_cast<std::size_t>(k)] = S(1.0);
    return j;
  }

  [[nodiscard]] int hess_size() const noexcept { return second ? n * (n + 1) / 2 : 0; }
};

template <class S>
Jet<S> operator+(const Jet<S>& a, const Jet<S>& b) {
  Jet<S> r(a.v + b.v, a.n, a.second);
  for (int k = 0; k < a.n; ++k) r.g[k] = a.g[k] + b.g[k];
  for (int k = 0; k < a.hess_size(); ++k) r.h[k] = a.h[k] + b.h[k];
  return r;
}

template <class S>
Jet<S> operator-(const Jet<S>& a, const Jet<S>& b) {
  Jet<S> r(a.v - b.v, a.n, a.second);
  for (int k = 0; k < a.n; ++k) r.g[k] = a.g[k] - b.g[k];
  for (int k = 0; k < a.hess_size(); ++k) r.h[k] = a.h[k] - b.h[k];
  return r;
}

template <class S>
Jet<S> operator+(const Jet<S>& a, const S& c) {
  Jet<S> r = a;
  r.v = a.v + c;
  return r;
}

template <class S>
Jet<S> operator*(const S& c, const Jet<S>& a) {
  Jet<S> r(c * a.v, a.n, a.second);
  for (int k = 0; k < a.n; ++k) r.g[k] = c * a.g[k];
  for (int k = 0; k < a.hess_size(); ++k) r.h[k] = c * a.h[k];
  return r;
}

template <class S>
Jet<S> operator*(const Jet<S>& a, const Jet<S>& b) {
  Jet<S> r(a.v * b.v, a.n, a.second);
  for (int k = 0; k < a.n; ++k) r.g[k] = sum_of_products<S>({{a.g[k], b.v}, {a.v, b.g[k]}});
  if (a.second)
    for (int q = 0; q < a.n; ++q)
      for (int p = 0; p <= q; ++p) {
        const int k = hess_index(p, q);
        r.h[k] = sum_of_products<S>(
            {{a.h[k], b.v}, {a.v, b.h[k]}, {a.g[p], b.g[q]}, {a.g[q], b.g[p]}});
      }
  return r;
}

/// Chain rule for a scalar function with value f0 and derivatives f1, f2 at a.v.
template <class S>
Jet<S> compose(const Jet<S>& a, const S& f0, const S& f1, const S& f2) {
  Jet<S> r(f0, a.n, a.second);
  for (int k = 0; k < a.n; ++k) r.g[k] = f1 * a.g[k];
  if (a.second) {
    std::array<S, kMaxJetVars> f2g{};
    for (int k = 0; k < a.n && k < kMaxJetVars; ++k) f2g[k] = f2 * a.g[k];
    for (int q = 0; q < a.n; ++q)
      for (int p = 0; p <= q; ++p) {
        const int k = hess_index(p, q);
        r.h[k] = sum_of_products<S>({{f2g[p], a.g[q]}, {f1, a.h[k]}});
      }
  }
  return r;
}

template <class S>
Jet<S> tanh(const Jet<S>& a) {
  const S t = tanh(a.v);
  const S t1 = S(1.0) - t * t;
  return compose(a, t, t1, S(-2.0) * t * t1);
}

template <class S>
Jet<S> cos(const Jet<S>& a) {
  const S c = cos(a.v);
  return compose(a, c, -sin(a.v), -c);
}

template <class S>
Jet<S> sin(const Jet<S>& a) {
  const S s = sin(a.v);
  return compose(a, s, cos(a.v), -s);
}

template <class S>
Jet<S> log(const Jet<S>& a) {
  const S inv = S(1.0) / a.v;
  return compose(a, log(a.v), inv, -(inv * inv));
}

template <class S>
Jet<S> reciprocal(const Jet<S>& a) {
  const S inv = S(1.0) / a.v;
  const S inv2 = inv * inv;
  return compose(a, inv, -inv2, S(2.0) * inv2 * inv);
}

template <class S>
Jet<S> operator/(const Jet<S>& a, const Jet<S>& b) {
  return a * reciprocal(b);
}

// ---------------------------------------------------------------------------
// Convenience drivers.

/// Seeds `z` as jet variables, with or without second-order parts.
template <class S>
std::vector<Jet<S>> seed(const Vec<S>& z, bool with_second) {
  const int n = static_cast<int>(z.size());
  if (n > kMaxJetVars) throw ConfigError("jets support at most four input coordinates");
  std::vector<Jet<S>> out;
  out.reserve(z.size());
  for (int k = 0; k < n; ++k)
    out.push_back(Jet<S>::variable(z[static_cast<std::size_t>(k)], k, n, with_second));
  return out;
}

/// Exact Jacobian of a generic vector function `f(std::vector<Jet<S>>)`.
template <class S, class F>
Mat<S> input_jacobian(F&& f, const Vec<S>& z) {
  const std::vector<Jet<S>> out = f(seed(z, false));
  const int n = static_cast<int>(z.size());
  Mat<S> jac(static_cast<int>(out.size()), n);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int k = 0; k < n; ++k) jac(static_cast<int>(i), k) = out[i].g[static_cast<std::size_t>(k)];
  return jac;
}

/// All second partials of each output of `f`: result[i](a, b) = d^2 f_i / dz_a dz_b.
template <class S, class F>
std::vector<Mat<S>> second_order_eval(F&& f, const Vec<S>& z) {
  const std::vector<Jet<S>> out = f(seed(z, true));
  const int n = static_cast<int>(z.size());
  std::vector<Mat<S>> hess;
  hess.reserve(out.size());
  for (const auto& o : out) {
    Mat<S> m(n, n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) m(a, b) = o.h[static_cast<std::size_t>(hess_index(a, b))];
    hess.push_back(std::move(m));
  }
  return hess;
}

struct GradientResult {
  double value = 0.0;
  std::vector<double> gradient;
};

/// Reverse-mode gradient of `loss(std::span<const Var>)` at `params` on a private tape.
template <class F>
GradientResult parameter_gradient(F&& loss, std::span<const double> params, Tape& tape) {
  tape.clear();
  TapeScope scope(tape);
  std::vector<Var> p;
  p.reserve(params.size());
  for (double v : params) p.push_back(Var::independent(v));
  const Var out = loss(std::span<const Var>(p));
  tape.backward(out.node);
  GradientResult r;
  r.value = out.value;
  r.gradient.resize(params.size());
  for (std::size_t i = 0; i < p.size(); ++i) r.gradient[i] = tape.adjoint(p[i].node);
  return r;
}

template <class F>
GradientResult parameter_gradient(F&& loss, std::span<const double> params) {
  Tape tape;
  return parameter_gradient(std::forward<F>(loss), params, tape);
}

}  // namespace degenlag::ad
