#pragma once

// Neural parameterisations of theta and H.
//
// Network evaluations propagate second-order jets through every layer with a
// hand-written forward and backward pass (Eigen matrices of shape
// units x jet-columns). On a tape, one network evaluation is a single custom
// node whose backward pass writes parameter gradients straight into a
// ParameterTrace, so the tape only holds the loss-level algebra. The generic
// `Mlp::forward` over arbitrary scalar types is kept as the reference path.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "degenlag/autodiff.hpp"
#include "degenlag/core.hpp"
#include "degenlag/errors.hpp"

namespace degenlag {

// ---------------------------------------------------------------------------
// Trainable models.

/// Receives parameter gradients during a reverse sweep.
struct ParameterTrace {
  std::vector<double> grad;
  std::vector<std::pair<std::uint32_t, std::size_t>> leaves;  // (tape node, parameter index)

  explicit ParameterTrace(std::size_t n = 0) : grad(n, 0.0) {}

  /// Adds the adjoints of registered parameter leaves and forgets them.
  void harvest(const ad::Tape& tape) {
    for (const auto& [node, index] : leaves) grad[index] += tape.adjoint(node);
    leaves.clear();
  }
};

/// A degenerate model whose theta and H depend on a flat parameter vector.
class TrainableModel : public DegenerateModel {
 public:
  [[nodiscard]] virtual std::span<const double> parameters() const = 0;
  virtual void set_parameters(std::span<const double> p) = 0;
  /// Evaluation recorded on the active tape; gradients flow into `trace`.
  [[nodiscard]] virtual ModelEvaluation<ad::Var> evaluate_traced(const PhaseState& z,
                                                                 EvalOrder order,
                                                                 ParameterTrace& trace) const = 0;
  [[nodiscard]] std::size_t parameter_count() const { return parameters().size(); }
};

namespace nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Number of jet columns: value, n first partials and, optionally, n(n+1)/2 second partials.
constexpr int jet_columns(int n, bool second) { return 1 + n + (second ? n * (n + 1) / 2 : 0); }

// ---------------------------------------------------------------------------
// Self-scalable tanh: tanh(h) + mu h tanh(h).

template <class T, class S>
T sstanh(const T& h, const S& mu) {
  using ad::tanh;
  using std::tanh;
  const T t = tanh(h);
  return t + mu * (h * t);
}

inline Vec<double> sstanh(const Vec<double>& h, const Vec<double>& mu) {
  if (h.size() != mu.size()) throw ConfigError("sstanh: shape mismatch");
  Vec<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = sstanh(h[i], mu[i]);
  return out;
}

namespace detail {

struct SstanhDerivs {
  double s0, s1, s2, s3;     // d^k/dh^k
  double m0, m1, m2;         // d/dmu of s0, s1, s2
};

inline SstanhDerivs sstanh_derivs(double h, double mu) {
  const double t = std::tanh(h);
  const double t1 = 1.0 - t * t;
  const double t2 = -2.0 * t * t1;
  const double t3 = -2.0 * (t1 * t1 + t * t2);
  const double a = 1.0 + mu * h;
  return {t * a,        t1 * a + mu * t, t2 * a + 2.0 * mu * t1, t3 * a + 3.0 * mu * t2,
          h * t,        h * t1 + t,      h * t2 + 2.0 * t1};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Multi-layer perceptron.

struct MlpSpec {
  std::vector<int> widths;  // input, hidden..., output
  bool final_bias = true;
};

struct LayerLayout {
  int in = 0;
  int out = 0;
  std::size_t w = 0;   // row-major out x in
  std::size_t b = 0;   // valid if has_bias
  std::size_t mu = 0;  // valid if activated
  bool has_bias = true;
  bool activated = true;
};

/// Per-layer inputs and pre-activations of one jet evaluation.
struct MlpCache {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> pre;
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    if (spec_.widths.size() < 2) throw ConfigError("an MLP needs input and output widths");
    for (int w : spec_.widths)
      if (w < 1) throw ConfigError("MLP widths must be positive");
    std::size_t off = 0;
    const std::size_t n_layers = spec_.widths.size() - 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
      LayerLayout L;
      L.in = spec_.widths[l];
      L.out = spec_.widths[l + 1];
      L.activated = l + 1 < n_layers;
      L.has_bias = L.activated || spec_.final_bias;
      L.w = off;
      off += static_cast<std::size_t>(L.in * L.out);
      if (L.has_bias) {
        L.b = off;
        off += static_cast<std::size_t>(L.out);
      }
      if (L.activated) {
        L.mu = off;
        off += static_cast<std::size_t>(L.out);
      }
      layers_.push_back(L);
    }
    count_ = off;
  }

  [[nodiscard]] const MlpSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] const std::vector<LayerLayout>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::size_t parameter_count() const noexcept { return count_; }
  [[nodiscard]] int input_width() const { return spec_.widths.front(); }
  [[nodiscard]] int output_width() const { return spec_.widths.back(); }

  /// Glorot-uniform weights, zero biases, mu = 0.
  void initialize(std::span<double> p, std::mt19937_64& rng) const {
    check_size(p.size());
    for (const LayerLayout& L : layers_) {
      const double a = std::sqrt(6.0 / (L.in + L.out));
      std::uniform_real_distribution<double> u(-a, a);
      for (int i = 0; i < L.in * L.out; ++i) p[L.w + static_cast<std::size_t>(i)] = u(rng);
      if (L.has_bias)
        for (int i = 0; i < L.out; ++i) p[L.b + static_cast<std::size_t>(i)] = 0.0;
      if (L.activated)
        for (int i = 0; i < L.out; ++i) p[L.mu + static_cast<std::size_t>(i)] = 0.0;
    }
  }

  /// Reference forward pass on any scalar type T with coefficients of type S.
  template <class S, class T>
  std::vector<T> forward(std::span<const S> p, std::vector<T> x) const {
    check_size(p.size());
    if (static_cast<int>(x.size()) != input_width()) throw ConfigError("MLP input width mismatch");
    for (const LayerLayout& L : layers_) {
      std::vector<T> y;
      y.reserve(static_cast<std::size_t>(L.out));
      for (int i = 0; i < L.out; ++i) {
        const std::size_t row = L.w + static_cast<std::size_t>(i * L.in);
        T acc = p[row] * x[0];
        for (int j = 1; j < L.in; ++j) acc = acc + p[row + static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(j)];
        if (L.has_bias) acc = acc + p[L.b + static_cast<std::size_t>(i)];
        if (L.activated) acc = sstanh(acc, p[L.mu + static_cast<std::size_t>(i)]);
        y.push_back(acc);
      }
      x = std::move(y);
    }
    return x;
  }

  /// Jet forward pass; `x` is input-width x jet_columns(n, second).
  Eigen::MatrixXd forward_jets(std::span<const double> p, const Eigen::MatrixXd& x, int n,
                               bool second, MlpCache* cache = nullptr) const {
    check_size(p.size());
    if (x.rows() != input_width()) throw ConfigError("MLP input width mismatch");
    if (cache != nullptr) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    Eigen::MatrixXd a = x;
    for (const LayerLayout& L : layers_) {
      const Eigen::Map<const RowMatrix> w(p.data() + L.w, L.out, L.in);
      Eigen::MatrixXd z = w * a;
      if (L.has_bias)
        for (int i = 0; i < L.out; ++i) z(i, 0) += p[L.b + static_cast<std::size_t>(i)];
      if (cache != nullptr) cache->inputs.push_back(std::move(a));
      if (!L.activated) return z;
      a.resize(z.rows(), z.cols());
      activate(z, p.data() + L.mu, n, second, a);
      if (cache != nullptr) cache->pre.push_back(std::move(z));
    }
    return a;
  }

  /// Reverse pass for forward_jets: adds parameter gradients into `grad` and
  /// returns the adjoint of the input jets.
  Eigen::MatrixXd backward_jets(std::span<const double> p, const MlpCache& cache,
                                const Eigen::MatrixXd& dout, int n, bool second,
                                std::span<double> grad) const {
    Eigen::MatrixXd dz = dout;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const LayerLayout& L = layers_[l];
      if (L.activated) {
        Eigen::MatrixXd dpre(dz.rows(), dz.cols());
        activate_backward(cache.pre[l], p.data() + L.mu, dz, n, second, dpre, grad.data() + L.mu);
        dz = std::move(dpre);
      }
      const Eigen::MatrixXd& in = cache.inputs[l];
      Eigen::Map<RowMatrix> gw(grad.data() + L.w, L.out, L.in);
      gw.noalias() += dz * in.transpose();
      if (L.has_bias)
        for (int i = 0; i < L.out; ++i) grad[L.b + static_cast<std::size_t>(i)] += dz(i, 0);
      const Eigen::Map<const RowMatrix> w(p.data() + L.w, L.out, L.in);
      dz = w.transpose() * dz;
    }
    return dz;
  }

 private:
  void check_size(std::size_t n) const {
    if (n != count_) throw ConfigError("MLP parameter vector has the wrong length");
  }

  static void activate(const Eigen::MatrixXd& z, const double* mu, int n, bool second,
                       Eigen::MatrixXd& a) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const auto s = detail::sstanh_derivs(z(i, 0), mu[i]);
      a(i, 0) = s.s0;
      for (int k = 0; k < n; ++k) a(i, 1 + k) = s.s1 * z(i, 1 + k);
      if (!second) continue;
      for (int q = 0; q < n; ++q)
        for (int pp = 0; pp <= q; ++pp) {
          const int c = 1 + n + ad::hess_index(pp, q);
          a(i, c) = s.s2 * z(i, 1 + pp) * z(i, 1 + q) + s.s1 * z(i, c);
        }
    }
  }

  static void activate_backward(const Eigen::MatrixXd& z, const double* mu,
                                const Eigen::MatrixXd& da, int n, bool second,
                                Eigen::MatrixXd& dz, double* dmu) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const auto s = detail::sstanh_derivs(z(i, 0), mu[i]);
      double dv = da(i, 0) * s.s1;
      double dm = da(i, 0) * s.m0;
      for (int k = 0; k < n; ++k) {
        dv += da(i, 1 + k) * s.s2 * z(i, 1 + k);
        dm += da(i, 1 + k) * s.m1 * z(i, 1 + k);
        dz(i, 1 + k) = da(i, 1 + k) * s.s1;
      }
      if (second) {
        for (int q = 0; q < n; ++q)
          for (int pp = 0; pp <= q; ++pp) {
            const int c = 1 + n + ad::hess_index(pp, q);
            const double g = da(i, c);
            const double zz = z(i, 1 + pp) * z(i, 1 + q);
            dv += g * (s.s3 * zz + s.s2 * z(i, c));
            dm += g * (s.m2 * zz + s.m1 * z(i, c));
            dz(i, 1 + pp) += g * s.s2 * z(i, 1 + q);
            dz(i, 1 + q) += g * s.s2 * z(i, 1 + pp);
            dz(i, c) = g * s.s1;
          }
      }
      dz(i, 0) = dv;
      dmu[i] += dm;
    }
  }

  MlpSpec spec_;
  std::vector<LayerLayout> layers_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Input preprocessing.

/// Per-coordinate affine map of the training box onto [0, 1]; no clamping.
struct InputNormalizer {
  Vec<double> lo;
  Vec<double> hi;

  InputNormalizer() = default;
  InputNormalizer(Vec<double> l, Vec<double> h) : lo(std::move(l)), hi(std::move(h)) {
    if (lo.size() != hi.size() || lo.empty()) throw ConfigError("normalizer bounds mismatch");
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (!(hi[i] > lo[i])) throw ConfigError("normalizer needs max > min per coordinate");
  }

  static InputNormalizer fit(const std::vector<Vec<double>>& points) {
    if (points.empty()) throw ConfigError("cannot fit a normalizer on no data");
    Vec<double> lo = points.front();
    Vec<double> hi = points.front();
    for (const auto& p : points)
      for (std::size_t i = 0; i < p.size(); ++i) {
        lo[i] = std::min(lo[i], p[i]);
        hi[i] = std::max(hi[i], p[i]);
      }
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (!(hi[i] > lo[i])) {
        const double pad = std::max(1e-12, 1e-6 * std::abs(lo[i]));
        lo[i] -= pad;
        hi[i] += pad;
      }
    return {lo, hi};
  }

  [[nodiscard]] double scale(std::size_t i) const { return 1.0 / (hi[i] - lo[i]); }

  [[nodiscard]] Vec<double> apply(const Vec<double>& z) const {
    Vec<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - lo[i]) * scale(i);
    return out;
  }
};

/// Maps z to network features, either by plain normalisation or, for the
/// guiding center, by dropping phi, embedding theta as cos(theta + phase_j) and
/// repeating normalised r and u `k` times.
struct Preprocessor {
  enum class Kind { Affine, Angular };

  Kind kind = Kind::Affine;
  int d = 1;
  InputNormalizer normalizer;
  int repeat = 6;

  static Preprocessor affine(InputNormalizer n) {
    Preprocessor p;
    p.kind = Kind::Affine;
    p.d = static_cast<int>(n.lo.size()) / 2;
    p.normalizer = std::move(n);
    return p;
  }

  static Preprocessor angular(InputNormalizer n, int k = 6) {
    if (n.lo.size() != 4) throw ConfigError("angular preprocessing needs z = (theta, phi, r, u)");
    if (k < 1) throw ConfigError("angular repetition must be positive");
    Preprocessor p;
    p.kind = Kind::Angular;
    p.d = 2;
    p.normalizer = std::move(n);
    p.repeat = k;
    return p;
  }

  [[nodiscard]] int feature_count() const { return kind == Kind::Affine ? 2 * d : 3 * repeat; }
  [[nodiscard]] std::size_t parameter_count() const {
    return kind == Kind::Angular ? static_cast<std::size_t>(repeat) : 0;
  }

  void initialize(std::span<double> phases, std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    for (double& v : phases) v = u(rng);
  }

  /// Feature jets with respect to the first n coordinates of z (n = 0 or 2d).
  Eigen::MatrixXd features(const Vec<double>& z, std::span<const double> phases, int n,
                           bool second) const {
    const int cols = jet_columns(n, second);
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(feature_count(), cols);
    if (kind == Kind::Affine) {
      for (int i = 0; i < 2 * d; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        x(i, 0) = (z[ui] - normalizer.lo[ui]) * normalizer.scale(ui);
        if (n > 0) x(i, 1 + i) = normalizer.scale(ui);
      }
      return x;
    }
    const int k = repeat;
    for (int j = 0; j < k; ++j) {
      const double a = z[0] + phases[static_cast<std::size_t>(j)];
      x(j, 0) = std::cos(a);
      if (n > 0) x(j, 1) = -std::sin(a);
      if (n > 0 && second) x(j, 1 + n + ad::hess_index(0, 0)) = -std::cos(a);
      for (int c = 0; c < 2; ++c) {
        const std::size_t coord = static_cast<std::size_t>(2 + c);
        const int row = (1 + c) * k + j;
        x(row, 0) = (z[coord] - normalizer.lo[coord]) * normalizer.scale(coord);
        if (n > 0) x(row, 1 + static_cast<int>(coord)) = normalizer.scale(coord);
      }
    }
    return x;
  }

  /// Adds d(loss)/d(phase_j) given the feature adjoint.
  void backward(const Vec<double>& z, std::span<const double> phases, const Eigen::MatrixXd& dx,
                int n, bool second, std::span<double> grad) const {
    if (kind != Kind::Angular) return;
    for (int j = 0; j < repeat; ++j) {
      const double a = z[0] + phases[static_cast<std::size_t>(j)];
      double g = -std::sin(a) * dx(j, 0);
      if (n > 0) g += -std::cos(a) * dx(j, 1);
      if (n > 0 && second) g += std::sin(a) * dx(j, 1 + n + ad::hess_index(0, 0));
      grad[static_cast<std::size_t>(j)] += g;
    }
  }

  /// Reference feature map on generic scalars.
  template <class S, class T>
  std::vector<T> features_generic(const std::vector<T>& z, std::span<const S> phases) const {
    using ad::cos;
    using std::cos;
    std::vector<T> out;
    if (kind == Kind::Affine) {
      for (int i = 0; i < 2 * d; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        out.push_back(S(normalizer.scale(ui)) * (z[ui] + S(-normalizer.lo[ui])));
      }
      return out;
    }
    for (int j = 0; j < repeat; ++j) out.push_back(cos(z[0] + phases[static_cast<std::size_t>(j)]));
    for (int c = 2; c < 4; ++c)
      for (int j = 0; j < repeat; ++j) {
        const auto uc = static_cast<std::size_t>(c);
        out.push_back(S(normalizer.scale(uc)) * (z[uc] + S(-normalizer.lo[uc])));
      }
    return out;
  }
};

inline nlohmann::json to_json(const Preprocessor& p) {
  return {{"kind", p.kind == Preprocessor::Kind::Affine ? "affine" : "angular"},
          {"d", p.d},
          {"lo", p.normalizer.lo},
          {"hi", p.normalizer.hi},
          {"repeat", p.repeat}};
}

inline Preprocessor preprocessor_from_json(const nlohmann::json& j) {
  InputNormalizer n(j.at("lo").get<Vec<double>>(), j.at("hi").get<Vec<double>>());
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "affine") return Preprocessor::affine(std::move(n));
  if (kind == "angular") return Preprocessor::angular(std::move(n), j.at("repeat").get<int>());
  throw ConfigError("unknown preprocessor kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Tape bridge.

namespace detail {

class MatrixOutputBackward final : public ad::CustomBackward {
 public:
  MatrixOutputBackward(int rows, int cols, std::uint32_t first,
                       std::function<void(const Eigen::MatrixXd&)> fn)
      : rows_(rows), cols_(cols), first_(first), fn_(std::move(fn)) {}

  void backward(std::span<double> adjoint) const override {
    Eigen::MatrixXd d(rows_, cols_);
    bool any = false;
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c) {
        d(r, c) = adjoint[first_ + static_cast<std::size_t>(r * cols_ + c)];
        any = any || d(r, c) != 0.0;
      }
    if (any) fn_(d);
  }

 private:
  int rows_;
  int cols_;
  std::uint32_t first_;
  std::function<void(const Eigen::MatrixXd&)> fn_;
};

/// Places `values` on the active tape as fresh leaves whose adjoints are handed
/// to `backward` as one matrix.
inline Mat<ad::Var> record_matrix(const Eigen::MatrixXd& values,
                                  std::function<void(const Eigen::MatrixXd&)> backward) {
  const int rows = static_cast<int>(values.rows());
  const int cols = static_cast<int>(values.cols());
  Mat<ad::Var> out(rows, cols);
  ad::Tape* t = ad::active_tape();
  if (t == nullptr) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out(r, c) = ad::Var(values(r, c));
    return out;
  }
  const auto first = static_cast<std::uint32_t>(t->size() + 1);
  t->custom(std::make_unique<MatrixOutputBackward>(rows, cols, first, std::move(backward)));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out(r, c) = ad::Var(values(r, c), t->leaf());
  return out;
}

/// Fills a ModelEvaluation from jet rows: theta rows 0..d-1 and H as `h_row`.
template <class S, class Get>
ModelEvaluation<S> evaluation_from_jets(int d, EvalOrder order, Get get, int h_row) {
  const int n = order == EvalOrder::Value ? 0 : 2 * d;
  ModelEvaluation<S> e(d, order);
  for (int i = 0; i < d; ++i) e.theta[static_cast<std::size_t>(i)] = get(i, 0);
  e.hamiltonian = get(h_row, 0);
  if (order == EvalOrder::Value) return e;
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < n; ++k) e.jac_theta(i, k) = get(i, 1 + k);
  for (int k = 0; k < n; ++k) e.grad_h[static_cast<std::size_t>(k)] = get(h_row, 1 + k);
  if (order != EvalOrder::Second) return e;
  for (int q = 0; q < n; ++q)
    for (int p = 0; p <= q; ++p) {
      const int c = 1 + n + ad::hess_index(p, q);
      for (int i = 0; i < d; ++i) {
        auto& m = e.hess_theta[static_cast<std::size_t>(i)];
        m(p, q) = get(i, c);
        m(q, p) = m(p, q);
      }
      e.hess_h(p, q) = get(h_row, c);
      e.hess_h(q, p) = e.hess_h(p, q);
    }
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Neural degenerate model.

enum class Structure { NonCanonical, Canonical };

struct NeuralModelConfig {
  int d = 1;
  Structure structure = Structure::NonCanonical;
  std::vector<int> theta_hidden{30, 30, 30};
  std::vector<int> h_hidden{30, 30, 30};
  bool final_bias = true;
  std::optional<std::pair<double, double>> h_rescale;  // maps [0, 1] onto [lo, hi]
};

/// theta_net: features -> R^d and h_net: features -> R; canonical variant fixes theta = y.
class NeuralDegenerateModel final : public TrainableModel {
 public:
  NeuralDegenerateModel(NeuralModelConfig cfg, Preprocessor pre, std::uint64_t seed = 0)
      : cfg_(std::move(cfg)), pre_(std::move(pre)) {
    if (pre_.d != cfg_.d) throw ConfigError("preprocessor dimension does not match the model");
    if (2 * cfg_.d > ad::kMaxJetVars) throw ConfigError("neural models support d <= 2");
    const int in = pre_.feature_count();
    const auto make = [&](const std::vector<int>& hidden, int out) {
      MlpSpec s;
      s.widths.push_back(in);
      s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
      s.widths.push_back(out);
      s.final_bias = cfg_.final_bias;
      return Mlp(s);
    };
    if (cfg_.structure == Structure::NonCanonical) theta_net_ = make(cfg_.theta_hidden, cfg_.d);
    h_net_ = make(cfg_.h_hidden, 1);
    theta_off_ = pre_.parameter_count();
    h_off_ = theta_off_ + theta_count();
    params_.assign(h_off_ + h_net_.parameter_count(), 0.0);
    std::mt19937_64 rng(seed);
    pre_.initialize(std::span<double>(params_).first(theta_off_), rng);
    if (cfg_.structure == Structure::NonCanonical)
      theta_net_.initialize(std::span<double>(params_).subspan(theta_off_, theta_count()), rng);
    h_net_.initialize(std::span<double>(params_).subspan(h_off_), rng);
  }

  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    const Forward f = forward(z.to_vector(), order, false);
    return detail::evaluation_from_jets<double>(
        cfg_.d, order, [&](int r, int c) { return f.out(r, c); }, cfg_.d);
  }

  [[nodiscard]] ModelEvaluation<ad::Var> evaluate_traced(const PhaseState& z, EvalOrder order,
                                                         ParameterTrace& trace) const override {
    const Vec<double> zv = z.to_vector();
    auto f = std::make_shared<Forward>(forward(zv, order, true));
    const int n = order == EvalOrder::Value ? 0 : 2 * cfg_.d;
    const bool second = order == EvalOrder::Second;
    std::vector<double>* grad = &trace.grad;
    if (grad->size() != params_.size()) throw ConfigError("trace has the wrong parameter count");
    const Mat<ad::Var> out = detail::record_matrix(f->out, [this, f, zv, n, second,
                                                            grad](const Eigen::MatrixXd& d) {
      backward(*f, zv, d, n, second, *grad);
    });
    return detail::evaluation_from_jets<ad::Var>(
        cfg_.d, order, [&](int r, int c) { return out(r, c); }, cfg_.d);
  }

  [[nodiscard]] std::span<const double> parameters() const override { return params_; }
  void set_parameters(std::span<const double> p) override {
    if (p.size() != params_.size()) throw ConfigError("parameter vector has the wrong length");
    params_.assign(p.begin(), p.end());
  }

  [[nodiscard]] int dimension() const override { return cfg_.d; }
  [[nodiscard]] std::string name() const override {
    return cfg_.structure == Structure::Canonical ? "neural-canonical" : "neural-noncanonical";
  }

  [[nodiscard]] const NeuralModelConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const Preprocessor& preprocessor() const noexcept { return pre_; }
  [[nodiscard]] const Mlp& theta_net() const noexcept { return theta_net_; }
  [[nodiscard]] const Mlp& h_net() const noexcept { return h_net_; }
  [[nodiscard]] std::size_t theta_offset() const noexcept { return theta_off_; }
  [[nodiscard]] std::size_t h_offset() const noexcept { return h_off_; }
  [[nodiscard]] std::size_t theta_count() const noexcept {
    return cfg_.structure == Structure::NonCanonical ? theta_net_.parameter_count() : 0;
  }

 private:
  struct Forward {
    Eigen::MatrixXd features;
    MlpCache theta_cache;
    MlpCache h_cache;
    Eigen::MatrixXd out;  // (d + 1) x columns: theta rows then H
  };

  [[nodiscard]] std::span<const double> phases() const {
    return std::span<const double>(params_).first(theta_off_);
  }
  [[nodiscard]] std::span<const double> theta_params() const {
    return std::span<const double>(params_).subspan(theta_off_, theta_count());
  }
  [[nodiscard]] std::span<const double> h_params() const {
    return std::span<const double>(params_).subspan(h_off_);
  }

  Forward forward(const Vec<double>& z, EvalOrder order, bool keep) const {
    const int d = cfg_.d;
    const int n = order == EvalOrder::Value ? 0 : 2 * d;
    const bool second = order == EvalOrder::Second;
    const int cols = jet_columns(n, second);
    Forward f;
    f.features = pre_.features(z, phases(), n, second);
    f.out = Eigen::MatrixXd::Zero(d + 1, cols);
    if (cfg_.structure == Structure::NonCanonical) {
      f.out.topRows(d) =
          theta_net_.forward_jets(theta_params(), f.features, n, second, keep ? &f.theta_cache : nullptr);
    } else {
      for (int i = 0; i < d; ++i) {
        f.out(i, 0) = z[static_cast<std::size_t>(d + i)];
        if (n > 0) f.out(i, 1 + d + i) = 1.0;
      }
    }
    Eigen::MatrixXd h = h_net_.forward_jets(h_params(), f.features, n, second, keep ? &f.h_cache : nullptr);
    if (cfg_.h_rescale) {
      const auto [lo, hi] = *cfg_.h_rescale;
      h *= (hi - lo);
      h(0, 0) += lo;
    }
    f.out.row(d) = h.row(0);
    return f;
  }

  void backward(const Forward& f, const Vec<double>& z, const Eigen::MatrixXd& dout, int n,
                bool second, std::vector<double>& grad) const {
    const int d = cfg_.d;
    std::span<double> g(grad);
    Eigen::MatrixXd dh = dout.bottomRows(1);
    if (cfg_.h_rescale) dh *= (cfg_.h_rescale->second - cfg_.h_rescale->first);
    Eigen::MatrixXd dx =
        h_net_.backward_jets(h_params(), f.h_cache, dh, n, second, g.subspan(h_off_));
    if (cfg_.structure == Structure::NonCanonical)
      dx += theta_net_.backward_jets(theta_params(), f.theta_cache, dout.topRows(d), n, second,
                                     g.subspan(theta_off_, theta_count()));
    pre_.backward(z, phases(), dx, n, second, g.first(theta_off_));
  }

  NeuralModelConfig cfg_;
  Preprocessor pre_;
  Mlp theta_net_;
  Mlp h_net_;
  std::size_t theta_off_ = 0;
  std::size_t h_off_ = 0;
  std::vector<double> params_;
};

/// f(z) = MLP(z) directly; a vector field without Lagrangian structure, so it
/// can be integrated by explicit schemes but has no DVI.
class NoStructureModel {
 public:
  NoStructureModel(int d, std::vector<int> hidden, Preprocessor pre, std::uint64_t seed = 0)
      : d_(d), pre_(std::move(pre)) {
    if (pre_.d != d) throw ConfigError("preprocessor dimension does not match the model");
    MlpSpec s;
    s.widths.push_back(pre_.feature_count());
    s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
    s.widths.push_back(2 * d);
    net_ = Mlp(s);
    params_.assign(pre_.parameter_count() + net_.parameter_count(), 0.0);
    std::mt19937_64 rng(seed);
    pre_.initialize(std::span<double>(params_).first(pre_.parameter_count()), rng);
    net_.initialize(std::span<double>(params_).subspan(pre_.parameter_count()), rng);
  }

  [[nodiscard]] Vec<double> field(const Vec<double>& z) const {
    const Eigen::MatrixXd x = pre_.features(z, phases(), 0, false);
    const Eigen::MatrixXd y = net_.forward_jets(net_params(), x, 0, false);
    return Vec<double>(y.data(), y.data() + y.size());
  }

  /// The field on the active tape.
  [[nodiscard]] Vec<ad::Var> field_traced(const Vec<double>& z, ParameterTrace& trace) const {
    auto x = std::make_shared<Eigen::MatrixXd>(pre_.features(z, phases(), 0, false));
    auto cache = std::make_shared<MlpCache>();
    const Eigen::MatrixXd y = net_.forward_jets(net_params(), *x, 0, false, cache.get());
    std::vector<double>* grad = &trace.grad;
    const Mat<ad::Var> out = detail::record_matrix(y, [this, x, cache, z, grad](const Eigen::MatrixXd& d) {
      std::span<double> g(*grad);
      const Eigen::MatrixXd dx =
          net_.backward_jets(net_params(), *cache, d, 0, false, g.subspan(pre_.parameter_count()));
      pre_.backward(z, phases(), dx, 0, false, g.first(pre_.parameter_count()));
    });
    Vec<ad::Var> f(static_cast<std::size_t>(2 * d_));
    for (int i = 0; i < 2 * d_; ++i) f[static_cast<std::size_t>(i)] = out(i, 0);
    return f;
  }

  [[nodiscard]] VectorField as_field() const {
    return [this](const Vec<double>& z) { return field(z); };
  }

  [[nodiscard]] std::span<const double> parameters() const { return params_; }
  void set_parameters(std::span<const double> p) {
    if (p.size() != params_.size()) throw ConfigError("parameter vector has the wrong length");
    params_.assign(p.begin(), p.end());
  }
  [[nodiscard]] int dimension() const noexcept { return d_; }
  [[nodiscard]] const Mlp& net() const noexcept { return net_; }
  [[nodiscard]] const Preprocessor& preprocessor() const noexcept { return pre_; }

 private:
  [[nodiscard]] std::span<const double> phases() const {
    return std::span<const double>(params_).first(pre_.parameter_count());
  }
  [[nodiscard]] std::span<const double> net_params() const {
    return std::span<const double>(params_).subspan(pre_.parameter_count());
  }

  int d_;
  Preprocessor pre_;
  Mlp net_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest plus little-endian float64 parameters.

inline void write_parameters(const std::string& path, std::span<const double> p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  for (double v : p) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

inline std::vector<double> read_parameters(const std::string& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  std::vector<double> p;
  std::uint64_t bits = 0;
  while (is.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    p.push_back(std::bit_cast<double>(bits));
  }
  if (p.size() != expected)
    throw ConfigError("parameter file '" + path + "' holds " + std::to_string(p.size()) +
                      " values, expected " + std::to_string(expected));
  return p;
}

inline nlohmann::json manifest(const NeuralDegenerateModel& m, std::uint64_t seed) {
  const auto& c = m.config();
  nlohmann::json j = {{"type", "degenerate"},
                      {"structure", c.structure == Structure::Canonical ? "canonical" : "noncanonical"},
                      {"d", c.d},
                      {"theta_hidden", c.theta_hidden},
                      {"h_hidden", c.h_hidden},
                      {"final_bias", c.final_bias},
                      {"preprocessor", to_json(m.preprocessor())},
                      {"seed", seed},
                      {"parameter_count", m.parameter_count()},
                      {"parameter_order", {"phases", "theta_net", "h_net"}},
                      {"layer_order", "per layer: W (row-major out x in), b, mu"}};
  if (c.h_rescale) j["h_rescale"] = {c.h_rescale->first, c.h_rescale->second};
  return j;
}

/// Writes `<stem>.json` and `<stem>.bin`.
inline void save_checkpoint(const std::string& stem, const NeuralDegenerateModel& m,
                            std::uint64_t seed) {
  nlohmann::json j = manifest(m, seed);
  const std::string bin = stem + ".bin";
  j["parameters_file"] = bin.substr(bin.find_last_of('/') + 1);
  std::ofstream os(stem + ".json");
  if (!os) throw ConfigError("cannot write '" + stem + ".json'");
  os << j.dump(2) << '\n';
  write_parameters(bin, m.parameters());
}

inline nlohmann::json manifest(const NoStructureModel& m, std::uint64_t seed) {
  std::vector<int> hidden(m.net().spec().widths.begin() + 1, m.net().spec().widths.end() - 1);
  return {{"type", "no_structure"},
          {"d", m.dimension()},
          {"hidden", hidden},
          {"preprocessor", to_json(m.preprocessor())},
          {"seed", seed},
          {"parameter_count", m.parameters().size()},
          {"parameter_order", {"phases", "net"}},
          {"layer_order", "per layer: W (row-major out x in), b, mu"}};
}

inline void save_checkpoint(const std::string& stem, const NoStructureModel& m, std::uint64_t seed) {
  nlohmann::json j = manifest(m, seed);
  const std::string bin = stem + ".bin";
  j["parameters_file"] = bin.substr(bin.find_last_of('/') + 1);
  std::ofstream os(stem + ".json");
  if (!os) throw ConfigError("cannot write '" + stem + ".json'");
  os << j.dump(2) << '\n';
  write_parameters(bin, m.parameters());
}

inline NeuralModelConfig model_config_from_manifest(const nlohmann::json& j) {
  NeuralModelConfig c;
  c.d = j.at("d").get<int>();
  c.structure = j.at("structure").get<std::string>() == "canonical" ? Structure::Canonical
                                                                    : Structure::NonCanonical;
  c.theta_hidden = j.at("theta_hidden").get<std::vector<int>>();
  c.h_hidden = j.at("h_hidden").get<std::vector<int>>();
  c.final_bias = j.at("final_bias").get<bool>();
  if (j.contains("h_rescale")) {
    const auto r = j.at("h_rescale").get<std::vector<double>>();
    c.h_rescale = std::make_pair(r.at(0), r.at(1));
  }
  return c;
}

namespace detail {

inline std::string checkpoint_stem(std::string stem) {
  if (stem.size() > 5 && stem.ends_with(".json")) stem.resize(stem.size() - 5);
  return stem;
}

inline std::string checkpoint_dir(const std::string& stem) {
  const auto slash = stem.find_last_of('/');
  return slash == std::string::npos ? std::string() : stem.substr(0, slash + 1);
}

}  // namespace detail

/// Reads `<stem>.json` (a path ending in .json is accepted too).
inline nlohmann::json read_manifest(const std::string& path) {
  const std::string stem = detail::checkpoint_stem(path);
  std::ifstream is(stem + ".json");
  if (!is) throw ConfigError("cannot read checkpoint '" + stem + ".json'");
  try {
    nlohmann::json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

inline std::unique_ptr<NeuralDegenerateModel> load_checkpoint(const std::string& path) {
  const std::string stem = detail::checkpoint_stem(path);
  const nlohmann::json j = read_manifest(stem);
  if (j.value("type", std::string("degenerate")) != "degenerate")
    throw ConfigError("checkpoint '" + stem + "' does not hold a structured model");
  try {
    auto m = std::make_unique<NeuralDegenerateModel>(model_config_from_manifest(j),
                                                     preprocessor_from_json(j.at("preprocessor")));
    m->set_parameters(read_parameters(detail::checkpoint_dir(stem) +
                                          j.at("parameters_file").get<std::string>(),
                                      m->parameter_count()));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

inline std::unique_ptr<NoStructureModel> load_no_structure_checkpoint(const std::string& path) {
  const std::string stem = detail::checkpoint_stem(path);
  const nlohmann::json j = read_manifest(stem);
  if (j.value("type", std::string()) != "no_structure")
    throw ConfigError("checkpoint '" + stem + "' does not hold a no-structure model");
  try {
    auto m = std::make_unique<NoStructureModel>(j.at("d").get<int>(),
                                                j.at("hidden").get<std::vector<int>>(),
                                                preprocessor_from_json(j.at("preprocessor")));
    const auto p = read_parameters(detail::checkpoint_dir(stem) +
                                       j.at("parameters_file").get<std::string>(),
                                   m->parameters().size());
    m->set_parameters(p);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

}  // namespace nn
}  // namespace degenlag
