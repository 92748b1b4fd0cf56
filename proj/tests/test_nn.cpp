#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "degenlag/nn.hpp"
#include "support.hpp"

using namespace degenlag;
using namespace degenlag::nn;
using testing_support::relative_error;

namespace {

std::vector<double> random_parameters(const Mlp& net, std::mt19937_64& rng) {
  std::vector<double> p(net.parameter_count());
  net.initialize(p, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& v : p) v += n(rng);  // nonzero biases and mu
  return p;
}

Eigen::MatrixXd seeded_input(const std::vector<double>& x, int n, bool second) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(x.size()), jet_columns(n, second));
  for (std::size_t i = 0; i < x.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = x[i];
    if (static_cast<int>(i) < n) m(static_cast<Eigen::Index>(i), 1 + static_cast<int>(i)) = 1.0;
  }
  return m;
}

// Deterministic pseudo-random weights for a scalar probe of jet outputs.
double probe_weight(int r, int c) { return std::sin(1.3 * r + 0.7 * c + 0.2); }

template <class S>
S probe(const ModelEvaluation<S>& e) {
  S acc = S(0.1) * e.hamiltonian;
  const int n = 2 * e.d;
  for (int i = 0; i < e.d; ++i) acc = acc + S(probe_weight(i, 0)) * e.theta[static_cast<std::size_t>(i)];
  if (e.jac_theta.rows() > 0)
    for (int i = 0; i < e.d; ++i)
      for (int k = 0; k < n; ++k) acc = acc + S(probe_weight(i, 1 + k)) * e.jac_theta(i, k);
  if (e.grad_h.size() > 0)
    for (int k = 0; k < n; ++k) acc = acc + S(probe_weight(9, k)) * e.grad_h[static_cast<std::size_t>(k)];
  if (e.has_second) {
    for (int i = 0; i < e.d; ++i)
      for (int p = 0; p < n; ++p)
        for (int q = 0; q < n; ++q)
          acc = acc + S(probe_weight(i + 3, p * n + q)) * e.hess_theta[static_cast<std::size_t>(i)](p, q);
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q) acc = acc + S(probe_weight(7, p * n + q)) * e.hess_h(p, q);
  }
  return acc;
}

std::vector<double> fd_parameter_gradient(TrainableModel& m, const PhaseState& z, EvalOrder order,
                                          double step) {
  const std::vector<double> p0(m.parameters().begin(), m.parameters().end());
  std::vector<double> g(p0.size());
  for (std::size_t j = 0; j < p0.size(); ++j) {
    std::vector<double> p = p0;
    p[j] = p0[j] + step;
    m.set_parameters(p);
    const double fp = probe(m.evaluate(z, order));
    p[j] = p0[j] - step;
    m.set_parameters(p);
    const double fm = probe(m.evaluate(z, order));
    g[j] = (fp - fm) / (2.0 * step);
  }
  m.set_parameters(p0);
  return g;
}

std::vector<double> traced_gradient(const TrainableModel& m, const PhaseState& z, EvalOrder order,
                                    double* value = nullptr) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ParameterTrace trace(m.parameter_count());
  const ad::Var out = probe(m.evaluate_traced(z, order, trace));
  tape.backward(out.node);
  trace.harvest(tape);
  if (value != nullptr) *value = out.value;
  return trace.grad;
}

NeuralDegenerateModel small_gc_model(std::uint64_t seed) {
  NeuralModelConfig c;
  c.d = 2;
  c.theta_hidden = {7, 5};
  c.h_hidden = {6};
  c.h_rescale = std::make_pair(-0.2, 1.3);
  InputNormalizer n({-1, 0, 0.02, -1e-3}, {1, 6.3, 0.06, 1e-3});
  NeuralDegenerateModel m(c, Preprocessor::angular(n, 3), seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 0.2);
  std::vector<double> p(m.parameters().begin(), m.parameters().end());
  for (double& v : p) v += nd(rng);
  m.set_parameters(p);
  return m;
}

NeuralDegenerateModel small_lv_model(std::uint64_t seed, Structure s = Structure::NonCanonical) {
  NeuralModelConfig c;
  c.d = 1;
  c.structure = s;
  c.theta_hidden = {8, 8};
  c.h_hidden = {8, 8};
  InputNormalizer n({0.2, 0.2}, {5.0, 5.0});
  NeuralDegenerateModel m(c, Preprocessor::affine(n), seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 0.2);
  std::vector<double> p(m.parameters().begin(), m.parameters().end());
  for (double& v : p) v += nd(rng);
  m.set_parameters(p);
  return m;
}

}  // namespace

TEST(Sstanh, ReducesToTanhAtZeroSlope) {
  for (double h : {-2.0, -0.3, 0.0, 0.8, 3.0}) EXPECT_DOUBLE_EQ(sstanh(h, 0.0), std::tanh(h));
  EXPECT_DOUBLE_EQ(sstanh(1.5, 0.4), std::tanh(1.5) * (1.0 + 0.4 * 1.5));
}

TEST(Sstanh, VectorFormChecksShapes) {
  const Vec<double> h{0.1, -0.4};
  const Vec<double> out = sstanh(h, Vec<double>{0.0, 1.0});
  EXPECT_DOUBLE_EQ(out[1], std::tanh(-0.4) * 0.6);
  EXPECT_THROW((void)sstanh(h, Vec<double>{1.0}), ConfigError);
}

TEST(Sstanh, DerivativeTableMatchesFiniteDifferences) {
  const double eps = 1e-5;
  for (double h : {-1.7, -0.2, 0.5, 2.1})
    for (double mu : {-0.6, 0.0, 0.9}) {
      const auto s = nn::detail::sstanh_derivs(h, mu);
      const auto sp = nn::detail::sstanh_derivs(h + eps, mu);
      const auto sm = nn::detail::sstanh_derivs(h - eps, mu);
      EXPECT_NEAR(s.s1, (sp.s0 - sm.s0) / (2 * eps), 1e-9);
      EXPECT_NEAR(s.s2, (sp.s1 - sm.s1) / (2 * eps), 1e-9);
      EXPECT_NEAR(s.s3, (sp.s2 - sm.s2) / (2 * eps), 1e-9);
      const auto mp = nn::detail::sstanh_derivs(h, mu + eps);
      const auto mm = nn::detail::sstanh_derivs(h, mu - eps);
      EXPECT_NEAR(s.m0, (mp.s0 - mm.s0) / (2 * eps), 1e-9);
      EXPECT_NEAR(s.m1, (mp.s1 - mm.s1) / (2 * eps), 1e-9);
      EXPECT_NEAR(s.m2, (mp.s2 - mm.s2) / (2 * eps), 1e-9);
    }
}

TEST(Mlp, ParameterCountsOfTheGuidingCenterNetworks) {
  const Mlp theta({{18, 48, 48, 48, 2}, false});
  const Mlp h({{18, 48, 48, 48, 1}, false});
  // Weights, hidden biases and one slope per hidden unit.
  EXPECT_EQ(theta.parameter_count(), 18u * 48 + 2 * 48 * 48 + 48 * 2 + 3 * 48 + 3 * 48);
  EXPECT_EQ(h.parameter_count(), 18u * 48 + 2 * 48 * 48 + 48 + 3 * 48 + 3 * 48);
  EXPECT_EQ(Mlp({{2, 3, 1}, true}).parameter_count(), 6u + 3 + 3 + 3 + 1);
}

TEST(Mlp, RejectsBadShapes) {
  EXPECT_THROW(Mlp({{3}, true}), ConfigError);
  EXPECT_THROW(Mlp({{3, 0, 1}, true}), ConfigError);
  const Mlp net({{2, 3, 1}, true});
  std::vector<double> p(5);
  const std::vector<double> x{1.0, 2.0};
  EXPECT_THROW((void)(net.forward<double, double>(p, x)), ConfigError);
}

TEST(Mlp, InitializationIsGlorotWithZeroSlopes) {
  const Mlp net({{10, 20, 1}, true});
  std::mt19937_64 rng(4);
  std::vector<double> p(net.parameter_count(), 9.0);
  net.initialize(p, rng);
  const auto& L = net.layers()[0];
  const double a = std::sqrt(6.0 / 30.0);
  for (int i = 0; i < 200; ++i) EXPECT_LE(std::abs(p[L.w + static_cast<std::size_t>(i)]), a);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(p[L.b + static_cast<std::size_t>(i)], 0.0);
    EXPECT_EQ(p[L.mu + static_cast<std::size_t>(i)], 0.0);
  }
}

TEST(Mlp, JetForwardMatchesGenericJets) {
  std::mt19937_64 rng(11);
  const Mlp net({{4, 9, 6, 3}, true});
  const std::vector<double> p = random_parameters(net, rng);
  const std::vector<double> x{0.3, -0.7, 0.9, 0.1};
  for (bool second : {false, true}) {
    const Eigen::MatrixXd y = net.forward_jets(p, seeded_input(x, 4, second), 4, second);
    const auto ref = net.forward<double>(std::span<const double>(p), ad::seed<double>(Vec<double>(x), second));
    for (int i = 0; i < 3; ++i) {
      const auto& r = ref[static_cast<std::size_t>(i)];
      EXPECT_NEAR(y(i, 0), r.v, 1e-14);
      for (int k = 0; k < 4; ++k) EXPECT_NEAR(y(i, 1 + k), r.g[static_cast<std::size_t>(k)], 1e-13);
      if (second) {
        for (int k = 0; k < 10; ++k) EXPECT_NEAR(y(i, 5 + k), r.h[static_cast<std::size_t>(k)], 1e-13);
      }
    }
  }
}

TEST(Mlp, JetBackwardMatchesReverseModeThroughGenericJets) {
  std::mt19937_64 rng(12);
  const Mlp net({{3, 7, 5, 2}, false});
  const std::vector<double> p = random_parameters(net, rng);
  const std::vector<double> x{0.4, -0.2, 0.6};
  const int n = 3;
  const int cols = jet_columns(n, true);
  Eigen::MatrixXd w(2, cols);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = probe_weight(r, c);

  MlpCache cache;
  (void)net.forward_jets(p, seeded_input(x, n, true), n, true, &cache);
  std::vector<double> grad(p.size(), 0.0);
  (void)net.backward_jets(p, cache, w, n, true, grad);

  const auto ref = ad::parameter_gradient(
      [&](std::span<const ad::Var> q) {
        std::vector<ad::Jet<ad::Var>> in;
        for (int k = 0; k < n; ++k)
          in.push_back(ad::Jet<ad::Var>::variable(ad::Var(x[static_cast<std::size_t>(k)]), k, n, true));
        const auto out = net.forward<ad::Var>(q, in);
        ad::Var acc(0.0);
        for (int r = 0; r < 2; ++r) {
          const auto& j = out[static_cast<std::size_t>(r)];
          acc = acc + ad::Var(w(r, 0)) * j.v;
          for (int k = 0; k < n; ++k) acc = acc + ad::Var(w(r, 1 + k)) * j.g[static_cast<std::size_t>(k)];
          for (int k = 0; k < 6; ++k) acc = acc + ad::Var(w(r, 1 + n + k)) * j.h[static_cast<std::size_t>(k)];
        }
        return acc;
      },
      p);
  for (std::size_t j = 0; j < p.size(); ++j) EXPECT_NEAR(grad[j], ref.gradient[j], 1e-11) << j;
}

TEST(Mlp, JetBackwardInputAdjointMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const Mlp net({{2, 6, 2}, true});
  const std::vector<double> p = random_parameters(net, rng);
  const int n = 2;
  Eigen::MatrixXd x = seeded_input({0.3, 0.8}, n, true);
  x(0, 4) = 0.2;  // a nonzero input Hessian entry
  Eigen::MatrixXd w(2, jet_columns(n, true));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < w.cols(); ++c) w(r, c) = probe_weight(r, c);
  MlpCache cache;
  (void)net.forward_jets(p, x, n, true, &cache);
  std::vector<double> grad(p.size(), 0.0);
  const Eigen::MatrixXd dx = net.backward_jets(p, cache, w, n, true, grad);
  const double eps = 1e-6;
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) {
      Eigen::MatrixXd xp = x;
      Eigen::MatrixXd xm = x;
      xp(r, c) += eps;
      xm(r, c) -= eps;
      const double fp = (w.array() * net.forward_jets(p, xp, n, true).array()).sum();
      const double fm = (w.array() * net.forward_jets(p, xm, n, true).array()).sum();
      EXPECT_NEAR(dx(r, c), (fp - fm) / (2 * eps), 1e-7) << r << "," << c;
    }
}

TEST(InputNormalizer, MapsTheBoxOntoTheUnitCube) {
  const InputNormalizer n = InputNormalizer::fit({{1.0, -2.0}, {3.0, 2.0}, {2.0, 0.0}});
  const Vec<double> lo = n.apply({1.0, -2.0});
  const Vec<double> hi = n.apply({3.0, 2.0});
  EXPECT_DOUBLE_EQ(lo[0], 0.0);
  EXPECT_DOUBLE_EQ(hi[1], 1.0);
  EXPECT_DOUBLE_EQ(n.apply({5.0, 0.0})[0], 2.0);  // no clamping outside the box
  EXPECT_THROW(InputNormalizer({1.0}, {1.0}), ConfigError);
  EXPECT_THROW(InputNormalizer::fit({}), ConfigError);
}

TEST(Preprocessor, AngularFeaturesMatchGenericJets) {
  const InputNormalizer n({-1, 0, 0.02, -1e-3}, {1, 6.3, 0.06, 1e-3});
  const Preprocessor pre = Preprocessor::angular(n, 4);
  EXPECT_EQ(pre.feature_count(), 12);
  const std::vector<double> phases{0.1, 1.7, 3.2, 5.9};
  const Vec<double> z{0.4, 2.0, 0.041, -5e-4};
  const Eigen::MatrixXd f = pre.features(z, phases, 4, true);
  const auto ref = pre.features_generic<double>(ad::seed<double>(z, true), std::span<const double>(phases));
  ASSERT_EQ(ref.size(), 12u);
  for (int i = 0; i < 12; ++i) {
    const auto& r = ref[static_cast<std::size_t>(i)];
    EXPECT_NEAR(f(i, 0), r.v, 1e-15);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(f(i, 1 + k), r.g[static_cast<std::size_t>(k)], 1e-12);
    for (int k = 0; k < 10; ++k) EXPECT_NEAR(f(i, 5 + k), r.h[static_cast<std::size_t>(k)], 1e-12);
  }
  // phi does not enter.
  const Eigen::MatrixXd g = pre.features({0.4, 5.0, 0.041, -5e-4}, phases, 4, true);
  EXPECT_EQ((f - g).norm(), 0.0);
  EXPECT_THROW(Preprocessor::angular(InputNormalizer({0, 0}, {1, 1})), ConfigError);
}

TEST(NeuralModel, DerivativesMatchFiniteDifferences) {
  for (int which = 0; which < 2; ++which) {
    const NeuralDegenerateModel m = which == 0 ? small_lv_model(3) : small_gc_model(3);
    std::mt19937_64 rng(5);
    const PhaseState z = which == 0 ? testing_support::random_lv_point(rng)
                                    : testing_support::random_gc_point(rng);
    const auto e = m.evaluate(z, EvalOrder::Second);
    const double h = which == 0 ? 1e-5 : 1e-7;
    // Coordinate-wise steps scaled to each variable's range.
    const int n = 2 * m.dimension();
    Vec<double> scale(static_cast<std::size_t>(n), 1.0);
    if (which == 1) scale = {1.0, 1.0, 0.01, 1e-4};
    const Vec<double> z0 = z.to_vector();
    Mat<double> jac(m.dimension(), n);
    Vec<double> gh(static_cast<std::size_t>(n));
    Mat<double> hh(n, n);
    for (int k = 0; k < n; ++k) {
      Vec<double> zp = z0;
      Vec<double> zm = z0;
      const double step = h * scale[static_cast<std::size_t>(k)];
      zp[static_cast<std::size_t>(k)] += step;
      zm[static_cast<std::size_t>(k)] -= step;
      const auto ep = m.evaluate(PhaseState::from_vector(zp), EvalOrder::First);
      const auto em = m.evaluate(PhaseState::from_vector(zm), EvalOrder::First);
      for (int i = 0; i < m.dimension(); ++i)
        jac(i, k) = (ep.theta[static_cast<std::size_t>(i)] - em.theta[static_cast<std::size_t>(i)]) / (2 * step);
      gh[static_cast<std::size_t>(k)] = (ep.hamiltonian - em.hamiltonian) / (2 * step);
      for (int p = 0; p < n; ++p)
        hh(p, k) = (ep.grad_h[static_cast<std::size_t>(p)] - em.grad_h[static_cast<std::size_t>(p)]) / (2 * step);
    }
    EXPECT_LT(relative_error(e.jac_theta, jac), 1e-6) << which;
    EXPECT_LT(relative_error(e.grad_h, gh), 1e-6) << which;
    EXPECT_LT(relative_error(e.hess_h, hh), 1e-5) << which;
  }
}

TEST(NeuralModel, OrdersAgreeOnSharedFields) {
  const NeuralDegenerateModel m = small_gc_model(8);
  const PhaseState z({0.3, 1.0}, {0.04, 2e-4});
  const auto v = m.evaluate(z, EvalOrder::Value);
  const auto f = m.evaluate(z, EvalOrder::First);
  const auto s = m.evaluate(z, EvalOrder::Second);
  EXPECT_DOUBLE_EQ(v.hamiltonian, s.hamiltonian);
  EXPECT_DOUBLE_EQ(v.theta[1], s.theta[1]);
  EXPECT_LT(relative_error(f.jac_theta, s.jac_theta, 1e-12), 1e-14);
}

TEST(NeuralModel, HamiltonianRescaleIsAffine) {
  NeuralDegenerateModel m = small_gc_model(2);
  NeuralModelConfig c = m.config();
  c.h_rescale.reset();
  NeuralDegenerateModel plain(c, m.preprocessor(), 2);
  plain.set_parameters(m.parameters());
  const PhaseState z({0.3, 1.0}, {0.04, 2e-4});
  const auto a = m.evaluate(z, EvalOrder::First);
  const auto b = plain.evaluate(z, EvalOrder::First);
  EXPECT_NEAR(a.hamiltonian, -0.2 + 1.5 * b.hamiltonian, 1e-14);
  EXPECT_NEAR(a.grad_h[2], 1.5 * b.grad_h[2], 1e-12);
  EXPECT_DOUBLE_EQ(a.theta[0], b.theta[0]);
}

TEST(NeuralModel, TracedGradientMatchesFiniteDifferences) {
  for (int which = 0; which < 2; ++which) {
    NeuralDegenerateModel m = which == 0 ? small_lv_model(21) : small_gc_model(21);
    const PhaseState z = which == 0 ? PhaseState({1.3}, {2.2}) : PhaseState({0.3, 1.0}, {0.04, 2e-4});
    for (EvalOrder order : {EvalOrder::Value, EvalOrder::First, EvalOrder::Second}) {
      double value = 0.0;
      const auto g = traced_gradient(m, z, order, &value);
      EXPECT_NEAR(value, probe(m.evaluate(z, order)), 1e-12);
      const auto fd = fd_parameter_gradient(m, z, order, 1e-6);
      EXPECT_LT(relative_error(Vec<double>(g), Vec<double>(fd), 1e-3), 1e-5) << which;
    }
  }
}

TEST(NeuralModel, CanonicalStructureFixesTheta) {
  const NeuralDegenerateModel m = small_lv_model(1, Structure::Canonical);
  EXPECT_EQ(m.theta_count(), 0u);
  const auto e = m.evaluate(PhaseState({0.7}, {1.9}), EvalOrder::Second);
  EXPECT_DOUBLE_EQ(e.theta[0], 1.9);
  EXPECT_DOUBLE_EQ(e.jac_theta(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(e.jac_theta(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(e.hess_theta[0](1, 1), 0.0);
  NeuralDegenerateModel mm = m;
  const auto g = traced_gradient(mm, PhaseState({0.7}, {1.9}), EvalOrder::Second);
  const auto fd = fd_parameter_gradient(mm, PhaseState({0.7}, {1.9}), EvalOrder::Second, 1e-6);
  EXPECT_LT(relative_error(Vec<double>(g), Vec<double>(fd), 1e-3), 1e-5);
}

TEST(NeuralModel, RejectsMismatchedParameters) {
  NeuralDegenerateModel m = small_lv_model(1);
  EXPECT_THROW(m.set_parameters(std::vector<double>(3)), ConfigError);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ParameterTrace trace(2);
  EXPECT_THROW((void)m.evaluate_traced(PhaseState({1.0}, {1.0}), EvalOrder::Value, trace), ConfigError);
}

TEST(NoStructure, TracedGradientMatchesFiniteDifferences) {
  NoStructureModel m(1, {6, 6}, Preprocessor::affine(InputNormalizer({0, 0}, {5, 5})), 3);
  const Vec<double> z{1.1, 2.4};
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ParameterTrace trace(m.parameters().size());
  const Vec<ad::Var> f = m.field_traced(z, trace);
  const ad::Var loss = f[0] * f[0] + ad::Var(0.5) * f[1];
  tape.backward(loss.node);
  EXPECT_NEAR(loss.value, m.field(z)[0] * m.field(z)[0] + 0.5 * m.field(z)[1], 1e-14);
  const std::vector<double> p0(m.parameters().begin(), m.parameters().end());
  for (std::size_t j = 0; j < p0.size(); ++j) {
    std::vector<double> p = p0;
    p[j] += 1e-6;
    m.set_parameters(p);
    const Vec<double> fp = m.field(z);
    p[j] -= 2e-6;
    m.set_parameters(p);
    const Vec<double> fm = m.field(z);
    const double fd = ((fp[0] * fp[0] + 0.5 * fp[1]) - (fm[0] * fm[0] + 0.5 * fm[1])) / 2e-6;
    EXPECT_NEAR(trace.grad[j], fd, 1e-7) << j;
  }
}

TEST(Checkpoint, RoundTripReproducesTheModel) {
  const NeuralDegenerateModel m = small_gc_model(4);
  const auto dir = std::filesystem::temp_directory_path() / "degenlag_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string stem = (dir / "model").string();
  save_checkpoint(stem, m, 4);
  const auto back = load_checkpoint(stem + ".json");
  ASSERT_EQ(back->parameter_count(), m.parameter_count());
  const PhaseState z({0.3, 1.0}, {0.04, 2e-4});
  const auto a = m.evaluate(z, EvalOrder::Second);
  const auto b = back->evaluate(z, EvalOrder::Second);
  EXPECT_EQ(a.hamiltonian, b.hamiltonian);
  EXPECT_EQ(a.hess_theta[1](2, 3), b.hess_theta[1](2, 3));
  // Eight bytes per parameter.
  EXPECT_EQ(std::filesystem::file_size(stem + ".bin"), 8 * m.parameter_count());
  std::filesystem::resize_file(stem + ".bin", 8);
  EXPECT_THROW((void)load_checkpoint(stem), ConfigError);
  EXPECT_THROW((void)load_checkpoint((dir / "missing").string()), ConfigError);
  std::filesystem::remove_all(dir);
}
