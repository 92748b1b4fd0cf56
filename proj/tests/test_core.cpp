#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "degenlag/core.hpp"
#include "degenlag/models.hpp"
#include "support.hpp"

using namespace degenlag;
using namespace testing_support;

namespace {

/// theta = (x, 0): D_y theta vanishes everywhere.
class FlatPotential final : public DegenerateModel {
 public:
  ModelEvaluation<double> evaluate(const PhaseState& z, EvalOrder order) const override {
    ModelEvaluation<double> e(1, order);
    e.theta[0] = z.x()[0];
    e.hamiltonian = z.y()[0];
    if (order != EvalOrder::Value) {
      e.jac_theta(0, 0) = 1.0;
      e.grad_h = {0.0, 1.0};
    }
    return e;
  }
  int dimension() const override { return 1; }
  std::string name() const override { return "flat"; }
};

std::vector<std::pair<ModelPtr, std::function<PhaseState(std::mt19937_64&)>>> registered_models() {
  return {{std::make_shared<LotkaVolterraModel>(), random_lv_point},
          {std::make_shared<MasslessParticleModel>(1.0, 1.0), random_mcp_point},
          {std::make_shared<GuidingCenterModel>(),
           [](std::mt19937_64& rng) { return random_gc_point(rng); }}};
}

}  // namespace

TEST(PhaseState, RejectsMismatchedHalves) {
  EXPECT_THROW(PhaseState({1.0}, {1.0, 2.0}), DomainError);
  EXPECT_THROW(PhaseState(Vec<double>{}, Vec<double>{}), DomainError);
}

TEST(PhaseState, RejectsNonFiniteEntries) {
  EXPECT_THROW(PhaseState({std::numeric_limits<double>::quiet_NaN()}, {1.0}), DomainError);
  EXPECT_THROW(PhaseState({1.0}, {std::numeric_limits<double>::infinity()}), DomainError);
}

TEST(PhaseState, SplitsStackedVector) {
  const PhaseState z = PhaseState::from_vector(Vec<double>{1, 2, 3, 4});
  EXPECT_EQ(z.dim(), 2);
  EXPECT_EQ(z.x(), (Vec<double>{1, 2}));
  EXPECT_EQ(z.y(), (Vec<double>{3, 4}));
  EXPECT_THROW(PhaseState::from_vector(Vec<double>{1, 2, 3}), DomainError);
}

TEST(SymplecticForm, CanonicalIsStandardJ) {
  const ModelPtr m = canonical_wrapper(quadratic_hamiltonian(1));
  const Mat<double> w = symplectic_form(*m, PhaseState({0.3}, {-0.7}));
  EXPECT_EQ(w(0, 0), 0.0);
  EXPECT_EQ(w(0, 1), -1.0);
  EXPECT_EQ(w(1, 0), 1.0);
  EXPECT_EQ(w(1, 1), 0.0);
}

TEST(SymplecticForm, LotkaVolterraEntry) {
  const Mat<double> w = symplectic_form(LotkaVolterraModel{}, PhaseState({1.0}, {1.0}));
  // -d theta / dy at (1, 1) with theta = -ln(y) / x.
  EXPECT_DOUBLE_EQ(w(0, 1), 1.0);
  EXPECT_EQ(w(0, 1) + w(1, 0), 0.0);
}

TEST(SymplecticForm, ExactlySkewOnAllModels) {
  std::mt19937_64 rng(1);
  for (const auto& [model, sample] : registered_models())
    for (int k = 0; k < 50; ++k) {
      const Mat<double> w = symplectic_form(*model, sample(rng));
      EXPECT_EQ(sup_norm(w + w.transpose()), 0.0) << model->name();
    }
}

TEST(VectorField, LotkaVolterraFixedPoint) {
  const Vec<double> f = vector_field(LotkaVolterraModel{}, PhaseState({2.0}, {1.0}));
  EXPECT_NEAR(f[0], 0.0, 1e-15);
  EXPECT_NEAR(f[1], 0.0, 1e-15);
}

TEST(VectorField, LotkaVolterraAtUnitPoint) {
  const Vec<double> f = vector_field(LotkaVolterraModel{}, PhaseState({1.0}, {1.0}));
  EXPECT_NEAR(f[0], 0.0, 1e-15);
  EXPECT_NEAR(f[1], -1.0, 1e-15);
}

TEST(VectorField, DefiningIdentityOnAllModels) {
  std::mt19937_64 rng(2);
  for (const auto& [model, sample] : registered_models())
    for (int k = 0; k < 100; ++k) {
      const PhaseState z = sample(rng);
      const ModelEvaluation<double> e = model->evaluate(z, EvalOrder::First);
      const Vec<double> lhs = symplectic_form(e) * vector_field(e);
      EXPECT_LT(relative_error(lhs, e.grad_h, 1e-6), 1e-10) << model->name();
    }
}

TEST(VectorField, SingularPotentialIsRejected) {
  EXPECT_THROW(vector_field(FlatPotential{}, PhaseState({1.0}, {1.0})), SingularMatrixError);
}

TEST(Gauge, ZeroGaugeLeavesEvaluationUnchanged) {
  const ModelPtr lv = std::make_shared<LotkaVolterraModel>();
  const ModelPtr g = gauge_perturb(lv, zero_gauge(1));
  const PhaseState z({1.3}, {0.8});
  const auto a = lv->evaluate(z, EvalOrder::Second);
  const auto b = g->evaluate(z, EvalOrder::Second);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.hamiltonian, b.hamiltonian);
  EXPECT_EQ(sup_norm(a.jac_theta - b.jac_theta), 0.0);
  EXPECT_EQ(sup_norm(a.hess_theta[0] - b.hess_theta[0]), 0.0);
}

TEST(Gauge, CosineGaugeKeepsVectorField) {
  const ModelPtr lv = std::make_shared<LotkaVolterraModel>();
  const ModelPtr g = gauge_perturb(lv, cosine_gauge(0.5, 2.0));
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const PhaseState z = random_lv_point(rng);
    worst = std::max(worst, relative_error(vector_field(*g, z), vector_field(*lv, z), 1e-12));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Gauge, PotentialActuallyChanges) {
  const ModelPtr lv = std::make_shared<LotkaVolterraModel>();
  const ModelPtr g = gauge_perturb(lv, cosine_gauge(0.5, 2.0));
  const PhaseState z({0.4}, {1.0});
  EXPECT_NEAR(g->evaluate(z, EvalOrder::Value).theta[0] - lv->evaluate(z, EvalOrder::Value).theta[0],
              0.5 * std::cos(0.8), 1e-15);
}
