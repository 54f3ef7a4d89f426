#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "metalab/ode.hpp"

using namespace metalab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

OrderParams growth_seed_state() {
  // Narrow-overlap start: isotropic student, graded teacher, overlaps seeded
  // at 1e-12 with deterministic asymmetry so no permutation symmetry survives.
  MatrixXd Q = 0.5 * MatrixXd::Identity(3, 3);
  MatrixXd T = MatrixXd::Zero(3, 3);
  for (int n = 0; n < 3; ++n) T(n, n) = n + 1.0;
  MatrixXd R(3, 3);
  for (int k = 0; k < 3; ++k)
    for (int n = 0; n < 3; ++n) R(k, n) = 1e-12 * (1.0 + 0.13 * k + 0.07 * n);
  return OrderParams(Q, R, T);
}

ModelConfig fast_erf_model() {
  ModelConfig m;
  m.K = 3;
  m.M = 3;
  m.eta_J = 3.0;
  m.eta_w = 9.0;
  m.V = 100;
  return m;
}

}  // namespace

TEST_CASE("plan validation rejects nonsense") {
  IntegrationPlan p;
  p.step = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = IntegrationPlan{};
  p.record_every = -1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = IntegrationPlan{};
  p.min_step = 1.0;
  p.max_step = 0.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("fixed-step integrator nails exponential decay") {
  IntegrationPlan plan;
  plan.alpha_max = 1.0;
  plan.method = OdeMethod::Rk4Fixed;
  plan.step = 0.01;
  plan.record_every = 1.0;
  VectorXd y0(1);
  y0 << 1.0;
  double y_end = 0.0;
  bool ok = integrate_vector_field(
      [](double, const VectorXd& y) { return VectorXd(-y); }, y0, plan,
      [&](double, const VectorXd& y) { y_end = y(0); });
  CHECK(ok);
  CHECK(std::abs(y_end - std::exp(-1.0)) <= 1e-9);
}

TEST_CASE("adaptive integrator meets its tolerance on exponential decay") {
  IntegrationPlan plan;
  plan.alpha_max = 5.0;
  plan.method = OdeMethod::Rkf45Adaptive;
  plan.record_every = 1.0;
  plan.rtol = 1e-10;
  plan.atol = 1e-12;
  std::vector<double> alphas, values;
  VectorXd y0(1);
  y0 << 1.0;
  bool ok = integrate_vector_field(
      [](double, const VectorXd& y) { return VectorXd(-y); }, y0, plan,
      [&](double a, const VectorXd& y) {
        alphas.push_back(a);
        values.push_back(y(0));
      });
  CHECK(ok);
  REQUIRE(alphas.size() == 6);
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    CHECK(alphas[i] == double(i));
    CHECK(std::abs(values[i] - std::exp(-double(i))) <= 1e-8);
  }
}

TEST_CASE("record schedule lands exactly on the requested grid") {
  IntegrationPlan plan;
  plan.alpha_max = 2.0;
  plan.record_every = 0.5;
  plan.step = 0.1;
  std::vector<double> alphas;
  VectorXd y0 = VectorXd::Zero(1);
  integrate_vector_field(
      [](double, const VectorXd& y) { return VectorXd(0.0 * y); }, y0, plan,
      [&](double a, const VectorXd&) { alphas.push_back(a); });
  REQUIRE(alphas.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(alphas[i] == 0.5 * i);

  // A non-divisible horizon still ends exactly at alpha_max.
  plan.alpha_max = 1.3;
  alphas.clear();
  integrate_vector_field(
      [](double, const VectorXd& y) { return VectorXd(0.0 * y); }, y0, plan,
      [&](double a, const VectorXd&) { alphas.push_back(a); });
  CHECK(alphas.back() == 1.3);
}

TEST_CASE("finite-time blow-up yields a partial run, not an exception") {
  IntegrationPlan plan;
  plan.alpha_max = 2.0;
  plan.record_every = 0.1;
  plan.step = 0.01;
  std::vector<double> alphas;
  VectorXd y0(1);
  y0 << 1.0;
  // dy/da = y^2 from y(0)=1 is singular at a=1.
  bool ok = integrate_vector_field(
      [](double, const VectorXd& y) {
        return VectorXd(y.array().square().matrix());
      },
      y0, plan, [&](double a, const VectorXd&) { alphas.push_back(a); });
  CHECK_FALSE(ok);
  CHECK(alphas.back() < 1.05);
  CHECK(alphas.back() >= 0.8);
}

TEST_CASE("zero-overlap initial state stays constant") {
  MatrixXd Q = 0.5 * MatrixXd::Identity(3, 3);
  MatrixXd T = MatrixXd::Identity(3, 3);
  OrderParams init(Q, MatrixXd::Zero(3, 3), T);
  IntegrationPlan plan;
  plan.alpha_max = 10.0;
  plan.record_every = 2.0;
  VariantConfig v;
  Trajectory traj = integrate(init, fast_erf_model(), v, plan);
  CHECK(traj.completed);
  REQUIRE(traj.states.size() == 6);
  for (const auto& st : traj.states) {
    CHECK((st.Q() - Q).cwiseAbs().maxCoeff() == 0.0);
    CHECK(st.R().cwiseAbs().maxCoeff() == 0.0);
  }
  for (double e : traj.eps) CHECK(e == traj.eps.front());
}

TEST_CASE("theory trajectories are deterministic") {
  IntegrationPlan plan;
  plan.alpha_max = 20.0;
  plan.record_every = 1.0;
  VariantConfig v;
  Trajectory a = integrate(growth_seed_state(), fast_erf_model(), v, plan);
  Trajectory b = integrate(growth_seed_state(), fast_erf_model(), v, plan);
  REQUIRE(a.states.size() == b.states.size());
  for (std::size_t i = 0; i < a.states.size(); ++i) {
    CHECK((a.states[i].Q() - b.states[i].Q()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.states[i].R() - b.states[i].R()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.eps[i] == b.eps[i]);
  }
}

TEST_CASE("fixed-step solver converges at fourth order") {
  VariantConfig v;
  ModelConfig m = fast_erf_model();
  auto r13_at_50 = [&](double step) {
    IntegrationPlan plan;
    plan.alpha_max = 50.0;
    plan.record_every = 50.0;
    plan.step = step;
    Trajectory t = integrate(growth_seed_state(), m, v, plan);
    REQUIRE(t.completed);
    return t.states.back().R()(0, 2);
  };
  double ref = r13_at_50(0.0125);
  double e1 = std::abs(r13_at_50(0.2) - ref);
  double e2 = std::abs(r13_at_50(0.1) - ref);
  REQUIRE(e2 > 0.0);
  double ratio = e1 / e2;
  CHECK(ratio >= 5.0);   // fourth order predicts ~16x per halving
  CHECK(ratio <= 50.0);
}

TEST_CASE("adaptive and fixed-step solvers agree on the overlap flow") {
  VariantConfig v;
  ModelConfig m = fast_erf_model();
  IntegrationPlan fixed;
  fixed.alpha_max = 50.0;
  fixed.record_every = 10.0;
  fixed.step = 1e-3;
  IntegrationPlan adaptive = fixed;
  adaptive.method = OdeMethod::Rkf45Adaptive;
  adaptive.rtol = 1e-8;
  adaptive.atol = 1e-12;
  Trajectory a = integrate(growth_seed_state(), m, v, fixed);
  Trajectory b = integrate(growth_seed_state(), m, v, adaptive);
  REQUIRE(a.states.size() == b.states.size());
  for (std::size_t i = 0; i < a.states.size(); ++i) {
    CHECK((a.states[i].Q() - b.states[i].Q()).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((a.states[i].R() - b.states[i].R()).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("diverging overlap flow aborts into a partial trajectory") {
  // Identity activation with oversized rates is unstable and overflows.
  MatrixXd Q = MatrixXd::Identity(2, 2);
  MatrixXd T = MatrixXd::Identity(2, 2);
  MatrixXd R = 0.5 * MatrixXd::Ones(2, 2);
  OrderParams init(Q, R, T);
  ModelConfig m;
  m.K = 2;
  m.M = 2;
  m.eta_J = 40.0;
  m.eta_w = 40.0;
  VariantConfig v;
  v.activation = Activation::Linear;
  IntegrationPlan plan;
  plan.alpha_max = 10.0;
  plan.record_every = 0.5;
  plan.step = 0.01;
  Trajectory traj = integrate(init, m, v, plan);
  CHECK_FALSE(traj.completed);
  CHECK(traj.last_alpha < 10.0);
  CHECK(traj.alpha.size() == traj.states.size());
  for (const auto& st : traj.states) CHECK(st.all_finite());
}

TEST_CASE("threshold crossing interpolates recorded samples") {
  Trajectory traj;
  traj.alpha = {0, 100, 200, 300, 400, 500};
  traj.eps = {0.02, 0.018, 0.016, 0.014, 0.012, 0.01};

  CrossingReport rep = first_crossing(traj, eps_threshold_config(0.01));
  CHECK(rep.crossed);
  CHECK(rep.alpha_tilde == 500.0);

  rep = first_crossing(traj, eps_threshold_config(0.013));
  CHECK(rep.crossed);
  CHECK(rep.alpha_tilde == doctest::Approx(350.0).epsilon(1e-12));

  rep = first_crossing(traj, eps_threshold_config(0.005));
  CHECK_FALSE(rep.crossed);

  rep = first_crossing(traj, eps_threshold_config(0.5));
  CHECK(rep.crossed);
  CHECK(rep.alpha_tilde == 0.0);

  CHECK_THROWS_AS(first_crossing(traj, CrossingEvent{0.0}),
                  std::invalid_argument);
}

TEST_CASE("crossing detector ignores non-finite samples") {
  Trajectory traj;
  traj.alpha = {0.0, 1.0, 2.0};
  traj.eps = {0.02, std::nan(""), 0.02};
  CHECK_FALSE(first_crossing(traj, eps_threshold_config(0.01)).crossed);
}
