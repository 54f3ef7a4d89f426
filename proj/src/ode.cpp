#include "metalab/ode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace metalab {

void IntegrationPlan::validate() const {
  if (!(alpha_max > 0.0))
    throw std::invalid_argument("plan.alpha_max must be > 0");
  if (!(step > 0.0)) throw std::invalid_argument("plan.step must be > 0");
  if (!(record_every > 0.0))
    throw std::invalid_argument("plan.record_every must be > 0");
  if (!(rtol > 0.0) || !(atol > 0.0))
    throw std::invalid_argument("plan.rtol and plan.atol must be > 0");
  if (!(min_step > 0.0) || !(max_step > min_step))
    throw std::invalid_argument("plan requires 0 < min_step < max_step");
}

namespace {

using Vec = Eigen::VectorXd;
using Field = std::function<Vec(double, const Vec&)>;

bool rk4_span(const Field& f, double a0, double a1, double h_target, Vec& y) {
  const int n_sub = std::max(
      1, static_cast<int>(std::ceil((a1 - a0) / h_target - 1e-12)));
  const double h = (a1 - a0) / n_sub;
  for (int i = 0; i < n_sub; ++i) {
    const double a = a0 + i * h;
    const Vec k1 = f(a, y);
    const Vec k2 = f(a + 0.5 * h, y + 0.5 * h * k1);
    const Vec k3 = f(a + 0.5 * h, y + 0.5 * h * k2);
    const Vec k4 = f(a + h, y + h * k3);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!y.allFinite()) return false;
  }
  return true;
}

// Fehlberg 4(5) pair; advances with the fifth-order solution.
bool rkf45_span(const Field& f, double a0, double a1, const IntegrationPlan& p,
                Vec& y, double& h) {
  double a = a0;
  while (a < a1 - 1e-14 * std::max(1.0, std::abs(a1))) {
    h = std::clamp(h, p.min_step, p.max_step);
    double hs = std::min(h, a1 - a);
    const Vec k1 = f(a, y);
    const Vec k2 = f(a + 0.25 * hs, y + hs * (0.25 * k1));
    const Vec k3 =
        f(a + 0.375 * hs, y + hs * (3.0 / 32.0 * k1 + 9.0 / 32.0 * k2));
    const Vec k4 = f(a + 12.0 / 13.0 * hs,
                     y + hs * (1932.0 / 2197.0 * k1 - 7200.0 / 2197.0 * k2 +
                               7296.0 / 2197.0 * k3));
    const Vec k5 = f(a + hs, y + hs * (439.0 / 216.0 * k1 - 8.0 * k2 +
                                       3680.0 / 513.0 * k3 -
                                       845.0 / 4104.0 * k4));
    const Vec k6 = f(a + 0.5 * hs,
                     y + hs * (-8.0 / 27.0 * k1 + 2.0 * k2 -
                               3544.0 / 2565.0 * k3 + 1859.0 / 4104.0 * k4 -
                               11.0 / 40.0 * k5));
    const Vec y5 = y + hs * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3 +
                             28561.0 / 56430.0 * k4 - 9.0 / 50.0 * k5 +
                             2.0 / 55.0 * k6);
    const Vec y4 = y + hs * (25.0 / 216.0 * k1 + 1408.0 / 2565.0 * k3 +
                             2197.0 / 4104.0 * k4 - 0.2 * k5);
    if (!y5.allFinite() || !y4.allFinite()) return false;

    double err = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double scale =
          p.atol + p.rtol * std::max(std::abs(y(i)), std::abs(y5(i)));
      err = std::max(err, std::abs(y5(i) - y4(i)) / scale);
    }
    if (err <= 1.0) {
      y = y5;
      a += hs;
    } else if (hs <= p.min_step + 1e-18) {
      return false;  // cannot shrink further: treat as numerical blow-up
    }
    const double growth =
        err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
    h = hs * std::clamp(growth, 0.2, 5.0);
  }
  return true;
}

}  // namespace

bool integrate_vector_field(const Field& f, const Vec& y0,
                            const IntegrationPlan& plan,
                            const std::function<void(double, const Vec&)>& record) {
  plan.validate();
  Vec y = y0;
  record(0.0, y);
  const std::int64_t n_rec = static_cast<std::int64_t>(
      std::ceil(plan.alpha_max / plan.record_every - 1e-12));
  double h_adaptive = std::min(plan.max_step, plan.record_every);
  double a_prev = 0.0;
  for (std::int64_t j = 1; j <= n_rec; ++j) {
    const double a_next = std::min(j * plan.record_every, plan.alpha_max);
    bool ok = plan.method == OdeMethod::Rk4Fixed
                  ? rk4_span(f, a_prev, a_next, plan.step, y)
                  : rkf45_span(f, a_prev, a_next, plan, y, h_adaptive);
    if (!ok) return false;
    record(a_next, y);
    a_prev = a_next;
  }
  return true;
}

namespace {

// Flat packing of the evolving state: R row-major, then the upper triangle of
// Q row-major.  T never enters the vector.
void pack(const Eigen::MatrixXd& R, const Eigen::MatrixXd& Q, Vec& y) {
  const int K = static_cast<int>(Q.rows()), M = static_cast<int>(R.cols());
  y.resize(K * M + K * (K + 1) / 2);
  int at = 0;
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n) y(at++) = R(k, n);
  for (int k = 0; k < K; ++k)
    for (int l = k; l < K; ++l) y(at++) = Q(k, l);
}

void unpack(const Vec& y, Eigen::MatrixXd& R, Eigen::MatrixXd& Q, int K, int M) {
  int at = 0;
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n) R(k, n) = y(at++);
  for (int k = 0; k < K; ++k)
    for (int l = k; l < K; ++l) {
      Q(k, l) = y(at);
      Q(l, k) = y(at);
      ++at;
    }
}

}  // namespace

Trajectory integrate(const OrderParams& init, const ModelConfig& config,
                     const VariantConfig& variant, const IntegrationPlan& plan) {
  config.validate();
  variant.validate();
  plan.validate();
  const int K = init.K(), M = init.M();

  Field f = [&](double, const Vec& y) {
    // A diverging state can leave the admissible covariance region or go
    // non-finite before the stepper notices; surface both as a blow-up (NaN
    // derivative), not an exception, so the caller gets a partial trajectory.
    if (!y.allFinite())
      return Vec(Vec::Constant(y.size(),
                               std::numeric_limits<double>::quiet_NaN()));
    Eigen::MatrixXd Rl(K, M), Ql(K, K);
    unpack(y, Rl, Ql, K, M);
    try {
      const RhsOutput d = rhs(init.with_qr(Ql, Rl), config, variant);
      Vec dy;
      pack(d.dR, d.dQ, dy);
      return dy;
    } catch (const std::domain_error&) {
      return Vec(Vec::Constant(y.size(),
                               std::numeric_limits<double>::quiet_NaN()));
    }
  };

  Trajectory traj;
  auto record = [&](double a, const Vec& y) {
    Eigen::MatrixXd Rl(K, M), Ql(K, K);
    unpack(y, Rl, Ql, K, M);
    OrderParams p = init.with_qr(Ql, Rl);
    traj.alpha.push_back(a);
    try {
      traj.eps.push_back(meta_generalization_error(p, config, variant));
    } catch (const std::domain_error&) {
      traj.eps.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    try {
      traj.rho.push_back(cosine_similarity(p));
    } catch (const std::domain_error&) {
      traj.rho.push_back(Eigen::MatrixXd::Constant(
          K, M, std::numeric_limits<double>::quiet_NaN()));
    }
    traj.states.push_back(std::move(p));
    traj.last_alpha = a;
  };

  Vec y0;
  pack(init.R(), init.Q(), y0);
  traj.completed = integrate_vector_field(f, y0, plan, record);
  return traj;
}

CrossingReport first_crossing(const Trajectory& traj,
                              const CrossingEvent& event) {
  if (!(event.threshold > 0.0))
    throw std::invalid_argument("first_crossing: threshold must be > 0");
  CrossingReport rep;
  if (traj.eps.empty()) return rep;
  if (traj.eps.front() <= event.threshold) {
    rep.crossed = true;
    rep.alpha_tilde = 0.0;
    return rep;
  }
  for (std::size_t i = 1; i < traj.eps.size(); ++i) {
    if (traj.eps[i] <= event.threshold) {
      const double e0 = traj.eps[i - 1], e1 = traj.eps[i];
      const double a0 = traj.alpha[i - 1], a1 = traj.alpha[i];
      rep.crossed = true;
      rep.alpha_tilde =
          e0 == e1 ? a1 : a0 + (e0 - event.threshold) * (a1 - a0) / (e0 - e1);
      return rep;
    }
  }
  return rep;
}

}  // namespace metalab
