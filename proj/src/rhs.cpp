#include "metalab/rhs.hpp"

#include <cmath>
#include <sstream>

#include "metalab/integrals.hpp"

namespace metalab {

namespace {

// Shared erf-activation flow.  The task-teacher pre-activations are
// y~_n = (gamma B_n + sqrt(1-gamma^2) DeltaB_n) . xi, which at leading order
// in N are jointly Gaussian with the student fields x_k = J_k . xi under
//   cov(x_k, x_l)   = Q_kl
//   cov(x_k, y~_n)  = gamma R_kn
//   cov(y~_n, y~_m) = gamma^2 T_nm + (1-gamma^2) delta_nm
// while the static teacher fields y_n = B_n . xi (the linear argument of the
// R flow) keep cov(y_n, x_k) = R_kn, cov(y_n, y~_m) = gamma T_nm.  gamma = 1
// collapses every entry onto the plain overlaps, so the base flow is the
// gamma = 1 special case of this routine.
RhsOutput rhs_erf(const OrderParams& p, const ModelConfig& cfg, double gamma,
                  double lambda, double sigma_noise2) {
  const int K = p.K(), M = p.M();
  const Eigen::MatrixXd& Q = p.Q();
  const Eigen::MatrixXd& R = p.R();
  const Eigen::MatrixXd& T = p.T();
  const double g2 = gamma * gamma;
  const double Kd = K, Md = M;
  const double Vd = static_cast<double>(cfg.V);
  const double ew = cfg.eta_w, eJ = cfg.eta_J;

  // Variance of a task-teacher field and pairwise task-teacher covariance.
  Eigen::VectorXd s(M);
  for (int n = 0; n < M; ++n) s(n) = g2 * T(n, n) + (1.0 - g2);
  auto ct = [&](int n, int m) {
    return g2 * T(n, m) + (n == m ? (1.0 - g2) : 0.0);
  };

  // f~_km = <g(x_k) g(y~_m)>: appears in every term.
  Eigen::MatrixXd f(K, M);
  for (int k = 0; k < K; ++k)
    for (int m = 0; m < M; ++m)
      f(k, m) = i2(Q(k, k), gamma * R(k, m), s(m));
  const Eigen::MatrixXd G = f * f.transpose();  // G_ik = sum_m f_im f_km

  const double c1 = eJ * ew / (Kd * Md);
  const double c2 = eJ * ew * ew / (Kd * Kd * Md);
  const double c3 = eJ * eJ * ew * ew / (Vd * Kd * Kd * Md * Md);
  const double c4 = 2.0 * eJ * eJ * ew * ew * ew / (Vd * Kd * Kd * Kd * Md * Md);
  const double c5 =
      eJ * eJ * ew * ew * ew * ew / (Vd * Kd * Kd * Kd * Kd * Md * Md);
  const double c_noise =
      eJ * eJ * ew * ew * sigma_noise2 / (Vd * Kd * Kd * Md);

  RhsOutput out;
  out.dR.resize(K, M);
  out.dQ.resize(K, K);

  Eigen::Matrix3d c3m;
  Eigen::Matrix4d c4m;

  // ---- R flow --------------------------------------------------------------
  for (int k = 0; k < K; ++k) {
    for (int n = 0; n < M; ++n) {
      double t1 = 0.0;
      for (int m = 0; m < M; ++m) {
        c3m << Q(k, k), R(k, n), gamma * R(k, m),
               R(k, n), T(n, n), gamma * T(n, m),
               gamma * R(k, m), gamma * T(n, m), s(m);
        t1 += f(k, m) * i3(c3m);
      }
      double t2 = 0.0;
      for (int i = 0; i < K; ++i) {
        c3m << Q(k, k), R(k, n), Q(k, i),
               R(k, n), T(n, n), R(i, n),
               Q(k, i), R(i, n), Q(i, i);
        t2 += G(i, k) * i3(c3m);
      }
      out.dR(k, n) = c1 * t1 - c2 * t2 - lambda * eJ * R(k, n);
    }
  }

  // ---- Q flow --------------------------------------------------------------
  for (int k = 0; k < K; ++k) {
    for (int l = k; l < K; ++l) {
      double t1 = 0.0;
      for (int n = 0; n < M; ++n) {
        c3m << Q(k, k), Q(k, l), gamma * R(k, n),
               Q(k, l), Q(l, l), gamma * R(l, n),
               gamma * R(k, n), gamma * R(l, n), s(n);
        t1 += f(k, n) * i3(c3m);
        c3m << Q(l, l), Q(k, l), gamma * R(l, n),
               Q(k, l), Q(k, k), gamma * R(k, n),
               gamma * R(l, n), gamma * R(k, n), s(n);
        t1 += f(l, n) * i3(c3m);
      }

      double t2 = 0.0;
      for (int i = 0; i < K; ++i) {
        c3m << Q(k, k), Q(k, l), Q(k, i),
               Q(k, l), Q(l, l), Q(l, i),
               Q(k, i), Q(l, i), Q(i, i);
        t2 += G(i, k) * i3(c3m);
        c3m << Q(l, l), Q(k, l), Q(l, i),
               Q(k, l), Q(k, k), Q(k, i),
               Q(l, i), Q(k, i), Q(i, i);
        t2 += G(i, l) * i3(c3m);
      }

      // Same-field and cross-field quadratic label terms.
      double t3 = 0.0;
      for (int n = 0; n < M; ++n) {
        c4m << Q(k, k), Q(k, l), gamma * R(k, n), gamma * R(k, n),
               Q(k, l), Q(l, l), gamma * R(l, n), gamma * R(l, n),
               gamma * R(k, n), gamma * R(l, n), s(n), s(n),
               gamma * R(k, n), gamma * R(l, n), s(n), s(n);
        t3 += G(k, l) * i4(c4m);
        for (int m = 0; m < M; ++m) {
          c4m << Q(k, k), Q(k, l), gamma * R(k, n), gamma * R(k, m),
                 Q(k, l), Q(l, l), gamma * R(l, n), gamma * R(l, m),
                 gamma * R(k, n), gamma * R(l, n), s(n), ct(n, m),
                 gamma * R(k, m), gamma * R(l, m), ct(n, m), s(m);
          t3 += (f(k, n) * f(l, m) + f(k, m) * f(l, n)) * i4(c4m);
        }
      }

      double t4 = 0.0;
      for (int i = 0; i < K; ++i) {
        for (int n = 0; n < M; ++n) {
          const double wgt =
              f(i, n) * G(k, l) + G(i, l) * f(k, n) + G(i, k) * f(l, n);
          c4m << Q(k, k), Q(k, l), gamma * R(k, n), Q(k, i),
                 Q(k, l), Q(l, l), gamma * R(l, n), Q(l, i),
                 gamma * R(k, n), gamma * R(l, n), s(n), gamma * R(i, n),
                 Q(k, i), Q(l, i), gamma * R(i, n), Q(i, i);
          t4 += wgt * i4(c4m);
        }
      }

      double t5 = 0.0;
      for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j) {
          const double wgt =
              G(i, j) * G(k, l) + G(i, k) * G(j, l) + G(i, l) * G(j, k);
          c4m << Q(k, k), Q(k, l), Q(k, i), Q(k, j),
                 Q(k, l), Q(l, l), Q(l, i), Q(l, j),
                 Q(k, i), Q(l, i), Q(i, i), Q(i, j),
                 Q(k, j), Q(l, j), Q(i, j), Q(j, j);
          t5 += wgt * i4(c4m);
        }
      }

      double val = c1 * t1 - c2 * t2 + c3 * t3 - c4 * t4 + c5 * t5 -
                   2.0 * lambda * eJ * Q(k, l);
      if (sigma_noise2 > 0.0)
        val += c_noise * G(k, l) * i2_prime(Q(k, k), Q(k, l), Q(l, l));
      out.dQ(k, l) = val;
      out.dQ(l, k) = val;
    }
  }
  return out;
}

}  // namespace

RhsOutput rhs_base(const OrderParams& params, const ModelConfig& config) {
  config.validate();
  if (params.K() != config.K || params.M() != config.M)
    throw std::invalid_argument("rhs_base: OrderParams/ModelConfig dimension mismatch");
  return rhs_erf(params, config, 1.0, 0.0, 0.0);
}

RhsOutput rhs_l2_noise(const OrderParams& params, const ModelConfig& config,
                       const VariantConfig& variant) {
  config.validate();
  variant.validate();
  if (variant.activation != Activation::Erf)
    throw std::invalid_argument("rhs_l2_noise: requires erf activation");
  if (params.K() != config.K || params.M() != config.M)
    throw std::invalid_argument("rhs_l2_noise: dimension mismatch");
  return rhs_erf(params, config, 1.0, variant.lambda, variant.sigma_noise2);
}

RhsOutput rhs_gamma(const OrderParams& params, const ModelConfig& config,
                    const VariantConfig& variant) {
  config.validate();
  variant.validate();
  if (variant.activation != Activation::Erf)
    throw std::invalid_argument("rhs_gamma: requires erf activation");
  if (!(variant.gamma > 0.0))
    throw std::invalid_argument("rhs_gamma: gamma=0 rejected (teacher variability model assumes gamma near 1)");
  if (params.K() != config.K || params.M() != config.M)
    throw std::invalid_argument("rhs_gamma: dimension mismatch");
  return rhs_erf(params, config, variant.gamma, 0.0, 0.0);
}

RhsOutput rhs_linear(const OrderParams& params, const ModelConfig& config) {
  config.validate();
  if (params.K() != config.K || params.M() != config.M)
    throw std::invalid_argument("rhs_linear: dimension mismatch");
  const Eigen::MatrixXd& Q = params.Q();
  const Eigen::MatrixXd& R = params.R();
  const Eigen::MatrixXd& T = params.T();
  const double Kd = params.K(), Md = params.M();
  const double Vd = static_cast<double>(config.V);
  const double ew = config.eta_w, eJ = config.eta_J;

  const double c1 = eJ * ew / (Kd * Md);
  const double c2 = eJ * ew * ew / (Kd * Kd * Md);
  const double c3 = eJ * eJ * ew * ew / (Vd * Kd * Kd * Md * Md);
  const double c4 = 2.0 * eJ * eJ * ew * ew * ew / (Vd * Kd * Kd * Kd * Md * Md);
  const double c5 =
      eJ * eJ * ew * ew * ew * ew / (Vd * Kd * Kd * Kd * Kd * Md * Md);

  const Eigen::MatrixXd S = R * R.transpose();
  const Eigen::MatrixXd RTRt = R * T * R.transpose();
  const Eigen::MatrixXd SS = S * S;
  const Eigen::MatrixXd SQS = S * Q * S;
  const double r2 = R.squaredNorm();
  const double qs = (Q.array() * S.array()).sum();

  RhsOutput out;
  out.dR = c1 * R * T - c2 * R * (R.transpose() * R);
  Eigen::MatrixXd dQ = 2.0 * c1 * S - c2 * (Q * S + S * Q) +
                       c3 * (T.trace() * S + 2.0 * RTRt) -
                       c4 * (r2 * S + 2.0 * SS) + c5 * (qs * S + 2.0 * SQS);
  out.dQ = 0.5 * (dQ + dQ.transpose());
  return out;
}

RhsOutput rhs(const OrderParams& params, const ModelConfig& config,
              const VariantConfig& variant) {
  variant.validate();
  if (variant.activation == Activation::Linear)
    return rhs_linear(params, config);
  if (variant.gamma < 1.0) return rhs_gamma(params, config, variant);
  if (variant.lambda > 0.0 || variant.sigma_noise2 > 0.0)
    return rhs_l2_noise(params, config, variant);
  return rhs_base(params, config);
}

CrossingEvent eps_threshold_config(double threshold) {
  if (!(threshold > 0.0))
    throw std::invalid_argument("eps_threshold_config: threshold must be > 0");
  return CrossingEvent{threshold};
}

}  // namespace metalab
