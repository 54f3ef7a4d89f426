#include "metalab/order_params.hpp"

#include <cmath>
#include <sstream>

namespace metalab {

namespace {

constexpr double kTwoOverPi = 0.63661977236758134308;

void check_symmetric(const Eigen::MatrixXd& A, const char* name) {
  if (A.rows() != A.cols()) {
    std::ostringstream os;
    os << name << " must be square, got " << A.rows() << "x" << A.cols();
    throw std::invalid_argument(os.str());
  }
  const double scale = 1.0 + A.cwiseAbs().maxCoeff();
  const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= 1e-8 * scale)) {
    std::ostringstream os;
    os << name << " must be symmetric (max asymmetry " << asym << ")";
    throw std::invalid_argument(os.str());
  }
}

double clamp_unit(double x) { return x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x); }

}  // namespace

OrderParams::OrderParams(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                         const Eigen::MatrixXd& T) {
  check_symmetric(Q, "Q");
  check_symmetric(T, "T");
  if (R.rows() != Q.rows() || R.cols() != T.rows()) {
    std::ostringstream os;
    os << "R must be K x M = " << Q.rows() << "x" << T.rows() << ", got "
       << R.rows() << "x" << R.cols();
    throw std::invalid_argument(os.str());
  }
  q_ = 0.5 * (Q + Q.transpose());
  t_ = 0.5 * (T + T.transpose());
  r_ = R;
}

OrderParams OrderParams::with_qr(const Eigen::MatrixXd& Q,
                                 const Eigen::MatrixXd& R) const {
  return OrderParams(Q, R, t_);
}

bool OrderParams::all_finite() const {
  return q_.allFinite() && r_.allFinite() && t_.allFinite();
}

Eigen::MatrixXd assemble_covariance(const OrderParams& p,
                                    const std::vector<int>& student_idx,
                                    const std::vector<int>& teacher_idx) {
  const int K = p.K(), M = p.M();
  for (int k : student_idx)
    if (k < 0 || k >= K)
      throw std::invalid_argument("assemble_covariance: student index " +
                                  std::to_string(k) + " out of range [0, " +
                                  std::to_string(K) + ")");
  for (int n : teacher_idx)
    if (n < 0 || n >= M)
      throw std::invalid_argument("assemble_covariance: teacher index " +
                                  std::to_string(n) + " out of range [0, " +
                                  std::to_string(M) + ")");
  const int ns = static_cast<int>(student_idx.size());
  const int nt = static_cast<int>(teacher_idx.size());
  Eigen::MatrixXd c(ns + nt, ns + nt);
  for (int a = 0; a < ns; ++a) {
    for (int b = 0; b < ns; ++b) c(a, b) = p.Q()(student_idx[a], student_idx[b]);
    for (int b = 0; b < nt; ++b)
      c(a, ns + b) = p.R()(student_idx[a], teacher_idx[b]);
  }
  for (int a = 0; a < nt; ++a) {
    for (int b = 0; b < ns; ++b)
      c(ns + a, b) = p.R()(student_idx[b], teacher_idx[a]);
    for (int b = 0; b < nt; ++b)
      c(ns + a, ns + b) = p.T()(teacher_idx[a], teacher_idx[b]);
  }
  return c;
}

Eigen::MatrixXd cosine_similarity(const OrderParams& p) {
  const int K = p.K(), M = p.M();
  Eigen::MatrixXd rho(K, M);
  for (int k = 0; k < K; ++k) {
    const double qkk = p.Q()(k, k);
    if (!(qkk > 0.0)) {
      std::ostringstream os;
      os << "cosine_similarity: degenerate student norm Q(" << k << "," << k
         << ") = " << qkk;
      throw std::domain_error(os.str());
    }
    for (int n = 0; n < M; ++n) {
      const double tnn = p.T()(n, n);
      if (!(tnn > 0.0)) {
        std::ostringstream os;
        os << "cosine_similarity: degenerate teacher norm T(" << n << "," << n
           << ") = " << tnn;
        throw std::domain_error(os.str());
      }
      rho(k, n) = clamp_unit(p.R()(k, n) / std::sqrt(qkk * tnn));
    }
  }
  return rho;
}

namespace {

// Overlap kernel <g(a) g(b)> for unit-slope error-function units:
// (2/pi) asin(cab / sqrt((1+caa)(1+cbb))).
double erf_overlap(double caa, double cab, double cbb) {
  const double denom = std::sqrt((1.0 + caa) * (1.0 + cbb));
  return kTwoOverPi * std::asin(clamp_unit(cab / denom));
}

double eps_erf(const OrderParams& p, const ModelConfig& model, double gamma,
               double sigma_noise2) {
  const int K = p.K(), M = p.M();
  const double g2 = gamma * gamma;
  const Eigen::MatrixXd& Q = p.Q();
  const Eigen::MatrixXd& R = p.R();
  const Eigen::MatrixXd& T = p.T();

  // Per-task teacher fields have variance s_n = gamma^2 T_nn + (1 - gamma^2)
  // and correlate with student fields through gamma R.
  Eigen::VectorXd s(M);
  for (int n = 0; n < M; ++n) s(n) = g2 * T(n, n) + (1.0 - g2);

  double term_teacher = 0.0;
  for (int n = 0; n < M; ++n)
    term_teacher += kTwoOverPi * std::asin(clamp_unit(s(n) / (1.0 + s(n))));

  Eigen::MatrixXd fhat(K, M);  // <g(x_k) g(y~_n)>
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n)
      fhat(k, n) = erf_overlap(Q(k, k), gamma * R(k, n), s(n));

  Eigen::MatrixXd fq(K, K);  // <g(x_k) g(x_l)>
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l) fq(k, l) = erf_overlap(Q(k, k), Q(k, l), Q(l, l));

  double term_cross = fhat.squaredNorm();

  double term_student = 0.0;
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l)
      for (int n = 0; n < M; ++n)
        term_student += fhat(k, n) * fhat(l, n) * fq(k, l);

  const double Kd = static_cast<double>(K), Md = static_cast<double>(M);
  return 0.5 / Md * term_teacher - model.eta_w / (Kd * Md) * term_cross +
         model.eta_w * model.eta_w / (2.0 * Kd * Kd * Md) * term_student +
         0.5 * sigma_noise2;
}

double eps_linear(const OrderParams& p, const ModelConfig& model) {
  const int K = p.K(), M = p.M();
  const Eigen::MatrixXd& Q = p.Q();
  const Eigen::MatrixXd& R = p.R();
  const Eigen::MatrixXd& T = p.T();
  const double Kd = static_cast<double>(K), Md = static_cast<double>(M);
  double term_student = 0.0;
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l)
      for (int n = 0; n < M; ++n)
        term_student += Q(k, l) * R(k, n) * R(l, n);
  return 0.5 / Md * T.trace() - model.eta_w / (Kd * Md) * R.squaredNorm() +
         model.eta_w * model.eta_w / (2.0 * Kd * Kd * Md) * term_student;
}

}  // namespace

double meta_generalization_error(const OrderParams& p, const ModelConfig& model,
                                 const VariantConfig& variant) {
  model.validate();
  variant.validate();
  if (p.K() != model.K || p.M() != model.M)
    throw std::invalid_argument(
        "meta_generalization_error: OrderParams dimensions disagree with "
        "ModelConfig");
  if (variant.activation == Activation::Linear) return eps_linear(p, model);
  return eps_erf(p, model, variant.gamma, variant.sigma_noise2);
}

}  // namespace metalab
