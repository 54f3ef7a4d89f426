#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>

namespace metalab {

// Small covariance block over a handful of jointly Gaussian local fields.
struct CovBlock {
  Eigen::MatrixXd c;

  int dim() const { return static_cast<int>(c.rows()); }
  // Symmetry + eigenvalue positive-semidefiniteness check (tolerance relative
  // to the largest diagonal entry).  Throws std::domain_error on failure.
  void validate(double tol = 1e-10) const;
};

// Closed-form Gaussian expectations for error-function units
// g(x) = erf(x / sqrt(2)),  g'(x) = sqrt(2/pi) exp(-x^2 / 2),
// with (v1, .., vd) ~ N(0, c).  Covariance rows follow the argument order
// written in each comment.

// i2: <g(v1) g(v2)>
double i2(double c11, double c12, double c22);

// i2_prime: <g'(v1) g'(v2)> = (2/pi) / sqrt(det(I + c))
double i2_prime(double c11, double c12, double c22);

// i3: <g'(v1) v2 g(v3)>; c is the 3x3 covariance of (v1, v2, v3).
double i3(const Eigen::Matrix3d& c);

// i4: <g'(v1) g'(v2) g(v3) g(v4)>; c is the 4x4 covariance of (v1..v4).
double i4(const Eigen::Matrix4d& c);

// i3_gprime2: <g'(v1) g'(v2) g'(v3)^2> = (4/pi^2) det(I + A c)^(-1/2) with
// A = diag(1, 1, 2).  Second-moment kernel used by the task-variability flow.
double i3_gprime2(const Eigen::Matrix3d& c);

enum class IntegralKind { I2, I2Prime, I3, I4 };

std::string to_string(IntegralKind kind);

// Independent oracle: tensor-product Gauss-Hermite evaluation of the same
// expectations.  Accuracy with the default node count is ~1e-12 for dims <= 3
// and better than 1e-8 for dim 4 on covariances with O(1) entries; the
// validation suite checks closed forms against it at 1e-6.
double quadrature_oracle(IntegralKind kind, const Eigen::MatrixXd& c,
                         int nodes = 40);

// Generic Gauss-Hermite expectation E[f(v)], v ~ N(0, c).  Slower than
// quadrature_oracle but accepts arbitrary integrands (test use).
double gauss_expect(const std::function<double(const Eigen::VectorXd&)>& f,
                    const Eigen::MatrixXd& c, int nodes = 40);

// Physicists' Gauss-Hermite rule: nodes and weights for weight exp(-z^2).
void gauss_hermite_rule(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights);

// Random PSD covariance with mixed scales, deterministic in (seed, index).
Eigen::MatrixXd random_psd_cov(int dim, std::uint64_t seed, std::uint64_t index);

// Closed-form-vs-oracle sweep over random covariances.
struct IntegralValidationReport {
  std::int64_t count_per_kind = 0;
  double tolerance = 0.0;
  double max_abs_err[4] = {0.0, 0.0, 0.0, 0.0};  // indexed by IntegralKind
  std::int64_t failures[4] = {0, 0, 0, 0};
  bool pass = false;
};

IntegralValidationReport validate_integrals(std::int64_t count_per_kind,
                                            double tolerance,
                                            std::uint64_t seed, int jobs);

}  // namespace metalab
