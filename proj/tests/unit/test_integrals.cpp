#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "metalab/integrals.hpp"

using namespace metalab;
using Eigen::Matrix3d;
using Eigen::Matrix4d;
using Eigen::MatrixXd;

namespace {

constexpr double kPi = 3.14159265358979323846;

MatrixXd mat2(double c11, double c12, double c22) {
  MatrixXd c(2, 2);
  c << c11, c12, c12, c22;
  return c;
}

}  // namespace

TEST_CASE("two-point overlap: exact values") {
  CHECK(i2(1.0, 0.0, 1.0) == 0.0);  // independent fields, odd integrand
  CHECK(i2(1.0, 1.0, 1.0) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-15));  // (2/pi) asin(1/2)
  double v = i2(0.5, 0.7, 2.0);
  CHECK(v == doctest::Approx(0.21410).epsilon(1e-4));
  CHECK(v == doctest::Approx(quadrature_oracle(IntegralKind::I2,
                                               mat2(0.5, 0.7, 2.0)))
                 .epsilon(1e-10));
}

TEST_CASE("two-point slope overlap: exact values") {
  CHECK(i2_prime(0.0, 0.0, 0.0) ==
        doctest::Approx(2.0 / kPi).epsilon(1e-15));
  CHECK(i2_prime(1.0, 0.0, 1.0) ==
        doctest::Approx(1.0 / kPi).epsilon(1e-15));
  CHECK(i2_prime(1.0, 1.0, 1.0) ==
        doctest::Approx(2.0 / (kPi * std::sqrt(3.0))).epsilon(1e-15));
  CHECK(i2_prime(0.4, -0.2, 1.3) ==
        doctest::Approx(quadrature_oracle(IntegralKind::I2Prime,
                                          mat2(0.4, -0.2, 1.3)))
            .epsilon(1e-10));
}

TEST_CASE("three-point overlap: exact values") {
  Matrix3d diag = Matrix3d::Identity();
  CHECK(i3(diag) == 0.0);  // <y> factors out of uncorrelated fields

  Matrix3d ones = Matrix3d::Ones();
  CHECK(i3(ones) ==
        doctest::Approx(1.0 / (kPi * std::sqrt(3.0))).epsilon(1e-14));
  CHECK(i3(ones) == doctest::Approx(0.18378).epsilon(5e-5));

  Matrix3d c;
  c << 1.2, 0.3, -0.4, 0.3, 0.9, 0.2, -0.4, 0.2, 1.7;
  CHECK(i3(c) ==
        doctest::Approx(quadrature_oracle(IntegralKind::I3, c)).epsilon(1e-9));
}

TEST_CASE("four-point overlap: exact values") {
  Matrix4d blockdiag = Matrix4d::Identity();
  blockdiag(0, 1) = blockdiag(1, 0) = 0.5;
  // Rows 3,4 uncorrelated with everything: <g(y)> = 0 factors out.
  CHECK(i4(blockdiag) == doctest::Approx(0.0).epsilon(1e-14));

  Matrix4d ones = Matrix4d::Ones();
  // Hand-evaluated shape factors: L4 = 3, L1 = L2 = 4, L0 = 1.
  double want = 4.0 / (kPi * kPi) * std::asin(0.25) / std::sqrt(3.0);
  CHECK(i4(ones) == doctest::Approx(want).epsilon(1e-14));
  CHECK(i4(ones) == doctest::Approx(0.05913).epsilon(2e-5));

  Matrix4d c;
  c << 1.0, 0.2, -0.1, 0.3,
       0.2, 1.5, 0.4, 0.0,
      -0.1, 0.4, 0.8, 0.25,
       0.3, 0.0, 0.25, 1.1;
  CHECK(i4(c) ==
        doctest::Approx(quadrature_oracle(IntegralKind::I4, c)).epsilon(1e-7));
}

TEST_CASE("squared-slope triple overlap matches quadrature") {
  Matrix3d c;
  c << 1.0, 0.3, 0.2, 0.3, 0.8, -0.1, 0.2, -0.1, 1.4;
  double closed = i3_gprime2(c);
  // Oracle built from the generic expectation: <g'(v1) g'(v2) g'(v3)^2>.
  double raw = gauss_expect(
      [](const Eigen::VectorXd& v) {
        const double a = 2.0 / kPi;
        double g1 = std::exp(-0.5 * v(0) * v(0));
        double g2 = std::exp(-0.5 * v(1) * v(1));
        double g3 = std::exp(-v(2) * v(2));
        return a * a * g1 * g2 * g3;
      },
      c);
  CHECK(closed == doctest::Approx(raw).epsilon(1e-10));
}

TEST_CASE("quadrature oracle self-checks") {
  CHECK(std::abs(quadrature_oracle(IntegralKind::I2, mat2(1.0, 0.0, 1.0))) <=
        1e-10);
  CHECK(quadrature_oracle(IntegralKind::I2, mat2(1.0, 1.0, 1.0)) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-8));
}

TEST_CASE("generic gaussian expectation reproduces moments") {
  MatrixXd c = mat2(1.3, 0.6, 0.9);
  CHECK(gauss_expect([](const Eigen::VectorXd& v) { return v(0) * v(0); }, c) ==
        doctest::Approx(1.3).epsilon(1e-12));
  CHECK(gauss_expect([](const Eigen::VectorXd& v) { return v(0) * v(1); }, c) ==
        doctest::Approx(0.6).epsilon(1e-12));
  CHECK(gauss_expect(
            [](const Eigen::VectorXd& v) { return v(0) * v(0) * v(1) * v(1); },
            c) == doctest::Approx(1.3 * 0.9 + 2.0 * 0.6 * 0.6).epsilon(1e-12));
}

TEST_CASE("gauss-hermite rule integrates exp(-z^2) weights exactly") {
  Eigen::VectorXd nodes, weights;
  gauss_hermite_rule(7, nodes, weights);
  CHECK(nodes.size() == 7);
  CHECK(weights.sum() == doctest::Approx(std::sqrt(kPi)).epsilon(1e-13));
  // Symmetry of the rule.
  for (int i = 0; i < 3; ++i) {
    CHECK(nodes(i) == doctest::Approx(-nodes(6 - i)).epsilon(1e-13));
    CHECK(weights(i) == doctest::Approx(weights(6 - i)).epsilon(1e-13));
  }
  // Second moment of exp(-z^2): integral z^2 e^{-z^2} dz = sqrt(pi)/2.
  double m2 = 0.0;
  for (int i = 0; i < 7; ++i) m2 += weights(i) * nodes(i) * nodes(i);
  CHECK(m2 == doctest::Approx(std::sqrt(kPi) / 2.0).epsilon(1e-13));
}

TEST_CASE("covariance validation rejects indefinite and asymmetric blocks") {
  CovBlock good{mat2(1.0, 0.5, 1.0)};
  good.validate();

  CovBlock indefinite{mat2(1.0, 2.0, 1.0)};  // eigenvalues 3, -1
  CHECK_THROWS_AS(indefinite.validate(), std::domain_error);

  MatrixXd asym = mat2(1.0, 0.2, 1.0);
  asym(0, 1) = 0.3;
  CHECK_THROWS_AS((CovBlock{asym}.validate()), std::domain_error);

  // Cauchy-Schwarz violation surfaces as a domain error in the closed form.
  CHECK_THROWS_AS(i2(1.0, 2.0, 1.0), std::domain_error);
}

TEST_CASE("random covariances are symmetric PSD and deterministic") {
  for (int idx = 0; idx < 20; ++idx) {
    MatrixXd c = random_psd_cov(4, 13, idx);
    CHECK((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);
    CHECK(c.diagonal().minCoeff() >= 0.1 - 1e-12);
    CHECK(c.diagonal().maxCoeff() <= 5.0 + 1e-12);
  }
  MatrixXd a = random_psd_cov(3, 5, 9);
  MatrixXd b = random_psd_cov(3, 5, 9);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("validation sweep passes at production tolerance") {
  IntegralValidationReport rep = validate_integrals(25, 1e-6, 7, 2);
  CHECK(rep.pass);
  CHECK(rep.count_per_kind == 25);
  for (int i = 0; i < 4; ++i) {
    CHECK(rep.failures[i] == 0);
    CHECK(rep.max_abs_err[i] <= 1e-6);
    CHECK(rep.max_abs_err[i] > 0.0);  // errors are measured, not zeroed
  }
  // Impossible tolerance forces failures: the comparison is real.
  IntegralValidationReport strict = validate_integrals(5, 1e-18, 7, 1);
  CHECK_FALSE(strict.pass);
}
