#include "metalab/integrals.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "metalab/rng.hpp"

namespace metalab {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoOverPi = 0.63661977236758134308;
constexpr double kBoundTol = 1e-10;

double g_act(double x) { return std::erf(x * 0.70710678118654752440); }
double g_prime(double x) {
  return 0.79788456080286535588 * std::exp(-0.5 * x * x);
}

[[noreturn]] void bad_cov(const char* fn, const std::string& why) {
  throw std::domain_error(std::string(fn) + ": covariance not admissible (" +
                          why + ")");
}

// Pairwise Cauchy-Schwarz screen; catches corrupted off-diagonals cheaply
// without a full eigendecomposition in the hot path.
void check_pair(const char* fn, double cii, double cjj, double cij) {
  if (cii < -kBoundTol || cjj < -kBoundTol)
    bad_cov(fn, "negative variance");
  const double bound =
      std::sqrt(std::max(cii, 0.0) * std::max(cjj, 0.0)) + kBoundTol;
  if (std::abs(cij) > bound) {
    std::ostringstream os;
    os << "|c_ij| = " << std::abs(cij) << " exceeds sqrt(c_ii c_jj) = "
       << bound - kBoundTol;
    bad_cov(fn, os.str());
  }
}

double clamp_asin_arg(const char* fn, double x) {
  if (std::abs(x) > 1.0 + kBoundTol) {
    std::ostringstream os;
    os << "arcsine argument " << x << " outside [-1, 1]";
    bad_cov(fn, os.str());
  }
  return std::clamp(x, -1.0, 1.0);
}

}  // namespace

void CovBlock::validate(double tol) const {
  if (c.rows() != c.cols()) throw std::domain_error("CovBlock: not square");
  const double scale = std::max(1.0, c.diagonal().cwiseAbs().maxCoeff());
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > tol * scale)
    throw std::domain_error("CovBlock: not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (c + c.transpose()), Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -tol * scale)
    throw std::domain_error("CovBlock: not positive semidefinite");
}

double i2(double c11, double c12, double c22) {
  check_pair("i2", c11, c22, c12);
  const double denom = std::sqrt((1.0 + c11) * (1.0 + c22));
  return kTwoOverPi * std::asin(clamp_asin_arg("i2", c12 / denom));
}

double i2_prime(double c11, double c12, double c22) {
  check_pair("i2_prime", c11, c22, c12);
  const double det = (1.0 + c11) * (1.0 + c22) - c12 * c12;
  if (!(det > 0.0)) bad_cov("i2_prime", "det(I + c) <= 0");
  return kTwoOverPi / std::sqrt(det);
}

double i3(const Eigen::Matrix3d& c) {
  check_pair("i3", c(0, 0), c(1, 1), c(0, 1));
  check_pair("i3", c(0, 0), c(2, 2), c(0, 2));
  check_pair("i3", c(1, 1), c(2, 2), c(1, 2));
  const double lam3 = (1.0 + c(0, 0)) * (1.0 + c(2, 2)) - c(0, 2) * c(0, 2);
  if (!(lam3 > 0.0)) bad_cov("i3", "Lambda3 <= 0");
  const double num = c(1, 2) * (1.0 + c(0, 0)) - c(0, 1) * c(0, 2);
  return kTwoOverPi * num / ((1.0 + c(0, 0)) * std::sqrt(lam3));
}

double i4(const Eigen::Matrix4d& c) {
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) check_pair("i4", c(a, a), c(b, b), c(a, b));
  const double p11 = 1.0 + c(0, 0), p22 = 1.0 + c(1, 1);
  const double lam4 = p11 * p22 - c(0, 1) * c(0, 1);
  if (!(lam4 > 0.0)) bad_cov("i4", "Lambda4 <= 0");
  const double lam0 = lam4 * c(2, 3) - c(1, 2) * c(1, 3) * p11 -
                      c(0, 2) * c(0, 3) * p22 + c(0, 1) * c(0, 2) * c(1, 3) +
                      c(0, 1) * c(0, 3) * c(1, 2);
  const double lam1 = lam4 * (1.0 + c(2, 2)) - c(1, 2) * c(1, 2) * p11 -
                      c(0, 2) * c(0, 2) * p22 +
                      2.0 * c(0, 1) * c(0, 2) * c(1, 2);
  const double lam2 = lam4 * (1.0 + c(3, 3)) - c(1, 3) * c(1, 3) * p11 -
                      c(0, 3) * c(0, 3) * p22 +
                      2.0 * c(0, 1) * c(0, 3) * c(1, 3);
  const double prod = lam1 * lam2;
  if (!(prod > 0.0)) bad_cov("i4", "Lambda1 * Lambda2 <= 0");
  const double arg = clamp_asin_arg("i4", lam0 / std::sqrt(prod));
  return (4.0 / (kPi * kPi)) * std::asin(arg) / std::sqrt(lam4);
}

double i3_gprime2(const Eigen::Matrix3d& c) {
  check_pair("i3_gprime2", c(0, 0), c(1, 1), c(0, 1));
  check_pair("i3_gprime2", c(0, 0), c(2, 2), c(0, 2));
  check_pair("i3_gprime2", c(1, 1), c(2, 2), c(1, 2));
  // det(I + A c), A = diag(1, 1, 2); the squared factor doubles its row.
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m.row(0) += c.row(0);
  m.row(1) += c.row(1);
  m.row(2) += 2.0 * c.row(2);
  const double det = m.determinant();
  if (!(det > 0.0)) bad_cov("i3_gprime2", "det(I + A c) <= 0");
  return (4.0 / (kPi * kPi)) / std::sqrt(det);
}

std::string to_string(IntegralKind kind) {
  switch (kind) {
    case IntegralKind::I2: return "i2";
    case IntegralKind::I2Prime: return "i2_prime";
    case IntegralKind::I3: return "i3";
    case IntegralKind::I4: return "i4";
  }
  return "?";
}

void gauss_hermite_rule(int n, Eigen::VectorXd& nodes,
                        Eigen::VectorXd& weights) {
  if (n < 1) throw std::invalid_argument("gauss_hermite_rule: n must be >= 1");
  static std::mutex mu;
  static std::map<int, std::pair<Eigen::VectorXd, Eigen::VectorXd>> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) {
      nodes = it->second.first;
      weights = it->second.second;
      return;
    }
  }
  // Golub-Welsch on the Jacobi matrix of the (monic) Hermite recurrence for
  // weight exp(-z^2): off-diagonals sqrt(i/2).
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(std::max(n - 1, 1));
  for (int i = 1; i < n; ++i) sub(i - 1) = std::sqrt(0.5 * i);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub.head(n - 1 > 0 ? n - 1 : 0),
                            Eigen::ComputeEigenvectors);
  Eigen::VectorXd x = es.eigenvalues();
  Eigen::VectorXd w(n);
  const double sqrt_pi = std::sqrt(kPi);
  for (int i = 0; i < n; ++i) {
    const double v0 = es.eigenvectors()(0, i);
    w(i) = sqrt_pi * v0 * v0;
  }
  {
    std::lock_guard<std::mutex> lock(mu);
    cache[n] = {x, w};
  }
  nodes = x;
  weights = w;
}

namespace {

// Lower-triangular transport factor sqrt(2) L with L L^T = c (+ tiny jitter
// when c is semidefinite), so v = sqrt(2) L z maps the Gauss-Hermite grid onto
// N(0, c) samples with v_i depending only on z_1..z_i.
Eigen::MatrixXd transport_factor(const Eigen::MatrixXd& c) {
  const int d = static_cast<int>(c.rows());
  const double scale = std::max(1.0, c.diagonal().cwiseAbs().maxCoeff());
  Eigen::MatrixXd csym = 0.5 * (c + c.transpose());
  for (double jitter : {0.0, 1e-12 * scale, 1e-10 * scale}) {
    Eigen::LLT<Eigen::MatrixXd> llt(
        csym + jitter * Eigen::MatrixXd::Identity(d, d));
    if (llt.info() == Eigen::Success)
      return std::sqrt(2.0) * Eigen::MatrixXd(llt.matrixL());
  }
  throw std::domain_error(
      "quadrature_oracle: covariance is not positive semidefinite "
      "(Cholesky failed after jitter)");
}

enum class Factor { G, GPrime, Id };

double apply_factor(Factor f, double v) {
  switch (f) {
    case Factor::G: return g_act(v);
    case Factor::GPrime: return g_prime(v);
    case Factor::Id: return v;
  }
  return 0.0;
}

// Tensor-product Gauss-Hermite expectation of a product of per-coordinate
// factors, exploiting the triangular transport so level i work happens once
// per (z_1..z_i) prefix.
double tri_quad(const std::vector<Factor>& factors, const Eigen::MatrixXd& c,
                int nodes) {
  const int d = static_cast<int>(factors.size());
  if (c.rows() != d || c.cols() != d)
    throw std::invalid_argument("quadrature_oracle: covariance dim mismatch");
  Eigen::VectorXd z, w;
  gauss_hermite_rule(nodes, z, w);
  const Eigen::VectorXd wn = w / std::sqrt(kPi);  // per-level normalized weight
  const Eigen::MatrixXd L = transport_factor(c);

  const int n = nodes;
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    const double v1 = L(0, 0) * z(a);
    const double f1 = wn(a) * apply_factor(factors[0], v1);
    if (d == 1) {
      total += f1;
      continue;
    }
    for (int b = 0; b < n; ++b) {
      const double v2 = L(1, 0) * z(a) + L(1, 1) * z(b);
      const double f2 = f1 * wn(b) * apply_factor(factors[1], v2);
      if (d == 2) {
        total += f2;
        continue;
      }
      for (int e = 0; e < n; ++e) {
        const double off3 = L(2, 0) * z(a) + L(2, 1) * z(b);
        const double v3 = off3 + L(2, 2) * z(e);
        const double f3 = f2 * wn(e) * apply_factor(factors[2], v3);
        if (d == 3) {
          total += f3;
          continue;
        }
        const double off4 = L(3, 0) * z(a) + L(3, 1) * z(b) + L(3, 2) * z(e);
        double inner = 0.0;
        for (int h = 0; h < n; ++h)
          inner += wn(h) * apply_factor(factors[3], off4 + L(3, 3) * z(h));
        total += f3 * inner;
      }
    }
  }
  return total;
}

}  // namespace

double quadrature_oracle(IntegralKind kind, const Eigen::MatrixXd& c,
                         int nodes) {
  switch (kind) {
    case IntegralKind::I2:
      return tri_quad({Factor::G, Factor::G}, c, nodes);
    case IntegralKind::I2Prime:
      return tri_quad({Factor::GPrime, Factor::GPrime}, c, nodes);
    case IntegralKind::I3:
      return tri_quad({Factor::GPrime, Factor::Id, Factor::G}, c, nodes);
    case IntegralKind::I4:
      return tri_quad({Factor::GPrime, Factor::GPrime, Factor::G, Factor::G},
                      c, nodes);
  }
  throw std::invalid_argument("quadrature_oracle: unknown kind");
}

double gauss_expect(const std::function<double(const Eigen::VectorXd&)>& f,
                    const Eigen::MatrixXd& c, int nodes) {
  const int d = static_cast<int>(c.rows());
  if (d < 1 || c.cols() != d)
    throw std::invalid_argument("gauss_expect: covariance must be square");
  Eigen::VectorXd z, w;
  gauss_hermite_rule(nodes, z, w);
  const Eigen::VectorXd wn = w / std::sqrt(kPi);
  const Eigen::MatrixXd L = transport_factor(c);

  std::vector<int> idx(d, 0);
  Eigen::VectorXd v(d);
  double total = 0.0;
  while (true) {
    double weight = 1.0;
    for (int i = 0; i < d; ++i) weight *= wn(idx[i]);
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (int j = 0; j <= i; ++j) s += L(i, j) * z(idx[j]);
      v(i) = s;
    }
    total += weight * f(v);
    int i = d - 1;
    while (i >= 0 && ++idx[i] == nodes) idx[i--] = 0;
    if (i < 0) break;
  }
  return total;
}

Eigen::MatrixXd random_psd_cov(int dim, std::uint64_t seed,
                               std::uint64_t index) {
  CounterRng rng(seed, index, StreamRole::CovSample);
  const int cols = dim + 1 + static_cast<int>(index % 3);
  Eigen::MatrixXd g(dim, cols);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < cols; ++j) g(i, j) = rng.next_normal();
  Eigen::MatrixXd c = g * g.transpose() / static_cast<double>(cols);
  // Normalize to a correlation matrix, then impose variances drawn
  // log-uniformly from (0.1, 5] so the diagonal stays in a well-conditioned
  // range while correlations cover the whole admissible set.
  const Eigen::VectorXd d = c.diagonal().cwiseSqrt();
  Eigen::VectorXd s(dim);
  for (int i = 0; i < dim; ++i) {
    const double u = rng.next_uniform();
    s(i) = std::sqrt(0.1 * std::pow(50.0, u));
  }
  const Eigen::VectorXd scale = s.cwiseQuotient(d);
  return scale.asDiagonal() * c * scale.asDiagonal();
}

IntegralValidationReport validate_integrals(std::int64_t count_per_kind,
                                            double tolerance,
                                            std::uint64_t seed, int jobs) {
  if (count_per_kind < 1)
    throw std::invalid_argument("validate_integrals: count must be >= 1");
  if (!(tolerance > 0.0))
    throw std::invalid_argument("validate_integrals: tolerance must be > 0");
  jobs = std::max(1, jobs);

  IntegralValidationReport report;
  report.count_per_kind = count_per_kind;
  report.tolerance = tolerance;

  const IntegralKind kinds[4] = {IntegralKind::I2, IntegralKind::I2Prime,
                                 IntegralKind::I3, IntegralKind::I4};
  const int dims[4] = {2, 2, 3, 4};
  // Node counts chosen so the oracle itself is converged well below the
  // production tolerance for variances up to 5; the four-dimensional kind
  // dominates the cost, so it runs with the smallest count that still leaves
  // more than a 3x margin at 1e-6.
  const int oracle_nodes[4] = {56, 56, 56, 48};

  for (int ki = 0; ki < 4; ++ki) {
    std::atomic<std::int64_t> next(0);
    std::vector<double> max_err(jobs, 0.0);
    std::vector<std::int64_t> fails(jobs, 0);
    auto worker = [&](int tid) {
      while (true) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= count_per_kind) break;
        const Eigen::MatrixXd c =
            random_psd_cov(dims[ki], seed + 1000003ULL * ki, i);
        double closed = 0.0;
        switch (kinds[ki]) {
          case IntegralKind::I2: closed = i2(c(0, 0), c(0, 1), c(1, 1)); break;
          case IntegralKind::I2Prime:
            closed = i2_prime(c(0, 0), c(0, 1), c(1, 1));
            break;
          case IntegralKind::I3: closed = i3(Eigen::Matrix3d(c)); break;
          case IntegralKind::I4: closed = i4(Eigen::Matrix4d(c)); break;
        }
        const double oracle = quadrature_oracle(kinds[ki], c, oracle_nodes[ki]);
        const double err = std::abs(closed - oracle);
        max_err[tid] = std::max(max_err[tid], err);
        if (err > tolerance) ++fails[tid];
      }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(worker, t);
    worker(0);
    for (auto& th : pool) th.join();
    report.max_abs_err[ki] = *std::max_element(max_err.begin(), max_err.end());
    for (auto f : fails) report.failures[ki] += f;
  }
  report.pass = report.failures[0] == 0 && report.failures[1] == 0 &&
                report.failures[2] == 0 && report.failures[3] == 0;
  return report;
}

}  // namespace metalab
