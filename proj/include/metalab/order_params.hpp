#pragma once

#include <Eigen/Dense>
#include <vector>

#include "metalab/config.hpp"

namespace metalab {

// Macroscopic overlap state of the student-teacher pair:
//   Q = J J^T  (K x K student-student),
//   R = J B^T  (K x M student-teacher),
//   T = B B^T  (M x M teacher-teacher).
// T describes the fixed teacher; it is set at construction and never mutated
// by dynamics code, which produces evolved copies via with_qr().
class OrderParams {
 public:
  OrderParams(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
              const Eigen::MatrixXd& T);

  int K() const { return static_cast<int>(q_.rows()); }
  int M() const { return static_cast<int>(t_.rows()); }
  const Eigen::MatrixXd& Q() const { return q_; }
  const Eigen::MatrixXd& R() const { return r_; }
  const Eigen::MatrixXd& T() const { return t_; }

  // Evolved copy sharing this object's teacher overlap.
  OrderParams with_qr(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R) const;

  bool all_finite() const;

 private:
  Eigen::MatrixXd q_, r_, t_;
};

// Principal submatrix of the joint local-field covariance
//   C = [[Q, R], [R^T, T]]
// over the selected student fields (rows of J) followed by the selected
// teacher fields (rows of B), in the order given.
Eigen::MatrixXd assemble_covariance(const OrderParams& p,
                                    const std::vector<int>& student_idx,
                                    const std::vector<int>& teacher_idx);

// rho_kn = R_kn / sqrt(Q_kk T_nn), clamped to [-1, 1].  Throws
// std::domain_error naming the offending index when a norm is degenerate.
Eigen::MatrixXd cosine_similarity(const OrderParams& p);

// Average post-adaptation generalization error of the meta-learned student on
// a fresh task, as a closed-form function of (Q, R, T) and the variant knobs.
// Supports erf and linear activations, teacher variability gamma < 1, and the
// additive label-noise floor.
double meta_generalization_error(const OrderParams& p, const ModelConfig& model,
                                 const VariantConfig& variant);

}  // namespace metalab
