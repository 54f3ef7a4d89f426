#pragma once

#include <Eigen/Dense>

#include "metalab/config.hpp"
#include "metalab/order_params.hpp"

namespace metalab {

// One evaluation of the averaged order-parameter flow d(R, Q)/d(alpha).
// T is static and carries no derivative.
struct RhsOutput {
  Eigen::MatrixXd dR;  // K x M
  Eigen::MatrixXd dQ;  // K x K, symmetrized after assembly
};

// Plain erf-activation flow (no decay, no label noise, fixed teacher).
RhsOutput rhs_base(const OrderParams& params, const ModelConfig& config);

// Erf flow with ridge decay on the representation (-lambda eta_J R,
// -2 lambda eta_J Q) and the label-noise-driven diffusion term in dQ.
RhsOutput rhs_l2_noise(const OrderParams& params, const ModelConfig& config,
                       const VariantConfig& variant);

// Erf flow with per-task teacher variability: task teachers are
// gamma B + sqrt(1-gamma^2) DeltaB with fresh DeltaB rows of unit norm, so
// task-teacher fields carry covariance gamma^2 T + (1-gamma^2) I and correlate
// with student fields through gamma R.  gamma=1 reduces exactly to rhs_base.
RhsOutput rhs_gamma(const OrderParams& params, const ModelConfig& config,
                    const VariantConfig& variant);

// Integral-free polynomial flow for the identity activation.
RhsOutput rhs_linear(const OrderParams& params, const ModelConfig& config);

// Variant dispatcher used by the ODE engine and the CLI.
RhsOutput rhs(const OrderParams& params, const ModelConfig& config,
              const VariantConfig& variant);

// Downward-threshold event descriptor for the ODE engine's crossing detector.
struct CrossingEvent {
  double threshold = 0.01;
};

CrossingEvent eps_threshold_config(double threshold);

}  // namespace metalab
