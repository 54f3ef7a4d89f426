#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "metalab/config.hpp"
#include "metalab/order_params.hpp"
#include "metalab/rhs.hpp"

namespace metalab {

enum class OdeMethod { Rk4Fixed, Rkf45Adaptive };

struct IntegrationPlan {
  double alpha_max = 500.0;
  OdeMethod method = OdeMethod::Rk4Fixed;
  double step = 0.01;         // fixed-step size (rk4)
  double record_every = 0.5;  // sample spacing of the recorded trajectory
  // Adaptive controls (rkf45):
  double rtol = 1e-8;
  double atol = 1e-10;
  double min_step = 1e-9;
  double max_step = 0.25;

  void validate() const;
};

// Recorded solution samples.  alpha always contains 0 and, when the
// integration completes, alpha_max.  If the state turns non-finite the
// trajectory is returned partial with completed=false and last_alpha set to
// the last finite sample.
struct Trajectory {
  std::vector<double> alpha;
  std::vector<OrderParams> states;
  std::vector<double> eps;                // analytic meta error per sample
  std::vector<Eigen::MatrixXd> rho;       // cosine similarities per sample
  bool completed = true;
  double last_alpha = 0.0;
};

struct CrossingReport {
  bool crossed = false;
  double alpha_tilde = 0.0;
};

// Generic explicit integrator on flat vectors, y' = f(alpha, y); used by the
// theory wrapper below and directly testable on scalar systems.  Calls
// record(alpha, y) at every schedule point.  Returns false if the state turned
// non-finite (integration aborted).
bool integrate_vector_field(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& y0, const IntegrationPlan& plan,
    const std::function<void(double, const Eigen::VectorXd&)>& record);

// Integrates the selected order-parameter flow from the given initial state.
Trajectory integrate(const OrderParams& init, const ModelConfig& config,
                     const VariantConfig& variant, const IntegrationPlan& plan);

// First downward crossing of the recorded analytic error below the event
// threshold, linearly interpolated between samples.  A trajectory that starts
// at or below the threshold reports alpha_tilde = 0.
CrossingReport first_crossing(const Trajectory& traj, const CrossingEvent& event);

}  // namespace metalab
