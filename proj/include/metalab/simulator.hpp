#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "metalab/config.hpp"
#include "metalab/order_params.hpp"

namespace metalab {

// Microscopic state of one meta-learning run: fixed teacher representation B
// (M x N), evolving learner representation J (K x N), and the task counter.
// All randomness is addressed through (seed, task_count, role) so identical
// seeds reproduce identical runs regardless of scheduling.
struct SimState {
  Eigen::MatrixXd B;
  Eigen::MatrixXd J;
  std::int64_t task_count = 0;
  std::uint64_t seed = 0;
  std::int64_t N = 0;
};

// One streaming task: head vector u, support/query inputs and labels, the
// teacher perturbation (gamma < 1 only) and raw label-noise draws (kept so
// tests can verify the label contract exactly).
struct TaskData {
  Eigen::VectorXd u;
  Eigen::MatrixXd delta_B;   // 0 x 0 when gamma == 1
  Eigen::MatrixXd train_x;   // P x N
  Eigen::VectorXd train_y;   // P
  Eigen::MatrixXd val_x;     // V x N
  Eigen::VectorXd val_y;     // V
  Eigen::VectorXd train_noise;  // 0-length when sigma_noise2 == 0
  Eigen::VectorXd val_noise;
};

struct SimTrajectory {
  std::vector<double> alpha;
  std::vector<OrderParams> states;
  std::vector<double> eps_empirical;  // fresh-task estimate at each sample
  std::vector<double> eps_ma;         // trailing moving average of the above
  std::vector<double> eps_analytic;   // closed form at measured overlaps
  std::vector<Eigen::MatrixXd> rho;
  std::vector<double> w_rms;          // RMS of the most recent adapted head
  bool completed = true;
  double last_alpha = 0.0;
};

// Teacher/learner rows i.i.d. N(0, (1/N) I_N); deterministic in seed.
SimState init_sim(const ModelConfig& config, const VariantConfig& variant,
                  std::uint64_t seed);

// Rescales J rows so that the measured Q equals q_target * I exactly,
// projecting out sampled fluctuations (for theory-vs-simulation starts).
void rescale_to_matched_init(SimState& state, double q_target = 0.5);

// Embeds exact target overlaps: builds J, B with Gram matrix equal to the
// given C = [[Q,R],[R^T,T]] (eigenvalues clipped at 0), using a random
// orthonormal frame.  Used by drift tests to start at prescribed states.
SimState init_from_order_params(const OrderParams& target,
                                const ModelConfig& config, std::uint64_t seed);

// Clean teacher labels (1/sqrt(M)) sum_m u_m g(teacher_m . xi) for each row
// of x; exposed for label-contract tests.
Eigen::VectorXd compute_labels(const Eigen::MatrixXd& teacher,
                               const Eigen::VectorXd& u,
                               const Eigen::MatrixXd& x, Activation act);

// Fresh task addressed by (state.seed, state.task_count).
TaskData generate_task(const SimState& state, const ModelConfig& config,
                       const VariantConfig& variant);

// One-step head adaptation from w0 = 0 on the task's support set.
Eigen::VectorXd inner_adapt(const SimState& state, const TaskData& task,
                            const ModelConfig& config,
                            const VariantConfig& variant);

// First-order outer update of J on the query set; increments task_count.
void outer_update(SimState& state, const TaskData& task,
                  const Eigen::VectorXd& w, const ModelConfig& config,
                  const VariantConfig& variant);

OrderParams measure_order_params(const SimState& state);

// Monte Carlo estimate of the post-adaptation error on fresh tasks.
double empirical_meta_error(const SimState& state, const ModelConfig& config,
                            const VariantConfig& variant,
                            std::int64_t n_tasks = 20, std::int64_t n_test = 50);

// Streams floor(alpha_max * N) tasks, sampling the trajectory every
// record_every units of alpha = t/N.  eps_tasks/eps_tests parameterize the
// per-sample empirical error estimate; ma_window is the trailing moving
// average span.
SimTrajectory run_stream(SimState& state, const ModelConfig& config,
                         const VariantConfig& variant, double alpha_max,
                         double record_every = 0.05, double ma_window = 0.05,
                         std::int64_t eps_tasks = 20, std::int64_t eps_tests = 50);

}  // namespace metalab
