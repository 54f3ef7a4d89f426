#include "metalab/simulator.hpp"

#include <cmath>

#include "metalab/rng.hpp"

namespace metalab {

namespace {

void fill_normal(Eigen::MatrixXd& m, CounterRng& rng, double scale) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = scale * rng.next_normal();
}

void fill_normal(Eigen::VectorXd& v, CounterRng& rng, double scale) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * rng.next_normal();
}

Eigen::MatrixXd apply_g(const Eigen::MatrixXd& m, Activation act) {
  if (act == Activation::Linear) return m;
  return m.unaryExpr([](double x) { return std::erf(x * 0.70710678118654752440); });
}

Eigen::MatrixXd apply_gprime(const Eigen::MatrixXd& m, Activation act) {
  if (act == Activation::Linear) return Eigen::MatrixXd::Ones(m.rows(), m.cols());
  return m.unaryExpr([](double x) {
    return 0.79788456080286535588 * std::exp(-0.5 * x * x);
  });
}

// Shared body for the training stream and the evaluation tasks: draws inputs,
// computes labels against the (possibly perturbed) teacher, adds noise.
struct TaskDraw {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  Eigen::VectorXd noise;
};

TaskDraw draw_labeled_set(CounterRng& input_rng, CounterRng& noise_rng,
                          std::int64_t count, const Eigen::MatrixXd& teacher,
                          const Eigen::VectorXd& u, const ModelConfig& cfg,
                          const VariantConfig& variant) {
  TaskDraw d;
  d.x.resize(count, cfg.N);
  fill_normal(d.x, input_rng, 1.0);
  d.y = compute_labels(teacher, u, d.x, variant.activation);
  if (variant.sigma_noise2 > 0.0) {
    d.noise.resize(count);
    fill_normal(d.noise, noise_rng, std::sqrt(variant.sigma_noise2));
    d.y += d.noise;
  }
  return d;
}

}  // namespace

SimState init_sim(const ModelConfig& config, const VariantConfig& variant,
                  std::uint64_t seed) {
  config.validate();
  variant.validate();
  SimState s;
  s.seed = seed;
  s.N = config.N;
  s.B.resize(config.M, config.N);
  s.J.resize(config.K, config.N);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.N));
  CounterRng rb(seed, 0, StreamRole::InitTeacher);
  fill_normal(s.B, rb, scale);
  CounterRng rj(seed, 0, StreamRole::InitStudent);
  fill_normal(s.J, rj, scale);
  return s;
}

void rescale_to_matched_init(SimState& state, double q_target) {
  if (!(q_target > 0.0))
    throw std::invalid_argument("rescale_to_matched_init: q_target must be > 0");
  const Eigen::MatrixXd Qm = state.J * state.J.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(Qm);
  if (llt.info() != Eigen::Success)
    throw std::domain_error(
        "rescale_to_matched_init: measured Q not positive definite");
  // J <- sqrt(q_target) * L^{-1} J gives J J^T = q_target * I exactly.
  state.J = std::sqrt(q_target) *
            llt.matrixL().solve(state.J);
}

SimState init_from_order_params(const OrderParams& target,
                                const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const int K = target.K(), M = target.M(), D = K + M;
  if (K != config.K || M != config.M)
    throw std::invalid_argument("init_from_order_params: dimension mismatch");
  if (config.N < D)
    throw std::invalid_argument("init_from_order_params: needs N >= K + M");

  // Random frame with exactly orthonormal rows (modified Gram-Schmidt).
  Eigen::MatrixXd Z(D, config.N);
  CounterRng rng(seed, 0, StreamRole::InitEmbed);
  fill_normal(Z, rng, 1.0);
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < i; ++j) Z.row(i) -= Z.row(i).dot(Z.row(j)) * Z.row(j);
    const double nrm = Z.row(i).norm();
    if (!(nrm > 0.0))
      throw std::domain_error("init_from_order_params: degenerate frame");
    Z.row(i) /= nrm;
  }

  Eigen::MatrixXd C(D, D);
  C << target.Q(), target.R(), target.R().transpose(), target.T();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd F =
      es.eigenvectors() * lam.cwiseSqrt().asDiagonal();

  const Eigen::MatrixXd JB = F * Z;
  SimState s;
  s.seed = seed;
  s.N = config.N;
  s.J = JB.topRows(K);
  s.B = JB.bottomRows(M);
  return s;
}

Eigen::VectorXd compute_labels(const Eigen::MatrixXd& teacher,
                               const Eigen::VectorXd& u,
                               const Eigen::MatrixXd& x, Activation act) {
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(teacher.rows()));
  return inv_sqrt_m * (apply_g(x * teacher.transpose(), act) * u);
}

TaskData generate_task(const SimState& state, const ModelConfig& config,
                       const VariantConfig& variant) {
  const std::uint64_t t = static_cast<std::uint64_t>(state.task_count);
  TaskData task;

  CounterRng ru(state.seed, t, StreamRole::TaskVector);
  task.u.resize(config.M);
  fill_normal(task.u, ru, 1.0);

  const Eigen::MatrixXd* teacher = &state.B;
  Eigen::MatrixXd perturbed;
  if (variant.gamma < 1.0) {
    CounterRng rd(state.seed, t, StreamRole::TeacherShift);
    task.delta_B.resize(config.M, config.N);
    fill_normal(task.delta_B, rd,
                1.0 / std::sqrt(static_cast<double>(config.N)));
    perturbed = variant.gamma * state.B +
                std::sqrt(1.0 - variant.gamma * variant.gamma) * task.delta_B;
    teacher = &perturbed;
  }

  CounterRng rtrain(state.seed, t, StreamRole::TrainInput);
  CounterRng rval(state.seed, t, StreamRole::ValInput);
  CounterRng rnoise(state.seed, t, StreamRole::LabelNoise);
  TaskDraw train = draw_labeled_set(rtrain, rnoise, config.P, *teacher, task.u,
                                    config, variant);
  TaskDraw val = draw_labeled_set(rval, rnoise, config.V, *teacher, task.u,
                                  config, variant);
  task.train_x = std::move(train.x);
  task.train_y = std::move(train.y);
  task.train_noise = std::move(train.noise);
  task.val_x = std::move(val.x);
  task.val_y = std::move(val.y);
  task.val_noise = std::move(val.noise);
  return task;
}

Eigen::VectorXd inner_adapt(const SimState& state, const TaskData& task,
                            const ModelConfig& config,
                            const VariantConfig& variant) {
  const Eigen::MatrixXd acts =
      apply_g(task.train_x * state.J.transpose(), variant.activation);  // P x K
  return (config.eta_w / (static_cast<double>(config.P) *
                          std::sqrt(static_cast<double>(config.K)))) *
         (acts.transpose() * task.train_y);
}

void outer_update(SimState& state, const TaskData& task,
                  const Eigen::VectorXd& w, const ModelConfig& config,
                  const VariantConfig& variant) {
  const double sqrt_k = std::sqrt(static_cast<double>(config.K));
  const Eigen::MatrixXd fields = task.val_x * state.J.transpose();  // V x K
  const Eigen::MatrixXd acts = apply_g(fields, variant.activation);
  const Eigen::VectorXd pred = (acts * w) / sqrt_k;
  const Eigen::VectorXd err = task.val_y - pred;
  const Eigen::MatrixXd h =
      apply_gprime(fields, variant.activation).cwiseProduct(err * w.transpose());
  if (variant.lambda > 0.0)
    state.J *= (1.0 - variant.lambda * config.eta_J /
                          static_cast<double>(config.N));
  state.J.noalias() +=
      (config.eta_J /
       (static_cast<double>(config.N) * static_cast<double>(config.V) * sqrt_k)) *
      (h.transpose() * task.val_x);
  ++state.task_count;
}

OrderParams measure_order_params(const SimState& state) {
  return OrderParams(state.J * state.J.transpose(),
                     state.J * state.B.transpose(),
                     state.B * state.B.transpose());
}

double empirical_meta_error(const SimState& state, const ModelConfig& config,
                            const VariantConfig& variant, std::int64_t n_tasks,
                            std::int64_t n_test) {
  if (n_tasks < 1 || n_test < 1)
    throw std::invalid_argument("empirical_meta_error: needs n_tasks, n_test >= 1");
  const double sqrt_k = std::sqrt(static_cast<double>(config.K));
  double total = 0.0;
  for (std::int64_t j = 0; j < n_tasks; ++j) {
    // A dedicated stream per (current task count, eval index); never collides
    // with the training streams, so evaluation does not perturb the run.
    const std::uint64_t key =
        static_cast<std::uint64_t>(state.task_count) * 1000003ULL +
        static_cast<std::uint64_t>(j);
    CounterRng rng(state.seed, key, StreamRole::EvalTask);

    Eigen::VectorXd u(config.M);
    fill_normal(u, rng, 1.0);

    const Eigen::MatrixXd* teacher = &state.B;
    Eigen::MatrixXd perturbed;
    if (variant.gamma < 1.0) {
      Eigen::MatrixXd dB(config.M, config.N);
      fill_normal(dB, rng, 1.0 / std::sqrt(static_cast<double>(config.N)));
      perturbed = variant.gamma * state.B +
                  std::sqrt(1.0 - variant.gamma * variant.gamma) * dB;
      teacher = &perturbed;
    }

    Eigen::MatrixXd xtr(config.P, config.N);
    fill_normal(xtr, rng, 1.0);
    Eigen::VectorXd ytr = compute_labels(*teacher, u, xtr, variant.activation);
    Eigen::MatrixXd xte(n_test, config.N);
    fill_normal(xte, rng, 1.0);
    Eigen::VectorXd yte = compute_labels(*teacher, u, xte, variant.activation);
    if (variant.sigma_noise2 > 0.0) {
      const double sd = std::sqrt(variant.sigma_noise2);
      for (Eigen::Index i = 0; i < ytr.size(); ++i)
        ytr(i) += sd * rng.next_normal();
      for (Eigen::Index i = 0; i < yte.size(); ++i)
        yte(i) += sd * rng.next_normal();
    }

    const Eigen::MatrixXd acts_tr =
        apply_g(xtr * state.J.transpose(), variant.activation);
    const Eigen::VectorXd w =
        (config.eta_w / (static_cast<double>(config.P) * sqrt_k)) *
        (acts_tr.transpose() * ytr);
    const Eigen::VectorXd pred =
        (apply_g(xte * state.J.transpose(), variant.activation) * w) / sqrt_k;
    total += 0.5 * (yte - pred).squaredNorm() / static_cast<double>(n_test);
  }
  return total / static_cast<double>(n_tasks);
}

SimTrajectory run_stream(SimState& state, const ModelConfig& config,
                         const VariantConfig& variant, double alpha_max,
                         double record_every, double ma_window,
                         std::int64_t eps_tasks, std::int64_t eps_tests) {
  if (!(alpha_max >= 0.0))
    throw std::invalid_argument("run_stream: alpha_max must be >= 0");
  if (!(record_every > 0.0))
    throw std::invalid_argument("run_stream: record_every must be > 0");
  const double Nd = static_cast<double>(config.N);
  const std::int64_t n_tasks_total =
      static_cast<std::int64_t>(std::floor(alpha_max * Nd + 1e-9));

  SimTrajectory traj;
  double last_w_rms = 0.0;

  auto record = [&]() {
    OrderParams p = measure_order_params(state);
    const double a = static_cast<double>(state.task_count) / Nd;
    traj.alpha.push_back(a);
    traj.eps_analytic.push_back(meta_generalization_error(p, config, variant));
    traj.eps_empirical.push_back(
        empirical_meta_error(state, config, variant, eps_tasks, eps_tests));
    traj.rho.push_back(cosine_similarity(p));
    traj.states.push_back(std::move(p));
    traj.w_rms.push_back(last_w_rms);
    // Trailing moving average over [a - ma_window, a].
    double sum = 0.0;
    int cnt = 0;
    for (std::size_t i = traj.alpha.size(); i-- > 0;) {
      if (traj.alpha[i] < a - ma_window - 1e-12) break;
      sum += traj.eps_empirical[i];
      ++cnt;
    }
    traj.eps_ma.push_back(sum / cnt);
    traj.last_alpha = a;
  };

  record();
  std::int64_t next_record =
      std::max<std::int64_t>(1, llround(record_every * Nd));
  const std::int64_t record_stride = next_record;

  while (state.task_count < n_tasks_total) {
    TaskData task = generate_task(state, config, variant);
    const Eigen::VectorXd w = inner_adapt(state, task, config, variant);
    outer_update(state, task, w, config, variant);
    last_w_rms = std::sqrt(w.squaredNorm() / static_cast<double>(config.K));
    if (!state.J.allFinite()) {
      traj.completed = false;
      return traj;
    }
    if (state.task_count >= next_record || state.task_count == n_tasks_total) {
      record();
      while (next_record <= state.task_count) next_record += record_stride;
    }
  }
  return traj;
}

}  // namespace metalab
