#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/config.hpp"
#include "metalab/ode.hpp"
#include "metalab/order_params.hpp"

namespace metalab {

// Raised for any malformed or inconsistent experiment description; the
// message names the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { Theory, Simulate, Compare, Sweep, ValidateIntegrals };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

// Initial order parameters: either a named preset or explicit matrices.
//   paper-fig3  Q = 0.5 I, T = diag(1..M), R entries uniform in (0, 1e-12]
//               drawn from `seed` (breaks the exact row-permutation symmetry
//               that would otherwise pin the flow to the symmetric manifold)
//   linear-i    Q = 0.5 I, T = diag(1..M), all R = 1e-12 exactly
//   linear-ii   linear-i with R(1,1) = 1.1e-12
//   linear-iii  linear-ii with R(3,1) = 1.2e-12
struct InitSpec {
  std::string preset = "paper-fig3";
  std::uint64_t seed = 1;
  Eigen::MatrixXd Q, R, T;  // used when preset is empty

  bool explicit_matrices() const { return preset.empty(); }
};

OrderParams resolve_init(const InitSpec& spec, int K, int M);

// Simulator-side controls shared by kind=simulate and kind=compare.
struct SimSpec {
  double record_every = 0.05;
  double ma_window = 0.05;
  std::int64_t eps_tasks = 20;
  std::int64_t eps_tests = 50;
  bool shared_init = false;  // one (B, J0) reused by every seed's stream
  std::uint64_t init_seed = 1;
  double matched_q = 0.0;  // > 0: rescale J so J J^T = matched_q I exactly
};

struct SweepSpec {
  std::vector<int> K;  // empty: use model.K
  std::vector<double> eta_J;
  std::vector<double> eta_w;
  double threshold = 0.01;
  double alpha_max = 450.0;
};

struct ValidateSpec {
  std::int64_t count = 1000;
  double tolerance = 1e-6;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::Theory;
  ModelConfig model;
  VariantConfig variant;
  IntegrationPlan plan;
  InitSpec init;
  std::vector<std::uint64_t> seeds;
  SimSpec sim;
  SweepSpec sweep;
  ValidateSpec validate;
  std::vector<double> gamma_list;     // theory only: one trajectory per value
  std::vector<std::int64_t> v_list;   // simulate only: one ensemble per V
  std::string out_dir;                // resolved by the CLI when empty
  int jobs = 0;                       // worker cap; 0 = hardware concurrency

  // Cross-field rules beyond the per-section validate() checks.
  void validate_config() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

// Canonical JSON for the fully resolved config (embedded in manifests;
// parseable by parse_config).
std::string render_config(const ExperimentConfig& config);

ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

struct SweepCell {
  int K = 0;
  double eta_J = 0.0;
  double eta_w = 0.0;
  std::optional<double> alpha_tilde;  // empty: threshold never reached
  double eps_final = 0.0;             // NaN marks a failed cell
};

// Integrates every grid cell (parallel across cells); rows ordered by
// (K, eta_J, eta_w) grid index regardless of completion order.  Cell
// failures become sentinel rows and never abort the sweep.
std::vector<SweepCell> run_sweep(const ExperimentConfig& config);

struct ArtifactSet {
  std::vector<std::string> files;     // absolute paths, manifest last
  std::vector<std::string> warnings;  // also embedded in the manifest
  bool completed = true;              // false when any trajectory aborted
  bool validation_passed = true;      // validate-integrals outcome
};

// Runs the configured experiment and writes its CSV/JSON artifact set under
// config.out_dir.  Identical configs produce byte-identical CSVs.
ArtifactSet run_experiment(const ExperimentConfig& config);

// 17-significant-digit serialization used by every CSV artifact.
std::string format_g17(double x);

std::string sha256_hex(const std::string& bytes);

}  // namespace metalab
