#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "metalab/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitValidation = 4;

struct CommonFlags {
  std::string config_path;
  std::string preset;
  std::string out_dir;
  std::int64_t seed = -1;
  int jobs = -1;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Path to a JSON experiment config");
  cmd->add_option("--preset", flags.preset,
                  "Named built-in config (see `metalab preset-list`)");
  cmd->add_option("--out", flags.out_dir, "Output directory for artifacts");
  cmd->add_option("--seed", flags.seed,
                  "Seed override: rebases stream seeds (simulate/compare), or "
                  "replaces the init/validation seed otherwise");
  cmd->add_option("--jobs", flags.jobs, "Worker cap for parallel cells/seeds");
}

metalab::ExperimentConfig build_config(const CommonFlags& flags,
                                       metalab::ExperimentKind kind) {
  using metalab::ConfigError;
  if (!flags.config_path.empty() && !flags.preset.empty())
    throw ConfigError("--config and --preset are mutually exclusive");

  metalab::ExperimentConfig cfg;
  if (!flags.preset.empty()) {
    cfg = metalab::preset_config(flags.preset);
  } else if (!flags.config_path.empty()) {
    cfg = metalab::load_config_file(flags.config_path);
  } else if (kind == metalab::ExperimentKind::ValidateIntegrals) {
    cfg.kind = kind;  // runs with built-in defaults
    cfg.name = "validate-integrals";
  } else {
    throw ConfigError("either --config or --preset is required");
  }
  if (cfg.kind != kind)
    throw ConfigError("config kind \"" + to_string(cfg.kind) +
                      "\" does not match the \"" + to_string(kind) +
                      "\" subcommand");

  if (flags.seed >= 0) {
    const auto s = static_cast<std::uint64_t>(flags.seed);
    cfg.init.seed = s;
    cfg.validate.seed = s;
    cfg.sim.init_seed = s;
    if (!cfg.seeds.empty()) {
      // Keep the ensemble size, shift its base.
      for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        cfg.seeds[i] = s + static_cast<std::uint64_t>(i);
    }
  }
  if (flags.jobs >= 0) cfg.jobs = flags.jobs;

  if (!flags.out_dir.empty()) {
    cfg.out_dir = flags.out_dir;
  } else if (cfg.out_dir.empty()) {
    const char* env = std::getenv("META_LAB_OUT");
    const std::string base = env != nullptr && env[0] != '\0' ? env : "out";
    cfg.out_dir = base + "/" + cfg.name;
  }
  cfg.validate_config();
  return cfg;
}

int run_kind(const CommonFlags& flags, metalab::ExperimentKind kind) {
  const metalab::ExperimentConfig cfg = build_config(flags, kind);
  const metalab::ArtifactSet result = metalab::run_experiment(cfg);
  for (const std::string& w : result.warnings)
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  for (const std::string& f : result.files) std::printf("%s\n", f.c_str());
  if (!result.validation_passed) return kExitValidation;
  if (!result.completed && kind != metalab::ExperimentKind::Sweep)
    return kExitNumeric;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Dual-engine laboratory for streaming teacher-student meta-learning:\n"
      "closed-form order-parameter flows and a finite-size Monte Carlo\n"
      "simulator, serialized to reproducible CSV/JSON artifacts."};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
    metalab::ExperimentKind kind;
  };
  const Sub subs[] = {
      {"theory", "Integrate the order-parameter flow", metalab::ExperimentKind::Theory},
      {"simulate", "Run finite-size Monte Carlo streams", metalab::ExperimentKind::Simulate},
      {"compare", "Theory vs simulator ensemble on one shared start",
       metalab::ExperimentKind::Compare},
      {"sweep", "Grid sweep recording error-crossing times", metalab::ExperimentKind::Sweep},
      {"validate-integrals", "Check closed-form Gaussian kernels against quadrature",
       metalab::ExperimentKind::ValidateIntegrals},
  };

  CommonFlags flags[5];
  metalab::ExperimentKind chosen{};
  const CommonFlags* chosen_flags = nullptr;
  for (int i = 0; i < 5; ++i) {
    CLI::App* cmd = app.add_subcommand(subs[i].name, subs[i].help);
    add_common_flags(cmd, flags[i]);
    const auto kind = subs[i].kind;
    const CommonFlags* fl = &flags[i];
    cmd->callback([&chosen, &chosen_flags, kind, fl] {
      chosen = kind;
      chosen_flags = fl;
    });
  }
  bool list_presets = false;
  app.add_subcommand("preset-list", "List built-in experiment presets")
      ->callback([&list_presets] { list_presets = true; });

  CLI11_PARSE(app, argc, argv);

  if (list_presets) {
    for (const std::string& name : metalab::preset_names()) {
      const metalab::ExperimentConfig cfg = metalab::preset_config(name);
      std::printf("%s\t%s\n", name.c_str(), to_string(cfg.kind).c_str());
    }
    return kExitOk;
  }

  try {
    return run_kind(*chosen_flags, chosen);
  } catch (const metalab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
}
