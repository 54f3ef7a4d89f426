#include "metalab/experiment.hpp"

#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "metalab/integrals.hpp"
#include "metalab/rhs.hpp"
#include "metalab/rng.hpp"
#include "metalab/simulator.hpp"

namespace metalab {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// --------------------------------------------------------------------- sha256

namespace {

struct Sha256 {
  std::uint32_t h[8] = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
                        0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
  unsigned char buf[64];
  std::uint64_t total = 0;
  std::size_t fill = 0;

  static std::uint32_t rotr(std::uint32_t x, int n) {
    return (x >> n) | (x << (32 - n));
  }

  void block(const unsigned char* p) {
    static const std::uint32_t k[64] = {
        0x428a2f98u, 0x71374491u, 0xb5c0fbcfu, 0xe9b5dba5u, 0x3956c25bu,
        0x59f111f1u, 0x923f82a4u, 0xab1c5ed5u, 0xd807aa98u, 0x12835b01u,
        0x243185beu, 0x550c7dc3u, 0x72be5d74u, 0x80deb1feu, 0x9bdc06a7u,
        0xc19bf174u, 0xe49b69c1u, 0xefbe4786u, 0x0fc19dc6u, 0x240ca1ccu,
        0x2de92c6fu, 0x4a7484aau, 0x5cb0a9dcu, 0x76f988dau, 0x983e5152u,
        0xa831c66du, 0xb00327c8u, 0xbf597fc7u, 0xc6e00bf3u, 0xd5a79147u,
        0x06ca6351u, 0x14292967u, 0x27b70a85u, 0x2e1b2138u, 0x4d2c6dfcu,
        0x53380d13u, 0x650a7354u, 0x766a0abbu, 0x81c2c92eu, 0x92722c85u,
        0xa2bfe8a1u, 0xa81a664bu, 0xc24b8b70u, 0xc76c51a3u, 0xd192e819u,
        0xd6990624u, 0xf40e3585u, 0x106aa070u, 0x19a4c116u, 0x1e376c08u,
        0x2748774cu, 0x34b0bcb5u, 0x391c0cb3u, 0x4ed8aa4au, 0x5b9cca4fu,
        0x682e6ff3u, 0x748f82eeu, 0x78a5636fu, 0x84c87814u, 0x8cc70208u,
        0x90befffau, 0xa4506cebu, 0xbef9a3f7u, 0xc67178f2u};
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 64; ++i) {
      const std::uint32_t s0 =
          rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const std::uint32_t s1 =
          rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5],
                  g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      const std::uint32_t ch = (e & f) ^ (~e & g);
      const std::uint32_t t1 = hh + s1 + ch + k[i] + w[i];
      const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      const std::uint32_t t2 = s0 + maj;
      hh = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
    h[5] += f;
    h[6] += g;
    h[7] += hh;
  }

  void update(const unsigned char* p, std::size_t n) {
    total += n;
    while (n > 0) {
      const std::size_t take = std::min(n, std::size_t(64) - fill);
      std::copy(p, p + take, buf + fill);
      fill += take;
      p += take;
      n -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
  }

  void finish(unsigned char out[32]) {
    const std::uint64_t bits = total * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (fill != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = (unsigned char)(bits >> (56 - 8 * i));
    update(len, 8);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j) out[4 * i + j] = (unsigned char)(h[i] >> (24 - 8 * j));
  }
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Sha256 s;
  s.update(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  unsigned char digest[32];
  s.finish(digest);
  static const char* hex = "0123456789abcdef";
  std::string out(64, '0');
  for (int i = 0; i < 32; ++i) {
    out[2 * i] = hex[digest[i] >> 4];
    out[2 * i + 1] = hex[digest[i] & 0xf];
  }
  return out;
}

std::string format_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// ------------------------------------------------------------------ kind names

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Theory: return "theory";
    case ExperimentKind::Simulate: return "simulate";
    case ExperimentKind::Compare: return "compare";
    case ExperimentKind::Sweep: return "sweep";
    case ExperimentKind::ValidateIntegrals: return "validate-integrals";
  }
  return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  if (name == "theory") return ExperimentKind::Theory;
  if (name == "simulate") return ExperimentKind::Simulate;
  if (name == "compare") return ExperimentKind::Compare;
  if (name == "sweep") return ExperimentKind::Sweep;
  if (name == "validate-integrals") return ExperimentKind::ValidateIntegrals;
  throw ConfigError("unknown experiment kind: " + name);
}

// ------------------------------------------------------------------- parsing

namespace {

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown config field: " + path + it.key());
  }
}

const json& require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + " must be a JSON object");
  return j;
}

double as_double(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + " must be a number");
  return v.get<double>();
}

std::int64_t as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError(path + " must be an integer");
  return v.get<std::int64_t>();
}

std::uint64_t as_uint(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ConfigError(path + " must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path + " must be a boolean");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + " must be a string");
  return v.get<std::string>();
}

Eigen::MatrixXd as_matrix(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty())
    throw ConfigError(path + " must be a nonempty array of rows");
  const std::size_t rows = v.size();
  std::size_t cols = 0;
  Eigen::MatrixXd m;
  for (std::size_t i = 0; i < rows; ++i) {
    const json& r = v[i];
    if (!r.is_array() || r.empty())
      throw ConfigError(path + " rows must be nonempty arrays");
    if (i == 0) {
      cols = r.size();
      m.resize(rows, cols);
    } else if (r.size() != cols) {
      throw ConfigError(path + " rows must have equal length");
    }
    for (std::size_t jx = 0; jx < cols; ++jx)
      m(i, jx) = as_double(r[jx], path + " entry");
  }
  return m;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

void parse_model(const json& j, ModelConfig& m) {
  check_keys(j, "model.", {"N", "K", "M", "P", "V", "eta_w", "eta_J"});
  if (j.contains("N")) m.N = as_int(j["N"], "model.N");
  if (j.contains("K")) m.K = static_cast<int>(as_int(j["K"], "model.K"));
  if (j.contains("M")) m.M = static_cast<int>(as_int(j["M"], "model.M"));
  if (j.contains("P")) m.P = as_int(j["P"], "model.P");
  if (j.contains("V")) m.V = as_int(j["V"], "model.V");
  if (j.contains("eta_w")) m.eta_w = as_double(j["eta_w"], "model.eta_w");
  if (j.contains("eta_J")) m.eta_J = as_double(j["eta_J"], "model.eta_J");
}

void parse_variant(const json& j, VariantConfig& v) {
  check_keys(j, "variant.", {"activation", "gamma", "lambda", "sigma_noise2"});
  if (j.contains("activation")) {
    const std::string a = as_string(j["activation"], "variant.activation");
    if (a == "erf")
      v.activation = Activation::Erf;
    else if (a == "linear")
      v.activation = Activation::Linear;
    else
      throw ConfigError("variant.activation must be \"erf\" or \"linear\"");
  }
  if (j.contains("gamma")) v.gamma = as_double(j["gamma"], "variant.gamma");
  if (j.contains("lambda")) v.lambda = as_double(j["lambda"], "variant.lambda");
  if (j.contains("sigma_noise2"))
    v.sigma_noise2 = as_double(j["sigma_noise2"], "variant.sigma_noise2");
}

void parse_plan(const json& j, IntegrationPlan& p) {
  check_keys(j, "plan.", {"alpha_max", "method", "step", "record_every", "rtol",
                          "atol", "min_step", "max_step"});
  if (j.contains("alpha_max")) p.alpha_max = as_double(j["alpha_max"], "plan.alpha_max");
  if (j.contains("method")) {
    const std::string m = as_string(j["method"], "plan.method");
    if (m == "rk4")
      p.method = OdeMethod::Rk4Fixed;
    else if (m == "rkf45")
      p.method = OdeMethod::Rkf45Adaptive;
    else
      throw ConfigError("plan.method must be \"rk4\" or \"rkf45\"");
  }
  if (j.contains("step")) p.step = as_double(j["step"], "plan.step");
  if (j.contains("record_every"))
    p.record_every = as_double(j["record_every"], "plan.record_every");
  if (j.contains("rtol")) p.rtol = as_double(j["rtol"], "plan.rtol");
  if (j.contains("atol")) p.atol = as_double(j["atol"], "plan.atol");
  if (j.contains("min_step")) p.min_step = as_double(j["min_step"], "plan.min_step");
  if (j.contains("max_step")) p.max_step = as_double(j["max_step"], "plan.max_step");
}

void parse_init(const json& j, InitSpec& s) {
  check_keys(j, "init.", {"preset", "seed", "Q", "R", "T"});
  const bool any_mat = j.contains("Q") || j.contains("R") || j.contains("T");
  if (j.contains("preset")) {
    s.preset = as_string(j["preset"], "init.preset");
    if (any_mat && !s.preset.empty())
      throw ConfigError("init.preset and explicit init matrices are mutually exclusive");
  } else if (any_mat) {
    s.preset.clear();
  }
  if (j.contains("seed")) s.seed = as_uint(j["seed"], "init.seed");
  if (any_mat) {
    if (!(j.contains("Q") && j.contains("R") && j.contains("T")))
      throw ConfigError("explicit init requires all of init.Q, init.R, init.T");
    s.Q = as_matrix(j["Q"], "init.Q");
    s.R = as_matrix(j["R"], "init.R");
    s.T = as_matrix(j["T"], "init.T");
  }
}

void parse_sim(const json& j, SimSpec& s) {
  check_keys(j, "sim.", {"record_every", "ma_window", "eps_tasks", "eps_tests",
                         "shared_init", "init_seed", "matched_q"});
  if (j.contains("record_every"))
    s.record_every = as_double(j["record_every"], "sim.record_every");
  if (j.contains("ma_window")) s.ma_window = as_double(j["ma_window"], "sim.ma_window");
  if (j.contains("eps_tasks")) s.eps_tasks = as_int(j["eps_tasks"], "sim.eps_tasks");
  if (j.contains("eps_tests")) s.eps_tests = as_int(j["eps_tests"], "sim.eps_tests");
  if (j.contains("shared_init"))
    s.shared_init = as_bool(j["shared_init"], "sim.shared_init");
  if (j.contains("init_seed")) s.init_seed = as_uint(j["init_seed"], "sim.init_seed");
  if (j.contains("matched_q")) s.matched_q = as_double(j["matched_q"], "sim.matched_q");
}

void parse_sweep(const json& j, SweepSpec& s) {
  check_keys(j, "sweep.", {"K", "eta_J", "eta_w", "threshold", "alpha_max"});
  if (j.contains("K")) {
    s.K.clear();
    for (const auto& v : j["K"]) s.K.push_back(static_cast<int>(as_int(v, "sweep.K entry")));
  }
  if (j.contains("eta_J")) {
    s.eta_J.clear();
    for (const auto& v : j["eta_J"]) s.eta_J.push_back(as_double(v, "sweep.eta_J entry"));
  }
  if (j.contains("eta_w")) {
    s.eta_w.clear();
    for (const auto& v : j["eta_w"]) s.eta_w.push_back(as_double(v, "sweep.eta_w entry"));
  }
  if (j.contains("threshold")) s.threshold = as_double(j["threshold"], "sweep.threshold");
  if (j.contains("alpha_max")) s.alpha_max = as_double(j["alpha_max"], "sweep.alpha_max");
}

void parse_validate(const json& j, ValidateSpec& s) {
  check_keys(j, "validate.", {"count", "tolerance", "seed"});
  if (j.contains("count")) s.count = as_int(j["count"], "validate.count");
  if (j.contains("tolerance"))
    s.tolerance = as_double(j["tolerance"], "validate.tolerance");
  if (j.contains("seed")) s.seed = as_uint(j["seed"], "validate.seed");
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  require_object(j, "config");
  check_keys(j, "", {"name", "kind", "model", "variant", "plan", "init", "seeds",
                     "sim", "sweep", "validate", "gamma_list", "v_list",
                     "out_dir", "jobs"});
  ExperimentConfig c;
  if (!j.contains("kind")) throw ConfigError("missing config field: kind");
  c.kind = experiment_kind_from_string(as_string(j["kind"], "kind"));
  if (j.contains("name")) c.name = as_string(j["name"], "name");
  if (j.contains("model")) parse_model(require_object(j["model"], "model"), c.model);
  if (j.contains("variant"))
    parse_variant(require_object(j["variant"], "variant"), c.variant);
  if (j.contains("plan")) parse_plan(require_object(j["plan"], "plan"), c.plan);
  if (j.contains("init")) parse_init(require_object(j["init"], "init"), c.init);
  if (j.contains("seeds")) {
    if (!j["seeds"].is_array()) throw ConfigError("seeds must be an array");
    for (const auto& v : j["seeds"]) c.seeds.push_back(as_uint(v, "seeds entry"));
  }
  if (j.contains("sim")) parse_sim(require_object(j["sim"], "sim"), c.sim);
  if (j.contains("sweep")) parse_sweep(require_object(j["sweep"], "sweep"), c.sweep);
  if (j.contains("validate"))
    parse_validate(require_object(j["validate"], "validate"), c.validate);
  if (j.contains("gamma_list"))
    for (const auto& v : j["gamma_list"])
      c.gamma_list.push_back(as_double(v, "gamma_list entry"));
  if (j.contains("v_list"))
    for (const auto& v : j["v_list"]) c.v_list.push_back(as_int(v, "v_list entry"));
  if (j.contains("out_dir")) c.out_dir = as_string(j["out_dir"], "out_dir");
  if (j.contains("jobs")) c.jobs = static_cast<int>(as_int(j["jobs"], "jobs"));
  c.validate_config();
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

void ExperimentConfig::validate_config() const {
  if (name.empty()) throw ConfigError("name must be nonempty");
  if (jobs < 0) throw ConfigError("jobs must be >= 0");
  model.validate();
  variant.validate();
  plan.validate();

  const bool needs_seeds =
      kind == ExperimentKind::Simulate || kind == ExperimentKind::Compare;
  if (needs_seeds) {
    if (seeds.empty())
      throw ConfigError("seeds must be nonempty for kind=" + to_string(kind));
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j2 = i + 1; j2 < seeds.size(); ++j2)
        if (seeds[i] == seeds[j2]) throw ConfigError("seeds must be distinct");
    if (!(sim.record_every > 0.0))
      throw ConfigError("sim.record_every must be > 0");
    if (!(sim.ma_window >= 0.0)) throw ConfigError("sim.ma_window must be >= 0");
    if (sim.eps_tasks < 1 || sim.eps_tests < 1)
      throw ConfigError("sim.eps_tasks and sim.eps_tests must be >= 1");
    if (!(sim.matched_q >= 0.0))
      throw ConfigError("sim.matched_q must be >= 0");
  }

  if (kind == ExperimentKind::Compare) {
    const double tasks = plan.record_every * static_cast<double>(model.N);
    if (std::abs(tasks - std::llround(tasks)) > 1e-6 || std::llround(tasks) < 1)
      throw ConfigError(
          "compare requires plan.record_every * model.N to be a whole number "
          "of tasks");
  }

  if (kind == ExperimentKind::Sweep) {
    if (sweep.eta_J.empty()) throw ConfigError("sweep.eta_J must be nonempty");
    if (sweep.eta_w.empty()) throw ConfigError("sweep.eta_w must be nonempty");
    for (double v : sweep.eta_J)
      if (!(v > 0.0)) throw ConfigError("sweep.eta_J entries must be > 0");
    for (double v : sweep.eta_w)
      if (!(v > 0.0)) throw ConfigError("sweep.eta_w entries must be > 0");
    for (int k : sweep.K)
      if (k < 1) throw ConfigError("sweep.K entries must be >= 1");
    if (!(sweep.threshold > 0.0)) throw ConfigError("sweep.threshold must be > 0");
    if (!(sweep.alpha_max > 0.0)) throw ConfigError("sweep.alpha_max must be > 0");
    if (init.explicit_matrices()) {
      const std::vector<int> ks = sweep.K.empty() ? std::vector<int>{model.K} : sweep.K;
      for (int k : ks)
        if (init.Q.rows() != k)
          throw ConfigError("explicit init matrices do not match sweep.K");
    }
  }

  if (!gamma_list.empty()) {
    if (kind != ExperimentKind::Theory)
      throw ConfigError("gamma_list is only valid for kind=theory");
    if (variant.activation != Activation::Erf)
      throw ConfigError("gamma_list requires variant.activation=erf");
    if (variant.lambda > 0.0 || variant.sigma_noise2 > 0.0)
      throw ConfigError("gamma_list cannot be combined with lambda or sigma_noise2");
    for (double g : gamma_list)
      if (!(g > 0.0) || g > 1.0)
        throw ConfigError("gamma_list entries must lie in (0, 1]");
  }

  if (!v_list.empty()) {
    if (kind != ExperimentKind::Simulate)
      throw ConfigError("v_list is only valid for kind=simulate");
    for (std::int64_t v : v_list)
      if (v < 1) throw ConfigError("v_list entries must be >= 1");
  }

  if (kind == ExperimentKind::ValidateIntegrals) {
    if (validate.count < 1) throw ConfigError("validate.count must be >= 1");
    if (!(validate.tolerance >= 0.0))
      throw ConfigError("validate.tolerance must be >= 0");
  }
}

std::string render_config(const ExperimentConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["kind"] = to_string(c.kind);
  j["model"] = {{"N", c.model.N},         {"K", c.model.K},
                {"M", c.model.M},         {"P", c.model.P},
                {"V", c.model.V},         {"eta_w", c.model.eta_w},
                {"eta_J", c.model.eta_J}};
  j["variant"] = {{"activation", to_string(c.variant.activation)},
                  {"gamma", c.variant.gamma},
                  {"lambda", c.variant.lambda},
                  {"sigma_noise2", c.variant.sigma_noise2}};
  if (c.kind != ExperimentKind::ValidateIntegrals) {
    j["plan"] = {
        {"alpha_max", c.plan.alpha_max},
        {"method", c.plan.method == OdeMethod::Rk4Fixed ? "rk4" : "rkf45"},
        {"step", c.plan.step},
        {"record_every", c.plan.record_every},
        {"rtol", c.plan.rtol},
        {"atol", c.plan.atol},
        {"min_step", c.plan.min_step},
        {"max_step", c.plan.max_step}};
    ojson init;
    if (c.init.explicit_matrices()) {
      init["Q"] = matrix_to_json(c.init.Q);
      init["R"] = matrix_to_json(c.init.R);
      init["T"] = matrix_to_json(c.init.T);
    } else {
      init["preset"] = c.init.preset;
      init["seed"] = c.init.seed;
    }
    j["init"] = init;
  }
  if (!c.seeds.empty()) j["seeds"] = c.seeds;
  if (c.kind == ExperimentKind::Simulate || c.kind == ExperimentKind::Compare)
    j["sim"] = {{"record_every", c.sim.record_every},
                {"ma_window", c.sim.ma_window},
                {"eps_tasks", c.sim.eps_tasks},
                {"eps_tests", c.sim.eps_tests},
                {"shared_init", c.sim.shared_init},
                {"init_seed", c.sim.init_seed},
                {"matched_q", c.sim.matched_q}};
  if (c.kind == ExperimentKind::Sweep) {
    ojson s;
    s["K"] = c.sweep.K.empty() ? std::vector<int>{c.model.K} : c.sweep.K;
    s["eta_J"] = c.sweep.eta_J;
    s["eta_w"] = c.sweep.eta_w;
    s["threshold"] = c.sweep.threshold;
    s["alpha_max"] = c.sweep.alpha_max;
    j["sweep"] = s;
  }
  if (c.kind == ExperimentKind::ValidateIntegrals)
    j["validate"] = {{"count", c.validate.count},
                     {"tolerance", c.validate.tolerance},
                     {"seed", c.validate.seed}};
  if (!c.gamma_list.empty()) j["gamma_list"] = c.gamma_list;
  if (!c.v_list.empty()) j["v_list"] = c.v_list;
  return j.dump(2) + "\n";
}

// --------------------------------------------------------------- init presets

OrderParams resolve_init(const InitSpec& spec, int K, int M) {
  if (K < 1 || M < 1) throw ConfigError("init requires K >= 1 and M >= 1");
  if (spec.explicit_matrices()) {
    if (spec.Q.rows() != K || spec.Q.cols() != K)
      throw ConfigError("init.Q must be K x K");
    if (spec.R.rows() != K || spec.R.cols() != M)
      throw ConfigError("init.R must be K x M");
    if (spec.T.rows() != M || spec.T.cols() != M)
      throw ConfigError("init.T must be M x M");
    return OrderParams(spec.Q, spec.R, spec.T);
  }

  Eigen::MatrixXd Q = 0.5 * Eigen::MatrixXd::Identity(K, K);
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(M, M);
  for (int n = 0; n < M; ++n) T(n, n) = n + 1.0;
  Eigen::MatrixXd R(K, M);

  if (spec.preset == "paper-fig3") {
    CounterRng rng(spec.seed, 0, StreamRole::InitOverlap);
    for (int k = 0; k < K; ++k)
      for (int n = 0; n < M; ++n) R(k, n) = 1e-12 * rng.next_uniform();
  } else if (spec.preset == "linear-i" || spec.preset == "linear-ii" ||
             spec.preset == "linear-iii") {
    R.setConstant(1e-12);
    if (spec.preset != "linear-i") R(0, 0) = 1.1e-12;
    if (spec.preset == "linear-iii") {
      if (K < 3) throw ConfigError("init preset linear-iii requires K >= 3");
      R(2, 0) = 1.2e-12;
    }
  } else {
    throw ConfigError("unknown init preset: " + spec.preset);
  }
  return OrderParams(Q, R, T);
}

// -------------------------------------------------------------------- presets

namespace {

std::vector<std::uint64_t> seq_seeds(int n) {
  std::vector<std::uint64_t> s;
  for (int i = 1; i <= n; ++i) s.push_back(i);
  return s;
}

void theory_plan(IntegrationPlan& p, double alpha_max) {
  p.alpha_max = alpha_max;
  p.method = OdeMethod::Rkf45Adaptive;
  p.record_every = 0.5;
  p.rtol = 1e-8;
  p.atol = 1e-10;
  p.max_step = 0.25;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"fig2", "fig3a", "fig3b", "fig4",   "fig5",
          "fig6", "appC",  "appF-i", "appF-ii", "appF-iii"};
}

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.model.N = 1000;
  c.model.K = 3;
  c.model.M = 3;
  c.model.P = 100;
  c.model.V = 100;

  if (name == "fig2") {
    // Theory-vs-simulation ensemble at desk scale.
    c.kind = ExperimentKind::Compare;
    c.model.N = 500;
    c.model.eta_J = 6.0;
    c.model.eta_w = 4.0;
    c.plan.method = OdeMethod::Rk4Fixed;
    c.plan.step = 0.01;
    c.plan.alpha_max = 20.0;
    c.plan.record_every = 0.5;
    c.seeds = seq_seeds(10);
    c.sim.record_every = 0.5;
    c.sim.ma_window = 0.05;
    c.sim.shared_init = true;
    c.sim.init_seed = 1;
  } else if (name == "fig3a" || name == "fig3b") {
    // Specialization case study; a = slow head rate, b = fast head rate.  The
    // slow run stops inside its unspecialized plateau, which ends well before
    // the fast run's alignment completes.
    c.kind = ExperimentKind::Theory;
    c.model.eta_J = 3.0;
    c.model.eta_w = name == "fig3a" ? 3.0 : 9.0;
    theory_plan(c.plan, name == "fig3a" ? 100.0 : 500.0);
  } else if (name == "fig4") {
    // Crossing-time heatmap over the learning-rate grid.  The rate axes span
    // both regime boundaries: the slow corner where small rates never reach
    // the threshold, and the high-eta_J stability edge where wider learners
    // keep converging after narrower ones start to diverge.
    c.kind = ExperimentKind::Sweep;
    c.sweep.K = {3, 6};
    c.sweep.eta_J = {3, 6, 9, 12, 18, 24, 36, 48};
    c.sweep.eta_w = {3, 5, 7, 9, 11, 13, 15, 18};
    c.sweep.threshold = 0.01;
    c.sweep.alpha_max = 450.0;
    c.plan.method = OdeMethod::Rkf45Adaptive;
    c.plan.record_every = 1.0;
    c.plan.rtol = 1e-7;
    c.plan.atol = 1e-9;
    c.plan.max_step = 1.0;
    c.plan.alpha_max = 450.0;
  } else if (name == "fig5") {
    // Overparameterized learner, two student units per teacher unit.  The
    // horizon is long enough for the second unit on each teacher to lock in,
    // which happens well after the error itself has converged.
    c.kind = ExperimentKind::Theory;
    c.model.K = 6;
    c.model.eta_J = 3.0;
    c.model.eta_w = 9.0;
    theory_plan(c.plan, 2000.0);
  } else if (name == "fig6") {
    // Task-to-task teacher variability scan.
    c.kind = ExperimentKind::Theory;
    c.model.eta_J = 6.0;
    c.model.eta_w = 8.0;
    theory_plan(c.plan, 500.0);
    c.gamma_list = {0.9, 0.95, 0.99, 1.0};
  } else if (name == "appC") {
    // Self-averaging check: ensemble spread vs query-set size.
    c.kind = ExperimentKind::Simulate;
    c.model.N = 500;
    c.model.eta_J = 6.0;
    c.model.eta_w = 4.0;
    c.plan.alpha_max = 10.0;
    c.seeds = seq_seeds(10);
    c.sim.record_every = 0.5;
    c.sim.ma_window = 0.5;
    c.sim.shared_init = true;
    c.sim.init_seed = 1;
    c.v_list = {20, 50, 100};
  } else if (name == "appF-i" || name == "appF-ii" || name == "appF-iii") {
    // Identity-activation case studies with graded initial asymmetry.
    c.kind = ExperimentKind::Theory;
    c.variant.activation = Activation::Linear;
    c.model.eta_J = 3.0;
    c.model.eta_w = 0.5;
    theory_plan(c.plan, 500.0);
    c.plan.rtol = 1e-9;
    c.plan.atol = 1e-13;
    c.plan.max_step = 0.5;
    c.init.preset = name == "appF-i" ? "linear-i"
                    : name == "appF-ii" ? "linear-ii"
                                        : "linear-iii";
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  c.validate_config();
  return c;
}

// -------------------------------------------------------------- orchestration

namespace {

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& body) {
  if (n == 0) return;
  int workers = jobs > 0 ? jobs : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

std::string format_value_token(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", x);
  return buf;
}

// Shared column block: Q upper triangle (row-major), R (row-major), rho.
void append_state_headers(std::string& h, int K, int M) {
  for (int k = 0; k < K; ++k)
    for (int l = k; l < K; ++l)
      h += ",Q_" + std::to_string(k + 1) + "_" + std::to_string(l + 1);
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n)
      h += ",R_" + std::to_string(k + 1) + "_" + std::to_string(n + 1);
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n)
      h += ",rho_" + std::to_string(k + 1) + "_" + std::to_string(n + 1);
}

void append_state_values(std::string& line, const OrderParams& p,
                         const Eigen::MatrixXd& rho) {
  const int K = p.K(), M = p.M();
  for (int k = 0; k < K; ++k)
    for (int l = k; l < K; ++l) line += "," + format_g17(p.Q()(k, l));
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n) line += "," + format_g17(p.R()(k, n));
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n) line += "," + format_g17(rho(k, n));
}

std::string theory_csv(const Trajectory& t, int K, int M) {
  std::string out = "alpha,eps_meta";
  append_state_headers(out, K, M);
  out += "\n";
  for (std::size_t i = 0; i < t.alpha.size(); ++i) {
    std::string line = format_g17(t.alpha[i]) + "," + format_g17(t.eps[i]);
    append_state_values(line, t.states[i], t.rho[i]);
    out += line + "\n";
  }
  return out;
}

std::string sim_csv(const SimTrajectory& t, int K, int M) {
  std::string out = "alpha,eps_meta,eps_meta_empirical,eps_meta_ma";
  append_state_headers(out, K, M);
  out += "\n";
  for (std::size_t i = 0; i < t.alpha.size(); ++i) {
    std::string line = format_g17(t.alpha[i]) + "," + format_g17(t.eps_analytic[i]) +
                       "," + format_g17(t.eps_empirical[i]) + "," +
                       format_g17(t.eps_ma[i]);
    append_state_values(line, t.states[i], t.rho[i]);
    out += line + "\n";
  }
  return out;
}

std::string w_stats_csv(const SimTrajectory& t) {
  std::string out = "alpha,w_rms\n";
  for (std::size_t i = 0; i < t.alpha.size(); ++i)
    out += format_g17(t.alpha[i]) + "," + format_g17(t.w_rms[i]) + "\n";
  return out;
}

struct Artifact {
  std::string filename;
  std::string bytes;
};

struct RunOutput {
  std::vector<Artifact> artifacts;
  std::vector<std::string> warnings;
  bool completed = true;
  bool validation_passed = true;
};

RunOutput run_theory_kind(const ExperimentConfig& cfg) {
  const bool multi = !cfg.gamma_list.empty();
  const std::vector<double> gammas =
      multi ? cfg.gamma_list : std::vector<double>{cfg.variant.gamma};
  const OrderParams init = resolve_init(cfg.init, cfg.model.K, cfg.model.M);

  std::vector<Trajectory> runs(gammas.size());
  parallel_for(gammas.size(), cfg.jobs, [&](std::size_t i) {
    VariantConfig v = cfg.variant;
    v.gamma = gammas[i];
    runs[i] = integrate(init, cfg.model, v, cfg.plan);
  });

  RunOutput out;
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    const std::string fname =
        multi ? "trajectory_gamma" + format_value_token(gammas[i]) + ".csv"
              : "trajectory.csv";
    out.artifacts.push_back({fname, theory_csv(runs[i], cfg.model.K, cfg.model.M)});
    if (!runs[i].completed) {
      out.completed = false;
      out.warnings.push_back(fname + ": integration aborted at alpha=" +
                             format_g17(runs[i].last_alpha) +
                             " (state left the admissible region)");
    }
  }
  return out;
}

RunOutput run_simulate_kind(const ExperimentConfig& cfg) {
  const bool multi_v = !cfg.v_list.empty();
  const std::vector<std::int64_t> vs =
      multi_v ? cfg.v_list : std::vector<std::int64_t>{cfg.model.V};

  SimState shared;
  if (cfg.sim.shared_init) {
    shared = init_sim(cfg.model, cfg.variant, cfg.sim.init_seed);
    if (cfg.sim.matched_q > 0.0)
      rescale_to_matched_init(shared, cfg.sim.matched_q);
  }

  struct Job {
    std::int64_t V;
    std::uint64_t seed;
    std::string tag;
  };
  std::vector<Job> jobs_list;
  for (std::int64_t v : vs)
    for (std::uint64_t s : cfg.seeds) {
      std::string tag = multi_v ? "_V" + std::to_string(v) : "";
      tag += "_seed" + std::to_string(s);
      jobs_list.push_back({v, s, tag});
    }

  std::vector<SimTrajectory> runs(jobs_list.size());
  parallel_for(jobs_list.size(), cfg.jobs, [&](std::size_t i) {
    ModelConfig m = cfg.model;
    m.V = jobs_list[i].V;
    SimState state;
    if (cfg.sim.shared_init) {
      state = shared;
      state.seed = jobs_list[i].seed;
    } else {
      state = init_sim(m, cfg.variant, jobs_list[i].seed);
      if (cfg.sim.matched_q > 0.0)
        rescale_to_matched_init(state, cfg.sim.matched_q);
    }
    runs[i] = run_stream(state, m, cfg.variant, cfg.plan.alpha_max,
                         cfg.sim.record_every, cfg.sim.ma_window,
                         cfg.sim.eps_tasks, cfg.sim.eps_tests);
  });

  RunOutput out;
  for (std::size_t i = 0; i < jobs_list.size(); ++i) {
    const std::string traj_name = "trajectory" + jobs_list[i].tag + ".csv";
    out.artifacts.push_back({traj_name, sim_csv(runs[i], cfg.model.K, cfg.model.M)});
    out.artifacts.push_back({"w_stats" + jobs_list[i].tag + ".csv", w_stats_csv(runs[i])});
    if (!runs[i].completed) {
      out.completed = false;
      out.warnings.push_back(traj_name + ": stream aborted at alpha=" +
                             format_g17(runs[i].last_alpha) +
                             " (non-finite weights)");
    }
  }
  return out;
}

RunOutput run_compare_kind(const ExperimentConfig& cfg) {
  // One teacher/learner draw shared by the ODE start and every stream; seeds
  // only vary the task streams, so the ensemble mean estimates the same
  // deterministic trajectory the theory integrates.
  SimState base = init_sim(cfg.model, cfg.variant, cfg.sim.init_seed);
  if (cfg.sim.matched_q > 0.0) rescale_to_matched_init(base, cfg.sim.matched_q);
  const OrderParams p0 = measure_order_params(base);
  const Trajectory theory = integrate(p0, cfg.model, cfg.variant, cfg.plan);

  std::vector<SimTrajectory> sims(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t i) {
    SimState state = base;
    state.seed = cfg.seeds[i];
    sims[i] = run_stream(state, cfg.model, cfg.variant, cfg.plan.alpha_max,
                         cfg.plan.record_every, cfg.sim.ma_window,
                         cfg.sim.eps_tasks, cfg.sim.eps_tests);
  });

  RunOutput out;
  out.completed = theory.completed;
  if (!theory.completed)
    out.warnings.push_back("theory_trajectory.csv: integration aborted at alpha=" +
                           format_g17(theory.last_alpha));
  std::size_t rows = theory.alpha.size();
  for (std::size_t i = 0; i < sims.size(); ++i) {
    rows = std::min(rows, sims[i].alpha.size());
    if (!sims[i].completed) {
      out.completed = false;
      out.warnings.push_back("trajectory_seed" + std::to_string(cfg.seeds[i]) +
                             ".csv: stream aborted at alpha=" +
                             format_g17(sims[i].last_alpha));
    }
  }

  const int K = cfg.model.K, M = cfg.model.M;
  const double S = static_cast<double>(sims.size());
  std::string csv = "alpha";
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < M; ++n) {
      const std::string base_name =
          "R_" + std::to_string(k + 1) + "_" + std::to_string(n + 1);
      csv += "," + base_name + "_theory," + base_name + "_sim_mean," + base_name +
             "_sim_se";
    }
  for (int k = 0; k < K; ++k)
    for (int l = k; l < K; ++l) {
      const std::string base_name =
          "Q_" + std::to_string(k + 1) + "_" + std::to_string(l + 1);
      csv += "," + base_name + "_theory," + base_name + "_sim_mean," + base_name +
             "_sim_se";
    }
  csv += ",eps_meta_theory,eps_meta_sim_mean,eps_meta_sim_se\n";

  auto mean_se = [&](const std::function<double(const SimTrajectory&)>& get,
                     double& mean, double& se) {
    mean = 0.0;
    for (const auto& s : sims) mean += get(s);
    mean /= S;
    double var = 0.0;
    for (const auto& s : sims) {
      const double d = get(s) - mean;
      var += d * d;
    }
    var = S > 1 ? var / (S - 1) : 0.0;
    se = std::sqrt(var / S);
  };

  for (std::size_t i = 0; i < rows; ++i) {
    std::string line = format_g17(theory.alpha[i]);
    double mean, se;
    for (int k = 0; k < K; ++k)
      for (int n = 0; n < M; ++n) {
        mean_se([&](const SimTrajectory& s) { return s.states[i].R()(k, n); }, mean,
                se);
        line += "," + format_g17(theory.states[i].R()(k, n)) + "," +
                format_g17(mean) + "," + format_g17(se);
      }
    for (int k = 0; k < K; ++k)
      for (int l = k; l < K; ++l) {
        mean_se([&](const SimTrajectory& s) { return s.states[i].Q()(k, l); }, mean,
                se);
        line += "," + format_g17(theory.states[i].Q()(k, l)) + "," +
                format_g17(mean) + "," + format_g17(se);
      }
    mean_se([&](const SimTrajectory& s) { return s.eps_analytic[i]; }, mean, se);
    line += "," + format_g17(theory.eps[i]) + "," + format_g17(mean) + "," +
            format_g17(se);
    csv += line + "\n";
  }

  out.artifacts.push_back({"compare.csv", csv});
  out.artifacts.push_back({"theory_trajectory.csv", theory_csv(theory, K, M)});
  for (std::size_t i = 0; i < sims.size(); ++i) {
    const std::string tag = "_seed" + std::to_string(cfg.seeds[i]);
    out.artifacts.push_back({"trajectory" + tag + ".csv", sim_csv(sims[i], K, M)});
    out.artifacts.push_back({"w_stats" + tag + ".csv", w_stats_csv(sims[i])});
  }
  return out;
}

}  // namespace

std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg) {
  cfg.validate_config();
  const std::vector<int> ks =
      cfg.sweep.K.empty() ? std::vector<int>{cfg.model.K} : cfg.sweep.K;
  const std::size_t nj = cfg.sweep.eta_J.size(), nw = cfg.sweep.eta_w.size();
  std::vector<SweepCell> cells(ks.size() * nj * nw);

  parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
    const std::size_t ik = idx / (nj * nw);
    const std::size_t ij = (idx / nw) % nj;
    const std::size_t iw = idx % nw;
    SweepCell cell;
    cell.K = ks[ik];
    cell.eta_J = cfg.sweep.eta_J[ij];
    cell.eta_w = cfg.sweep.eta_w[iw];
    try {
      ModelConfig m = cfg.model;
      m.K = cell.K;
      m.eta_J = cell.eta_J;
      m.eta_w = cell.eta_w;
      IntegrationPlan plan = cfg.plan;
      plan.alpha_max = cfg.sweep.alpha_max;
      const OrderParams p0 = resolve_init(cfg.init, m.K, m.M);
      const Trajectory traj = integrate(p0, m, cfg.variant, plan);
      const CrossingReport cr =
          first_crossing(traj, eps_threshold_config(cfg.sweep.threshold));
      if (cr.crossed) cell.alpha_tilde = cr.alpha_tilde;
      cell.eps_final = traj.completed && !traj.eps.empty()
                           ? traj.eps.back()
                           : std::numeric_limits<double>::quiet_NaN();
    } catch (const std::exception&) {
      cell.alpha_tilde.reset();
      cell.eps_final = std::numeric_limits<double>::quiet_NaN();
    }
    cells[idx] = cell;
  });
  return cells;
}

// ------------------------------------------------------------- run_experiment

ArtifactSet run_experiment(const ExperimentConfig& cfg) {
  cfg.validate_config();
  if (cfg.out_dir.empty())
    throw ConfigError("out_dir must be set before running an experiment");

  RunOutput run;
  switch (cfg.kind) {
    case ExperimentKind::Theory:
      run = run_theory_kind(cfg);
      break;
    case ExperimentKind::Simulate:
      run = run_simulate_kind(cfg);
      break;
    case ExperimentKind::Compare:
      run = run_compare_kind(cfg);
      break;
    case ExperimentKind::Sweep: {
      const std::vector<SweepCell> cells = run_sweep(cfg);
      std::string csv = "K,eta_J,eta_w,alpha_tilde,eps_final\n";
      for (const auto& c : cells) {
        csv += std::to_string(c.K) + "," + format_g17(c.eta_J) + "," +
               format_g17(c.eta_w) + ",";
        if (c.alpha_tilde) csv += format_g17(*c.alpha_tilde);
        csv += "," + format_g17(c.eps_final) + "\n";
        if (std::isnan(c.eps_final))
          run.warnings.push_back("sweep cell K=" + std::to_string(c.K) +
                                 " eta_J=" + format_value_token(c.eta_J) +
                                 " eta_w=" + format_value_token(c.eta_w) +
                                 ": integration failed; sentinel row emitted");
      }
      run.artifacts.push_back({"sweep.csv", csv});
      break;
    }
    case ExperimentKind::ValidateIntegrals: {
      const IntegralValidationReport rep = validate_integrals(
          cfg.validate.count, cfg.validate.tolerance, cfg.validate.seed, cfg.jobs);
      ojson j;
      j["count_per_kind"] = rep.count_per_kind;
      j["tolerance"] = rep.tolerance;
      j["seed"] = cfg.validate.seed;
      ojson err, fails;
      const IntegralKind kinds[4] = {IntegralKind::I2, IntegralKind::I2Prime,
                                     IntegralKind::I3, IntegralKind::I4};
      for (int i = 0; i < 4; ++i) {
        err[to_string(kinds[i])] = rep.max_abs_err[i];
        fails[to_string(kinds[i])] = rep.failures[i];
      }
      j["max_abs_err"] = err;
      j["failures"] = fails;
      j["pass"] = rep.pass;
      run.artifacts.push_back({"integral_report.json", j.dump(2) + "\n"});
      run.validation_passed = rep.pass;
      if (!rep.pass)
        run.warnings.push_back("integral validation exceeded tolerance " +
                               format_g17(cfg.validate.tolerance));
      break;
    }
  }

  fs::create_directories(cfg.out_dir);
  ArtifactSet out;
  out.completed = run.completed;
  out.validation_passed = run.validation_passed;
  out.warnings = run.warnings;

  ojson manifest;
  manifest["name"] = cfg.name;
  manifest["kind"] = to_string(cfg.kind);
  manifest["completed"] = run.completed;
  manifest["warnings"] = run.warnings;
  manifest["config"] = ojson::parse(render_config(cfg));
  ojson arts = ojson::array();
  for (const auto& a : run.artifacts) {
    const fs::path path = fs::path(cfg.out_dir) / a.filename;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write artifact: " + path.string());
    f.write(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
    f.close();
    out.files.push_back(path.string());
    arts.push_back({{"path", a.filename}, {"sha256", sha256_hex(a.bytes)}});
  }
  manifest["artifacts"] = arts;

  const fs::path mpath = fs::path(cfg.out_dir) / "manifest.json";
  std::ofstream mf(mpath, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write manifest: " + mpath.string());
  const std::string mbytes = manifest.dump(2) + "\n";
  mf.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  mf.close();
  out.files.push_back(mpath.string());
  return out;
}

}  // namespace metalab
