#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "metalab/experiment.hpp"

using namespace metalab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("metalab_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

bool has_file(const ArtifactSet& arts, const std::string& name) {
  for (const auto& f : arts.files)
    if (fs::path(f).filename() == name) return true;
  return false;
}

}  // namespace

TEST_CASE("sha256 reproduces the published test vectors") {
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(
            "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  CHECK(sha256_hex(std::string(1000000, 'a')) ==
        "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
}

TEST_CASE("seventeen-digit serialization round-trips doubles") {
  const double values[] = {1.0 / 3.0,  3.141592653589793, 1e-300, -0.0,
                           6.02214076e23, 0.1, 5e-324, 12345.6789};
  for (double v : values) {
    std::string s = format_g17(v);
    double back = std::strtod(s.c_str(), nullptr);
    CHECK(back == v);
  }
  CHECK(format_g17(0.5) == "0.5");
  CHECK(format_g17(std::nan("")) == "nan");
}

TEST_CASE("experiment kinds map to their names and back") {
  for (ExperimentKind k :
       {ExperimentKind::Theory, ExperimentKind::Simulate, ExperimentKind::Compare,
        ExperimentKind::Sweep, ExperimentKind::ValidateIntegrals})
    CHECK(experiment_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(experiment_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("minimal config parses with defaults") {
  ExperimentConfig c = parse_config(R"({"kind":"theory"})");
  CHECK(c.kind == ExperimentKind::Theory);
  CHECK(c.name == "experiment");
  CHECK(c.model.N == 1000);
  CHECK(c.model.K == 3);
  CHECK(c.init.preset == "paper-fig3");
}

TEST_CASE("config rejection names the offending field") {
  CHECK_THROWS_WITH_AS(parse_config(R"({"kind":"theory","bogus":1})"),
                       doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"kind":"theory","model":{"bogus":1}})"),
      doctest::Contains("model.bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"kind":"theory","model":{"N":"x"}})"),
                       doctest::Contains("model.N"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"name":"x"})"), ConfigError);  // kind missing
  CHECK_THROWS_AS(parse_config("not json at all"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind":"theory","seeds":5})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind":"theory","seeds":[-1]})"), ConfigError);
}

TEST_CASE("cross-field rules reject inconsistent configs") {
  CHECK_THROWS_WITH_AS(parse_config(R"({"kind":"simulate"})"),
                       doctest::Contains("seeds"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"kind":"simulate","seeds":[1,1]})"),
                       doctest::Contains("distinct"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"kind":"simulate","seeds":[1],"gamma_list":[0.9]})"),
      doctest::Contains("gamma_list"), ConfigError);
  CHECK_THROWS_AS(
      parse_config(
          R"({"kind":"theory","variant":{"lambda":0.1},"gamma_list":[0.9]})"),
      ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind":"theory","gamma_list":[1.5]})"),
                  ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"kind":"theory","v_list":[50]})"),
                       doctest::Contains("v_list"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind":"sweep","sweep":{"eta_J":[1]}})"),
                  ConfigError);  // eta_w missing
  CHECK_THROWS_AS(
      parse_config(R"({"kind":"sweep","sweep":{"eta_J":[1],"eta_w":[-2]}})"),
      ConfigError);

  // The ensemble comparison needs records on whole task counts.
  CHECK_THROWS_WITH_AS(
      parse_config(
          R"({"kind":"compare","seeds":[1,2],"model":{"N":100},
              "plan":{"record_every":0.015}})"),
      doctest::Contains("whole number"), ConfigError);
  ExperimentConfig ok = parse_config(
      R"({"kind":"compare","seeds":[1,2],"model":{"N":100},
          "plan":{"record_every":0.05}})");
  CHECK(ok.kind == ExperimentKind::Compare);

  CHECK_THROWS_WITH_AS(
      parse_config(R"({"kind":"simulate","seeds":[1],"sim":{"matched_q":-1}})"),
      doctest::Contains("matched_q"), ConfigError);
  ExperimentConfig mq = parse_config(
      R"({"kind":"simulate","seeds":[1],"sim":{"matched_q":0.5}})");
  CHECK(mq.sim.matched_q == 0.5);
}

TEST_CASE("explicit initial matrices parse and resolve") {
  ExperimentConfig c = parse_config(
      R"({"kind":"theory","model":{"K":1,"M":1},
          "init":{"Q":[[0.5]],"R":[[0.1]],"T":[[2.0]]}})");
  CHECK(c.init.explicit_matrices());
  OrderParams p = resolve_init(c.init, 1, 1);
  CHECK(p.Q()(0, 0) == 0.5);
  CHECK(p.R()(0, 0) == 0.1);
  CHECK(p.T()(0, 0) == 2.0);
  CHECK_THROWS_AS(resolve_init(c.init, 2, 1), ConfigError);

  CHECK_THROWS_WITH_AS(
      parse_config(R"({"kind":"theory","init":{"preset":"paper-fig3","Q":[[1]]}})"),
      doctest::Contains("mutually exclusive"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind":"theory","init":{"Q":[[1]]}})"),
                  ConfigError);  // R, T missing
  CHECK_THROWS_AS(parse_config(R"({"kind":"theory","init":{"Q":[[1],[1,2]],
                                   "R":[[0]],"T":[[1]]}})"),
                  ConfigError);  // ragged rows
}

TEST_CASE("named initial conditions have the documented structure") {
  InitSpec spec;
  spec.preset = "paper-fig3";
  spec.seed = 9;
  OrderParams p = resolve_init(spec, 3, 3);
  CHECK((p.Q() - 0.5 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() ==
        0.0);
  for (int n = 0; n < 3; ++n) CHECK(p.T()(n, n) == n + 1.0);
  CHECK(p.T().cwiseAbs().sum() == 6.0);  // diagonal only
  std::set<double> entries;
  for (int k = 0; k < 3; ++k)
    for (int n = 0; n < 3; ++n) {
      CHECK(p.R()(k, n) > 0.0);
      CHECK(p.R()(k, n) <= 1e-12);
      entries.insert(p.R()(k, n));
    }
  CHECK(entries.size() == 9);  // symmetry actually broken

  OrderParams p2 = resolve_init(spec, 3, 3);
  CHECK((p.R() - p2.R()).cwiseAbs().maxCoeff() == 0.0);
  spec.seed = 10;
  OrderParams p3 = resolve_init(spec, 3, 3);
  CHECK((p.R() - p3.R()).cwiseAbs().maxCoeff() > 0.0);

  InitSpec li;
  li.preset = "linear-i";
  OrderParams pi = resolve_init(li, 3, 3);
  CHECK((pi.R().array() == 1e-12).all());
  li.preset = "linear-ii";
  OrderParams pii = resolve_init(li, 3, 3);
  CHECK(pii.R()(0, 0) == 1.1e-12);
  CHECK(pii.R()(1, 0) == 1e-12);
  li.preset = "linear-iii";
  OrderParams piii = resolve_init(li, 3, 3);
  CHECK(piii.R()(0, 0) == 1.1e-12);
  CHECK(piii.R()(2, 0) == 1.2e-12);
  CHECK_THROWS_AS(resolve_init(li, 2, 3), ConfigError);
  li.preset = "nope";
  CHECK_THROWS_AS(resolve_init(li, 3, 3), ConfigError);
}

TEST_CASE("rendered configs parse back to a fixed point") {
  ExperimentConfig c = preset_config("fig2");
  std::string once = render_config(c);
  ExperimentConfig back = parse_config(once);
  CHECK(render_config(back) == once);
  CHECK(back.kind == ExperimentKind::Compare);
  CHECK(back.model.N == 500);
  CHECK(back.seeds.size() == 10);
  CHECK(back.sim.shared_init);
}

TEST_CASE("every named experiment is self-consistent") {
  const std::vector<std::string> names = preset_names();
  CHECK(names.size() == 10);
  for (const auto& name : names) {
    CAPTURE(name);
    ExperimentConfig c = preset_config(name);
    CHECK(c.name == name);
    std::string rendered = render_config(c);
    ExperimentConfig back = parse_config(rendered);
    CHECK(render_config(back) == rendered);
  }
  CHECK(preset_config("fig4").sweep.eta_J.size() == 8);
  CHECK(preset_config("fig4").sweep.eta_w.size() == 8);
  CHECK(preset_config("fig4").sweep.K == std::vector<int>{3, 6});
  CHECK(preset_config("fig6").gamma_list.size() == 4);
  CHECK(preset_config("appC").v_list == std::vector<std::int64_t>{20, 50, 100});
  CHECK(preset_config("appF-iii").variant.activation == Activation::Linear);
  CHECK(preset_config("fig5").model.K == 6);
  CHECK_THROWS_AS(preset_config("fig99"), ConfigError);
}

TEST_CASE("theory runs write a trajectory and a faithful manifest") {
  TempDir dir("theory");
  ExperimentConfig c = parse_config(
      R"({"kind":"theory","name":"tiny","model":{"K":2,"M":2},
          "plan":{"alpha_max":1.0,"method":"rk4","step":0.01,
                  "record_every":0.5}})");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(arts.completed);
  REQUIRE(has_file(arts, "trajectory.csv"));
  REQUIRE(has_file(arts, "manifest.json"));
  CHECK(fs::path(arts.files.back()).filename() == "manifest.json");

  std::string csv = slurp((dir.path / "trajectory.csv").string());
  CHECK(csv.rfind("alpha,eps_meta,Q_1_1,Q_1_2,Q_2_2,R_1_1", 0) == 0);
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 4);  // header + alpha in {0, 0.5, 1.0}

  // Manifest hashes must match the bytes actually on disk.
  std::string manifest = slurp((dir.path / "manifest.json").string());
  auto pos = manifest.find("\"sha256\"");
  REQUIRE(pos != std::string::npos);
  std::string quoted = manifest.substr(manifest.find(':', pos) + 3, 64);
  CHECK(quoted == sha256_hex(csv));
  CHECK(manifest.find("\"tiny\"") != std::string::npos);

  // Identical configs reproduce identical bytes.
  TempDir dir2("theory2");
  c.out_dir = dir2.str();
  run_experiment(c);
  CHECK(slurp((dir2.path / "trajectory.csv").string()) == csv);

  c.out_dir = "";
  CHECK_THROWS_AS(run_experiment(c), ConfigError);
}

TEST_CASE("teacher-variability scans write one trajectory per value") {
  TempDir dir("gamma");
  ExperimentConfig c = parse_config(
      R"({"kind":"theory","model":{"K":2,"M":2},
          "plan":{"alpha_max":0.5,"method":"rk4","step":0.01,
                  "record_every":0.5},
          "gamma_list":[0.9,1.0]})");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(has_file(arts, "trajectory_gamma0.9.csv"));
  CHECK(has_file(arts, "trajectory_gamma1.csv"));
}

TEST_CASE("grid sweeps order rows by grid index and tolerate failures") {
  ExperimentConfig c = parse_config(
      R"({"kind":"sweep","name":"grid","model":{"K":3,"M":3},
          "variant":{"activation":"linear"},
          "plan":{"method":"rk4","step":0.05,"record_every":1.0},
          "sweep":{"K":[1,2],"eta_J":[3.0],"eta_w":[0.5,1.0],
                   "threshold":0.01,"alpha_max":60.0}})");
  std::vector<SweepCell> cells = run_sweep(c);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].K == 1);
  CHECK(cells[0].eta_w == 0.5);
  CHECK(cells[1].K == 1);
  CHECK(cells[1].eta_w == 1.0);
  CHECK(cells[2].K == 2);
  CHECK(cells[3].eta_w == 1.0);
  for (const auto& cell : cells) CHECK(std::isfinite(cell.eps_final));

  // Worker count must not leak into results.
  ExperimentConfig c4 = c;
  c4.jobs = 4;
  std::vector<SweepCell> cells4 = run_sweep(c4);
  REQUIRE(cells4.size() == cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CHECK(cells4[i].eps_final == cells[i].eps_final);
    CHECK(cells4[i].alpha_tilde.has_value() == cells[i].alpha_tilde.has_value());
    if (cells[i].alpha_tilde)
      CHECK(*cells4[i].alpha_tilde == *cells[i].alpha_tilde);
  }

  TempDir dir("sweep");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  REQUIRE(has_file(arts, "sweep.csv"));
  std::string csv = slurp((dir.path / "sweep.csv").string());
  CHECK(csv.rfind("K,eta_J,eta_w,alpha_tilde,eps_final\n", 0) == 0);

  TempDir dir4("sweep4");
  c4.out_dir = dir4.str();
  run_experiment(c4);
  CHECK(slurp((dir4.path / "sweep.csv").string()) == csv);
}

TEST_CASE("diverging sweep cells become sentinel rows, not aborts") {
  TempDir dir("sentinel");
  ExperimentConfig c = parse_config(
      R"({"kind":"sweep","model":{"K":1,"M":1},
          "variant":{"activation":"linear"},
          "plan":{"method":"rk4","step":0.05,"record_every":1.0},
          "sweep":{"eta_J":[10000.0],"eta_w":[50.0],
                   "threshold":0.01,"alpha_max":30.0}})");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(!arts.warnings.empty());
  std::string csv = slurp((dir.path / "sweep.csv").string());
  CHECK(csv.find("nan") != std::string::npos);
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 2);  // header + the sentinel row
}

TEST_CASE("integral validation runs report their outcome") {
  TempDir dir("validate");
  ExperimentConfig c = parse_config(
      R"({"kind":"validate-integrals","validate":{"count":25,"tolerance":1e-6}})");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(arts.validation_passed);
  REQUIRE(has_file(arts, "integral_report.json"));
  std::string rep = slurp((dir.path / "integral_report.json").string());
  CHECK(rep.find("\"pass\": true") != std::string::npos);
  CHECK(rep.find("\"count_per_kind\": 25") != std::string::npos);
  CHECK(rep.find("\"max_abs_err\"") != std::string::npos);
}

TEST_CASE("simulation ensembles write one artifact pair per stream") {
  TempDir dir("simulate");
  ExperimentConfig c = parse_config(
      R"({"kind":"simulate","name":"mini","seeds":[1,2],
          "model":{"N":80,"K":2,"M":2,"P":10,"V":10,"eta_J":6.0,"eta_w":4.0},
          "plan":{"alpha_max":0.5},
          "sim":{"record_every":0.25,"ma_window":0.25,
                 "eps_tasks":5,"eps_tests":10}})");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(arts.completed);
  for (const char* name :
       {"trajectory_seed1.csv", "trajectory_seed2.csv", "w_stats_seed1.csv",
        "w_stats_seed2.csv", "manifest.json"})
    CHECK(has_file(arts, name));
  std::string csv = slurp((dir.path / "trajectory_seed1.csv").string());
  CHECK(csv.rfind("alpha,eps_meta,eps_meta_empirical,eps_meta_ma,Q_1_1", 0) == 0);

  // Query-size scans split every stream by V.
  ExperimentConfig cv = c;
  cv.v_list = {5, 10};
  TempDir dirv("simulate_v");
  cv.out_dir = dirv.str();
  ArtifactSet av = run_experiment(cv);
  for (const char* name :
       {"trajectory_V5_seed1.csv", "trajectory_V10_seed2.csv",
        "w_stats_V5_seed2.csv"})
    CHECK(has_file(av, name));
}

TEST_CASE("ensemble comparison artifacts carry theory, mean, and spread") {
  ExperimentConfig c = parse_config(
      R"({"kind":"compare","name":"mini","seeds":[1,2,3],
          "model":{"N":100,"K":2,"M":2,"P":10,"V":10,"eta_J":6.0,"eta_w":4.0},
          "plan":{"alpha_max":0.2,"method":"rk4","step":0.01,
                  "record_every":0.05},
          "sim":{"eps_tasks":5,"eps_tests":10}})");
  TempDir dir("compare");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(arts.completed);
  for (const char* name :
       {"compare.csv", "theory_trajectory.csv", "trajectory_seed1.csv",
        "trajectory_seed3.csv"})
    CHECK(has_file(arts, name));
  std::string csv = slurp((dir.path / "compare.csv").string());
  CHECK(csv.rfind("alpha,R_1_1_theory,R_1_1_sim_mean,R_1_1_sim_se", 0) == 0);
  CHECK(csv.find("eps_meta_theory,eps_meta_sim_mean,eps_meta_sim_se") !=
        std::string::npos);
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 6);  // header + alpha in {0, 0.05, ..., 0.2}

  ExperimentConfig c1 = c;
  c1.jobs = 1;
  TempDir dir1("compare1");
  c1.out_dir = dir1.str();
  run_experiment(c1);
  CHECK(slurp((dir1.path / "compare.csv").string()) == csv);
}

TEST_CASE("matched-init comparisons start every engine at the target overlap") {
  ExperimentConfig c = parse_config(
      R"({"kind":"compare","name":"mini","seeds":[1,2],
          "model":{"N":100,"K":2,"M":2,"P":10,"V":10,"eta_J":6.0,"eta_w":4.0},
          "plan":{"alpha_max":0.05,"method":"rk4","step":0.01,
                  "record_every":0.05},
          "sim":{"eps_tasks":5,"eps_tests":10,"matched_q":0.5}})");
  TempDir dir("compare_mq");
  c.out_dir = dir.str();
  ArtifactSet arts = run_experiment(c);
  CHECK(arts.completed);
  std::string csv = slurp((dir.path / "compare.csv").string());
  // Row at alpha = 0: theory and the ensemble mean agree exactly, and the
  // rescaled Q hits the requested overlap on the nose.
  std::istringstream is(csv);
  std::string header, row0;
  std::getline(is, header);
  std::getline(is, row0);
  std::vector<std::string> cols, vals;
  for (std::istringstream hs(header), rs(row0);;) {
    std::string a, b;
    if (!std::getline(hs, a, ',') || !std::getline(rs, b, ',')) break;
    cols.push_back(a);
    vals.push_back(b);
  }
  REQUIRE(cols.size() == vals.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "Q_1_1_theory" || cols[i] == "Q_2_2_theory")
      CHECK(std::stod(vals[i]) == doctest::Approx(0.5).epsilon(1e-12));
    if (cols[i] == "Q_1_2_theory")
      CHECK(std::stod(vals[i]) == doctest::Approx(0.0).epsilon(1e-12));
  }
}
