#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metalab/experiment.hpp"
#include "metalab/integrals.hpp"
#include "metalab/ode.hpp"
#include "metalab/order_params.hpp"
#include "metalab/rhs.hpp"
#include "metalab/simulator.hpp"

namespace py = pybind11;
using namespace metalab;

PYBIND11_MODULE(_metalab, m) {
  m.doc() =
      "Order-parameter flows and a finite-size Monte Carlo simulator for "
      "streaming two-layer teacher-student meta-learning";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::enum_<Activation>(m, "Activation")
      .value("erf", Activation::Erf)
      .value("linear", Activation::Linear);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("N", &ModelConfig::N)
      .def_readwrite("K", &ModelConfig::K)
      .def_readwrite("M", &ModelConfig::M)
      .def_readwrite("P", &ModelConfig::P)
      .def_readwrite("V", &ModelConfig::V)
      .def_readwrite("eta_w", &ModelConfig::eta_w)
      .def_readwrite("eta_J", &ModelConfig::eta_J)
      .def("validate", &ModelConfig::validate);

  py::class_<VariantConfig>(m, "VariantConfig")
      .def(py::init<>())
      .def_readwrite("activation", &VariantConfig::activation)
      .def_readwrite("gamma", &VariantConfig::gamma)
      .def_readwrite("lambda_", &VariantConfig::lambda)
      .def_readwrite("sigma_noise2", &VariantConfig::sigma_noise2)
      .def("validate", &VariantConfig::validate);

  py::class_<OrderParams>(m, "OrderParams")
      .def(py::init<const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                    const Eigen::MatrixXd&>(),
           py::arg("Q"), py::arg("R"), py::arg("T"))
      .def_property_readonly("K", &OrderParams::K)
      .def_property_readonly("M", &OrderParams::M)
      .def_property_readonly("Q", &OrderParams::Q)
      .def_property_readonly("R", &OrderParams::R)
      .def_property_readonly("T", &OrderParams::T)
      .def("with_qr", &OrderParams::with_qr, py::arg("Q"), py::arg("R"));

  m.def("cosine_similarity", &cosine_similarity, py::arg("params"));
  m.def("meta_generalization_error", &meta_generalization_error,
        py::arg("params"), py::arg("model"), py::arg("variant"));

  m.def("i2", &i2, py::arg("c11"), py::arg("c12"), py::arg("c22"));
  m.def("i2_prime", &i2_prime, py::arg("c11"), py::arg("c12"), py::arg("c22"));
  m.def(
      "i3", [](const Eigen::MatrixXd& c) { return i3(Eigen::Matrix3d(c)); },
      py::arg("c"));
  m.def(
      "i4", [](const Eigen::MatrixXd& c) { return i4(Eigen::Matrix4d(c)); },
      py::arg("c"));
  m.def(
      "quadrature_oracle",
      [](const std::string& kind, const Eigen::MatrixXd& c, int nodes) {
        IntegralKind k;
        if (kind == "i2")
          k = IntegralKind::I2;
        else if (kind == "i2_prime")
          k = IntegralKind::I2Prime;
        else if (kind == "i3")
          k = IntegralKind::I3;
        else if (kind == "i4")
          k = IntegralKind::I4;
        else
          throw std::invalid_argument("kind must be i2, i2_prime, i3 or i4");
        return quadrature_oracle(k, c, nodes);
      },
      py::arg("kind"), py::arg("c"), py::arg("nodes") = 40);

  m.def(
      "rhs",
      [](const OrderParams& p, const ModelConfig& mc, const VariantConfig& vc) {
        const RhsOutput d = rhs(p, mc, vc);
        return py::make_tuple(d.dR, d.dQ);
      },
      py::arg("params"), py::arg("model"), py::arg("variant"),
      "Right-hand side of the order-parameter flow; returns (dR, dQ)");

  py::class_<IntegrationPlan>(m, "IntegrationPlan")
      .def(py::init<>())
      .def_readwrite("alpha_max", &IntegrationPlan::alpha_max)
      .def_readwrite("method", &IntegrationPlan::method)
      .def_readwrite("step", &IntegrationPlan::step)
      .def_readwrite("record_every", &IntegrationPlan::record_every)
      .def_readwrite("rtol", &IntegrationPlan::rtol)
      .def_readwrite("atol", &IntegrationPlan::atol)
      .def_readwrite("min_step", &IntegrationPlan::min_step)
      .def_readwrite("max_step", &IntegrationPlan::max_step);

  py::enum_<OdeMethod>(m, "OdeMethod")
      .value("rk4", OdeMethod::Rk4Fixed)
      .value("rkf45", OdeMethod::Rkf45Adaptive);

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("alpha", &Trajectory::alpha)
      .def_readonly("states", &Trajectory::states)
      .def_readonly("eps", &Trajectory::eps)
      .def_readonly("rho", &Trajectory::rho)
      .def_readonly("completed", &Trajectory::completed)
      .def_readonly("last_alpha", &Trajectory::last_alpha);

  m.def("integrate", &integrate, py::arg("init"), py::arg("model"),
        py::arg("variant"), py::arg("plan"),
        py::call_guard<py::gil_scoped_release>());

  m.def(
      "first_crossing",
      [](const Trajectory& t, double threshold) {
        const CrossingReport r = first_crossing(t, eps_threshold_config(threshold));
        return r.crossed ? std::optional<double>(r.alpha_tilde) : std::nullopt;
      },
      py::arg("trajectory"), py::arg("threshold"),
      "Interpolated first downward crossing of eps, or None");

  py::class_<SimState>(m, "SimState")
      .def_readwrite("B", &SimState::B)
      .def_readwrite("J", &SimState::J)
      .def_readwrite("task_count", &SimState::task_count)
      .def_readwrite("seed", &SimState::seed)
      .def_readwrite("N", &SimState::N);

  py::class_<SimTrajectory>(m, "SimTrajectory")
      .def_readonly("alpha", &SimTrajectory::alpha)
      .def_readonly("states", &SimTrajectory::states)
      .def_readonly("eps_empirical", &SimTrajectory::eps_empirical)
      .def_readonly("eps_ma", &SimTrajectory::eps_ma)
      .def_readonly("eps_analytic", &SimTrajectory::eps_analytic)
      .def_readonly("rho", &SimTrajectory::rho)
      .def_readonly("w_rms", &SimTrajectory::w_rms)
      .def_readonly("completed", &SimTrajectory::completed)
      .def_readonly("last_alpha", &SimTrajectory::last_alpha);

  m.def("init_sim", &init_sim, py::arg("model"), py::arg("variant"),
        py::arg("seed"));
  m.def("rescale_to_matched_init", &rescale_to_matched_init, py::arg("state"),
        py::arg("q_target") = 0.5);
  m.def("init_from_order_params", &init_from_order_params, py::arg("target"),
        py::arg("model"), py::arg("seed"));
  m.def("measure_order_params", &measure_order_params, py::arg("state"));
  m.def("empirical_meta_error", &empirical_meta_error, py::arg("state"),
        py::arg("model"), py::arg("variant"), py::arg("n_tasks") = 20,
        py::arg("n_test") = 50, py::call_guard<py::gil_scoped_release>());
  m.def("run_stream", &run_stream, py::arg("state"), py::arg("model"),
        py::arg("variant"), py::arg("alpha_max"), py::arg("record_every") = 0.05,
        py::arg("ma_window") = 0.05, py::arg("eps_tasks") = 20,
        py::arg("eps_tests") = 50, py::call_guard<py::gil_scoped_release>());

  m.def("preset_names", &preset_names);
  m.def(
      "preset_config_json",
      [](const std::string& name) { return render_config(preset_config(name)); },
      py::arg("name"), "Canonical JSON text of a built-in preset");
  m.def(
      "run_experiment_json",
      [](const std::string& config_json, const std::string& out_dir, int jobs) {
        ExperimentConfig cfg = parse_config(config_json);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (jobs >= 0) cfg.jobs = jobs;
        py::gil_scoped_release release;
        const ArtifactSet result = run_experiment(cfg);
        return result.files;
      },
      py::arg("config_json"), py::arg("out_dir") = std::string(),
      py::arg("jobs") = -1,
      "Run an experiment described by JSON text; returns written file paths");
  m.def(
      "validate_integrals",
      [](std::int64_t count, double tolerance, std::uint64_t seed, int jobs) {
        py::gil_scoped_release release;
        const IntegralValidationReport rep =
            validate_integrals(count, tolerance, seed, jobs);
        py::gil_scoped_acquire acquire;
        py::dict out;
        out["pass"] = rep.pass;
        py::dict errs;
        const IntegralKind kinds[4] = {IntegralKind::I2, IntegralKind::I2Prime,
                                       IntegralKind::I3, IntegralKind::I4};
        for (int i = 0; i < 4; ++i)
          errs[to_string(kinds[i]).c_str()] = rep.max_abs_err[i];
        out["max_abs_err"] = errs;
        return out;
      },
      py::arg("count") = 100, py::arg("tolerance") = 1e-6, py::arg("seed") = 7,
      py::arg("jobs") = 0);
}
