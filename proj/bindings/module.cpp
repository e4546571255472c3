// Python bindings for the crfrail core: dataset I/O, the event-type
// classifier, effective weights, the frailty-model fit and the Monte Carlo
// harness. Matrices cross the boundary as numpy arrays via Eigen.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "crfrail/classify.hpp"
#include "crfrail/dataset.hpp"
#include "crfrail/simulate.hpp"
#include "crfrail/solver.hpp"
#include "crfrail/varcov.hpp"

namespace py = pybind11;
using namespace crfrail;

namespace {

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "complete") return WeightMode::Complete;
  if (s == "weighted") return WeightMode::Weighted;
  if (s == "imputed") return WeightMode::Imputed;
  throw std::invalid_argument("unknown weight mode '" + s + "'");
}

SolverOptions solver_options(double score_tol, double theta_tol, int max_inner,
                             int max_outer) {
  SolverOptions opt;
  opt.score_tol = score_tol;
  opt.theta_tol = theta_tol;
  opt.max_inner = max_inner;
  opt.max_outer = max_outer;
  return opt;
}

}  // namespace

PYBIND11_MODULE(_crfrail, m) {
  m.doc() = "Cause-specific frailty models for clustered competing risks "
            "with missing event types";

  py::register_exception<DataError>(m, "DataError");
  py::register_exception<ClassifierError>(m, "ClassifierError");
  py::register_exception<ConvergenceError>(m, "ConvergenceError");

  py::class_<StudyDataset>(m, "StudyDataset")
      .def_property_readonly("num_units", &StudyDataset::num_units)
      .def_property_readonly("num_clusters", &StudyDataset::num_clusters)
      .def_property_readonly("num_causes", &StudyDataset::num_causes)
      .def_property_readonly("covariate_dim", &StudyDataset::covariate_dim)
      .def_property_readonly("predictor_dim", &StudyDataset::predictor_dim)
      .def("complete_types", &StudyDataset::complete_types)
      .def("unit",
           [](const StudyDataset& d, int u) {
             if (u < 0 || u >= d.num_units()) throw py::index_error();
             const auto& unit = d.units()[u];
             py::dict out;
             out["cluster_id"] = unit.cluster_id;
             out["unit_id"] = unit.unit_id;
             out["time"] = unit.time;
             out["delta"] = unit.censor_indicator;
             out["event_type"] =
                 unit.event_type ? py::cast(*unit.event_type) : py::none();
             out["covariates"] = unit.covariates;
             out["predictors"] =
                 unit.predictors ? py::cast(*unit.predictors) : py::none();
             return out;
           },
           py::arg("position"));

  m.def("load_dataset", &load_dataset, py::arg("path"), py::arg("num_causes"));
  m.def("write_dataset", &write_dataset, py::arg("dataset"), py::arg("path"));

  py::class_<EventProbabilityMatrix>(m, "EventProbabilityMatrix")
      .def(py::init<std::vector<int>, Eigen::MatrixXd>(), py::arg("unit_positions"),
           py::arg("probs"))
      .def_property_readonly("unit_positions",
                             [](const EventProbabilityMatrix& p) { return p.unit_positions(); })
      .def_property_readonly("probs",
                             [](const EventProbabilityMatrix& p) { return p.probs(); });

  py::class_<MultinomialModel>(m, "MultinomialModel")
      .def_property_readonly("num_classes",
                             [](const MultinomialModel& m_) { return m_.num_classes; })
      .def_property_readonly("coefficients",
                             [](const MultinomialModel& m_) { return m_.coefficients; })
      .def_property_readonly("log_likelihood",
                             [](const MultinomialModel& m_) { return m_.log_likelihood; })
      .def_property_readonly("iterations",
                             [](const MultinomialModel& m_) { return m_.iterations; })
      .def("probabilities", &MultinomialModel::probabilities, py::arg("w"))
      .def("to_json", &MultinomialModel::to_json)
      .def_static("from_json", &MultinomialModel::from_json, py::arg("text"))
      .def("save", &MultinomialModel::save, py::arg("path"))
      .def_static("load", &MultinomialModel::load, py::arg("path"));

  m.def(
      "fit_multinomial",
      [](const StudyDataset& training, double ridge, int max_iter) {
        ClassifierOptions opt;
        opt.ridge = ridge;
        opt.max_iter = max_iter;
        return fit_multinomial(training, opt);
      },
      py::arg("training"), py::arg("ridge") = 0.0, py::arg("max_iter") = 200);
  m.def("predict_probabilities", &predict_probabilities, py::arg("model"), py::arg("main"));
  m.def(
      "impute_types",
      [](const EventProbabilityMatrix& probs) {
        EventAssignment a = impute_types(probs);
        return py::make_tuple(a.unit_positions, a.labels);
      },
      py::arg("probs"));

  m.def(
      "effective_weights",
      [](const StudyDataset& data, const std::string& mode,
         const EventProbabilityMatrix* probs) {
        WeightMode wm = weight_mode_from_string(mode);
        if (wm == WeightMode::Imputed) {
          if (!probs) throw std::invalid_argument("imputed mode needs probabilities");
          EventAssignment a = impute_types(*probs);
          return effective_weights(data, wm, nullptr, &a);
        }
        return effective_weights(data, wm, probs);
      },
      py::arg("data"), py::arg("mode"), py::arg("probs") = nullptr);

  py::class_<FrailtyFit>(m, "FrailtyFit")
      .def_property_readonly("beta", [](const FrailtyFit& f) { return f.beta; })
      .def_property_readonly("v", [](const FrailtyFit& f) { return f.v; })
      .def_property_readonly("sigma2", [](const FrailtyFit& f) { return f.theta.sigma2(); })
      .def_property_readonly("rho", [](const FrailtyFit& f) { return f.theta.rho(); })
      .def_property_readonly("converged", [](const FrailtyFit& f) { return f.converged; })
      .def_property_readonly("theta_at_floor",
                             [](const FrailtyFit& f) { return f.theta_at_floor; })
      .def_property_readonly("pplog", [](const FrailtyFit& f) { return f.pplog; })
      .def_property_readonly("outer_iterations",
                             [](const FrailtyFit& f) { return f.outer_iterations; })
      .def_property_readonly("var_hessian_beta",
                             [](const FrailtyFit& f) { return f.var_hessian_beta; })
      .def_property_readonly("var_sandwich_beta",
                             [](const FrailtyFit& f) { return f.var_sandwich_beta; })
      .def("se_beta_hessian", &FrailtyFit::se_beta_hessian)
      .def("se_beta_sandwich", &FrailtyFit::se_beta_sandwich);

  m.def(
      "fit",
      [](const StudyDataset& data, const Eigen::MatrixXd& weights, double sigma2_init,
         double rho_init, double score_tol, double theta_tol, int max_inner, int max_outer) {
        VarCovSpec init = VarCovSpec::exchangeable(data.num_causes(), sigma2_init, rho_init);
        return fit(data, weights, init,
                   solver_options(score_tol, theta_tol, max_inner, max_outer));
      },
      py::arg("data"), py::arg("weights"), py::arg("sigma2_init") = 0.1,
      py::arg("rho_init") = 0.0, py::arg("score_tol") = 1e-7, py::arg("theta_tol") = 1e-6,
      py::arg("max_inner") = 50, py::arg("max_outer") = 100);

  m.def(
      "weighted_ppll",
      [](const StudyDataset& data, const Eigen::MatrixXd& weights, const Eigen::MatrixXd& beta,
         const Eigen::VectorXd& v, double sigma2, double rho) {
        return weighted_ppll(data, weights, beta, v,
                             VarCovSpec::exchangeable(data.num_causes(), sigma2, rho));
      },
      py::arg("data"), py::arg("weights"), py::arg("beta"), py::arg("v"), py::arg("sigma2"),
      py::arg("rho"));

  m.def(
      "run_study",
      [](const std::string& config_json) {
        SimulationConfig cfg = SimulationConfig::from_json(config_json);
        MonteCarloSummary s = run_study(cfg);
        py::dict out;
        out["replicates"] = s.replicates;
        out["converged"] = s.converged;
        out["failed"] = s.failed;
        out["censoring_parameter"] = s.censoring_parameter;
        out["mean_censoring_fraction"] = s.mean_censoring_fraction;
        py::list params;
        for (const auto& p : s.parameters) {
          py::dict d;
          d["name"] = p.name;
          d["true_value"] = p.true_value;
          d["mean_estimate"] = p.mean_estimate;
          d["percent_bias"] = p.percent_bias;
          d["ese"] = p.ese;
          d["coverage"] = p.coverage;
          params.append(d);
        }
        out["parameters"] = params;
        return out;
      },
      py::arg("config_json"));
}
