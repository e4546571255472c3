#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crfrail/classify.hpp"
#include "crfrail/dataset.hpp"
#include "crfrail/solver.hpp"

namespace crfrail {

enum class CensoringMechanism { UniformCalibrated, Administrative };

struct CensoringConfig {
  CensoringMechanism mechanism = CensoringMechanism::UniformCalibrated;
  double target_fraction = 0.3;  // uniform: calibrated censoring proportion
  double tau = 1.0;              // administrative cutoff
  double c_max_override = 0.0;   // > 0 skips calibration
};

enum class AnalysisMethod { Weighted, Imputed, Complete };

std::string to_string(AnalysisMethod m);
AnalysisMethod analysis_method_from_string(const std::string& s);

/// Scenario parameters for the clustered competing-risks study: two causes,
/// two units per cluster, unit baseline hazards, Bernoulli(0.5) exposure,
/// exchangeable normal frailties and a scalar event predictor W whose mean
/// separates the censored/cause-1/cause-2 groups by gamma.
struct SimulationConfig {
  int num_clusters = 1000;
  int units_per_cluster = 2;
  int num_causes = 2;
  std::vector<double> beta_true = {std::log(1.5), std::log(1.5)};
  double frailty_variance = 0.1;
  double frailty_correlation = 0.5;
  double predictor_gap = 3.5;         // gamma: mu1 = mu0 + gamma, mu2 = mu0 + 2 gamma
  double predictor_mu0 = 0.0;
  double predictor_within_corr = 0.25;
  int training_size = 100;
  int replicates = 1000;
  std::uint64_t seed = 20240801;
  CensoringConfig censoring;
  AnalysisMethod method = AnalysisMethod::Weighted;
  double classifier_ridge = 1e-4;  // rescues occasional separation at n=50
  int jobs = 1;

  void validate() const;
  std::string to_json() const;
  static SimulationConfig from_json(const std::string& text);
  static SimulationConfig load(const std::string& path);
};

struct ReplicateData {
  StudyDataset main;         // event types hidden
  StudyDataset main_oracle;  // identical draw with event types revealed
  StudyDataset training;     // event types observed
  double censoring_fraction_main = 0.0;
};

/// Resolved censoring parameter: the calibrated c_max for the uniform
/// mechanism (deterministic given the config), tau for administrative.
double resolve_censoring_parameter(const SimulationConfig& config);

/// Deterministic per-replicate engine derived from (seed, replicate).
std::mt19937_64 replicate_engine(std::uint64_t seed, int replicate);

ReplicateData generate_replicate(const SimulationConfig& config, std::mt19937_64& rng,
                                 double censoring_parameter);

struct ReplicateRecord {
  int replicate = 0;
  bool converged = false;
  std::string error;
  std::vector<double> estimate;  // Kp entries (beta_1 .. beta_K for p = 1)
  std::vector<double> se;        // Hessian-inverse form, used for the CIs
  std::vector<double> se_sandwich;
  std::vector<double> ci_lower;
  std::vector<double> ci_upper;
  // Raw beta-block variance diagonal minima, before any clamping.
  double min_var_diag_hessian = 0.0;
  double min_var_diag_sandwich = 0.0;
  double sigma2 = 0.0;
  double rho = 0.0;
  bool theta_at_floor = false;
  double censoring_fraction = 0.0;
};

struct ParameterSummary {
  std::string name;
  double true_value = 0.0;
  double mean_estimate = 0.0;
  double percent_bias = 0.0;
  double ese = 0.0;
  double coverage = 0.0;
};

struct MonteCarloSummary {
  std::vector<ParameterSummary> parameters;
  int replicates = 0;
  int converged = 0;
  int failed = 0;
  double censoring_parameter = 0.0;
  double mean_censoring_fraction = 0.0;
  std::vector<ReplicateRecord> records;  // replicate-level audit, index order
};

/// Runs the full Monte Carlo study: generate, classify, weight/impute, fit,
/// aggregate. Deterministic for a fixed seed regardless of config.jobs.
MonteCarloSummary run_study(const SimulationConfig& config);

/// One row per parameter: scenario id, method, %bias, ESE, coverage.
void write_summary_csv(const MonteCarloSummary& summary, const SimulationConfig& config,
                       const std::string& path);
void write_audit_csv(const MonteCarloSummary& summary, const std::string& path);

}  // namespace crfrail
