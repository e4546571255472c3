#include "crfrail/simulate.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace crfrail {

std::string to_string(AnalysisMethod m) {
  switch (m) {
    case AnalysisMethod::Weighted: return "weighted";
    case AnalysisMethod::Imputed: return "imputed";
    case AnalysisMethod::Complete: return "complete";
  }
  return "?";
}

AnalysisMethod analysis_method_from_string(const std::string& s) {
  if (s == "weighted") return AnalysisMethod::Weighted;
  if (s == "imputed") return AnalysisMethod::Imputed;
  if (s == "complete") return AnalysisMethod::Complete;
  throw std::invalid_argument("unknown method '" + s + "' (weighted|imputed|complete)");
}

void SimulationConfig::validate() const {
  if (num_clusters < 1) throw std::invalid_argument("num_clusters must be >= 1");
  if (units_per_cluster != 2) throw std::invalid_argument("units_per_cluster is fixed at 2");
  if (num_causes != 2) throw std::invalid_argument("num_causes is fixed at 2");
  if (static_cast<int>(beta_true.size()) != num_causes)
    throw std::invalid_argument("beta_true must have one entry per cause");
  if (!(frailty_variance > 0.0)) throw std::invalid_argument("frailty_variance must be > 0");
  if (!(std::abs(frailty_correlation) < 1.0))
    throw std::invalid_argument("|frailty_correlation| must be < 1");
  if (!(predictor_gap > 0.0)) throw std::invalid_argument("predictor_gap must be > 0");
  if (!(std::abs(predictor_within_corr) < 1.0))
    throw std::invalid_argument("|predictor_within_corr| must be < 1");
  if (training_size < 2) throw std::invalid_argument("training_size must be >= 2");
  if (replicates < 1) throw std::invalid_argument("replicates must be >= 1");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  if (censoring.mechanism == CensoringMechanism::UniformCalibrated) {
    if (!(censoring.target_fraction > 0.0 && censoring.target_fraction < 1.0))
      throw std::invalid_argument("censoring target_fraction must be in (0,1)");
  } else if (!(censoring.tau > 0.0)) {
    throw std::invalid_argument("administrative censoring tau must be > 0");
  }
}

double resolve_censoring_parameter(const SimulationConfig& config) {
  if (config.censoring.mechanism == CensoringMechanism::Administrative)
    return config.censoring.tau;
  if (config.censoring.c_max_override > 0.0) return config.censoring.c_max_override;

  // With C ~ U(0,c), P(censored | lambda) = (1 - exp(-lambda c)) / (lambda c).
  // Average over a fixed Monte Carlo draw of (X, v) and bisect on c.
  std::mt19937_64 rng(config.seed ^ 0x63616c6962ULL);  // independent calibration stream
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution bern(0.5);
  const int M = 100000;
  std::vector<double> lambdas(M);
  double sd = std::sqrt(config.frailty_variance);
  double rho = config.frailty_correlation;
  for (int m = 0; m < M; ++m) {
    double z1 = normal(rng), z2 = normal(rng);
    double v1 = sd * z1;
    double v2 = sd * (rho * z1 + std::sqrt(1.0 - rho * rho) * z2);
    double x = bern(rng) ? 1.0 : 0.0;
    lambdas[m] =
        std::exp(x * config.beta_true[0] + v1) + std::exp(x * config.beta_true[1] + v2);
  }
  auto censor_fraction = [&](double c) {
    double s = 0.0;
    for (double lam : lambdas) s += -std::expm1(-lam * c) / (lam * c);
    return s / M;
  };
  double lo = 1e-6, hi = 1.0;
  while (censor_fraction(hi) > config.censoring.target_fraction) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-10 * hi; ++it) {
    double mid = 0.5 * (lo + hi);
    if (censor_fraction(mid) > config.censoring.target_fraction)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::mt19937_64 replicate_engine(std::uint64_t seed, int replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffULL),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate + 1)};
  return std::mt19937_64(seq);
}

namespace {

struct GeneratedStudy {
  std::vector<SurvivalUnit> units_hidden;
  std::vector<SurvivalUnit> units_full;
  int censored = 0;
};

GeneratedStudy generate_study(const SimulationConfig& cfg, int num_clusters,
                              std::mt19937_64& rng, double cpar) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution bern(0.5);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const double sd = std::sqrt(cfg.frailty_variance);
  const double rho = cfg.frailty_correlation;
  const double wcorr = cfg.predictor_within_corr;
  const bool uniform_cens = cfg.censoring.mechanism == CensoringMechanism::UniformCalibrated;

  GeneratedStudy out;
  for (int i = 0; i < num_clusters; ++i) {
    double z1 = normal(rng), z2 = normal(rng);
    double v1 = sd * z1;
    double v2 = sd * (rho * z1 + std::sqrt(1.0 - rho * rho) * z2);

    std::vector<int> cause(cfg.units_per_cluster, 0);  // 0 = censored
    std::vector<SurvivalUnit> cluster_units;
    for (int j = 0; j < cfg.units_per_cluster; ++j) {
      double x = bern(rng) ? 1.0 : 0.0;
      double lam1 = std::exp(x * cfg.beta_true[0] + v1);
      double lam2 = std::exp(x * cfg.beta_true[1] + v2);
      double total = lam1 + lam2;
      double te = -std::log(1.0 - unif(rng)) / total;
      int k = unif(rng) < lam1 / total ? 1 : 2;
      double c = uniform_cens ? cpar * unif(rng) : cpar;
      SurvivalUnit u;
      u.cluster_id = i + 1;
      u.unit_id = j + 1;
      u.time = std::min(te, c);
      u.censor_indicator = te <= c ? 1 : 0;
      if (u.censor_indicator == 1) cause[j] = k;
      else ++out.censored;
      u.covariates.resize(1);
      u.covariates[0] = x;
      cluster_units.push_back(std::move(u));
    }

    // W drawn jointly within the cluster, means determined by the realized
    // event type (mu0 for censored, mu0 + gamma, mu0 + 2 gamma).
    double zw1 = normal(rng), zw2 = normal(rng);
    double w1 = zw1;
    double w2 = wcorr * zw1 + std::sqrt(1.0 - wcorr * wcorr) * zw2;
    double ws[2] = {w1, w2};
    for (int j = 0; j < cfg.units_per_cluster; ++j) {
      double mu = cfg.predictor_mu0 + cfg.predictor_gap * cause[j];
      Eigen::VectorXd w(1);
      w[0] = mu + ws[j];
      cluster_units[j].predictors = w;
    }

    for (int j = 0; j < cfg.units_per_cluster; ++j) {
      SurvivalUnit full = cluster_units[j];
      if (full.censor_indicator == 1) full.event_type = cause[j];
      out.units_full.push_back(full);
      out.units_hidden.push_back(cluster_units[j]);  // type left unset
    }
  }
  return out;
}

}  // namespace

ReplicateData generate_replicate(const SimulationConfig& config, std::mt19937_64& rng,
                                 double censoring_parameter) {
  config.validate();
  GeneratedStudy main = generate_study(config, config.num_clusters, rng, censoring_parameter);

  // Training set: same generating mechanism, its own clusters, types kept.
  int train_clusters = (config.training_size + config.units_per_cluster - 1) /
                       config.units_per_cluster;
  GeneratedStudy train = generate_study(config, train_clusters, rng, censoring_parameter);
  std::vector<SurvivalUnit> train_units(train.units_full.begin(),
                                        train.units_full.begin() + config.training_size);
  // Re-label training clusters 1..M in case of an odd training size.
  for (std::size_t t = 0; t < train_units.size(); ++t)
    train_units[t].cluster_id = static_cast<int>(t / config.units_per_cluster) + 1;

  ReplicateData rd{StudyDataset(std::move(main.units_hidden), config.num_causes),
                   StudyDataset(std::move(main.units_full), config.num_causes),
                   StudyDataset(std::move(train_units), config.num_causes),
                   static_cast<double>(main.censored) /
                       (config.num_clusters * config.units_per_cluster)};
  return rd;
}

namespace {

ReplicateRecord run_one_replicate(const SimulationConfig& cfg, int r, double cpar) {
  ReplicateRecord rec;
  rec.replicate = r;
  try {
    auto rng = replicate_engine(cfg.seed, r);
    ReplicateData data = generate_replicate(cfg, rng, cpar);
    rec.censoring_fraction = data.censoring_fraction_main;

    Eigen::MatrixXd weights;
    const StudyDataset* study = &data.main;
    if (cfg.method == AnalysisMethod::Complete) {
      study = &data.main_oracle;
      weights = effective_weights(*study, WeightMode::Complete);
    } else {
      ClassifierOptions copt;
      copt.ridge = cfg.classifier_ridge;
      MultinomialModel model = fit_multinomial(data.training, copt);
      EventProbabilityMatrix probs = predict_probabilities(model, data.main);
      if (cfg.method == AnalysisMethod::Weighted) {
        weights = effective_weights(data.main, WeightMode::Weighted, &probs);
      } else {
        EventAssignment imp = impute_types(probs);
        weights = effective_weights(data.main, WeightMode::Imputed, nullptr, &imp);
      }
    }

    SolverOptions sopt;
    VarCovSpec init = VarCovSpec::exchangeable(cfg.num_causes, 0.1, 0.0);
    FrailtyFit f = fit(*study, weights, init, sopt);
    const int KP = cfg.num_causes;  // p = 1
    Eigen::VectorXd se = f.se_beta_hessian();
    Eigen::VectorXd ses = f.se_beta_sandwich();
    for (int k = 0; k < KP; ++k) {
      double est = f.beta(k, 0);
      rec.estimate.push_back(est);
      rec.se.push_back(se[k]);
      rec.se_sandwich.push_back(ses[k]);
      rec.ci_lower.push_back(est - 1.96 * se[k]);
      rec.ci_upper.push_back(est + 1.96 * se[k]);
    }
    rec.min_var_diag_hessian = f.var_hessian_beta.diagonal().minCoeff();
    rec.min_var_diag_sandwich = f.var_sandwich_beta.diagonal().minCoeff();
    rec.sigma2 = f.theta.sigma2();
    rec.rho = f.theta.rho();
    rec.theta_at_floor = f.theta_at_floor;
    rec.converged = f.converged;
  } catch (const std::exception& e) {
    rec.converged = false;
    rec.error = e.what();
  }
  return rec;
}

}  // namespace

MonteCarloSummary run_study(const SimulationConfig& config) {
  config.validate();
  const double cpar = resolve_censoring_parameter(config);

  MonteCarloSummary sum;
  sum.replicates = config.replicates;
  sum.censoring_parameter = cpar;
  sum.records.resize(config.replicates);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      int r = next.fetch_add(1);
      if (r >= config.replicates) return;
      sum.records[r] = run_one_replicate(config, r, cpar);
    }
  };
  int jobs = std::min(config.jobs, config.replicates);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  const int KP = config.num_causes;  // p = 1 in this design
  std::vector<double> mean(KP, 0.0);
  std::vector<double> cover(KP, 0.0);
  double cens = 0.0;
  for (const auto& rec : sum.records) {
    if (!rec.converged) {
      ++sum.failed;
      continue;
    }
    ++sum.converged;
    cens += rec.censoring_fraction;
    for (int k = 0; k < KP; ++k) {
      mean[k] += rec.estimate[k];
      double truth = config.beta_true[k];
      if (rec.ci_lower[k] <= truth && truth <= rec.ci_upper[k]) cover[k] += 1.0;
    }
  }
  if (sum.converged > 0) {
    sum.mean_censoring_fraction = cens / sum.converged;
    for (int k = 0; k < KP; ++k) {
      mean[k] /= sum.converged;
      double ss = 0.0;
      for (const auto& rec : sum.records)
        if (rec.converged) ss += (rec.estimate[k] - mean[k]) * (rec.estimate[k] - mean[k]);
      ParameterSummary ps;
      ps.name = "beta_" + std::to_string(k + 1);
      ps.true_value = config.beta_true[k];
      ps.mean_estimate = mean[k];
      ps.percent_bias = 100.0 * (mean[k] - ps.true_value) / ps.true_value;
      ps.ese = sum.converged > 1 ? std::sqrt(ss / (sum.converged - 1)) : 0.0;
      ps.coverage = cover[k] / sum.converged;
      sum.parameters.push_back(ps);
    }
  }
  return sum;
}

std::string SimulationConfig::to_json() const {
  nlohmann::json j;
  j["num_clusters"] = num_clusters;
  j["units_per_cluster"] = units_per_cluster;
  j["num_causes"] = num_causes;
  j["beta_true"] = beta_true;
  j["frailty_variance"] = frailty_variance;
  j["frailty_correlation"] = frailty_correlation;
  j["predictor_gap"] = predictor_gap;
  j["predictor_mu0"] = predictor_mu0;
  j["predictor_within_corr"] = predictor_within_corr;
  j["training_size"] = training_size;
  j["replicates"] = replicates;
  j["seed"] = seed;
  j["method"] = to_string(method);
  j["classifier_ridge"] = classifier_ridge;
  j["jobs"] = jobs;
  j["censoring"] = {
      {"mechanism",
       censoring.mechanism == CensoringMechanism::UniformCalibrated ? "uniform" : "administrative"},
      {"target_fraction", censoring.target_fraction},
      {"tau", censoring.tau},
      {"c_max_override", censoring.c_max_override}};
  return j.dump(2);
}

SimulationConfig SimulationConfig::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  SimulationConfig c;
  c.num_clusters = j.value("num_clusters", c.num_clusters);
  c.units_per_cluster = j.value("units_per_cluster", c.units_per_cluster);
  c.num_causes = j.value("num_causes", c.num_causes);
  if (j.contains("beta_true")) c.beta_true = j["beta_true"].get<std::vector<double>>();
  c.frailty_variance = j.value("frailty_variance", c.frailty_variance);
  c.frailty_correlation = j.value("frailty_correlation", c.frailty_correlation);
  c.predictor_gap = j.value("predictor_gap", c.predictor_gap);
  c.predictor_mu0 = j.value("predictor_mu0", c.predictor_mu0);
  c.predictor_within_corr = j.value("predictor_within_corr", c.predictor_within_corr);
  c.training_size = j.value("training_size", c.training_size);
  c.replicates = j.value("replicates", c.replicates);
  c.seed = j.value("seed", c.seed);
  if (j.contains("method")) c.method = analysis_method_from_string(j["method"].get<std::string>());
  c.classifier_ridge = j.value("classifier_ridge", c.classifier_ridge);
  c.jobs = j.value("jobs", c.jobs);
  if (j.contains("censoring")) {
    auto jc = j["censoring"];
    std::string mech = jc.value("mechanism", std::string("uniform"));
    if (mech == "uniform")
      c.censoring.mechanism = CensoringMechanism::UniformCalibrated;
    else if (mech == "administrative")
      c.censoring.mechanism = CensoringMechanism::Administrative;
    else
      throw std::invalid_argument("unknown censoring mechanism '" + mech + "'");
    c.censoring.target_fraction = jc.value("target_fraction", c.censoring.target_fraction);
    c.censoring.tau = jc.value("tau", c.censoring.tau);
    c.censoring.c_max_override = jc.value("c_max_override", c.censoring.c_max_override);
  }
  c.validate();
  return c;
}

SimulationConfig SimulationConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

std::string fmt_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_summary_csv(const MonteCarloSummary& summary, const SimulationConfig& config,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write summary: " + path);
  out << "num_clusters,training_size,gamma,rho,method,parameter,true_value,mean_estimate,"
         "percent_bias,ese,coverage,replicates,converged,failed,censoring_parameter,"
         "mean_censoring_fraction\n";
  for (const auto& ps : summary.parameters) {
    out << config.num_clusters << "," << config.training_size << "," << config.predictor_gap
        << "," << config.frailty_correlation << "," << to_string(config.method) << ","
        << ps.name << "," << fmt_full(ps.true_value) << "," << fmt_full(ps.mean_estimate) << ","
        << fmt_full(ps.percent_bias) << "," << fmt_full(ps.ese) << "," << fmt_full(ps.coverage)
        << "," << summary.replicates << "," << summary.converged << "," << summary.failed << ","
        << fmt_full(summary.censoring_parameter) << ","
        << fmt_full(summary.mean_censoring_fraction) << "\n";
  }
}

void write_audit_csv(const MonteCarloSummary& summary, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write audit file: " + path);
  out << "replicate,converged,parameter,estimate,se,ci_lower,ci_upper,sigma2,rho,"
         "theta_at_floor,censoring_fraction,error\n";
  for (const auto& rec : summary.records) {
    if (!rec.converged) {
      std::string err = rec.error;
      for (auto& ch : err)
        if (ch == ',' || ch == '\n') ch = ';';
      out << rec.replicate << ",0,,,,,,,,,," << err << "\n";
      continue;
    }
    for (std::size_t k = 0; k < rec.estimate.size(); ++k) {
      out << rec.replicate << ",1,beta_" << k + 1 << "," << fmt_full(rec.estimate[k]) << ","
          << fmt_full(rec.se[k]) << "," << fmt_full(rec.ci_lower[k]) << ","
          << fmt_full(rec.ci_upper[k]) << "," << fmt_full(rec.sigma2) << "," << fmt_full(rec.rho)
          << "," << (rec.theta_at_floor ? 1 : 0) << "," << fmt_full(rec.censoring_fraction)
          << ",\n";
    }
  }
}

}  // namespace crfrail
