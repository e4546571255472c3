#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <sstream>

#include "crfrail/classify.hpp"
#include "crfrail/dataset.hpp"
#include "crfrail/simulate.hpp"
#include "crfrail/solver.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "crfrail 0.1.0";

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNoConvergence = 4;

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw crfrail::DataError("cannot open file for digest: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    EVP_DigestUpdate(ctx, buf, static_cast<size_t>(in.gcount()));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    char hex[3];
    std::snprintf(hex, sizeof(hex), "%02x", digest[i]);
    os << hex;
  }
  return os.str();
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string default_out_dir() {
  const char* env = std::getenv("CRFRAIL_OUT");
  return env ? env : ".";
}

void write_manifest(const fs::path& dir, const std::string& command, const json& options,
                    const std::vector<std::string>& inputs, std::uint64_t seed,
                    double wall_seconds) {
  json m;
  m["tool_version"] = kVersion;
  m["command"] = command;
  m["options"] = options;
  json digests = json::object();
  for (const auto& p : inputs) digests[p] = sha256_file(p);
  m["input_digests"] = digests;
  m["seed"] = seed;
  m["wall_clock_seconds"] = wall_seconds;
  std::ofstream out(dir / "manifest.json");
  out << m.dump(2) << "\n";
}

void write_matrix_csv(const Eigen::MatrixXd& M, const std::string& path) {
  std::ofstream out(path);
  for (int r = 0; r < M.rows(); ++r) {
    for (int c = 0; c < M.cols(); ++c) out << (c ? "," : "") << fmt_full(M(r, c));
    out << "\n";
  }
}

crfrail::StudyDataset mask_event_types(const crfrail::StudyDataset& data) {
  std::vector<crfrail::SurvivalUnit> units = data.units();
  for (auto& u : units) u.event_type.reset();
  return crfrail::StudyDataset(std::move(units), data.num_causes());
}

struct FitArgs {
  std::string main_csv, train_csv, method = "weighted", varcov = "exchangeable";
  std::string out = default_out_dir();
  int causes = 0;
  double ridge = 0.0;
  double sigma2_init = 0.1, rho_init = 0.0;
  double score_tol = 1e-7, theta_tol = 1e-6;
  int max_inner = 50, max_outer = 100;
  bool write_variances = false;
};

int cmd_fit(const FitArgs& a, const std::string& command) {
  auto t0 = std::chrono::steady_clock::now();
  const bool needs_classifier = a.method != "complete";
  fs::create_directories(a.out);

  int K = a.causes;
  crfrail::MultinomialModel model;
  std::optional<crfrail::StudyDataset> training;
  if (needs_classifier) {
    training.emplace(crfrail::load_dataset(a.train_csv, K));
    K = training->num_causes();
  }
  crfrail::StudyDataset main_raw = crfrail::load_dataset(a.main_csv, K);
  if (K == 0) K = main_raw.num_causes();

  crfrail::StudyDataset main_data = main_raw;
  Eigen::MatrixXd weights;
  bool masked = false;
  if (a.method == "complete") {
    weights = crfrail::effective_weights(main_data, crfrail::WeightMode::Complete);
  } else {
    // The main study's event types are never read in weighted/imputed mode;
    // the same file can serve oracle and missing-type runs.
    if (!main_raw.complete_types() || true) {
      main_data = mask_event_types(main_raw);
      masked = true;
    }
    crfrail::ClassifierOptions copt;
    copt.ridge = a.ridge;
    model = crfrail::fit_multinomial(*training, copt);
    model.save((fs::path(a.out) / "classifier.json").string());
    auto probs = crfrail::predict_probabilities(model, main_data);
    if (a.method == "weighted") {
      weights = crfrail::effective_weights(main_data, crfrail::WeightMode::Weighted, &probs);
    } else {
      auto imp = crfrail::impute_types(probs);
      weights = crfrail::effective_weights(main_data, crfrail::WeightMode::Imputed, nullptr, &imp);
    }
  }

  crfrail::SolverOptions sopt;
  sopt.score_tol = a.score_tol;
  sopt.theta_tol = a.theta_tol;
  sopt.max_inner = a.max_inner;
  sopt.max_outer = a.max_outer;
  sopt.store_full_variances = a.write_variances;

  crfrail::VarCovSpec init = crfrail::VarCovSpec::exchangeable(K, a.sigma2_init, a.rho_init);
  if (a.varcov == "unstructured")
    init = crfrail::VarCovSpec::unstructured_from_matrix(init.block());

  crfrail::FrailtyFit fit = [&]() {
    try {
      return crfrail::fit(main_data, weights, init, sopt);
    } catch (const crfrail::ConvergenceError& e) {
      json diag;
      diag["error"] = e.what();
      std::ofstream df(fs::path(a.out) / "fit.json");
      df << diag.dump(2) << "\n";
      std::cerr << "error: " << e.what() << "\n";
      std::exit(kExitNoConvergence);
    }
  }();

  const int p = main_data.covariate_dim();
  Eigen::VectorXd se_h = fit.se_beta_hessian();
  Eigen::VectorXd se_s = fit.se_beta_sandwich();

  json rec;
  rec["method"] = a.method;
  rec["num_causes"] = K;
  rec["covariate_dim"] = p;
  rec["masked_main_event_types"] = masked;
  rec["converged"] = fit.converged;
  rec["theta_at_floor"] = fit.theta_at_floor;
  rec["pplog"] = fit.pplog;
  rec["outer_iterations"] = fit.outer_iterations;
  rec["inner_iterations"] = fit.inner_iterations;
  rec["max_score_beta"] = fit.max_score_beta;
  rec["max_score_v"] = fit.max_score_v;
  rec["max_score_theta"] = fit.max_score_theta;
  rec["varcov"] = fit.theta.describe();
  rec["theta"] = std::vector<double>(fit.theta.theta().data(),
                                     fit.theta.theta().data() + fit.theta.theta_dim());
  json betas = json::array();
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < p; ++j) {
      int idx = k * p + j;
      json b;
      b["cause"] = k + 1;
      b["covariate"] = j + 1;
      b["estimate"] = fit.beta(k, j);
      b["se_hessian"] = se_h[idx];
      b["se_sandwich"] = se_s[idx];
      b["ci_lower"] = fit.beta(k, j) - 1.96 * se_h[idx];
      b["ci_upper"] = fit.beta(k, j) + 1.96 * se_h[idx];
      betas.push_back(b);
    }
  rec["beta"] = betas;
  std::ofstream fj(fs::path(a.out) / "fit.json");
  fj << rec.dump(2) << "\n";

  // Hazard-ratio table on the exp scale, Wald 95% CI, default (Hessian) SEs.
  std::ofstream hr(fs::path(a.out) / "hazard_ratios.csv");
  hr << "cause,covariate,hazard_ratio,ci_lower,ci_upper\n";
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < p; ++j) {
      int idx = k * p + j;
      hr << k + 1 << "," << j + 1 << "," << fmt_full(std::exp(fit.beta(k, j))) << ","
         << fmt_full(std::exp(fit.beta(k, j) - 1.96 * se_h[idx])) << ","
         << fmt_full(std::exp(fit.beta(k, j) + 1.96 * se_h[idx])) << "\n";
    }
  hr.close();

  write_matrix_csv(fit.var_hessian_beta, (fs::path(a.out) / "variance_hessian_beta.csv").string());
  write_matrix_csv(fit.var_sandwich_beta,
                   (fs::path(a.out) / "variance_sandwich_beta.csv").string());
  if (a.write_variances && fit.var_hessian) {
    write_matrix_csv(*fit.var_hessian, (fs::path(a.out) / "variance_hessian_full.csv").string());
    write_matrix_csv(*fit.var_sandwich, (fs::path(a.out) / "variance_sandwich_full.csv").string());
  }

  for (int k = 0; k < K; ++k)
    for (int j = 0; j < p; ++j) {
      int idx = k * p + j;
      std::cout << "cause " << k + 1 << " x" << j + 1 << ": HR " << fmt6(std::exp(fit.beta(k, j)))
                << " (" << fmt6(std::exp(fit.beta(k, j) - 1.96 * se_h[idx])) << ", "
                << fmt6(std::exp(fit.beta(k, j) + 1.96 * se_h[idx])) << ")\n";
    }
  std::cout << "varcov: " << fit.theta.describe()
            << (fit.theta_at_floor ? " [warning: frailty variance at floor]" : "") << "\n";
  if (masked) std::cout << "note: event types in the main file were masked for this method\n";

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json opts;
  opts["method"] = a.method;
  opts["varcov"] = a.varcov;
  opts["causes"] = K;
  opts["ridge"] = a.ridge;
  opts["sigma2_init"] = a.sigma2_init;
  opts["rho_init"] = a.rho_init;
  opts["out"] = a.out;
  std::vector<std::string> inputs{a.main_csv};
  if (needs_classifier) inputs.push_back(a.train_csv);
  write_manifest(a.out, command, opts, inputs, 0, wall);
  return 0;
}

struct PredictArgs {
  std::string main_csv, train_csv, emit = "probs";
  std::string out = default_out_dir();
  double ridge = 0.0;
};

int cmd_predict(const PredictArgs& a, const std::string& command) {
  auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(a.out);
  crfrail::StudyDataset training = crfrail::load_dataset(a.train_csv, 0);
  crfrail::StudyDataset main_data = crfrail::load_dataset(a.main_csv, training.num_causes());
  if (main_data.predictor_dim() != training.predictor_dim())
    throw crfrail::DataError("predictor dimension mismatch: train has " +
                             std::to_string(training.predictor_dim()) + ", main has " +
                             std::to_string(main_data.predictor_dim()));
  crfrail::ClassifierOptions copt;
  copt.ridge = a.ridge;
  crfrail::MultinomialModel model = crfrail::fit_multinomial(training, copt);
  model.save((fs::path(a.out) / "classifier.json").string());
  auto probs = crfrail::predict_probabilities(model, main_data);
  if (a.emit == "probs" || a.emit == "both")
    crfrail::write_probabilities(main_data, probs, (fs::path(a.out) / "probabilities.csv").string());
  if (a.emit == "labels" || a.emit == "both") {
    auto imp = crfrail::impute_types(probs);
    std::ofstream out(fs::path(a.out) / "labels.csv");
    out << "cluster_id,unit_id,event_type\n";
    for (std::size_t r = 0; r < imp.unit_positions.size(); ++r) {
      const auto& u = main_data.units()[imp.unit_positions[r]];
      out << u.cluster_id << "," << u.unit_id << "," << imp.labels[r] << "\n";
    }
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json opts;
  opts["emit"] = a.emit;
  opts["ridge"] = a.ridge;
  opts["out"] = a.out;
  write_manifest(a.out, command, opts, {a.main_csv, a.train_csv}, 0, wall);
  std::cout << "predicted " << probs.unit_positions().size() << " units\n";
  return 0;
}

struct SimArgs {
  std::string config_path;
  std::string out = default_out_dir();
  int replicates = 0;
  long long seed = -1;
  int jobs = 0;
};

int cmd_simulate(const SimArgs& a, const std::string& command) {
  auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(a.out);
  crfrail::SimulationConfig cfg = crfrail::SimulationConfig::load(a.config_path);
  if (a.replicates > 0) cfg.replicates = a.replicates;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.jobs > 0) cfg.jobs = a.jobs;
  cfg.validate();

  crfrail::MonteCarloSummary sum = crfrail::run_study(cfg);
  crfrail::write_summary_csv(sum, cfg, (fs::path(a.out) / "summary.csv").string());
  crfrail::write_audit_csv(sum, (fs::path(a.out) / "audit.csv").string());

  for (const auto& ps : sum.parameters)
    std::cout << ps.name << ": bias " << fmt6(ps.percent_bias) << "% ese " << fmt6(ps.ese)
              << " coverage " << fmt6(ps.coverage) << "\n";
  std::cout << "replicates: " << sum.converged << "/" << sum.replicates << " converged\n";

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json opts = json::parse(cfg.to_json());
  opts["out"] = a.out;
  write_manifest(a.out, command, opts, {a.config_path}, cfg.seed, wall);

  double frac = sum.replicates > 0 ? static_cast<double>(sum.converged) / sum.replicates : 0.0;
  return frac >= 0.95 ? 0 : kExitNoConvergence;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cause-specific proportional-hazards frailty models for clustered "
               "competing-risks data with missing event types"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the frailty model to a main study");
  fit_cmd->add_option("--main", fa.main_csv, "Main study CSV")->required();
  fit_cmd->add_option("--train", fa.train_csv, "Training CSV (weighted/imputed)");
  fit_cmd->add_option("--method", fa.method, "weighted|imputed|complete")
      ->check(CLI::IsMember({"weighted", "imputed", "complete"}));
  fit_cmd->add_option("--varcov", fa.varcov, "exchangeable|unstructured")
      ->check(CLI::IsMember({"exchangeable", "unstructured"}));
  fit_cmd->add_option("--out", fa.out, "Output directory");
  fit_cmd->add_option("--causes", fa.causes, "Number of competing causes (0 = infer)");
  fit_cmd->add_option("--ridge", fa.ridge, "Classifier ridge penalty");
  fit_cmd->add_option("--sigma2-init", fa.sigma2_init, "Initial frailty variance");
  fit_cmd->add_option("--rho-init", fa.rho_init, "Initial frailty correlation");
  fit_cmd->add_option("--score-tol", fa.score_tol, "Inner score tolerance");
  fit_cmd->add_option("--theta-tol", fa.theta_tol, "Theta change tolerance");
  fit_cmd->add_option("--max-inner", fa.max_inner, "Max inner Newton iterations");
  fit_cmd->add_option("--max-outer", fa.max_outer, "Max outer iterations");
  fit_cmd->add_flag("--write-variances", fa.write_variances, "Write full variance matrices");

  PredictArgs pa;
  auto* pred_cmd = app.add_subcommand("predict", "Classify event types for a main study");
  pred_cmd->add_option("--train", pa.train_csv, "Training CSV")->required();
  pred_cmd->add_option("--main", pa.main_csv, "Main study CSV")->required();
  pred_cmd->add_option("--emit", pa.emit, "probs|labels|both")
      ->check(CLI::IsMember({"probs", "labels", "both"}));
  pred_cmd->add_option("--out", pa.out, "Output directory");
  pred_cmd->add_option("--ridge", pa.ridge, "Classifier ridge penalty");

  SimArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Run the Monte Carlo study");
  sim_cmd->add_option("--config", sa.config_path, "Scenario config (JSON)")->required();
  sim_cmd->add_option("--replicates", sa.replicates, "Override replicate count");
  sim_cmd->add_option("--seed", sa.seed, "Override master seed");
  sim_cmd->add_option("--jobs", sa.jobs, "Worker threads");
  sim_cmd->add_option("--out", sa.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  std::string command;
  for (int i = 0; i < argc; ++i) command += std::string(i ? " " : "") + argv[i];

  try {
    if (fit_cmd->parsed()) {
      if (fa.method != "complete" && fa.train_csv.empty()) {
        std::cerr << "error: --train is required for method '" << fa.method << "'\n"
                  << fit_cmd->help();
        return kExitUsage;
      }
      return cmd_fit(fa, command);
    }
    if (pred_cmd->parsed()) return cmd_predict(pa, command);
    if (sim_cmd->parsed()) return cmd_simulate(sa, command);
  } catch (const crfrail::ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNoConvergence;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
