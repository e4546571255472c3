#include "crfrail/classify.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <vector>

namespace crfrail {

namespace {

// Class scores for one design row: eta_k = c_k . (1, w), eta_K = 0.
Eigen::VectorXd class_scores(const Eigen::MatrixXd& coef, const Eigen::VectorXd& w) {
  const int K = static_cast<int>(coef.rows()) + 1;
  Eigen::VectorXd eta(K);
  for (int k = 0; k < K - 1; ++k)
    eta[k] = coef(k, 0) + coef.row(k).tail(w.size()).dot(w);
  eta[K - 1] = 0.0;
  return eta;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& eta) {
  double m = eta.maxCoeff();
  Eigen::VectorXd p = (eta.array() - m).exp();
  return p / p.sum();
}

}  // namespace

Eigen::VectorXd MultinomialModel::probabilities(const Eigen::VectorXd& w) const {
  if (w.size() != predictor_dim) throw ClassifierError("predictor dimension mismatch");
  return softmax(class_scores(coefficients, w));
}

MultinomialModel fit_multinomial(const StudyDataset& training, const ClassifierOptions& opt) {
  const int K = training.num_causes();
  const int q = training.predictor_dim();
  if (q == 0) throw ClassifierError("training data has no predictors");

  std::vector<Eigen::VectorXd> W;
  std::vector<int> y;  // 0-based class
  std::vector<bool> present(K, false);
  for (const auto& u : training.units()) {
    if (u.censor_indicator != 1) continue;  // fit among units that experienced an event
    if (!u.event_type) throw ClassifierError("Delta=1 training unit without event type");
    if (!u.predictors) throw ClassifierError("Delta=1 training unit without predictors");
    W.push_back(*u.predictors);
    y.push_back(*u.event_type - 1);
    present[*u.event_type - 1] = true;
  }
  int classes_present = static_cast<int>(std::count(present.begin(), present.end(), true));
  if (classes_present < K)
    throw ClassifierError("training data contains " + std::to_string(classes_present) +
                          " event types, expected " + std::to_string(K));
  const int n = static_cast<int>(W.size());
  const int dim = (K - 1) * (q + 1);

  Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(K - 1, q + 1);

  auto loglik_and_derivs = [&](const Eigen::MatrixXd& c, Eigen::VectorXd& grad,
                               Eigen::MatrixXd& hess) {
    grad = Eigen::VectorXd::Zero(dim);
    hess = Eigen::MatrixXd::Zero(dim, dim);
    double ll = 0.0;
    Eigen::VectorXd x(q + 1);
    for (int r = 0; r < n; ++r) {
      x[0] = 1.0;
      x.tail(q) = W[r];
      Eigen::VectorXd eta = class_scores(c, W[r]);
      double m = eta.maxCoeff();
      double lse = m + std::log((eta.array() - m).exp().sum());
      ll += eta[y[r]] - lse;
      Eigen::VectorXd p = softmax(eta);
      for (int a = 0; a < K - 1; ++a) {
        double ga = (y[r] == a ? 1.0 : 0.0) - p[a];
        grad.segment(a * (q + 1), q + 1) += ga * x;
        for (int b = 0; b < K - 1; ++b) {
          double wab = p[a] * ((a == b ? 1.0 : 0.0) - p[b]);
          hess.block(a * (q + 1), b * (q + 1), q + 1, q + 1) -= wab * (x * x.transpose());
        }
      }
    }
    if (opt.ridge > 0.0) {
      // grad/hess are flattened row by row, so mirror that ordering here
      Eigen::VectorXd flat(dim);
      for (int a = 0; a < K - 1; ++a) flat.segment(a * (q + 1), q + 1) = c.row(a);
      ll -= 0.5 * opt.ridge * flat.squaredNorm();
      grad -= opt.ridge * flat;
      hess.diagonal().array() -= opt.ridge;
    }
    return ll;
  };

  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  double ll = loglik_and_derivs(coef, grad, hess);
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    if (grad.cwiseAbs().maxCoeff() < opt.score_tol) break;
    Eigen::MatrixXd nh = -hess;
    nh.diagonal().array() += 1e-12;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(nh);
    Eigen::VectorXd step = ldlt.solve(grad);
    double alpha = 1.0;
    bool accepted = false;
    for (int half = 0; half < 30; ++half) {
      Eigen::MatrixXd cand = coef;
      for (int a = 0; a < K - 1; ++a)
        cand.row(a) += alpha * step.segment(a * (q + 1), q + 1).transpose();
      Eigen::VectorXd g2;
      Eigen::MatrixXd h2;
      double ll2 = loglik_and_derivs(cand, g2, h2);
      if (std::isfinite(ll2) && ll2 > ll) {
        // The relative log-likelihood criterion only applies to a full Newton
        // step; a heavily damped step always changes ll by a near-zero amount.
        bool done = half == 0 && ll2 - ll < opt.loglik_tol * (1.0 + std::abs(ll));
        coef = cand;
        grad = g2;
        hess = h2;
        ll = ll2;
        accepted = true;
        if (done) it = opt.max_iter;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
    if (coef.cwiseAbs().maxCoeff() > opt.divergence_bound &&
        grad.cwiseAbs().maxCoeff() > opt.score_tol)
      throw ClassifierError(
          "complete separation detected (coefficients diverging); "
          "set a positive ridge penalty to regularize the fit");
  }

  // A log-likelihood at (numerically) zero means the training classes are
  // perfectly separated and the unpenalized optimum does not exist.
  if (opt.ridge == 0.0 && ll > -1e-6)
    throw ClassifierError(
        "complete separation detected (log-likelihood at zero); "
        "set a positive ridge penalty to regularize the fit");

  MultinomialModel model;
  model.num_classes = K;
  model.predictor_dim = q;
  model.coefficients = coef;
  model.training_size = n;
  model.iterations = std::min(it, opt.max_iter);
  model.log_likelihood = ll;
  if (!coef.allFinite()) throw ClassifierError("non-finite coefficients in multinomial fit");
  return model;
}

EventProbabilityMatrix predict_probabilities(const MultinomialModel& model,
                                             const StudyDataset& main) {
  if (main.num_causes() != model.num_classes)
    throw ClassifierError("dataset num_causes does not match the model");
  std::vector<int> pos;
  std::vector<Eigen::VectorXd> rows;
  for (int u = 0; u < main.num_units(); ++u) {
    const auto& unit = main.units()[u];
    if (unit.censor_indicator != 1) continue;
    if (!unit.predictors)
      throw ClassifierError("Delta=1 unit (" + std::to_string(unit.cluster_id) + "," +
                            std::to_string(unit.unit_id) + ") has no predictors");
    pos.push_back(u);
    rows.push_back(model.probabilities(*unit.predictors));
  }
  Eigen::MatrixXd probs(static_cast<int>(rows.size()), model.num_classes);
  for (std::size_t r = 0; r < rows.size(); ++r) probs.row(static_cast<int>(r)) = rows[r];
  return EventProbabilityMatrix(std::move(pos), std::move(probs));
}

EventAssignment impute_types(const EventProbabilityMatrix& probs) {
  EventAssignment out;
  out.unit_positions = probs.unit_positions();
  out.labels.resize(out.unit_positions.size());
  for (int r = 0; r < probs.probs().rows(); ++r) {
    int best = 0;
    for (int k = 1; k < probs.num_causes(); ++k)
      if (probs.probs()(r, k) > probs.probs()(r, best)) best = k;  // lowest index wins ties
    out.labels[r] = best + 1;
  }
  return out;
}

std::string MultinomialModel::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["predictor_dim"] = predictor_dim;
  std::vector<double> rm;  // row-major
  for (int r = 0; r < coefficients.rows(); ++r)
    for (int c = 0; c < coefficients.cols(); ++c) rm.push_back(coefficients(r, c));
  j["coefficients_row_major"] = rm;
  j["training"] = {{"n", training_size},
                   {"iterations", iterations},
                   {"log_likelihood", log_likelihood}};
  return j.dump(2);
}

MultinomialModel MultinomialModel::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  MultinomialModel m;
  m.num_classes = j.at("num_classes").get<int>();
  m.predictor_dim = j.at("predictor_dim").get<int>();
  auto rm = j.at("coefficients_row_major").get<std::vector<double>>();
  int rows = m.num_classes - 1, cols = m.predictor_dim + 1;
  if (static_cast<int>(rm.size()) != rows * cols)
    throw ClassifierError("coefficient vector has wrong length in model record");
  m.coefficients.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m.coefficients(r, c) = rm[r * cols + c];
  if (j.contains("training")) {
    m.training_size = j["training"].value("n", 0);
    m.iterations = j["training"].value("iterations", 0);
    m.log_likelihood = j["training"].value("log_likelihood", 0.0);
  }
  return m;
}

void MultinomialModel::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ClassifierError("cannot write model file: " + path);
  out << to_json() << "\n";
}

MultinomialModel MultinomialModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ClassifierError("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace crfrail
