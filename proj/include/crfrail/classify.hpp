#pragma once

#include <Eigen/Core>
#include <string>

#include "crfrail/dataset.hpp"

namespace crfrail {

class ClassifierError : public std::runtime_error {
public:
  explicit ClassifierError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Multinomial logistic regression for event type given predictors W,
/// reference-class parameterization (class K is the baseline). Coefficient
/// row k (k = 0..K-2) holds (intercept, slopes) for class k+1.
struct MultinomialModel {
  int num_classes = 0;
  int predictor_dim = 0;
  Eigen::MatrixXd coefficients;  // (K-1) x (q+1)
  int training_size = 0;
  int iterations = 0;
  double log_likelihood = 0.0;

  /// Row of class probabilities for one predictor vector (log-sum-exp
  /// stabilized softmax).
  Eigen::VectorXd probabilities(const Eigen::VectorXd& w) const;

  std::string to_json() const;
  static MultinomialModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static MultinomialModel load(const std::string& path);
};

struct ClassifierOptions {
  double score_tol = 1e-8;
  double loglik_tol = 1e-10;
  int max_iter = 100;
  double ridge = 0.0;            // quadratic penalty; rescues separation
  double divergence_bound = 1e3; // |coef| beyond this with non-vanishing score => separation
};

/// Fits the classifier on the Delta=1 units of the training data (every such
/// unit must carry predictors and an event type).
MultinomialModel fit_multinomial(const StudyDataset& training,
                                 const ClassifierOptions& options = ClassifierOptions{});

/// Event-type probabilities for the Delta=1 units of the main study.
EventProbabilityMatrix predict_probabilities(const MultinomialModel& model,
                                             const StudyDataset& main);

/// Hard imputation: argmax class per row, ties broken by lowest class index.
EventAssignment impute_types(const EventProbabilityMatrix& probs);

}  // namespace crfrail
