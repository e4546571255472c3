#include <doctest.h>

#include <cstdio>
#include <random>

#include "crfrail/classify.hpp"
#include "oracles.hpp"

using namespace crfrail;

namespace {

SurvivalUnit event_unit(int cid, int uid, int type, double w) {
  SurvivalUnit u;
  u.cluster_id = cid;
  u.unit_id = uid;
  u.time = 1.0;
  u.censor_indicator = 1;
  u.event_type = type;
  u.covariates = Eigen::VectorXd::Zero(1);
  u.predictors = Eigen::VectorXd::Constant(1, w);
  return u;
}

// Training set with labels drawn from a known multinomial-logit model so the
// classifier has a well-defined target. Returns dataset plus the raw (W, y).
StudyDataset labelled_training(std::mt19937_64& rng, int n, int K, double sep,
                               std::vector<Eigen::VectorXd>* W_out = nullptr,
                               std::vector<int>* y_out = nullptr) {
  std::normal_distribution<double> norm(0.0, 1.0);
  std::uniform_int_distribution<int> pick(1, K);
  std::vector<SurvivalUnit> units;
  for (int i = 1; i <= n; ++i) {
    int y = pick(rng);
    double w = sep * y + norm(rng);
    units.push_back(event_unit(i, 1, y, w));
    if (W_out) W_out->push_back(Eigen::VectorXd::Constant(1, w));
    if (y_out) y_out->push_back(y);
  }
  return StudyDataset(std::move(units), K);
}

}  // namespace

TEST_CASE("no-signal data: intercept equals the log class-count ratio exactly") {
  // The conditional distribution of W given the class is identical across
  // classes (matched +/-1 values), so slope 0 solves the score equation and
  // the intercept is log(n1/n2).
  std::vector<SurvivalUnit> units;
  int id = 1;
  for (double w : {-1.0, 1.0, -1.0, 1.0}) units.push_back(event_unit(id++, 1, 1, w));
  for (double w : {-1.0, 1.0}) units.push_back(event_unit(id++, 1, 2, w));
  StudyDataset train(std::move(units), 2);
  MultinomialModel m = fit_multinomial(train);
  CHECK(m.coefficients(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-7));
  CHECK(m.coefficients(0, 1) == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("fitted coefficients maximize the log-likelihood (grid oracle)") {
  std::mt19937_64 rng(42);
  std::vector<Eigen::VectorXd> W;
  std::vector<int> y;
  StudyDataset train = labelled_training(rng, 120, 2, 0.8, &W, &y);
  MultinomialModel m = fit_multinomial(train);

  auto negll = [&](const Eigen::VectorXd& t) {
    Eigen::MatrixXd coef(1, 2);
    coef << t[0], t[1];
    return oracles::naive_multinomial_loglik(W, y, coef);
  };
  Eigen::VectorXd best = oracles::grid_maximize(negll, Eigen::VectorXd::Zero(2), 4.0, 1e-6);
  CHECK(std::abs(m.coefficients(0, 0) - best[0]) < 1e-4);
  CHECK(std::abs(m.coefficients(0, 1) - best[1]) < 1e-4);
  // And the solver's value is at least the oracle's.
  Eigen::VectorXd fitted(2);
  fitted << m.coefficients(0, 0), m.coefficients(0, 1);
  CHECK(negll(fitted) >= negll(best) - 1e-10);
}

TEST_CASE("three well-separated classes are recovered accurately") {
  std::mt19937_64 rng(7);
  StudyDataset train = labelled_training(rng, 300, 3, 3.5);
  MultinomialModel m = fit_multinomial(train);

  // Held-out accuracy under the same generative law.
  std::vector<Eigen::VectorXd> W;
  std::vector<int> y;
  StudyDataset test = labelled_training(rng, 500, 3, 3.5, &W, &y);
  int hits = 0;
  for (std::size_t r = 0; r < W.size(); ++r) {
    Eigen::VectorXd p = m.probabilities(W[r]);
    int arg = 0;
    for (int k = 1; k < 3; ++k)
      if (p[k] > p[arg]) arg = k;
    if (arg + 1 == y[r]) ++hits;
  }
  CHECK(static_cast<double>(hits) / W.size() >= 0.85);
}

TEST_CASE("probability rows are valid and shift-invariant") {
  std::mt19937_64 rng(3);
  StudyDataset train = labelled_training(rng, 90, 3, 1.0);
  MultinomialModel m = fit_multinomial(train);
  for (double w : {-4.0, 0.0, 2.5, 700.0, -700.0}) {  // extreme values stay finite
    Eigen::VectorXd p = m.probabilities(Eigen::VectorXd::Constant(1, w));
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.minCoeff() >= 0.0);
    CHECK(p.allFinite());
  }
}

TEST_CASE("relabelling classes permutes the fitted probabilities") {
  std::mt19937_64 rng(15);
  std::vector<Eigen::VectorXd> W;
  std::vector<int> y;
  StudyDataset train = labelled_training(rng, 150, 3, 1.2, &W, &y);

  // Swap labels 1 <-> 2 and refit.
  std::vector<SurvivalUnit> swapped = train.units();
  for (auto& u : swapped)
    if (u.event_type) u.event_type = (*u.event_type == 1) ? 2 : (*u.event_type == 2 ? 1 : 3);
  StudyDataset train2(std::move(swapped), 3);

  MultinomialModel a = fit_multinomial(train);
  MultinomialModel b = fit_multinomial(train2);
  for (double w : {-1.0, 2.0, 5.0}) {
    Eigen::VectorXd pa = a.probabilities(Eigen::VectorXd::Constant(1, w));
    Eigen::VectorXd pb = b.probabilities(Eigen::VectorXd::Constant(1, w));
    CHECK(pa[0] == doctest::Approx(pb[1]).epsilon(1e-6));
    CHECK(pa[1] == doctest::Approx(pb[0]).epsilon(1e-6));
    CHECK(pa[2] == doctest::Approx(pb[2]).epsilon(1e-6));
  }
}

TEST_CASE("complete separation raises unless a ridge penalty is set") {
  std::vector<SurvivalUnit> units;
  int id = 1;
  for (double w : {1.0, 2.0, 3.0}) units.push_back(event_unit(id++, 1, 1, w));
  for (double w : {5.0, 6.0, 7.0}) units.push_back(event_unit(id++, 1, 2, w));
  StudyDataset train(std::move(units), 2);
  CHECK_THROWS_AS(fit_multinomial(train), ClassifierError);

  ClassifierOptions opt;
  opt.ridge = 1e-2;
  MultinomialModel m = fit_multinomial(train, opt);
  CHECK(m.coefficients.allFinite());
  Eigen::VectorXd p = m.probabilities(Eigen::VectorXd::Constant(1, 2.0));
  CHECK(p[0] > 0.9);  // still strongly discriminates
}

TEST_CASE("training requires every class to appear") {
  std::vector<SurvivalUnit> units{event_unit(1, 1, 1, 0.5), event_unit(2, 1, 1, 1.5)};
  StudyDataset train(std::move(units), 2);
  CHECK_THROWS_AS(fit_multinomial(train), ClassifierError);
}

TEST_CASE("predict_probabilities covers exactly the Delta=1 units, in order") {
  std::mt19937_64 rng(9);
  StudyDataset train = labelled_training(rng, 80, 2, 1.5);
  MultinomialModel m = fit_multinomial(train);

  std::vector<SurvivalUnit> units;
  for (int i = 1; i <= 4; ++i) {
    SurvivalUnit u = event_unit(i, 1, 0, 0.3 * i);
    u.event_type.reset();
    u.censor_indicator = i % 2;  // alternate censored / event
    units.push_back(u);
  }
  StudyDataset main(std::move(units), 2);
  EventProbabilityMatrix pm = predict_probabilities(m, main);
  pm.validate_against(main);
  CHECK(pm.unit_positions() == std::vector<int>{0, 2});

  EventAssignment ea = impute_types(pm);
  CHECK(ea.labels.size() == 2);
  for (int lab : ea.labels) CHECK((lab == 1 || lab == 2));
}

TEST_CASE("model JSON round trip") {
  std::mt19937_64 rng(33);
  StudyDataset train = labelled_training(rng, 60, 3, 1.0);
  MultinomialModel m = fit_multinomial(train);
  std::string path = "classifier_roundtrip.json";
  m.save(path);
  MultinomialModel m2 = MultinomialModel::load(path);
  std::remove(path.c_str());
  CHECK(m2.num_classes == m.num_classes);
  CHECK(m2.predictor_dim == m.predictor_dim);
  CHECK((m2.coefficients - m.coefficients).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m2.log_likelihood == m.log_likelihood);
}
