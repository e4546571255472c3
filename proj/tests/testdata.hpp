#pragma once

// Small random clustered competing-risks datasets for tests. Independent of
// the library's simulation module (plain exponential draws, no calibration).

#include <random>
#include <vector>

#include "crfrail/dataset.hpp"

namespace testdata {

struct Spec {
  int num_clusters = 6;
  int units_per_cluster = 2;
  int num_causes = 2;
  int covariate_dim = 1;
  double censor_prob = 0.25;
  double frailty_sd = 0.3;
  bool with_predictors = false;
};

inline crfrail::StudyDataset random_dataset(std::mt19937_64& rng, const Spec& s = Spec{}) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> norm(0.0, 1.0);
  std::vector<crfrail::SurvivalUnit> units;
  for (int i = 1; i <= s.num_clusters; ++i) {
    std::vector<double> v(s.num_causes);
    for (auto& vk : v) vk = s.frailty_sd * norm(rng);
    for (int j = 1; j <= s.units_per_cluster; ++j) {
      crfrail::SurvivalUnit u;
      u.cluster_id = i;
      u.unit_id = j;
      u.covariates.resize(s.covariate_dim);
      for (int c = 0; c < s.covariate_dim; ++c)
        u.covariates[c] = (c == 0) ? (unif(rng) < 0.5 ? 0.0 : 1.0) : norm(rng);
      double total = 0.0;
      std::vector<double> lam(s.num_causes);
      for (int k = 0; k < s.num_causes; ++k) {
        lam[k] = std::exp(0.3 * u.covariates[0] + v[k]);
        total += lam[k];
      }
      u.time = -std::log(1.0 - unif(rng)) / total;
      if (unif(rng) < s.censor_prob) {
        u.censor_indicator = 0;
        u.time *= unif(rng);
        if (u.time <= 0.0) u.time = 1e-6;
      } else {
        u.censor_indicator = 1;
        double pick = unif(rng) * total, acc = 0.0;
        for (int k = 0; k < s.num_causes; ++k) {
          acc += lam[k];
          if (pick <= acc) { u.event_type = k + 1; break; }
        }
        if (!u.event_type) u.event_type = s.num_causes;
      }
      if (s.with_predictors) {
        Eigen::VectorXd w(1);
        double mu = u.censor_indicator == 1 ? 2.0 * *u.event_type : 0.0;
        w[0] = mu + norm(rng);
        u.predictors = w;
      }
      units.push_back(std::move(u));
    }
  }
  return crfrail::StudyDataset(std::move(units), s.num_causes);
}

// Random soft weights for Delta=1 units (rows sum to one), zero otherwise.
inline Eigen::MatrixXd random_soft_weights(const crfrail::StudyDataset& data,
                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(data.num_units(), data.num_causes());
  for (int u = 0; u < data.num_units(); ++u) {
    if (data.units()[u].censor_indicator != 1) continue;
    double sum = 0.0;
    for (int k = 0; k < data.num_causes(); ++k) {
      w(u, k) = unif(rng);
      sum += w(u, k);
    }
    w.row(u) /= sum;
  }
  return w;
}

}  // namespace testdata
