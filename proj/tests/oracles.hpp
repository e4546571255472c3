#pragma once

// Independent reference implementations used as test oracles. Everything here
// is deliberately naive (O(n^2) risk-set scans, full finite differences,
// coordinate grid refinement) and shares no code with the library internals.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "crfrail/dataset.hpp"
#include "crfrail/varcov.hpp"

namespace oracles {

// Weighted penalized partial log-likelihood by direct double loop over units.
inline double naive_ppll(const crfrail::StudyDataset& data, const Eigen::MatrixXd& weights,
                         const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                         const crfrail::VarCovSpec* varcov) {
  const int n = data.num_units();
  const int K = data.num_causes();
  double total = 0.0;
  for (int u = 0; u < n; ++u) {
    const auto& unit = data.units()[u];
    for (int k = 0; k < K; ++k) {
      double w = weights(u, k);
      if (w == 0.0) continue;
      double eta = beta.row(k).dot(unit.covariates) + v[data.cluster_index(u) * K + k];
      double denom = 0.0;
      for (int s = 0; s < n; ++s) {
        const auto& other = data.units()[s];
        if (data.risk_set_indicator(other.cluster_id, other.unit_id, unit.time) == 0) continue;
        denom += std::exp(beta.row(k).dot(other.covariates) +
                          v[data.cluster_index(s) * K + k]);
      }
      total += w * (eta - std::log(denom));
    }
  }
  if (varcov) {
    Eigen::MatrixXd Dinv = varcov->block_inverse();
    for (int i = 0; i < data.num_clusters(); ++i) {
      Eigen::VectorXd vi = v.segment(i * K, K);
      total -= 0.5 * vi.dot(Dinv * vi);
    }
  }
  return total;
}

// Unpenalized Cox partial log-likelihood per cause, no frailty (v = 0).
inline double naive_cox_loglik(const crfrail::StudyDataset& data, const Eigen::MatrixXd& weights,
                               const Eigen::MatrixXd& beta) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(data.num_clusters() * data.num_causes());
  return naive_ppll(data, weights, beta, v, nullptr);
}

// Central finite-difference gradient of a scalar function.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    double hi = h * (1.0 + std::abs(x[i]));
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += hi;
    xm[i] -= hi;
    g[i] = (f(xp) - f(xm)) / (2.0 * hi);
  }
  return g;
}

// Central finite-difference Hessian (via gradient differences of f itself).
inline Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                                  const Eigen::VectorXd& x, double h = 1e-5) {
  const int d = static_cast<int>(x.size());
  Eigen::MatrixXd H(d, d);
  for (int i = 0; i < d; ++i) {
    double hi = h * (1.0 + std::abs(x[i]));
    for (int j = i; j < d; ++j) {
      double hj = h * (1.0 + std::abs(x[j]));
      Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
      xpp[i] += hi; xpp[j] += hj;
      xpm[i] += hi; xpm[j] -= hj;
      xmp[i] -= hi; xmp[j] += hj;
      xmm[i] -= hi; xmm[j] -= hj;
      H(i, j) = H(j, i) = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * hi * hj);
    }
  }
  return H;
}

// Maximizes f over R^d by cyclic coordinate grid refinement: each sweep scans
// 21 grid points per coordinate over [x_i - span, x_i + span], then the span
// shrinks. Brute force by construction; accurate to ~final span.
inline Eigen::VectorXd grid_maximize(const std::function<double(const Eigen::VectorXd&)>& f,
                                     Eigen::VectorXd x, double span = 4.0,
                                     double final_span = 1e-5) {
  while (span > final_span) {
    for (int sweep = 0; sweep < 6; ++sweep) {
      for (int i = 0; i < x.size(); ++i) {
        double best_val = -std::numeric_limits<double>::infinity();
        double best_xi = x[i];
        for (int g = -10; g <= 10; ++g) {
          Eigen::VectorXd cand = x;
          cand[i] = x[i] + span * g / 10.0;
          double val = f(cand);
          if (val > best_val) {
            best_val = val;
            best_xi = cand[i];
          }
        }
        x[i] = best_xi;
      }
    }
    span *= 0.4;
  }
  return x;
}

// Multinomial logistic log-likelihood with reference class K (1-based labels),
// coefficient rows (intercept, slopes) for classes 1..K-1.
inline double naive_multinomial_loglik(const std::vector<Eigen::VectorXd>& W,
                                       const std::vector<int>& labels,
                                       const Eigen::MatrixXd& coef) {
  const int K = static_cast<int>(coef.rows()) + 1;
  double ll = 0.0;
  for (std::size_t r = 0; r < W.size(); ++r) {
    std::vector<double> eta(K, 0.0);
    for (int k = 0; k < K - 1; ++k) {
      eta[k] = coef(k, 0);
      for (int j = 0; j < W[r].size(); ++j) eta[k] += coef(k, j + 1) * W[r][j];
    }
    double m = *std::max_element(eta.begin(), eta.end());
    double sum = 0.0;
    for (double e : eta) sum += std::exp(e - m);
    ll += eta[labels[r] - 1] - (m + std::log(sum));
  }
  return ll;
}

}  // namespace oracles
