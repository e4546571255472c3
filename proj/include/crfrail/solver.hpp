#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>

#include "crfrail/dataset.hpp"
#include "crfrail/varcov.hpp"

namespace crfrail {

class ConvergenceError : public std::runtime_error {
public:
  explicit ConvergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Which form of the theta estimating function drives the variance-component
/// update. Paper: trace term tr(K2_ppll^{-1} dD/dtheta) with
/// K2_ppll = -(I_vv + D^{-1}). Classical: the Laplace-objective derivative,
/// trace term -tr((I_vv + D^{-1})^{-1} D^{-1} dD/dtheta D^{-1}).
enum class ThetaScoreForm { Paper, Classical };

struct SolverOptions {
  double score_tol = 1e-7;  // max |U(beta)|, |U(v)| at the inner optimum
  double theta_tol = 1e-6;  // relative pattern-search step at theta convergence
  int max_inner = 50;
  int max_outer = 100;      // pattern-search rounds over theta
  double sigma2_floor = 1e-8;
  double rho_max = 0.999;
  ThetaScoreForm theta_form = ThetaScoreForm::Classical;
  // Joint problems up to this dimension (K*p + N*K) use exact dense linear
  // algebra everywhere; larger ones switch to the sweep-based solver with a
  // cluster-diagonal curvature approximation in the Newton direction and the
  // theta trace term (scores and variance estimators stay exact).
  int dense_limit = 600;
  bool force_dense = false;
  bool force_structured = false;
  // Materialize the full (Kp+NK)^2 variance matrices. Always done in dense
  // mode; in structured mode only the beta blocks are computed unless set.
  bool store_full_variances = false;
  double ridge_retry = 1e-10;
  bool compute_variances = true;
};

struct FrailtyFit {
  explicit FrailtyFit(VarCovSpec theta0) : theta(std::move(theta0)) {}

  Eigen::MatrixXd beta;      // K x p
  Eigen::VectorXd v;         // NK, v_ik at position K*(i-1)+k (0-based: i*K+k)
  VarCovSpec theta;
  double pplog = 0.0;        // weighted PPLL at the optimum
  int outer_iterations = 0;
  int inner_iterations = 0;  // total Newton steps across outer rounds
  bool converged = false;
  bool theta_at_floor = false;
  bool degenerate = false;   // all weights zero
  double max_score_beta = 0.0;
  double max_score_v = 0.0;
  double max_score_theta = 0.0;

  // beta blocks of the two variance estimators (Kp x Kp, beta_k stacked).
  Eigen::MatrixXd var_hessian_beta;
  Eigen::MatrixXd var_sandwich_beta;
  // Full matrices when available (dense mode or store_full_variances).
  std::optional<Eigen::MatrixXd> var_hessian;
  std::optional<Eigen::MatrixXd> var_sandwich;

  Eigen::VectorXd se_beta_hessian() const;   // length Kp
  Eigen::VectorXd se_beta_sandwich() const;
};

/// Weighted penalized partial log-likelihood
///   -1/2 v' D(theta)^{-1} v
///   + sum_ijk w_ijk [X_ij' beta_k + v_ik - log sum_{i'j'} Y_{i'j'}(T_ij) exp(...)].
double weighted_ppll(const StudyDataset& data, const Eigen::MatrixXd& weights,
                     const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                     const VarCovSpec& varcov);

/// dPPLL/dbeta_k (the penalty does not involve beta).
Eigen::VectorXd score_beta(const StudyDataset& data, const Eigen::MatrixXd& weights,
                           const Eigen::MatrixXd& beta, const Eigen::VectorXd& v, int cause);

/// dPPLL/dv, penalty included.
Eigen::VectorXd score_v(const StudyDataset& data, const Eigen::MatrixXd& weights,
                        const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                        const VarCovSpec& varcov);

/// Estimating function for theta at fixed (beta, v); form selected in options.
Eigen::VectorXd score_theta(const StudyDataset& data, const Eigen::MatrixXd& weights,
                            const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                            const VarCovSpec& varcov,
                            const SolverOptions& options = SolverOptions{});

/// Direct evaluation of the theta-score formula from its dense ingredients:
///   -1/2 [ tr(D^{-1} dD) - v' D^{-1} dD D^{-1} v + tr(K2inv dD) ].
double theta_score_formula(const Eigen::MatrixXd& D, const Eigen::MatrixXd& dD,
                           const Eigen::VectorXd& v, const Eigen::MatrixXd& K2inv);

/// Information matrix of the unpenalized weighted partial log-likelihood,
/// blocks [I_bb, I_bv; I_bv', I_vv], dimension (Kp+NK)^2. Dense; intended for
/// moderate problem sizes.
Eigen::MatrixXd information_matrix(const StudyDataset& data, const Eigen::MatrixXd& weights,
                                   const Eigen::MatrixXd& beta, const Eigen::VectorXd& v);

struct InnerResult {
  Eigen::MatrixXd beta;
  Eigen::VectorXd v;
  double pplog = 0.0;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
  double max_score_beta = 0.0;
  double max_score_v = 0.0;
};

/// Maximizes the weighted PPLL over (beta, v) at fixed theta by Newton
/// iteration with step halving.
InnerResult inner_maximize(const StudyDataset& data, const Eigen::MatrixXd& weights,
                           const VarCovSpec& varcov, const Eigen::MatrixXd& beta0,
                           const Eigen::VectorXd& v0,
                           const SolverOptions& options = SolverOptions{});

/// Full fit: chooses theta to maximize the Laplace-approximate marginal
/// objective profiled over (beta, v) (each candidate theta re-maximizes the
/// PPLL), then computes both variance estimators. max_score_theta reports the
/// finite-difference gradient of the profile at the optimum.
FrailtyFit fit(const StudyDataset& data, const Eigen::MatrixXd& weights,
               const VarCovSpec& varcov0, const SolverOptions& options = SolverOptions{});

/// V = H^{-1} I H^{-1} on explicit matrices.
Eigen::MatrixXd sandwich_variance(const Eigen::MatrixXd& H, const Eigen::MatrixXd& info);

/// Laplace-approximation objective evaluated at fixed (beta, v):
/// -1/2 log|D| + PPLL(beta, v) - 1/2 log|I_vv + D^{-1}|.
/// Its finite-difference derivative in theta (at fixed v) identifies which
/// theta score form is the derivative of the approximate marginal likelihood.
double laplace_objective(const StudyDataset& data, const Eigen::MatrixXd& weights,
                         const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                         const VarCovSpec& varcov);

}  // namespace crfrail
