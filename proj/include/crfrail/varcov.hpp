#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace crfrail {

enum class VarCovStructure { SharedExchangeable, Unstructured };

/// Parameterization of the frailty covariance D(theta) = blockdiag of N
/// identical K x K blocks D_i(theta).
///
/// shared-exchangeable: theta = (sigma2, rho), D_i = sigma2 [(1-rho) I + rho J],
/// admissible for sigma2 > 0 and rho in (-1/(K-1), 1).
///
/// unstructured: theta packs the Cholesky factor L of D_i row by row with
/// logged diagonal (log-Cholesky), so every admissible theta yields an SPD
/// block. dim(theta) = K(K+1)/2.
class VarCovSpec {
public:
  VarCovSpec(VarCovStructure structure, int num_causes, Eigen::VectorXd theta);

  static VarCovSpec exchangeable(int num_causes, double sigma2, double rho);
  static VarCovSpec unstructured_from_matrix(const Eigen::MatrixXd& block);

  VarCovStructure structure() const { return structure_; }
  int num_causes() const { return K_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  int theta_dim() const { return static_cast<int>(theta_.size()); }

  /// For exchangeable specs only.
  double sigma2() const;
  double rho() const;

  Eigen::MatrixXd block() const;                    // D_i(theta), K x K, SPD
  Eigen::MatrixXd block_inverse() const;
  double block_log_det() const;
  Eigen::MatrixXd block_derivative(int component) const;  // dD_i / dtheta_m

  VarCovSpec with_theta(const Eigen::VectorXd& theta) const;

  /// Clamps theta into the admissible region (sigma2 >= floor, |rho| bounded
  /// away from the boundary). Returns true if clamping occurred.
  bool project_admissible(double sigma2_floor = 1e-8, double rho_max = 0.999);

  /// True when the exchangeable variance sits at the configured floor.
  bool at_floor(double sigma2_floor = 1e-8) const;

  std::string describe() const;

private:
  VarCovStructure structure_;
  int K_;
  Eigen::VectorXd theta_;
};

}  // namespace crfrail
