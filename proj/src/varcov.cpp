#include "crfrail/varcov.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace crfrail {

VarCovSpec::VarCovSpec(VarCovStructure structure, int num_causes, Eigen::VectorXd theta)
    : structure_(structure), K_(num_causes), theta_(std::move(theta)) {
  if (K_ < 1) throw std::invalid_argument("num_causes must be >= 1");
  int want = structure_ == VarCovStructure::SharedExchangeable ? 2 : K_ * (K_ + 1) / 2;
  if (static_cast<int>(theta_.size()) != want)
    throw std::invalid_argument("theta has wrong dimension for the chosen structure");
}

VarCovSpec VarCovSpec::exchangeable(int num_causes, double sigma2, double rho) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  double lo = num_causes > 1 ? -1.0 / (num_causes - 1) : -1.0;
  if (!(rho > lo && rho < 1.0)) throw std::invalid_argument("rho outside the admissible range");
  Eigen::VectorXd t(2);
  t << sigma2, rho;
  return VarCovSpec(VarCovStructure::SharedExchangeable, num_causes, std::move(t));
}

VarCovSpec VarCovSpec::unstructured_from_matrix(const Eigen::MatrixXd& block) {
  int K = static_cast<int>(block.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(block);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("unstructured block is not positive definite");
  Eigen::MatrixXd L = llt.matrixL();
  Eigen::VectorXd t(K * (K + 1) / 2);
  int m = 0;
  for (int r = 0; r < K; ++r)
    for (int c = 0; c <= r; ++c) t[m++] = (r == c) ? std::log(L(r, c)) : L(r, c);
  return VarCovSpec(VarCovStructure::Unstructured, K, std::move(t));
}

double VarCovSpec::sigma2() const {
  if (structure_ != VarCovStructure::SharedExchangeable)
    throw std::logic_error("sigma2() requires the exchangeable structure");
  return theta_[0];
}

double VarCovSpec::rho() const {
  if (structure_ != VarCovStructure::SharedExchangeable)
    throw std::logic_error("rho() requires the exchangeable structure");
  return theta_[1];
}

namespace {

Eigen::MatrixXd chol_from_theta(const Eigen::VectorXd& theta, int K) {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(K, K);
  int m = 0;
  for (int r = 0; r < K; ++r)
    for (int c = 0; c <= r; ++c) L(r, c) = (r == c) ? std::exp(theta[m++]) : theta[m++];
  return L;
}

}  // namespace

Eigen::MatrixXd VarCovSpec::block() const {
  if (structure_ == VarCovStructure::SharedExchangeable) {
    Eigen::MatrixXd D = Eigen::MatrixXd::Constant(K_, K_, sigma2() * rho());
    D.diagonal().setConstant(sigma2());
    return D;
  }
  Eigen::MatrixXd L = chol_from_theta(theta_, K_);
  return L * L.transpose();
}

Eigen::MatrixXd VarCovSpec::block_inverse() const {
  Eigen::MatrixXd D = block();
  return Eigen::LLT<Eigen::MatrixXd>(D).solve(Eigen::MatrixXd::Identity(K_, K_));
}

double VarCovSpec::block_log_det() const {
  Eigen::LLT<Eigen::MatrixXd> llt(block());
  double ld = 0.0;
  for (int k = 0; k < K_; ++k) ld += 2.0 * std::log(llt.matrixLLT()(k, k));
  return ld;
}

Eigen::MatrixXd VarCovSpec::block_derivative(int component) const {
  if (structure_ == VarCovStructure::SharedExchangeable) {
    if (component == 0) {
      Eigen::MatrixXd d = Eigen::MatrixXd::Constant(K_, K_, rho());
      d.diagonal().setConstant(1.0);
      return d;
    }
    if (component == 1) {
      Eigen::MatrixXd d = Eigen::MatrixXd::Constant(K_, K_, sigma2());
      d.diagonal().setZero();
      return d;
    }
    throw std::out_of_range("theta component out of range");
  }
  if (component < 0 || component >= theta_dim()) throw std::out_of_range("theta component");
  Eigen::MatrixXd L = chol_from_theta(theta_, K_);
  Eigen::MatrixXd dL = Eigen::MatrixXd::Zero(K_, K_);
  int m = 0;
  for (int r = 0; r < K_; ++r)
    for (int c = 0; c <= r; ++c) {
      if (m == component) dL(r, c) = (r == c) ? L(r, c) : 1.0;  // d exp(t)/dt = exp(t)
      ++m;
    }
  Eigen::MatrixXd d = dL * L.transpose();
  return d + d.transpose();
}

VarCovSpec VarCovSpec::with_theta(const Eigen::VectorXd& theta) const {
  return VarCovSpec(structure_, K_, theta);
}

bool VarCovSpec::project_admissible(double sigma2_floor, double rho_max) {
  if (structure_ != VarCovStructure::SharedExchangeable) return false;
  bool clamped = false;
  if (theta_[0] < sigma2_floor) { theta_[0] = sigma2_floor; clamped = true; }
  double lo = K_ > 1 ? -rho_max / (K_ - 1) : -rho_max;
  if (theta_[1] > rho_max) { theta_[1] = rho_max; clamped = true; }
  if (theta_[1] < lo) { theta_[1] = lo; clamped = true; }
  return clamped;
}

bool VarCovSpec::at_floor(double sigma2_floor) const {
  return structure_ == VarCovStructure::SharedExchangeable && theta_[0] <= sigma2_floor * (1 + 1e-9);
}

std::string VarCovSpec::describe() const {
  std::ostringstream os;
  if (structure_ == VarCovStructure::SharedExchangeable)
    os << "exchangeable(sigma2=" << sigma2() << ", rho=" << rho() << ")";
  else
    os << "unstructured(dim=" << theta_dim() << ")";
  return os.str();
}

}  // namespace crfrail
