#include <doctest.h>

#include <Eigen/Dense>

#include "crfrail/varcov.hpp"

using namespace crfrail;

TEST_CASE("exchangeable block, inverse and log-determinant") {
  const int K = 3;
  const double s2 = 0.4, rho = 0.25;
  VarCovSpec vc = VarCovSpec::exchangeable(K, s2, rho);
  Eigen::MatrixXd expected =
      s2 * ((1 - rho) * Eigen::MatrixXd::Identity(K, K) + rho * Eigen::MatrixXd::Ones(K, K));
  CHECK((vc.block() - expected).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((vc.block_inverse() - expected.inverse()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(vc.block_log_det() ==
        doctest::Approx(std::log(expected.determinant())).epsilon(1e-12));
  CHECK(vc.sigma2() == s2);
  CHECK(vc.rho() == rho);
}

TEST_CASE("block_derivative matches finite differences") {
  auto fd_check = [](const VarCovSpec& vc) {
    for (int c = 0; c < vc.theta_dim(); ++c) {
      double h = 1e-6;
      Eigen::VectorXd tp = vc.theta(), tm = vc.theta();
      tp[c] += h;
      tm[c] -= h;
      Eigen::MatrixXd fd = (vc.with_theta(tp).block() - vc.with_theta(tm).block()) / (2 * h);
      CHECK((vc.block_derivative(c) - fd).cwiseAbs().maxCoeff() < 1e-7);
    }
  };
  fd_check(VarCovSpec::exchangeable(2, 0.1, 0.5));
  fd_check(VarCovSpec::exchangeable(4, 2.0, -0.2));

  Eigen::MatrixXd B(3, 3);
  B << 1.0, 0.3, 0.1, 0.3, 0.8, -0.2, 0.1, -0.2, 1.5;
  fd_check(VarCovSpec::unstructured_from_matrix(B));
}

TEST_CASE("unstructured spec reproduces its source matrix and stays SPD") {
  Eigen::MatrixXd B(2, 2);
  B << 0.5, 0.2, 0.2, 0.9;
  VarCovSpec vc = VarCovSpec::unstructured_from_matrix(B);
  CHECK(vc.theta_dim() == 3);
  CHECK((vc.block() - B).cwiseAbs().maxCoeff() < 1e-12);
  // Any theta gives an SPD block under the log-Cholesky parameterization.
  Eigen::VectorXd t(3);
  t << -3.0, 5.0, 2.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(vc.with_theta(t).block());
  CHECK(es.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("admissibility checks and projection") {
  CHECK_THROWS(VarCovSpec::exchangeable(2, -0.1, 0.0));
  CHECK_THROWS(VarCovSpec::exchangeable(2, 0.1, 1.0));
  CHECK_THROWS(VarCovSpec::exchangeable(3, 0.1, -0.6));  // rho > -1/(K-1) required

  VarCovSpec vc = VarCovSpec::exchangeable(2, 0.1, 0.5);
  Eigen::VectorXd bad(2);
  bad << -1.0, 2.0;
  VarCovSpec clamped = vc.with_theta(bad);
  CHECK(clamped.project_admissible(1e-8, 0.999));
  CHECK(clamped.sigma2() == doctest::Approx(1e-8));
  CHECK(clamped.rho() <= 0.999);
  CHECK(clamped.at_floor(1e-8));
  CHECK_FALSE(vc.at_floor(1e-8));
  CHECK_FALSE(VarCovSpec::exchangeable(2, 0.1, 0.5).project_admissible(1e-8, 0.999));
}
