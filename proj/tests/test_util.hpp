#pragma once

#include <Eigen/Dense>

#include <functional>
#include <random>

#include "lvmi/model.hpp"
#include "lvmi/moments.hpp"

// Shared helpers for the numeric test suites: deterministic parameter
// points, pseudo-random covariates, Gaussian sampling, and central finite
// differences used as independent oracles for the analytic derivatives.

namespace lvmi_test {

/** Deterministic, well-conditioned parameter point for derivative tests. */
inline Eigen::VectorXd default_theta(const lvmi::parameter_table& t) {
  Eigen::VectorXd theta(t.p);
  for (int k = 0; k < t.p; ++k) {
    const lvmi::matrix_cell& c = t.params[k].cells.front();
    switch (c.mat) {
      case lvmi::model_matrix::nu:
        theta(k) = 0.30 + 0.050 * k;
        break;
      case lvmi::model_matrix::alpha:
        theta(k) = 0.20 + 0.040 * k;
        break;
      case lvmi::model_matrix::kmat:
      case lvmi::model_matrix::gamma:
        theta(k) = 0.40 + 0.030 * k;
        break;
      case lvmi::model_matrix::lambda:
        theta(k) = 0.80 + 0.050 * k;
        break;
      case lvmi::model_matrix::bmat:
        theta(k) = 0.25;
        break;
      case lvmi::model_matrix::eps:
      case lvmi::model_matrix::zeta:
        theta(k) = c.row == c.col ? 1.0 + 0.070 * k : 0.10;
        break;
    }
  }
  return theta;
}

/** Deterministic standard-normal covariate matrix. */
inline Eigen::MatrixXd random_x(int n, int l, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z;
  Eigen::MatrixXd x(n, l);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < l; ++j) x(i, j) = z(rng);
  }
  return x;
}

/** Sample Y ~ N(mu_i, Omega) row-wise from a valid bundle. */
inline Eigen::MatrixXd sample_y(const lvmi::moment_bundle& b, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z;
  const Eigen::MatrixXd chol_u =
      Eigen::LLT<Eigen::MatrixXd>(b.omega).matrixU();
  Eigen::MatrixXd y(b.n, b.m);
  for (int i = 0; i < b.n; ++i) {
    Eigen::RowVectorXd noise(b.m);
    for (int j = 0; j < b.m; ++j) noise(j) = z(rng);
    y.row(i) = b.mu.row(i) + noise * chol_u;
  }
  return y;
}

/** Central finite difference of a scalar function of theta. */
inline double fd_partial(const std::function<double(const Eigen::VectorXd&)>& f,
                         const Eigen::VectorXd& theta, int k,
                         double h0 = 1e-5) {
  const double h = h0 * std::max(1.0, std::abs(theta(k)));
  Eigen::VectorXd tp = theta, tm = theta;
  tp(k) += h;
  tm(k) -= h;
  return (f(tp) - f(tm)) / (2.0 * h);
}

/** Central finite difference of a matrix-valued function of theta. */
inline Eigen::MatrixXd fd_matrix(
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& theta, int k, double h0 = 1e-5) {
  const double h = h0 * std::max(1.0, std::abs(theta(k)));
  Eigen::VectorXd tp = theta, tm = theta;
  tp(k) += h;
  tm(k) -= h;
  return (f(tp) - f(tm)) / (2.0 * h);
}

/** |a-b| / (1 + |b|). */
inline double rel_err(double a, double b) {
  return std::abs(a - b) / (1.0 + std::abs(b));
}

/** Largest |a-b| / (1 + |b|) over all entries. */
inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return ((a - b).array().abs() / (1.0 + b.array().abs())).maxCoeff();
}

}  // namespace lvmi_test
