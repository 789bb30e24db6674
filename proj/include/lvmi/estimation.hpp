#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lvmi/data.hpp"
#include "lvmi/errors.hpp"
#include "lvmi/model.hpp"
#include "lvmi/moments.hpp"

// Maximum-likelihood estimation by Fisher scoring. Variance parameters whose
// cells are all Sigma diagonals are iterated on the log scale, which keeps
// them positive without constraints; steps that leave the valid region or
// decrease the likelihood are halved. The reported information and
// covariance are always in the original parameterization.

namespace lvmi {

enum class fit_status {
  converged,         // gradient and likelihood-change tolerances met
  gradient_nonzero,  // iteration budget or step search exhausted first
  singular_info,     // expected information not invertible along the way
  huge_se,           // tolerances met but a standard error is implausibly large
};

inline const char* to_string(fit_status s) {
  switch (s) {
    case fit_status::converged: return "converged";
    case fit_status::gradient_nonzero: return "gradient-nonzero";
    case fit_status::singular_info: return "singular-information";
    case fit_status::huge_se: return "huge-standard-error";
  }
  return "?";
}

struct fit_options {
  int max_iter = 200;
  double gradient_tol = 1e-4;
  double loglik_rel_tol = 1e-8;
  int max_step_halvings = 20;
  double huge_se_threshold = 1000.0;
  Eigen::VectorXd start;  // optional override of starting_values
};

struct fit_result {
  fit_status status = fit_status::gradient_nonzero;
  std::string message;
  Eigen::VectorXd theta;
  double loglik = 0.0;
  int iterations = 0;
  std::vector<double> loglik_trace;  // value after each accepted step
  Eigen::MatrixXd information;       // expected information at theta
  Eigen::MatrixXd vcov;              // its inverse
  moment_bundle bundle;              // moments at theta
  Eigen::MatrixXd residuals;         // Y - mu(theta), n x m

  bool ok() const { return status == fit_status::converged; }
};

/**
 * Data-driven starting values: intercepts from sample means, observed-
 * outcome regressions from per-equation least squares, latent regressions
 * from a first-indicator proxy, loadings 1, structural coefficients 0,
 * residual variances at half the relevant sample variance.
 */
inline Eigen::VectorXd starting_values(const parameter_table& table,
                                       const Eigen::MatrixXd& Y,
                                       const Eigen::MatrixXd& X) {
  const int n = static_cast<int>(Y.rows());
  if (Y.cols() != table.m || X.cols() != table.l || X.rows() != n || n < 2) {
    throw std::invalid_argument("starting_values: data shape mismatch");
  }
  Eigen::MatrixXd xext(n, table.l + 1);
  xext.col(0).setOnes();
  if (table.l > 0) xext.rightCols(table.l) = X;

  // Per-outcome least-squares coefficients on [1, X].
  const Eigen::MatrixXd xtx = xext.transpose() * xext;
  Eigen::LDLT<Eigen::MatrixXd> xtx_solver(xtx);
  Eigen::MatrixXd beta(table.l + 1, table.m);  // column t: coefs for Y_t
  if (xtx_solver.info() == Eigen::Success) {
    beta = xtx_solver.solve(xext.transpose() * Y);
  }
  if (xtx_solver.info() != Eigen::Success || !beta.allFinite()) {
    // Collinear covariates: fall back to means so the fitter can still start.
    beta.setZero();
    beta.row(0) = Y.colwise().mean();
  }

  Eigen::RowVectorXd variances(table.m);
  for (int t = 0; t < table.m; ++t) {
    const Eigen::VectorXd centered = Y.col(t).array() - Y.col(t).mean();
    variances(t) = centered.squaredNorm() / (n - 1);
    if (variances(t) <= 0.0) {
      throw data_error("endogenous column '" + table.spec.endogenous[t] +
                       "' has zero sample variance");
    }
  }

  // First declared indicator of each latent variable.
  std::vector<int> first_indicator(table.q, -1);
  for (const auto& e : table.spec.measurement_edges) {
    const int j = table.spec.index_of_latent(e.source);
    if (j >= 0 && first_indicator[j] < 0) {
      first_indicator[j] = table.spec.index_of_endogenous(e.target);
    }
  }

  Eigen::VectorXd theta(table.p);
  for (int k = 0; k < table.p; ++k) {
    const matrix_cell& c = table.params[k].cells.front();
    switch (c.mat) {
      case model_matrix::nu:
        theta(k) = Y.col(c.col).mean();
        break;
      case model_matrix::alpha:
        theta(k) = 0.0;
        break;
      case model_matrix::kmat:
        theta(k) = beta(1 + c.row, c.col);
        break;
      case model_matrix::gamma:
        // Proxy the latent outcome by its first indicator.
        theta(k) = beta(1 + c.row, first_indicator[c.col]);
        break;
      case model_matrix::lambda:
        theta(k) = 1.0;
        break;
      case model_matrix::bmat:
        theta(k) = 0.0;
        break;
      case model_matrix::eps:
        theta(k) = c.row == c.col ? 0.5 * variances(c.row) : 0.0;
        break;
      case model_matrix::zeta:
        theta(k) =
            c.row == c.col ? 0.5 * variances(first_indicator[c.row]) : 0.0;
        break;
    }
  }
  return theta;
}

/**
 * Fit by Fisher scoring. Convergence requires both max |score| <
 * gradient_tol and a relative log-likelihood change < loglik_rel_tol after
 * an accepted step (or a satisfied gradient right at the start). Failure to
 * converge is reported through `status`, not an exception; exceptions are
 * reserved for structural problems (shape mismatches, invalid moments at
 * the starting point).
 */
inline fit_result fit(const parameter_table& table, const Eigen::MatrixXd& Y,
                      const Eigen::MatrixXd& X,
                      const fit_options& options = {}) {
  fit_result res;
  Eigen::VectorXd theta =
      options.start.size() > 0 ? options.start : starting_values(table, Y, X);
  if (theta.size() != table.p) {
    throw std::invalid_argument("fit: starting vector has wrong length");
  }

  moment_bundle bundle = conditional_moments(table, theta, X);
  if (!bundle.valid) {
    throw numeric_error("fit: starting values are invalid: " +
                        bundle.why_invalid);
  }
  double ll = log_likelihood(bundle, Y);

  auto log_jacobian = [&table, &theta]() {
    Eigen::VectorXd j = Eigen::VectorXd::Ones(table.p);
    for (int k = 0; k < table.p; ++k) {
      if (table.params[k].positive) j(k) = theta(k);  // d theta / d log theta
    }
    return j;
  };

  auto finish = [&](fit_status status, const std::string& message) {
    res.status = status;
    res.message = message;
    res.theta = theta;
    res.loglik = ll;
    res.bundle = bundle;
    res.residuals = Y - bundle.mu;
    res.information = expected_information(bundle);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(res.information);
    res.vcov = ldlt.solve(Eigen::MatrixXd::Identity(table.p, table.p));
    if (ldlt.info() != Eigen::Success || !res.vcov.allFinite()) {
      res.vcov = Eigen::MatrixXd::Constant(
          table.p, table.p, std::numeric_limits<double>::quiet_NaN());
      if (status == fit_status::converged) {
        res.status = fit_status::singular_info;
        res.message = "expected information is singular at the optimum";
      }
      return res;
    }
    if (status == fit_status::converged) {
      const double worst_se = res.vcov.diagonal().cwiseMax(0.0).cwiseSqrt().maxCoeff();
      if (worst_se > options.huge_se_threshold) {
        res.status = fit_status::huge_se;
        res.message = "a standard error exceeds " +
                      std::to_string(options.huge_se_threshold) +
                      "; the fit is unstable or the model is weakly identified";
      }
    }
    return res;
  };

  Eigen::VectorXd grad = score(bundle, Y);
  if (grad.cwiseAbs().maxCoeff() < options.gradient_tol) {
    return finish(fit_status::converged, "converged at the starting values");
  }

  for (int iter = 1; iter <= options.max_iter; ++iter) {
    res.iterations = iter;
    const Eigen::MatrixXd info = expected_information(bundle);
    const Eigen::VectorXd j = log_jacobian();
    const Eigen::MatrixXd info_t =
        j.asDiagonal() * info * j.asDiagonal();  // transformed coordinates
    const Eigen::VectorXd grad_t = j.asDiagonal() * grad;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info_t);
    Eigen::VectorXd delta = ldlt.solve(grad_t);
    if (ldlt.info() != Eigen::Success || !delta.allFinite()) {
      return finish(fit_status::singular_info,
                    "expected information is singular at iteration " +
                        std::to_string(iter));
    }

    // Step with halving on invalid moments or a likelihood decrease.
    bool accepted = false;
    for (int half = 0; half <= options.max_step_halvings; ++half) {
      Eigen::VectorXd cand = theta;
      for (int k = 0; k < table.p; ++k) {
        if (table.params[k].positive) {
          cand(k) = theta(k) * std::exp(delta(k));
        } else {
          cand(k) = theta(k) + delta(k);
        }
      }
      moment_bundle cand_bundle = conditional_moments(table, cand, X);
      if (cand_bundle.valid) {
        const double cand_ll = log_likelihood(cand_bundle, Y);
        if (std::isfinite(cand_ll) && cand_ll >= ll) {
          const double dll = cand_ll - ll;
          theta = cand;
          bundle = std::move(cand_bundle);
          ll = cand_ll;
          res.loglik_trace.push_back(ll);
          grad = score(bundle, Y);
          if (grad.cwiseAbs().maxCoeff() < options.gradient_tol &&
              dll < options.loglik_rel_tol * (1.0 + std::abs(ll))) {
            return finish(fit_status::converged,
                          "converged in " + std::to_string(iter) +
                              " iterations");
          }
          accepted = true;
          break;
        }
      }
      delta *= 0.5;
    }
    if (!accepted) {
      if (grad.cwiseAbs().maxCoeff() < options.gradient_tol) {
        return finish(fit_status::converged,
                      "converged (no further improvement possible)");
      }
      return finish(fit_status::gradient_nonzero,
                    "step search failed to improve the likelihood at "
                    "iteration " +
                        std::to_string(iter));
    }
  }
  return finish(fit_status::gradient_nonzero,
                "iteration budget exhausted with max |score| = " +
                    std::to_string(grad.cwiseAbs().maxCoeff()));
}

/** Select Y and X from a dataset by the spec's variable lists and fit. */
inline fit_result fit(const parameter_table& table, const dataset& data,
                      const fit_options& options = {}) {
  validate_or_throw(table.spec, data.columns);
  const Eigen::MatrixXd y = data.select(table.spec.endogenous);
  const Eigen::MatrixXd x = data.select(table.spec.exogenous);
  return fit(table, y, x, options);
}

}  // namespace lvmi
