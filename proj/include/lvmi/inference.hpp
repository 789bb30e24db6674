#pragma once

/**
 * Wald inference for fitted latent variable models: univariate tests with
 * Satterthwaite degrees of freedom, multivariate F tests with a pooled
 * one-moment df approximation, and cluster-robust (sandwich) variances.
 *
 * Every entry point takes either a plain fit_result or a corrected_fit; the
 * corrected overloads evaluate all matrix quantities at the bias-corrected
 * state (corrected covariance, weighted information, effective sample size
 * held constant inside information derivatives).
 */

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lvmi/correction.hpp"
#include "lvmi/distributions.hpp"
#include "lvmi/errors.hpp"
#include "lvmi/estimation.hpp"
#include "lvmi/moments.hpp"

namespace lvmi {

/** How much small-sample correction a reported test used. */
enum class correction_mode {
  none,           // raw fit, asymptotic (Gaussian / chi-squared) reference
  bias,           // bias-corrected covariance, asymptotic reference
  satterthwaite,  // raw fit with Satterthwaite degrees of freedom
  full,           // bias-corrected covariance + Satterthwaite df
  full_neff,      // full plus per-outcome effective sample size
};

inline std::string to_string(correction_mode m) {
  switch (m) {
    case correction_mode::none: return "none";
    case correction_mode::bias: return "bias";
    case correction_mode::satterthwaite: return "satterthwaite";
    case correction_mode::full: return "full";
    case correction_mode::full_neff: return "full-neff";
  }
  return "unknown";
}

inline correction_mode parse_correction_mode(const std::string& text) {
  if (text == "none") return correction_mode::none;
  if (text == "bias") return correction_mode::bias;
  if (text == "satterthwaite") return correction_mode::satterthwaite;
  if (text == "full") return correction_mode::full;
  if (text == "full-neff") return correction_mode::full_neff;
  throw std::invalid_argument(
      "unknown correction mode '" + text +
      "' (expected none, bias, satterthwaite, full, or full-neff)");
}

/** Partition of the observations into clusters for robust variances. */
struct cluster_index {
  std::vector<int> assignment;  // one id in [0, groups) per observation
  int groups = 0;
};

/** Normalize arbitrary cluster labels to dense ids in first-appearance
 *  order. */
inline cluster_index make_cluster_index(const std::vector<long long>& labels) {
  cluster_index out;
  out.assignment.reserve(labels.size());
  std::vector<long long> seen;
  for (const long long raw : labels) {
    int id = -1;
    for (std::size_t g = 0; g < seen.size(); ++g) {
      if (seen[g] == raw) {
        id = static_cast<int>(g);
        break;
      }
    }
    if (id < 0) {
      id = static_cast<int>(seen.size());
      seen.push_back(raw);
    }
    out.assignment.push_back(id);
  }
  out.groups = static_cast<int>(seen.size());
  return out;
}

/** Every observation its own cluster (heteroskedasticity-robust limit). */
inline cluster_index singleton_clusters(int n) {
  cluster_index out;
  out.assignment.resize(n);
  for (int i = 0; i < n; ++i) out.assignment[i] = i;
  out.groups = n;
  return out;
}

/** Per-observation score rows at the bundle's state: an n x p matrix whose
 *  rows sum to score(bundle, Y) when xi = Y - mu. The n-scaled trace term
 *  of the score contributes -tr(Omega^{-1} dOmega_k)/2 to every row. */
inline Eigen::MatrixXd score_contributions(const moment_bundle& b,
                                           const Eigen::MatrixXd& xi) {
  detail::require_valid(b);
  if (xi.rows() != b.n || xi.cols() != b.m) {
    throw std::invalid_argument(
        "score_contributions: residual matrix has wrong shape");
  }
  const Eigen::MatrixXd r = xi * b.omega_inv;  // n x m
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(b.n, b.p);
  for (int k = 0; k < b.p; ++k) {
    if (b.has_d_omega(k)) {
      const double half_trace =
          0.5 * (b.omega_inv.cwiseProduct(b.d_omega[k].transpose())).sum();
      s.col(k).array() -= half_trace;
      s.col(k) += 0.5 * ((r * b.d_omega[k]).cwiseProduct(r)).rowwise().sum();
    }
    for (const auto& t : b.mu_terms[k]) {
      s.col(k) += ((b.xext * t.coef.transpose()).array() *
                   (r * t.dir.transpose()).array())
                      .matrix();
    }
  }
  return s;
}

namespace detail {

/** Uniform view over a raw or corrected fit for the test evaluators. */
struct infer_view {
  const moment_bundle* bundle = nullptr;  // state for Omega / dOmega caches
  const Eigen::VectorXd* theta = nullptr;
  const Eigen::MatrixXd* information = nullptr;
  const Eigen::MatrixXd* vcov = nullptr;
  const Eigen::MatrixXd* residuals = nullptr;  // Y - mu(theta_hat)
  Eigen::RowVectorXd weights;  // information trace weights (empty = n)
  correction_mode mode_plain = correction_mode::none;
  correction_mode mode_satt = correction_mode::satterthwaite;
};

inline infer_view make_view(const fit_result& fit) {
  if (!fit.ok()) {
    throw std::invalid_argument("inference requires a converged fit");
  }
  infer_view v;
  v.bundle = &fit.bundle;
  v.theta = &fit.theta;
  v.information = &fit.information;
  v.vcov = &fit.vcov;
  v.residuals = &fit.residuals;
  v.mode_plain = correction_mode::none;
  v.mode_satt = correction_mode::satterthwaite;
  return v;
}

inline infer_view make_view(const corrected_fit& cf) {
  if (!cf.base.ok()) {
    throw std::invalid_argument("inference requires a converged fit");
  }
  if (!cf.converged) {
    throw std::invalid_argument(
        "inference requires a converged bias correction");
  }
  infer_view v;
  v.bundle = &cf.bundle;
  v.theta = &cf.theta_corrected;
  v.information = &cf.information;
  v.vcov = &cf.vcov;
  v.residuals = &cf.base.residuals;
  v.weights = cf.n_eff.transpose();
  v.mode_plain = correction_mode::bias;
  v.mode_satt = cf.method == correction_method::bias_neff
                    ? correction_mode::full_neff
                    : correction_mode::full;
  return v;
}

/** Satterthwaite df for the linear combination c: match the variability of
 *  the plug-in variance sigma2_c(theta_hat) = c Sigma c' against a scaled
 *  chi-squared, holding any information trace weights constant. Returns
 *  +inf when the variance estimate has (numerically) no variability. */
inline double satterthwaite_impl(const infer_view& v,
                                 const Eigen::VectorXd& c) {
  const Eigen::VectorXd vc = *v.vcov * c;
  const double sigma2_c = c.dot(vc);
  if (!(sigma2_c > 0.0) || !std::isfinite(sigma2_c)) {
    throw numeric_error(
        "satterthwaite_df: contrast variance is not positive "
        "(parameter covariance not positive definite?)");
  }
  // grad_k sigma2_c = -c Sigma (dI/dtheta_k) Sigma c'.
  const Eigen::VectorXd grad =
      -d_information_quadform(*v.bundle, vc, v.weights);
  const double denom = grad.dot(*v.vcov * grad);
  if (!(denom > 0.0) || !std::isfinite(denom)) {
    return std::numeric_limits<double>::infinity();
  }
  const double df = 2.0 * sigma2_c * sigma2_c / denom;
  if (!std::isfinite(df)) return std::numeric_limits<double>::infinity();
  return df;
}

inline Eigen::MatrixXd robust_vcov_impl(const infer_view& v,
                                        const cluster_index& clusters) {
  const int n = v.bundle->n;
  if (static_cast<int>(clusters.assignment.size()) != n) {
    throw std::invalid_argument(
        "robust_vcov: cluster assignment must cover every observation");
  }
  if (clusters.groups < 2) {
    throw std::invalid_argument(
        "robust_vcov: need at least two clusters (the total score vanishes "
        "at the estimate)");
  }
  if (clusters.groups > n) {
    throw std::invalid_argument("robust_vcov: more clusters than observations");
  }
  const Eigen::MatrixXd s = score_contributions(*v.bundle, *v.residuals);
  Eigen::MatrixXd cluster_scores =
      Eigen::MatrixXd::Zero(clusters.groups, v.bundle->p);
  for (int i = 0; i < n; ++i) {
    const int g = clusters.assignment[i];
    if (g < 0 || g >= clusters.groups) {
      throw std::invalid_argument("robust_vcov: cluster id out of range");
    }
    cluster_scores.row(g) += s.row(i);
  }
  const Eigen::MatrixXd meat = cluster_scores.transpose() * cluster_scores;
  const Eigen::MatrixXd out = *v.vcov * meat * *v.vcov;
  return 0.5 * (out + out.transpose());
}

}  // namespace detail

/** Two-sided Student-t (df = +inf: Gaussian) p-value used by wald_test. */
inline double wald_p_value(double statistic, double df) {
  return t_two_sided_p(statistic, df);
}

struct wald_options {
  double null_value = 0.0;
  // Student-t reference with Satterthwaite df; false = asymptotic Gaussian.
  bool satterthwaite = true;
  // Cluster-robust standard error; degrees of freedom stay model-based.
  const cluster_index* clusters = nullptr;
};

struct wald_result {
  Eigen::VectorXd contrast;  // c
  double estimate = 0.0;     // c theta
  double null_value = 0.0;
  double se = 0.0;           // sqrt(c Sigma c')
  double statistic = 0.0;    // (estimate - null) / se
  double df = 0.0;           // +inf for the asymptotic reference
  double p_value = 1.0;      // two-sided
  correction_mode correction = correction_mode::none;
  bool robust = false;
};

struct f_test_result {
  Eigen::MatrixXd contrasts;       // C, Q x p
  int q = 0;                       // rank(C) = row count
  double statistic = 0.0;          // F
  double df1 = 0.0;                // Q
  double df2 = 0.0;                // pooled nu (+inf asymptotic)
  Eigen::VectorXd per_contrast_df; // nu_q, one per whitened contrast
  Eigen::VectorXd eigenvalues;     // kappa_q of C Sigma C'
  double p_value = 1.0;
  correction_mode correction = correction_mode::none;
};

struct f_test_options {
  Eigen::VectorXd null_values;  // size Q; empty = all zero
  // Pooled Satterthwaite df2; false = chi-squared/Q asymptotic reference.
  bool satterthwaite = true;
};

namespace detail {

inline wald_result wald_impl(const infer_view& v, const Eigen::VectorXd& c,
                             const wald_options& options) {
  if (c.size() != v.theta->size()) {
    throw std::invalid_argument("wald_test: contrast has wrong length");
  }
  if (c.norm() == 0.0) {
    throw std::invalid_argument("wald_test: contrast must be non-zero");
  }
  wald_result r;
  r.contrast = c;
  r.null_value = options.null_value;
  r.estimate = c.dot(*v.theta);
  r.robust = options.clusters != nullptr;
  r.correction = options.satterthwaite ? v.mode_satt : v.mode_plain;

  double var = 0.0;
  if (r.robust) {
    const Eigen::MatrixXd rv = robust_vcov_impl(v, *options.clusters);
    var = c.dot(rv * c);
  } else {
    var = c.dot(*v.vcov * c);
  }
  if (!(var > 0.0) || !std::isfinite(var)) {
    throw numeric_error(
        "wald_test: contrast variance is not positive "
        "(parameter covariance not positive definite?)");
  }
  r.se = std::sqrt(var);
  r.statistic = (r.estimate - r.null_value) / r.se;
  // Robust tests reuse the model-based Satterthwaite df.
  r.df = options.satterthwaite
             ? satterthwaite_impl(v, c)
             : std::numeric_limits<double>::infinity();
  r.p_value = wald_p_value(r.statistic, r.df);
  return r;
}

inline f_test_result f_test_impl(const infer_view& v, const Eigen::MatrixXd& c,
                                 const f_test_options& options) {
  const int p = static_cast<int>(v.theta->size());
  const int q = static_cast<int>(c.rows());
  if (c.cols() != p || q < 1) {
    throw std::invalid_argument("f_test: contrast matrix has wrong shape");
  }
  Eigen::VectorXd null_values = options.null_values;
  if (null_values.size() == 0) {
    null_values = Eigen::VectorXd::Zero(q);
  } else if (null_values.size() != q) {
    throw std::invalid_argument("f_test: need one null value per contrast");
  }
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(c.transpose());
    if (qr.rank() < q) {
      throw std::invalid_argument(
          "f_test: contrast matrix is rank deficient; drop redundant rows");
    }
  }

  f_test_result r;
  r.contrasts = c;
  r.q = q;
  r.df1 = q;
  r.correction = options.satterthwaite ? v.mode_satt : v.mode_plain;

  const Eigen::MatrixXd csc = c * *v.vcov * c.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(csc);
  if (es.info() != Eigen::Success || es.eigenvalues()(0) <= 0.0) {
    throw numeric_error(
        "f_test: contrast covariance is not positive definite");
  }
  r.eigenvalues = es.eigenvalues();

  // Whitened statistic: F = sum_q w_q^2 / kappa_q / Q.
  const Eigen::VectorXd z = c * *v.theta - null_values;
  const Eigen::VectorXd w = es.eigenvectors().transpose() * z;
  r.statistic =
      (w.array().square() / r.eigenvalues.array()).sum() / static_cast<double>(q);

  if (!options.satterthwaite) {
    r.df2 = std::numeric_limits<double>::infinity();
    r.per_contrast_df =
        Eigen::VectorXd::Constant(q, std::numeric_limits<double>::infinity());
    r.p_value = f_upper_p(r.statistic, r.df1, r.df2);
    return r;
  }

  // Per-contrast df on the whitened rows (unit-variance combinations),
  // pooled with the one-moment approximation
  //   nu = 2 E / (E - Q),  E = sum_q nu_q / (nu_q - 2).
  r.per_contrast_df.resize(q);
  double e_sum = 0.0;
  for (int j = 0; j < q; ++j) {
    const Eigen::VectorXd row =
        (es.eigenvectors().col(j).transpose() * c).transpose() /
        std::sqrt(r.eigenvalues(j));
    const double nu_q = satterthwaite_impl(v, row);
    r.per_contrast_df(j) = nu_q;
    if (!(nu_q > 2.0)) {
      throw numeric_error(
          "f_test: per-contrast degrees of freedom " + std::to_string(nu_q) +
          " is not above 2; the pooled approximation is undefined");
    }
    e_sum += std::isinf(nu_q) ? 1.0 : nu_q / (nu_q - 2.0);
  }
  if (e_sum <= static_cast<double>(q)) {
    // Possible only when every nu_q is infinite: Gaussian limit.
    r.df2 = std::numeric_limits<double>::infinity();
  } else {
    r.df2 = 2.0 * e_sum / (e_sum - static_cast<double>(q));
  }
  r.p_value = f_upper_p(r.statistic, r.df1, r.df2);
  return r;
}

}  // namespace detail

/** Satterthwaite degrees of freedom for the combination c'theta. */
inline double satterthwaite_df(const fit_result& fit,
                               const Eigen::VectorXd& c) {
  if (c.size() != fit.theta.size()) {
    throw std::invalid_argument("satterthwaite_df: contrast has wrong length");
  }
  return detail::satterthwaite_impl(detail::make_view(fit), c);
}

inline double satterthwaite_df(const corrected_fit& cf,
                               const Eigen::VectorXd& c) {
  if (c.size() != cf.theta_corrected.size()) {
    throw std::invalid_argument("satterthwaite_df: contrast has wrong length");
  }
  return detail::satterthwaite_impl(detail::make_view(cf), c);
}

/** Univariate Wald test of c'theta = null_value. */
inline wald_result wald_test(const fit_result& fit, const Eigen::VectorXd& c,
                             const wald_options& options = {}) {
  return detail::wald_impl(detail::make_view(fit), c, options);
}

inline wald_result wald_test(const corrected_fit& cf, const Eigen::VectorXd& c,
                             const wald_options& options = {}) {
  return detail::wald_impl(detail::make_view(cf), c, options);
}

/** Multivariate Wald (F) test of C theta = null_values. */
inline f_test_result f_test(const fit_result& fit, const Eigen::MatrixXd& c,
                            const f_test_options& options = {}) {
  return detail::f_test_impl(detail::make_view(fit), c, options);
}

inline f_test_result f_test(const corrected_fit& cf, const Eigen::MatrixXd& c,
                            const f_test_options& options = {}) {
  return detail::f_test_impl(detail::make_view(cf), c, options);
}

/** Cluster-robust (sandwich) parameter covariance
 *  I^{-1} (sum_g S_g' S_g) I^{-1} with per-cluster summed score rows.
 *  The corrected overload evaluates scores and information at the
 *  bias-corrected state. */
inline Eigen::MatrixXd robust_vcov(const fit_result& fit,
                                   const cluster_index& clusters) {
  return detail::robust_vcov_impl(detail::make_view(fit), clusters);
}

inline Eigen::MatrixXd robust_vcov(const corrected_fit& cf,
                                   const cluster_index& clusters) {
  return detail::robust_vcov_impl(detail::make_view(cf), clusters);
}

}  // namespace lvmi
