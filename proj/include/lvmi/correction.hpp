#pragma once

/**
 * Small-sample bias correction for fitted latent variable models.
 *
 * Maximum-likelihood residuals systematically understate the conditional
 * covariance: the second moment of xi_i = Y_i - mu_i(theta_hat) falls short
 * of Omega(theta) by roughly the average of
 *
 *   Psi_i = (dmu_i/dtheta)' Sigma_theta (dmu_i/dtheta),
 *
 * the variance the estimated mean absorbs at observation i.  bias_correct()
 * adds that average back, iterating to a fixed point because Sigma_theta
 * itself depends on the corrected covariance.  bias_correct_neff() extends
 * the iteration with a generalized-leverage effective sample size per
 * outcome, which replaces n in the information's trace term, and with
 * residuals rescaled so their second moment matches the corrected target.
 * Downstream Wald tests use the corrected information and, for the
 * effective-n variant, the per-outcome weights stored in n_eff.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lvmi/errors.hpp"
#include "lvmi/estimation.hpp"
#include "lvmi/model.hpp"
#include "lvmi/moments.hpp"

namespace lvmi {

/** Symmetric PSD square root via eigendecomposition. Eigenvalues slightly
 *  below zero (within 1e-10 of the spectral norm) are clamped to zero; a
 *  materially negative eigenvalue throws. */
inline Eigen::MatrixXd matrix_sqrt_sym(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) {
    throw std::invalid_argument("matrix_sqrt_sym: matrix must be square");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) {
    throw numeric_error("matrix_sqrt_sym: eigendecomposition failed");
  }
  Eigen::VectorXd ev = es.eigenvalues();
  const double norm = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
  if (ev(0) < -1e-10 * norm) {
    throw numeric_error(
        "matrix_sqrt_sym: matrix has a materially negative eigenvalue (" +
        std::to_string(ev(0)) + ")");
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/** First-order mean-estimation bias at one observation:
 *  Psi_i = (dmu_i/dtheta)' Sigma_theta (dmu_i/dtheta), symmetric PSD.
 *  d_mu_i is p x m (one row per parameter), vcov is p x p. */
inline Eigen::MatrixXd bias_psi(const Eigen::MatrixXd& d_mu_i,
                                const Eigen::MatrixXd& vcov) {
  if (vcov.rows() != vcov.cols() || vcov.rows() != d_mu_i.rows()) {
    throw std::invalid_argument(
        "bias_psi: vcov must be square with one row per parameter row");
  }
  const Eigen::MatrixXd psi = d_mu_i.transpose() * vcov * d_mu_i;
  return 0.5 * (psi + psi.transpose());
}

/** Corrected residuals plus the list of observations whose rescaling
 *  matrix was not positive definite (left unscaled; the caller decides
 *  whether to fall back to the plain bias correction). */
struct corrected_residual_result {
  Eigen::MatrixXd xi;          // n x m
  std::vector<int> nonpd_obs;  // observations with a non-PD rescaling matrix
};

/** Rescale residuals so their second moment matches Omega up to o(1/n):
 *  xi_c_i = xi_i Omega^{1/2} (Omega^2 - Omega^{1/2} Psi_i Omega^{1/2})^{-1/2}
 *  Omega^{1/2}.  An empty psi list (or an empty/zero Psi_i) leaves the
 *  corresponding rows untouched. */
inline corrected_residual_result corrected_residuals(
    const Eigen::MatrixXd& xi, const Eigen::MatrixXd& omega,
    const std::vector<Eigen::MatrixXd>& psi) {
  const int n = static_cast<int>(xi.rows());
  const int m = static_cast<int>(xi.cols());
  if (omega.rows() != m || omega.cols() != m) {
    throw std::invalid_argument("corrected_residuals: Omega has wrong shape");
  }
  if (!psi.empty() && static_cast<int>(psi.size()) != n) {
    throw std::invalid_argument(
        "corrected_residuals: need one Psi_i per observation");
  }
  corrected_residual_result out;
  out.xi = xi;
  if (psi.empty()) return out;

  const Eigen::MatrixXd omega_sqrt = matrix_sqrt_sym(omega);
  const Eigen::MatrixXd omega2 = omega * omega;
  Eigen::MatrixXd h(m, m);
  for (int i = 0; i < n; ++i) {
    if (psi[i].size() == 0 || psi[i].norm() == 0.0) continue;
    h.noalias() = omega_sqrt * psi[i] * omega_sqrt;
    h = omega2 - h;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    const Eigen::VectorXd& ev = es.eigenvalues();
    if (es.info() != Eigen::Success ||
        ev(0) <= 1e-12 * std::max(ev(m - 1), 0.0)) {
      out.nonpd_obs.push_back(i);
      continue;  // row stays at the raw residual
    }
    const Eigen::MatrixXd h_inv_sqrt = es.eigenvectors() *
                                       ev.cwiseSqrt().cwiseInverse().asDiagonal() *
                                       es.eigenvectors().transpose();
    out.xi.row(i) = xi.row(i) * omega_sqrt * h_inv_sqrt * omega_sqrt;
  }
  return out;
}

/** Overload taking the fitted state's residuals and Omega. */
inline corrected_residual_result corrected_residuals(
    const fit_result& fit, const std::vector<Eigen::MatrixXd>& psi) {
  return corrected_residuals(fit.residuals, fit.bundle.omega, psi);
}

/** Per-outcome effective sample size: n_eff_t = n - sum_i leverage_{i,t},
 *  clamped at n from above; a non-positive value throws. */
inline Eigen::VectorXd effective_sample_size(const Eigen::MatrixXd& leverages) {
  const int n = static_cast<int>(leverages.rows());
  const int m = static_cast<int>(leverages.cols());
  Eigen::VectorXd n_eff(m);
  for (int t = 0; t < m; ++t) {
    double v = n - leverages.col(t).sum();
    if (v > n) v = n;
    if (v <= 0.0) {
      throw numeric_error("effective sample size is not positive for outcome " +
                          std::to_string(t));
    }
    n_eff(t) = v;
  }
  return n_eff;
}

namespace detail {

/** Least-squares back-solve for the variance parameters: Omega is affine in
 *  them once the loadings and structural coefficients are held at theta_hat,
 *  so each candidate covariance maps to a parameter subvector by projecting
 *  onto the span of the (constant) dOmega/dtheta_k columns. Symmetric cells
 *  are deduplicated; off-diagonal rows carry weight sqrt(2) so the objective
 *  equals the full Frobenius distance. */
struct variance_solver {
  std::vector<int> indices;  // parameter indices, variance-only role
  int m = 0;
  Eigen::MatrixXd zmat;      // dedup cells x |indices|
  Eigen::VectorXd base;      // packed cells of Omega minus the parameter span
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;

  Eigen::VectorXd pack(const Eigen::MatrixXd& sym) const {
    const double root2 = std::sqrt(2.0);
    Eigen::VectorXd v(m * (m + 1) / 2);
    int idx = 0;
    for (int c = 0; c < m; ++c) {
      for (int r = 0; r <= c; ++r) {
        v(idx++) = sym(r, c) * (r == c ? 1.0 : root2);
      }
    }
    return v;
  }

  Eigen::VectorXd solve(const Eigen::MatrixXd& omega_target) const {
    if (indices.empty()) return Eigen::VectorXd();
    return qr.solve(pack(omega_target) - base);
  }
};

inline variance_solver make_variance_solver(const parameter_table& table,
                                            const moment_bundle& b) {
  variance_solver s;
  s.m = b.m;
  s.indices = table.theta_sigma;
  if (s.indices.empty()) return s;
  s.zmat.resize(b.m * (b.m + 1) / 2, static_cast<int>(s.indices.size()));
  Eigen::MatrixXd span = Eigen::MatrixXd::Zero(b.m, b.m);
  for (std::size_t j = 0; j < s.indices.size(); ++j) {
    const int k = s.indices[j];
    if (!b.has_d_omega(k)) {
      s.zmat.col(static_cast<int>(j)).setZero();
      continue;
    }
    s.zmat.col(static_cast<int>(j)) = s.pack(b.d_omega[k]);
    span += b.theta(k) * b.d_omega[k];
  }
  s.base = s.pack(b.omega - span);
  s.qr.compute(s.zmat);
  if (s.qr.rank() < static_cast<int>(s.indices.size())) {
    throw numeric_error(
        "variance parameters are not identified: the covariance design is "
        "rank deficient");
  }
  return s;
}

/** Reference (formula-transparent) generalized leverage: for each
 *  observation, the diagonal of D_i' Sigma_theta dS_i/dY_i with
 *  dS_i/dY_i row_a = dmu_a(i) Omega^{-1} + 2 xi_i Omega^{-1} dOmega_a
 *  Omega^{-1}.  D_i holds the mean derivatives of mu_bundle; Omega and
 *  dOmega come from state. */
inline Eigen::MatrixXd leverage_reference(const moment_bundle& mu_bundle,
                                          const moment_bundle& state,
                                          const Eigen::MatrixXd& sigma,
                                          const Eigen::MatrixXd& xi) {
  const int n = mu_bundle.n, m = mu_bundle.m, p = mu_bundle.p;
  std::vector<int> om_slots;
  for (int k = 0; k < p; ++k) {
    if (state.has_d_omega(k)) om_slots.push_back(k);
  }
  std::vector<Eigen::MatrixXd> va(om_slots.size());
  for (std::size_t j = 0; j < om_slots.size(); ++j) {
    va[j].noalias() =
        state.omega_inv * state.d_omega[om_slots[j]] * state.omega_inv;
  }
  Eigen::MatrixXd lev(n, m);
  Eigen::MatrixXd ds(p, m), e(p, m);
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd d = mu_bundle.mu_deriv_obs(i);  // p x m
    ds.noalias() = d * state.omega_inv;
    for (std::size_t j = 0; j < om_slots.size(); ++j) {
      ds.row(om_slots[j]) += 2.0 * xi.row(i) * va[j];
    }
    e.noalias() = sigma * ds;
    lev.row(i) = d.cwiseProduct(e).colwise().sum();
  }
  return lev;
}

/** Precomputed contraction caches shared by the correction iterations.
 *
 *  Every mean derivative dmu_a(i) = sum_r (coef_r . [1, X_i]) dir_r is fixed
 *  at theta_hat throughout the iterations (only variance-parameter slots
 *  move, and mu does not depend on them), so the Gram blocks
 *  gram[s*m+t](ia, ib) = sum_i dmu_a(i, s) dmu_b(i, t) are constant. They
 *  power Psi-bar, per-observation Psi_i, the information's mean term, and
 *  the leverage loop without touching the data again. Oversized models fall
 *  back to the direct per-observation formulas. */
struct correction_workspace {
  const moment_bundle* b = nullptr;
  int n = 0, m = 0, p = 0, nmu = 0;
  std::vector<int> mu_slots;  // parameters with mean-derivative terms
  std::vector<int> om_slots;  // parameters with dOmega
  Eigen::MatrixXd dall;       // n x (nmu*m): stacked dmu columns
  std::vector<Eigen::MatrixXd> gram;  // m*m blocks of size nmu x nmu
  bool fast = false;

  explicit correction_workspace(const moment_bundle& bundle) : b(&bundle) {
    n = bundle.n;
    m = bundle.m;
    p = bundle.p;
    for (int k = 0; k < p; ++k) {
      if (!bundle.mu_terms[k].empty()) mu_slots.push_back(k);
      if (bundle.has_d_omega(k)) om_slots.push_back(k);
    }
    nmu = static_cast<int>(mu_slots.size());
    if (nmu == 0) {
      fast = true;  // no mean parameters: Psi is identically zero
      return;
    }
    const double cols = static_cast<double>(nmu) * m;
    if (cols * cols > 3.2e7 || static_cast<double>(n) * cols > 3.2e7) {
      return;  // stay on the direct per-observation paths
    }
    const int lp1 = static_cast<int>(bundle.xext.cols());
    Eigen::MatrixXd cstack = Eigen::MatrixXd::Zero(lp1, nmu * m);
    for (int ia = 0; ia < nmu; ++ia) {
      for (const auto& t : bundle.mu_terms[mu_slots[ia]]) {
        cstack.middleCols(ia * m, m).noalias() += t.coef.transpose() * t.dir;
      }
    }
    dall.noalias() = bundle.xext * cstack;
    const Eigen::MatrixXd pbig =
        cstack.transpose() * bundle.xmoment * cstack;
    gram.resize(static_cast<std::size_t>(m) * m);
    for (int s = 0; s < m; ++s) {
      for (int t = 0; t < m; ++t) {
        Eigen::MatrixXd g(nmu, nmu);
        for (int ia = 0; ia < nmu; ++ia) {
          for (int ib = 0; ib < nmu; ++ib) {
            g(ia, ib) = pbig(ia * m + s, ib * m + t);
          }
        }
        gram[static_cast<std::size_t>(s) * m + t] = std::move(g);
      }
    }
    fast = true;
  }

  Eigen::MatrixXd gather_mu(const Eigen::MatrixXd& sigma) const {
    Eigen::MatrixXd s(nmu, nmu);
    for (int ia = 0; ia < nmu; ++ia) {
      for (int ib = 0; ib < nmu; ++ib) {
        s(ia, ib) = sigma(mu_slots[ia], mu_slots[ib]);
      }
    }
    return s;
  }

  /** Average bias Psi-bar = (1/n) sum_i D_i' Sigma D_i. */
  Eigen::MatrixXd psi_bar(const Eigen::MatrixXd& sigma) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m, m);
    if (nmu == 0) return out;
    if (fast) {
      const Eigen::MatrixXd smm = gather_mu(sigma);
      for (int s = 0; s < m; ++s) {
        for (int t = 0; t < m; ++t) {
          out(s, t) =
              smm.cwiseProduct(gram[static_cast<std::size_t>(s) * m + t])
                  .sum() /
              n;
        }
      }
    } else {
      for (int i = 0; i < n; ++i) out += bias_psi(b->mu_deriv_obs(i), sigma);
      out /= n;
    }
    return 0.5 * (out + out.transpose());
  }

  /** Per-observation bias list with the same Sigma. */
  std::vector<Eigen::MatrixXd> psi_obs(const Eigen::MatrixXd& sigma) const {
    std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(n));
    if (nmu == 0) {
      for (auto& psi : out) psi = Eigen::MatrixXd::Zero(m, m);
      return out;
    }
    if (!fast) {
      for (int i = 0; i < n; ++i) out[i] = bias_psi(b->mu_deriv_obs(i), sigma);
      return out;
    }
    const Eigen::MatrixXd smm = gather_mu(sigma);
    Eigen::MatrixXd mi(nmu, m), sm(nmu, m), psi(m, m);
    for (int i = 0; i < n; ++i) {
      for (int ia = 0; ia < nmu; ++ia) {
        mi.row(ia) = dall.row(i).segment(ia * m, m);
      }
      sm.noalias() = smm * mi;
      psi.noalias() = mi.transpose() * sm;
      out[i] = 0.5 * (psi + psi.transpose());
    }
    return out;
  }

  /** Expected information of the given (Omega-overridden) state, with the
   *  per-outcome trace weights; identical formula to the generic
   *  expected_information, assembled from the cached Gram blocks. */
  Eigen::MatrixXd information(const moment_bundle& state,
                              const Eigen::RowVectorXd& weights) const {
    if (!fast) return expected_information(state, weights);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
    const int nom = static_cast<int>(om_slots.size());
    std::vector<Eigen::MatrixXd> c(nom), wc(nom);
    for (int j = 0; j < nom; ++j) {
      c[j].noalias() = state.omega_inv * state.d_omega[om_slots[j]];
      wc[j] = weights.transpose().asDiagonal() * c[j];
    }
    for (int ja = 0; ja < nom; ++ja) {
      for (int jb = ja; jb < nom; ++jb) {
        const double v = 0.25 * (wc[ja].cwiseProduct(c[jb].transpose()).sum() +
                                 wc[jb].cwiseProduct(c[ja].transpose()).sum());
        info(om_slots[ja], om_slots[jb]) += v;
        if (ja != jb) info(om_slots[jb], om_slots[ja]) += v;
      }
    }
    if (nmu > 0) {
      Eigen::MatrixXd imean = Eigen::MatrixXd::Zero(nmu, nmu);
      for (int s = 0; s < m; ++s) {
        for (int t = 0; t < m; ++t) {
          imean += state.omega_inv(s, t) *
                   gram[static_cast<std::size_t>(s) * m + t];
        }
      }
      for (int ia = 0; ia < nmu; ++ia) {
        for (int ib = 0; ib < nmu; ++ib) {
          info(mu_slots[ia], mu_slots[ib]) += imean(ia, ib);
        }
      }
    }
    return info;
  }

  /** Generalized leverage diagonals with D_i fixed at theta_hat and the
   *  variance term evaluated on the given state and residuals. */
  Eigen::MatrixXd leverage(const moment_bundle& state,
                           const Eigen::MatrixXd& sigma,
                           const Eigen::MatrixXd& xi) const {
    Eigen::MatrixXd lev = Eigen::MatrixXd::Zero(n, m);
    if (nmu == 0) return lev;
    if (!fast) return leverage_reference(*b, state, sigma, xi);
    const int nom = static_cast<int>(om_slots.size());
    std::vector<Eigen::MatrixXd> va(nom);
    for (int j = 0; j < nom; ++j) {
      va[j].noalias() =
          state.omega_inv * state.d_omega[om_slots[j]] * state.omega_inv;
    }
    const Eigen::MatrixXd smm = gather_mu(sigma);
    Eigen::MatrixXd smo(nmu, nom);
    for (int ia = 0; ia < nmu; ++ia) {
      for (int j = 0; j < nom; ++j) {
        smo(ia, j) = sigma(mu_slots[ia], om_slots[j]);
      }
    }
    Eigen::MatrixXd mi(nmu, m), dsm(nmu, m), dv(nom, m), e(nmu, m);
    for (int i = 0; i < n; ++i) {
      for (int ia = 0; ia < nmu; ++ia) {
        mi.row(ia) = dall.row(i).segment(ia * m, m);
      }
      dsm.noalias() = mi * state.omega_inv;
      for (int j = 0; j < nom; ++j) {
        dv.row(j).noalias() = 2.0 * xi.row(i) * va[j];
      }
      e.noalias() = smm * dsm;
      if (nom > 0) e.noalias() += smo * dv;
      lev.row(i) = mi.cwiseProduct(e).colwise().sum();
    }
    return lev;
  }
};

inline double spectral_norm_sym(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& a,
                                         const std::string& what) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  Eigen::MatrixXd inv =
      ldlt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  if (ldlt.info() != Eigen::Success || !inv.allFinite()) {
    throw numeric_error(what + " is singular");
  }
  return 0.5 * (inv + inv.transpose());
}

}  // namespace detail

/** Back-solve the variance-parameter subvector whose model covariance is
 *  closest (deduplicated-cell least squares, off-diagonals weighted 2) to
 *  omega_target, holding all mean-side coefficients at the bundle's theta.
 *  Returns entries in parameter_table::theta_sigma order. */
inline Eigen::VectorXd solve_variance_params(const parameter_table& table,
                                             const moment_bundle& bundle,
                                             const Eigen::MatrixXd& omega_target) {
  if (omega_target.rows() != bundle.m || omega_target.cols() != bundle.m) {
    throw std::invalid_argument(
        "solve_variance_params: target covariance has wrong shape");
  }
  return detail::make_variance_solver(table, bundle).solve(omega_target);
}

/** Generalized leverage diagonals of a converged fit: the sensitivity of the
 *  fitted mean at observation i to that observation's own outcomes, one
 *  column per endogenous variable. xi is the residual matrix plugged into
 *  the variance term (raw or corrected). */
inline Eigen::MatrixXd leverage(const fit_result& fit,
                                const Eigen::MatrixXd& xi) {
  if (!fit.ok()) {
    throw std::invalid_argument("leverage requires a converged fit");
  }
  if (xi.rows() != fit.bundle.n || xi.cols() != fit.bundle.m) {
    throw std::invalid_argument("leverage: residual matrix has wrong shape");
  }
  if (!fit.vcov.allFinite()) {
    throw numeric_error("leverage: the fit's parameter covariance is not finite");
  }
  detail::correction_workspace ws(fit.bundle);
  const Eigen::MatrixXd sigma = 0.5 * (fit.vcov + fit.vcov.transpose());
  return ws.leverage(fit.bundle, sigma, xi);
}

enum class correction_method {
  bias,                // covariance-bias fixed point only
  bias_neff,           // plus effective sample size and corrected residuals
  bias_neff_fallback,  // effective-n requested but non-PD residual rescaling
};

inline std::string to_string(correction_method m) {
  switch (m) {
    case correction_method::bias:
      return "bias";
    case correction_method::bias_neff:
      return "bias-neff";
    case correction_method::bias_neff_fallback:
      return "bias-neff-fallback";
  }
  return "unknown";
}

struct correction_options {
  double tol_frob = 1e-5;  // Frobenius tolerance on successive Omega iterates
  int max_iter = 100;
};

struct corrected_fit {
  fit_result base;
  correction_method method = correction_method::bias;
  bool converged = false;
  int iterations = 0;
  Eigen::MatrixXd psi_bar;                   // average bias, m x m PSD
  std::vector<Eigen::MatrixXd> psi_obs;      // per-observation bias
  Eigen::VectorXd theta_sigma_corrected;     // theta_sigma-order subvector
  Eigen::VectorXd theta_corrected;           // full theta with those slots set
  Eigen::MatrixXd omega_corrected;           // Omega(theta_hat) + psi_bar
  Eigen::MatrixXd information;               // corrected expected information
  Eigen::MatrixXd vcov;                      // its inverse
  Eigen::VectorXd n_eff;                     // per-outcome effective n
  Eigen::MatrixXd residuals_corrected;       // effective-n method only
  std::vector<int> nonpd_obs;                // observations forcing a fallback
  std::vector<double> omega_change_trace;    // Frobenius change per iteration
  std::vector<double> psi_norm_trace;        // spectral norm of psi_bar
  moment_bundle bundle;  // caches at theta_corrected with omega_corrected
};

namespace detail {

inline corrected_fit run_correction(const parameter_table& table,
                                    const fit_result& fit,
                                    const correction_options& options,
                                    bool use_neff) {
  if (!fit.ok()) {
    throw std::invalid_argument("bias correction requires a converged fit");
  }
  if (options.max_iter < 1) {
    throw std::invalid_argument("bias correction needs max_iter >= 1");
  }
  const moment_bundle& b0 = fit.bundle;
  const int n = b0.n, m = b0.m;
  const Eigen::MatrixXd x =
      b0.l > 0 ? Eigen::MatrixXd(b0.xext.rightCols(b0.l))
               : Eigen::MatrixXd(n, 0);
  const Eigen::MatrixXd omega0 = b0.omega;
  const correction_workspace ws(b0);
  const variance_solver solver = make_variance_solver(table, b0);
  bool role_both = false;
  for (const auto& par : table.params) {
    role_both = role_both || par.role == param_role::both;
  }

  corrected_fit out;
  out.base = fit;
  out.method = use_neff ? correction_method::bias_neff : correction_method::bias;

  Eigen::MatrixXd omega_prev = omega0;
  Eigen::MatrixXd info_prev = fit.information;
  moment_bundle state_prev = b0;
  std::vector<Eigen::MatrixXd> psi_prev;  // empty = all-zero (first pass)
  std::vector<Eigen::MatrixXd> psi_cur;
  Eigen::MatrixXd psi_bar_cur = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd theta_c = fit.theta;
  Eigen::VectorXd ts(static_cast<int>(solver.indices.size()));
  for (std::size_t j = 0; j < solver.indices.size(); ++j) {
    ts(static_cast<int>(j)) = fit.theta(solver.indices[j]);
  }
  Eigen::RowVectorXd neff = Eigen::RowVectorXd::Constant(m, double(n));
  Eigen::MatrixXd xi_hat;
  Eigen::MatrixXd sigma;

  int done = 0;
  for (int k = 1; k <= options.max_iter; ++k) {
    done = k;
    sigma = symmetric_inverse(
        info_prev, "expected information during bias correction");
    if (use_neff) {
      psi_cur = ws.psi_obs(sigma);
      psi_bar_cur.setZero();
      for (const auto& psi : psi_cur) psi_bar_cur += psi;
      psi_bar_cur /= double(n);
      corrected_residual_result cr =
          corrected_residuals(fit.residuals, omega_prev, psi_prev);
      if (!cr.nonpd_obs.empty()) {
        corrected_fit fb = run_correction(table, fit, options, false);
        fb.method = correction_method::bias_neff_fallback;
        fb.nonpd_obs = std::move(cr.nonpd_obs);
        return fb;
      }
      xi_hat = std::move(cr.xi);
      neff = effective_sample_size(ws.leverage(state_prev, sigma, xi_hat))
                 .transpose();
    } else {
      psi_bar_cur = ws.psi_bar(sigma);
    }

    Eigen::MatrixXd omega_cur = omega0 + psi_bar_cur;
    if (!omega_cur.allFinite()) {
      throw numeric_error("bias correction produced a non-finite covariance");
    }
    const double change = (omega_cur - omega_prev).norm();
    out.omega_change_trace.push_back(change);
    out.psi_norm_trace.push_back(spectral_norm_sym(psi_bar_cur));

    if (!solver.indices.empty()) {
      ts = solver.solve(omega_cur);
      for (std::size_t j = 0; j < solver.indices.size(); ++j) {
        theta_c(solver.indices[j]) = ts(static_cast<int>(j));
      }
    }
    moment_bundle state_cur =
        role_both ? with_omega_override(conditional_moments(table, theta_c, x),
                                        omega_cur)
                  : with_omega_override(b0, omega_cur);
    info_prev = ws.information(state_cur, neff);
    omega_prev = std::move(omega_cur);
    state_prev = std::move(state_cur);
    if (use_neff) psi_prev = std::move(psi_cur);

    if (change < options.tol_frob) {
      out.converged = true;
      break;
    }
  }

  out.iterations = done;
  // Report the per-observation bias from the same Sigma iterate that
  // produced the final psi_bar, so mean(psi_obs) matches psi_bar.
  out.psi_obs = use_neff ? std::move(psi_prev) : ws.psi_obs(sigma);
  out.psi_bar = std::move(psi_bar_cur);
  out.omega_corrected = std::move(omega_prev);
  out.theta_sigma_corrected = std::move(ts);
  out.theta_corrected = std::move(theta_c);
  out.information = info_prev;
  out.vcov = symmetric_inverse(info_prev, "corrected expected information");
  out.n_eff = neff.transpose();
  if (use_neff) out.residuals_corrected = std::move(xi_hat);
  out.bundle = std::move(state_prev);
  return out;
}

}  // namespace detail

/** Covariance-bias correction: iterate Psi-bar from the current parameter
 *  covariance, add it to Omega(theta_hat), back-solve the variance
 *  parameters, and recompute the expected information, until the corrected
 *  covariance stabilizes in Frobenius norm. */
inline corrected_fit bias_correct(const parameter_table& table,
                                  const fit_result& fit,
                                  const correction_options& options = {}) {
  return detail::run_correction(table, fit, options, false);
}

/** Bias correction plus per-outcome effective sample size: each iteration
 *  additionally rescales the residuals to the corrected covariance, feeds
 *  them through the generalized leverage, and uses n_eff as the trace
 *  weights of the expected information. Falls back to the plain correction
 *  (recording the offending observations) if any residual rescaling matrix
 *  is not positive definite. */
inline corrected_fit bias_correct_neff(const parameter_table& table,
                                       const fit_result& fit,
                                       const correction_options& options = {}) {
  return detail::run_correction(table, fit, options, true);
}

}  // namespace lvmi
