#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lvmi/errors.hpp"
#include "lvmi/model.hpp"

// Conditional moments of the reduced-form model and their derivatives.
//
// With M = (I - B)^{-1} and F = M Lambda, the distribution of Y_i given the
// covariate row X_i is Gaussian with
//
//   mu_i  = nu + (alpha + X_i Gamma) F + X_i K      (1 x m row)
//   Omega = F' Sigma_zeta F + Sigma_eps             (m x m, same for all i)
//
// Every mean derivative d mu_i / d theta_k factorizes as a sum of rank-one
// terms (coef . [1, X_i]) * dir with coef a 1 x (l+1) row and dir a 1 x m
// row; second derivatives are stored the same way for the (unordered) pairs
// where they are nonzero. Omega derivatives are dense m x m matrices. The
// moment_bundle caches all of this so likelihood, score, Hessian, expected
// information, and the information-derivative contractions are loops over
// precomputed pieces.

namespace lvmi {

/** One rank-one mean-derivative term: contribution (coef.[1,X_i]) * dir. */
struct mu_term {
  Eigen::RowVectorXd coef;  // 1 x (l+1)
  Eigen::RowVectorXd dir;   // 1 x m
};

/** Rank-one term of d^2 mu / d theta_pj d theta_pk, stored once per pj<=pk.
 *  Summing the terms of a pair gives the exact second derivative (the
 *  cell-pair multiplicity is baked in). */
struct mu_pair_term {
  int pj;
  int pk;
  Eigen::RowVectorXd coef;
  Eigen::RowVectorXd dir;
};

/** Dense d^2 Omega / d theta_pj d theta_pk for pj<=pk (exact, like above). */
struct omega_pair {
  int pj;
  int pk;
  Eigen::MatrixXd mat;  // m x m symmetric
};

/** Moments, derivatives, and solver byproducts at one parameter point. */
struct moment_bundle {
  bool valid = false;
  std::string why_invalid;

  int n = 0, m = 0, q = 0, l = 0, p = 0;
  Eigen::VectorXd theta;

  Eigen::MatrixXd mu;         // n x m
  Eigen::MatrixXd omega;      // m x m
  Eigen::MatrixXd omega_inv;  // m x m
  double logdet_omega = 0.0;

  Eigen::MatrixXd mmat;  // q x q reduced-form inverse (I - B)^{-1}
  Eigen::MatrixXd fmat;  // q x m loading transmission F = M Lambda

  Eigen::MatrixXd xext;     // n x (l+1): [1, X]
  Eigen::MatrixXd xmoment;  // (l+1) x (l+1): xext' xext

  std::vector<std::vector<mu_term>> mu_terms;  // per parameter
  std::vector<Eigen::MatrixXd> d_omega;        // per parameter; 0x0 when zero
  std::vector<mu_pair_term> mu_pairs;
  std::vector<omega_pair> omega_pairs;

  bool has_d_omega(int k) const { return d_omega[k].size() > 0; }

  /** Dense n x m first mean derivative for one parameter (test helper). */
  Eigen::MatrixXd d_mu(int k) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, m);
    for (const auto& t : mu_terms[k]) {
      out.noalias() += (xext * t.coef.transpose()) * t.dir;
    }
    return out;
  }

  /** p x m matrix of mean derivatives for one observation. */
  Eigen::MatrixXd mu_deriv_obs(int i) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, m);
    for (int k = 0; k < p; ++k) {
      for (const auto& t : mu_terms[k]) {
        out.row(k) += (xext.row(i) * t.coef.transpose()) * t.dir;
      }
    }
    return out;
  }

  /** Dense n x m second mean derivative for a parameter pair (test helper). */
  Eigen::MatrixXd d2_mu(int a, int b) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, m);
    const int lo = std::min(a, b), hi = std::max(a, b);
    for (const auto& t : mu_pairs) {
      if (t.pj == lo && t.pk == hi) {
        out.noalias() += (xext * t.coef.transpose()) * t.dir;
      }
    }
    return out;
  }

  /** Dense m x m second Omega derivative for a parameter pair. */
  Eigen::MatrixXd d2_omega(int a, int b) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m, m);
    const int lo = std::min(a, b), hi = std::max(a, b);
    for (const auto& t : omega_pairs) {
      if (t.pj == lo && t.pk == hi) out += t.mat;
    }
    return out;
  }
};

namespace detail {

/** E_rc + E_cr (or E_rr when r == c) in dimension d. */
inline Eigen::MatrixXd sym_unit(int d, int r, int c) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d);
  s(r, c) += 1.0;
  s(c, r) += 1.0;
  if (r == c) s(r, c) = 1.0;
  return s;
}

}  // namespace detail

/**
 * Evaluate moments and derivative caches at theta with covariate matrix X
 * (n x l, exogenous columns in spec order). Structural singularities and a
 * non-positive-definite Omega yield an invalid bundle rather than a throw,
 * so line searches can probe bad points cheaply.
 */
inline moment_bundle conditional_moments(const parameter_table& table,
                                         const Eigen::VectorXd& theta,
                                         const Eigen::MatrixXd& X) {
  if (X.cols() != table.l) {
    throw std::invalid_argument(
        "conditional_moments: X has " + std::to_string(X.cols()) +
        " columns, expected " + std::to_string(table.l));
  }
  moment_bundle b;
  b.n = static_cast<int>(X.rows());
  b.m = table.m;
  b.q = table.q;
  b.l = table.l;
  b.p = table.p;
  b.theta = theta;

  const model_matrices mm = assemble(table, theta);
  const int m = table.m, q = table.q, l = table.l, p = table.p;

  // Reduced form.
  if (q > 0) {
    const Eigen::MatrixXd eye_minus_b =
        Eigen::MatrixXd::Identity(q, q) - mm.bmat;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(eye_minus_b);
    if (!lu.isInvertible()) {
      b.why_invalid = "(1 - B) is singular";
      return b;
    }
    b.mmat = lu.inverse();
  } else {
    b.mmat = Eigen::MatrixXd(0, 0);
  }
  b.fmat = b.mmat * mm.lambda;  // q x m

  b.xext.resize(b.n, l + 1);
  b.xext.col(0).setOnes();
  if (l > 0) b.xext.rightCols(l) = X;
  b.xmoment.noalias() = b.xext.transpose() * b.xext;

  // a_coef: (l+1) x q with [1, X_i] a_coef = alpha + X_i Gamma.
  Eigen::MatrixXd a_coef(l + 1, q);
  if (q > 0) {
    a_coef.row(0) = mm.alpha;
    if (l > 0) a_coef.bottomRows(l) = mm.gamma;
  }
  const Eigen::MatrixXd am = a_coef * b.mmat;  // (l+1) x q

  // mu = xext * mu_base.
  Eigen::MatrixXd mu_base(l + 1, m);
  mu_base.row(0) = mm.nu;
  if (l > 0) mu_base.bottomRows(l) = mm.kmat;
  mu_base.noalias() += a_coef * b.fmat;
  b.mu.noalias() = b.xext * mu_base;

  // Omega.
  const Eigen::MatrixXd g = mm.sigma_zeta * b.fmat;  // q x m
  b.omega = mm.sigma_eps;
  b.omega.noalias() += b.fmat.transpose() * g;
  Eigen::LLT<Eigen::MatrixXd> llt(b.omega);
  if (llt.info() != Eigen::Success) {
    // Keep building the derivative caches: none of them involve Omega^{-1},
    // and bias-correction iterations override Omega with a PD matrix before
    // evaluating anything likelihood-like on this bundle.
    b.why_invalid = "Omega is not positive definite";
    b.omega_inv = Eigen::MatrixXd();
    b.logdet_omega = std::numeric_limits<double>::quiet_NaN();
  } else {
    b.omega_inv = llt.solve(Eigen::MatrixXd::Identity(m, m));
    b.logdet_omega =
        2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  }

  // ------------------------------------------------------------------
  // First derivatives per cell, accumulated per free parameter.
  // ------------------------------------------------------------------
  b.mu_terms.assign(p, {});
  b.d_omega.assign(p, Eigen::MatrixXd());

  auto basis_row = [](int d, int i) {
    Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(d);
    e(i) = 1.0;
    return e;
  };
  auto add_d_omega = [&b, m](int k, const Eigen::MatrixXd& mat) {
    if (b.d_omega[k].size() == 0) {
      b.d_omega[k] = Eigen::MatrixXd::Zero(m, m);
    }
    b.d_omega[k] += mat;
  };

  // dF for a Lambda cell (j,t): M.col(j) e_t'; for a B cell (js,jt):
  // M.col(js) F.row(jt). Both are (column) x (row) rank-one q x m maps.
  auto lambda_df = [&b, m](int j, int t) {
    return std::make_pair(Eigen::VectorXd(b.mmat.col(j)),
                          Eigen::RowVectorXd(Eigen::RowVectorXd::Unit(m, t)));
  };
  auto bmat_df = [&b](int js, int jt) {
    return std::make_pair(Eigen::VectorXd(b.mmat.col(js)),
                          Eigen::RowVectorXd(b.fmat.row(jt)));
  };
  // d Omega from dF = u v': dF' G + G' dF with G = Sigma_zeta F.
  auto omega_from_df = [&g](const Eigen::VectorXd& u,
                            const Eigen::RowVectorXd& v) {
    const Eigen::RowVectorXd w = u.transpose() * g;  // 1 x m
    Eigen::MatrixXd out = v.transpose() * w;
    out += w.transpose() * v;
    return out;
  };

  for (int k = 0; k < p; ++k) {
    for (const matrix_cell& cell : table.params[k].cells) {
      switch (cell.mat) {
        case model_matrix::nu:
          b.mu_terms[k].push_back(
              {basis_row(l + 1, 0), basis_row(m, cell.col)});
          break;
        case model_matrix::alpha:
          b.mu_terms[k].push_back(
              {basis_row(l + 1, 0), b.fmat.row(cell.col)});
          break;
        case model_matrix::kmat:
          b.mu_terms[k].push_back(
              {basis_row(l + 1, 1 + cell.row), basis_row(m, cell.col)});
          break;
        case model_matrix::gamma:
          b.mu_terms[k].push_back(
              {basis_row(l + 1, 1 + cell.row), b.fmat.row(cell.col)});
          break;
        case model_matrix::lambda: {
          b.mu_terms[k].push_back(
              {am.col(cell.row).transpose(), basis_row(m, cell.col)});
          const auto [u, v] = lambda_df(cell.row, cell.col);
          add_d_omega(k, omega_from_df(u, v));
          break;
        }
        case model_matrix::bmat: {
          b.mu_terms[k].push_back(
              {am.col(cell.row).transpose(), b.fmat.row(cell.col)});
          const auto [u, v] = bmat_df(cell.row, cell.col);
          add_d_omega(k, omega_from_df(u, v));
          break;
        }
        case model_matrix::eps:
          add_d_omega(k, detail::sym_unit(m, cell.row, cell.col));
          break;
        case model_matrix::zeta: {
          const Eigen::MatrixXd s = detail::sym_unit(q, cell.row, cell.col);
          add_d_omega(k, b.fmat.transpose() * s * b.fmat);
          break;
        }
      }
    }
  }

  // ------------------------------------------------------------------
  // Second derivatives (cell pairs with nonzero curvature).
  // ------------------------------------------------------------------
  // For an unordered parameter pair (a <= b) the stored terms sum to the
  // exact d^2; within one parameter each unordered cell pair contributes
  // twice (the two differentiation orders) and same-cell curvature exists
  // only for B cells.
  auto push_mu_pair = [&b](int a, int bb, Eigen::RowVectorXd coef,
                           Eigen::RowVectorXd dir, double scale) {
    if (scale == 0.0 || coef.size() == 0) return;
    mu_pair_term t;
    t.pj = std::min(a, bb);
    t.pk = std::max(a, bb);
    t.coef = std::move(coef);
    t.coef *= scale;
    t.dir = std::move(dir);
    b.mu_pairs.push_back(std::move(t));
  };
  std::vector<Eigen::MatrixXd> omega_pair_acc;  // keyed on demand
  std::vector<std::pair<int, int>> omega_pair_key;
  auto add_omega_pair = [&](int a, int bb, const Eigen::MatrixXd& mat,
                            double scale) {
    const int lo = std::min(a, bb), hi = std::max(a, bb);
    for (std::size_t i = 0; i < omega_pair_key.size(); ++i) {
      if (omega_pair_key[i] == std::make_pair(lo, hi)) {
        omega_pair_acc[i] += scale * mat;
        return;
      }
    }
    omega_pair_key.emplace_back(lo, hi);
    omega_pair_acc.push_back(scale * mat);
  };

  // Mixed second derivative of mu for one ordered cell pair (c1, c2); the
  // result is symmetric in the pair. Returns terms via push.
  auto mu_cell_pair = [&](int pa, const matrix_cell& c1, int pb,
                          const matrix_cell& c2, double mult) {
    // Normalize so c1 is the "linear" cell (alpha/gamma) when present.
    const matrix_cell* x = &c1;
    const matrix_cell* y = &c2;
    auto is_lin = [](const matrix_cell& c) {
      return c.mat == model_matrix::alpha || c.mat == model_matrix::gamma;
    };
    auto is_shape = [](const matrix_cell& c) {
      return c.mat == model_matrix::lambda || c.mat == model_matrix::bmat;
    };
    if (is_lin(*y)) std::swap(x, y);
    if (is_lin(*x) && is_shape(*y)) {
      const int basis = x->mat == model_matrix::alpha ? 0 : 1 + x->row;
      const int j = x->mat == model_matrix::alpha ? x->col : x->col;
      if (y->mat == model_matrix::lambda) {
        // d(F.row(j))/d lambda_(j2,t) = M(j,j2) e_t.
        push_mu_pair(pa, pb, basis_row(l + 1, basis) * b.mmat(j, y->row),
                     basis_row(m, y->col), mult);
      } else {
        // d(F.row(j))/d b_(js,jt) = M(j,js) F.row(jt).
        push_mu_pair(pa, pb, basis_row(l + 1, basis) * b.mmat(j, y->row),
                     b.fmat.row(y->col), mult);
      }
      return;
    }
    if (!is_shape(*x) || !is_shape(*y)) return;  // zero curvature otherwise
    if (x->mat == model_matrix::lambda && y->mat == model_matrix::lambda) {
      return;  // mu is linear in Lambda at fixed B
    }
    if (x->mat == model_matrix::bmat && y->mat == model_matrix::lambda) {
      std::swap(x, y);
    }
    if (x->mat == model_matrix::lambda) {
      // (lambda(j,t), b(js,jt)): (a M)_{js} M(jt,j) e_t.
      const int j = x->row, t = x->col, js = y->row, jt = y->col;
      push_mu_pair(pa, pb, am.col(js).transpose() * b.mmat(jt, j),
                   basis_row(m, t), mult);
      return;
    }
    // (b(j,k), b(j2,k2)): (aM)_{j2} M(k2,j) F.row(k) + (aM)_j M(k,j2) F.row(k2).
    const int j = x->row, kk = x->col, j2 = y->row, k2 = y->col;
    push_mu_pair(pa, pb, am.col(j2).transpose() * b.mmat(k2, j),
                 b.fmat.row(kk), mult);
    push_mu_pair(pa, pb, am.col(j).transpose() * b.mmat(kk, j2),
                 b.fmat.row(k2), mult);
  };

  // Mixed second derivative of Omega for one cell pair.
  auto omega_cell_pair = [&](int pa, const matrix_cell& c1, int pb,
                             const matrix_cell& c2, double mult) {
    const matrix_cell* x = &c1;
    const matrix_cell* y = &c2;
    auto is_shape = [](const matrix_cell& c) {
      return c.mat == model_matrix::lambda || c.mat == model_matrix::bmat;
    };
    const bool zx = x->mat == model_matrix::zeta;
    const bool zy = y->mat == model_matrix::zeta;
    if (zx && zy) return;  // Omega linear in Sigma_zeta
    if ((zx && !is_shape(*y)) || (zy && !is_shape(*x))) return;
    if (!zx && !zy && !(is_shape(*x) && is_shape(*y))) return;  // eps cells
    if (zx) std::swap(x, y);
    auto df_of = [&](const matrix_cell& c) {
      return c.mat == model_matrix::lambda ? lambda_df(c.row, c.col)
                                           : bmat_df(c.row, c.col);
    };
    if (y->mat == model_matrix::zeta) {
      // (shape, zeta): dF' S F + F' S dF with S the symmetric unit.
      const auto [u, v] = df_of(*x);
      const Eigen::MatrixXd s = detail::sym_unit(q, y->row, y->col);
      const Eigen::MatrixXd df = u * v;  // q x m
      Eigen::MatrixXd out = df.transpose() * (s * b.fmat);
      out += (b.fmat.transpose() * s) * df;
      add_omega_pair(pa, pb, out, mult);
      return;
    }
    // Both shape cells: d2F' G + dFx' Szeta dFy + dFy' Szeta dFx + F' .. d2F
    const auto [ux, vx] = df_of(*x);
    const auto [uy, vy] = df_of(*y);
    const Eigen::MatrixXd dfx = ux * vx;
    const Eigen::MatrixXd dfy = uy * vy;
    Eigen::MatrixXd out = dfx.transpose() * (mm.sigma_zeta * dfy);
    out += dfy.transpose() * (mm.sigma_zeta * dfx);
    // d2F
    Eigen::MatrixXd d2f = Eigen::MatrixXd::Zero(q, m);
    const bool xb = x->mat == model_matrix::bmat;
    const bool yb = y->mat == model_matrix::bmat;
    if (xb && yb) {
      const int j = x->row, kk = x->col, j2 = y->row, k2 = y->col;
      d2f.noalias() = b.mmat.col(j2) * (b.mmat(k2, j) * b.fmat.row(kk));
      d2f.noalias() += b.mmat.col(j) * (b.mmat(kk, j2) * b.fmat.row(k2));
    } else if (xb != yb) {
      const matrix_cell& lam = xb ? *y : *x;
      const matrix_cell& bc = xb ? *x : *y;
      // d2F = M(jt, j_lam) M.col(js) e_t'.
      d2f.noalias() = b.mmat.col(bc.row) *
                      (b.mmat(bc.col, lam.row) *
                       Eigen::RowVectorXd::Unit(m, lam.col));
    }
    if (d2f.size() > 0 && (xb || yb)) {
      out += d2f.transpose() * g;
      out += g.transpose() * d2f;
    }
    add_omega_pair(pa, pb, out, mult);
  };

  for (int a = 0; a < p; ++a) {
    const auto& ca = table.params[a].cells;
    // same-parameter curvature
    for (std::size_t i = 0; i < ca.size(); ++i) {
      // Same cell twice: mu curves only in B cells; Omega also curves in
      // Lambda cells (it is quadratic in F). The generic pair formulas with
      // x == y already yield the full second derivatives.
      if (ca[i].mat == model_matrix::bmat) {
        const int j = ca[i].row, kk = ca[i].col;
        push_mu_pair(a, a, am.col(j).transpose() * (2.0 * b.mmat(kk, j)),
                     b.fmat.row(kk), 1.0);
      }
      if (ca[i].mat == model_matrix::bmat ||
          ca[i].mat == model_matrix::lambda) {
        omega_cell_pair(a, ca[i], a, ca[i], 1.0);
      }
      for (std::size_t j2 = i + 1; j2 < ca.size(); ++j2) {
        mu_cell_pair(a, ca[i], a, ca[j2], 2.0);
        omega_cell_pair(a, ca[i], a, ca[j2], 2.0);
      }
    }
    for (int bb = a + 1; bb < p; ++bb) {
      const auto& cb = table.params[bb].cells;
      for (const auto& cx : ca) {
        for (const auto& cy : cb) {
          mu_cell_pair(a, cx, bb, cy, 1.0);
          omega_cell_pair(a, cx, bb, cy, 1.0);
        }
      }
    }
  }
  for (std::size_t i = 0; i < omega_pair_key.size(); ++i) {
    b.omega_pairs.push_back(
        {omega_pair_key[i].first, omega_pair_key[i].second,
         std::move(omega_pair_acc[i])});
  }

  b.valid = b.why_invalid.empty();
  return b;
}

namespace detail {

inline void require_valid(const moment_bundle& b) {
  if (!b.valid) {
    throw numeric_error("moment bundle is invalid: " + b.why_invalid);
  }
}

}  // namespace detail

/** Replace Omega (keeping mu and all derivative caches); the override must
 *  be positive definite. Used for bias-inflated covariance states. A bundle
 *  that is invalid only because its own Omega failed the PD check is rescued
 *  by a successful override; a structure-singular bundle has no caches and
 *  still throws. */
inline moment_bundle with_omega_override(moment_bundle b,
                                         const Eigen::MatrixXd& omega) {
  if (b.mu.rows() != b.n || b.mu.cols() != b.m) {
    detail::require_valid(b);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) {
    throw numeric_error("overridden Omega is not positive definite");
  }
  b.omega = omega;
  b.omega_inv = llt.solve(Eigen::MatrixXd::Identity(b.m, b.m));
  b.logdet_omega =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  b.valid = true;
  b.why_invalid.clear();
  return b;
}

/** Gaussian log likelihood of Y (n x m) under the bundle's moments. */
inline double log_likelihood(const moment_bundle& b, const Eigen::MatrixXd& Y) {
  detail::require_valid(b);
  const Eigen::MatrixXd xi = Y - b.mu;
  const double quad = (xi * b.omega_inv).cwiseProduct(xi).sum();
  constexpr double log2pi = 1.8378770664093454836;
  return -0.5 * b.n * (b.m * log2pi + b.logdet_omega) - 0.5 * quad;
}

/** Score vector d loglik / d theta (length p). */
inline Eigen::VectorXd score(const moment_bundle& b, const Eigen::MatrixXd& Y) {
  detail::require_valid(b);
  const Eigen::MatrixXd xi = Y - b.mu;
  const Eigen::MatrixXd r = xi * b.omega_inv;  // n x m
  Eigen::VectorXd s = Eigen::VectorXd::Zero(b.p);
  for (int k = 0; k < b.p; ++k) {
    double v = 0.0;
    if (b.has_d_omega(k)) {
      const Eigen::MatrixXd c = b.omega_inv * b.d_omega[k];
      v += -0.5 * b.n * c.trace();
      v += 0.5 * ((r * b.d_omega[k]).cwiseProduct(r)).sum();
    }
    for (const auto& t : b.mu_terms[k]) {
      // sum_i (coef.xext_i) dir Omega^{-1} xi_i'
      v += ((b.xext * t.coef.transpose()).array() *
            (r * t.dir.transpose()).array())
               .sum();
    }
    s(k) = v;
  }
  return s;
}

/** Expected (Fisher) information, optionally with per-coordinate weights
 *  replacing n in the trace term (the mean term always uses the data rows).
 *  The weighted trace is symmetrized over the two derivative orders. */
inline Eigen::MatrixXd expected_information(
    const moment_bundle& b,
    const Eigen::RowVectorXd& trace_weights = Eigen::RowVectorXd()) {
  detail::require_valid(b);
  const bool weighted = trace_weights.size() > 0;
  if (weighted && trace_weights.size() != b.m) {
    throw std::invalid_argument(
        "expected_information: weights must have one entry per outcome");
  }
  std::vector<Eigen::MatrixXd> c(b.p);
  for (int k = 0; k < b.p; ++k) {
    if (b.has_d_omega(k)) c[k] = b.omega_inv * b.d_omega[k];
  }
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(b.p, b.p);
  for (int a = 0; a < b.p; ++a) {
    for (int bb = a; bb < b.p; ++bb) {
      double v = 0.0;
      if (b.has_d_omega(a) && b.has_d_omega(bb)) {
        if (!weighted) {
          v += 0.5 * b.n * (c[a].cwiseProduct(c[bb].transpose())).sum();
        } else {
          const Eigen::VectorXd diag_ab = (c[a] * c[bb]).diagonal();
          const Eigen::VectorXd diag_ba = (c[bb] * c[a]).diagonal();
          v += 0.25 * (trace_weights * diag_ab).value() +
               0.25 * (trace_weights * diag_ba).value();
        }
      }
      for (const auto& ta : b.mu_terms[a]) {
        for (const auto& tb : b.mu_terms[bb]) {
          const double angle = ta.dir * b.omega_inv * tb.dir.transpose();
          const double xw = ta.coef * b.xmoment * tb.coef.transpose();
          v += angle * xw;
        }
      }
      info(a, bb) = v;
      info(bb, a) = v;
    }
  }
  return info;
}

/** Observed information contribution: the Hessian of the log likelihood. */
inline Eigen::MatrixXd hessian(const moment_bundle& b, const Eigen::MatrixXd& Y) {
  detail::require_valid(b);
  const Eigen::MatrixXd xi = Y - b.mu;
  const Eigen::MatrixXd r = xi * b.omega_inv;  // rows xi_i Omega^{-1}
  std::vector<Eigen::MatrixXd> c(b.p), v_mat(b.p), vi_mat(b.p);
  for (int k = 0; k < b.p; ++k) {
    if (!b.has_d_omega(k)) continue;
    c[k] = b.omega_inv * b.d_omega[k];
    v_mat[k] = r * b.d_omega[k];            // rows xi_i Omega^{-1} dOmega_k
    vi_mat[k] = v_mat[k] * b.omega_inv;     // rows xi_i A_k
  }
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(b.p, b.p);
  for (int a = 0; a < b.p; ++a) {
    for (int bb = a; bb < b.p; ++bb) {
      double v = 0.0;
      const bool wa = b.has_d_omega(a), wb = b.has_d_omega(bb);
      if (wa && wb) {
        v += 0.5 * b.n * (c[a].cwiseProduct(c[bb].transpose())).sum();
        // - sum_i xi Omega^{-1} dOmega_b Omega^{-1} dOmega_a Omega^{-1} xi'
        v -= (v_mat[bb].cwiseProduct(vi_mat[a])).sum();
      }
      // mean-mean: -sum_i dmu_a Omega^{-1} dmu_b'
      for (const auto& ta : b.mu_terms[a]) {
        for (const auto& tb : b.mu_terms[bb]) {
          const double angle = ta.dir * b.omega_inv * tb.dir.transpose();
          const double xw = ta.coef * b.xmoment * tb.coef.transpose();
          v -= angle * xw;
        }
      }
      // cross: -sum_i dmu_a Omega^{-1} dOmega_b Omega^{-1} xi' and a<->b
      if (wb) {
        for (const auto& ta : b.mu_terms[a]) {
          v -= ((b.xext * ta.coef.transpose()).array() *
                (vi_mat[bb] * ta.dir.transpose()).array())
                   .sum();
        }
      }
      if (wa) {
        for (const auto& tb : b.mu_terms[bb]) {
          v -= ((b.xext * tb.coef.transpose()).array() *
                (vi_mat[a] * tb.dir.transpose()).array())
                   .sum();
        }
      }
      h(a, bb) = v;
      h(bb, a) = v;
    }
  }
  // Terms from second derivatives and the trace of d^2 Omega.
  for (const auto& t : b.mu_pairs) {
    // + sum_i d2mu_ab Omega^{-1} xi'
    const double v = ((b.xext * t.coef.transpose()).array() *
                      (r * t.dir.transpose()).array())
                         .sum();
    h(t.pj, t.pk) += v;
    if (t.pj != t.pk) h(t.pk, t.pj) += v;
  }
  for (const auto& t : b.omega_pairs) {
    double v = -0.5 * b.n * (b.omega_inv.cwiseProduct(t.mat)).sum();
    v += 0.5 * ((r * t.mat).cwiseProduct(r)).sum();
    h(t.pj, t.pk) += v;
    if (t.pj != t.pk) h(t.pk, t.pj) += v;
  }
  return h;
}

namespace detail {

/** Sum_b v_b d^2Omega_{c,b} for every c, from the stored exact pairs. */
inline std::vector<Eigen::MatrixXd> omega_pair_contraction(
    const moment_bundle& b, const Eigen::VectorXd& v) {
  std::vector<Eigen::MatrixXd> g(b.p);
  auto add = [&](int c, double w, const Eigen::MatrixXd& mat) {
    if (w == 0.0) return;
    if (g[c].size() == 0) g[c] = Eigen::MatrixXd::Zero(b.m, b.m);
    g[c] += w * mat;
  };
  for (const auto& t : b.omega_pairs) {
    add(t.pj, v(t.pk), t.mat);
    if (t.pj != t.pk) add(t.pk, v(t.pj), t.mat);
  }
  return g;
}

}  // namespace detail

/**
 * Gradient of the quadratic form v' I(theta) v with respect to theta, where
 * I is the expected information with optional trace weights (held fixed).
 * Returns the length-p vector g with g_c = v' (dI/dtheta_c) v.
 */
inline Eigen::VectorXd d_information_quadform(
    const moment_bundle& b, const Eigen::VectorXd& v,
    const Eigen::RowVectorXd& trace_weights = Eigen::RowVectorXd()) {
  detail::require_valid(b);
  if (v.size() != b.p) {
    throw std::invalid_argument("d_information_quadform: v has wrong length");
  }
  Eigen::RowVectorXd w(b.m);
  if (trace_weights.size() == 0) {
    w.setConstant(static_cast<double>(b.n));
  } else if (trace_weights.size() == b.m) {
    w = trace_weights;
  } else {
    throw std::invalid_argument(
        "d_information_quadform: weights must have one entry per outcome");
  }
  const Eigen::MatrixXd wd = w.asDiagonal();  // W

  // Trace part.
  Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(b.m, b.m);  // sum_a v_a dOmega_a
  for (int a = 0; a < b.p; ++a) {
    if (b.has_d_omega(a) && v(a) != 0.0) dv += v(a) * b.d_omega[a];
  }
  const Eigen::MatrixXd cv = b.omega_inv * dv;             // C_v
  const Eigen::MatrixXd cvw = cv * wd;                     // C_v W
  // tr(W C_c C_v C_v) = tr(dOmega_c p1),  p1 = C_v C_v W Omega^{-1}
  // tr(W C_v C_c C_v) = tr(dOmega_c p2),  p2 = C_v W C_v Omega^{-1}
  const Eigen::MatrixXd p1 = cv * cvw * b.omega_inv;
  const Eigen::MatrixXd p2 = cvw * cv * b.omega_inv;
  // tr(W Om^{-1} G_c C_v) = tr(G_c q1),   q1 = C_v W Omega^{-1}
  // tr(W C_v Om^{-1} G_c) = tr(G_c q2),   q2 = W C_v Omega^{-1}
  const Eigen::MatrixXd q1 = cvw * b.omega_inv;
  const Eigen::MatrixXd q2 = wd * cv * b.omega_inv;

  const auto gsec = detail::omega_pair_contraction(b, v);

  Eigen::VectorXd g = Eigen::VectorXd::Zero(b.p);
  for (int cix = 0; cix < b.p; ++cix) {
    double val = 0.0;
    if (b.has_d_omega(cix)) {
      const Eigen::MatrixXd& dc = b.d_omega[cix];
      val -= 0.5 * (dc.cwiseProduct((p1 + p2).transpose())).sum();
    }
    if (gsec[cix].size() > 0) {
      val += 0.5 * (gsec[cix].cwiseProduct((q1 + q2).transpose())).sum();
    }
    g(cix) = val;
  }

  // Mean part: U = sum_a v_a dmu_a rows, R = U Omega^{-1}.
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(b.n, b.m);
  for (int a = 0; a < b.p; ++a) {
    if (v(a) == 0.0) continue;
    for (const auto& t : b.mu_terms[a]) {
      u.noalias() += v(a) * (b.xext * t.coef.transpose()) * t.dir;
    }
  }
  const Eigen::MatrixXd rr = u * b.omega_inv;
  for (const auto& t : b.mu_pairs) {
    // 2 sum_i (coef.x_i)(dir Omega^{-1} u_i')
    const double x =
        2.0 * ((b.xext * t.coef.transpose()).array() *
               (rr * t.dir.transpose()).array())
                  .sum();
    g(t.pj) += v(t.pk) * x;
    if (t.pj != t.pk) g(t.pk) += v(t.pj) * x;
  }
  for (int cix = 0; cix < b.p; ++cix) {
    if (!b.has_d_omega(cix)) continue;
    g(cix) -= ((rr * b.d_omega[cix]).cwiseProduct(rr)).sum();
  }
  return g;
}

/**
 * Full information-derivative tensor: element c is the p x p matrix
 * dI/dtheta_c. Built by polarizing the quadratic-form gradient; intended
 * for tests and small p.
 */
inline std::vector<Eigen::MatrixXd> d_information_tensor(
    const moment_bundle& b,
    const Eigen::RowVectorXd& trace_weights = Eigen::RowVectorXd()) {
  std::vector<Eigen::MatrixXd> out(b.p, Eigen::MatrixXd::Zero(b.p, b.p));
  std::vector<Eigen::VectorXd> diag(b.p);
  for (int a = 0; a < b.p; ++a) {
    diag[a] = d_information_quadform(b, Eigen::VectorXd::Unit(b.p, a),
                                     trace_weights);
  }
  for (int a = 0; a < b.p; ++a) {
    for (int bb = a; bb < b.p; ++bb) {
      Eigen::VectorXd g;
      if (a == bb) {
        g = diag[a];
      } else {
        Eigen::VectorXd vp = Eigen::VectorXd::Zero(b.p);
        vp(a) = 1.0;
        vp(bb) = 1.0;
        // v'I v with v = e_a + e_b expands to I_aa + I_bb + 2 I_ab.
        g = 0.5 * (d_information_quadform(b, vp, trace_weights) - diag[a] -
                   diag[bb]);
      }
      for (int cix = 0; cix < b.p; ++cix) {
        out[cix](a, bb) = g(cix);
        out[cix](bb, a) = g(cix);
      }
    }
  }
  return out;
}

}  // namespace lvmi
