#include "lvmi/correction.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "lvmi/estimation.hpp"
#include "lvmi/model.hpp"
#include "lvmi/moments.hpp"
#include "test_util.hpp"

using namespace lvmi;
using lvmi_test::random_x;
using lvmi_test::rel_err;

namespace {

fit_options tight_options() {
  fit_options o;
  o.gradient_tol = 1e-9;
  o.loglik_rel_tol = 1e-13;
  o.max_iter = 500;
  return o;
}

/** Step-halving scoring plateaus slightly above the linear-model floor on
 *  latent models; this is as tight as those fits reliably get. */
fit_options factor_options() {
  fit_options o;
  o.gradient_tol = 1e-7;
  o.loglik_rel_tol = 1e-12;
  o.max_iter = 500;
  return o;
}

/** Fitted linear regression with its closed-form least-squares quantities. */
struct linear_case {
  parameter_table table;
  fit_result fitted;
  Eigen::MatrixXd x, y, xext;
  Eigen::VectorXd hat;  // diagonal of X~ (X~'X~)^{-1} X~'
  double rss = 0.0;
  int n = 0, p_mu = 0;
};

linear_case make_linear(int n, int l, unsigned seed) {
  std::string text = "Y ~ X1";
  for (int j = 2; j <= l; ++j) text += " + X" + std::to_string(j);
  linear_case lc;
  lc.table = index_parameters(parse_model(text));
  lc.n = n;
  lc.p_mu = l + 1;
  Eigen::VectorXd truth(l + 2);
  truth(0) = 0.4;
  for (int j = 1; j <= l; ++j) truth(j) = 0.9 - 0.15 * j;
  truth(l + 1) = 1.2;
  lc.x = random_x(n, l, seed);
  const moment_bundle b = conditional_moments(lc.table, truth, lc.x);
  lc.y = lvmi_test::sample_y(b, seed + 1000);
  lc.fitted = fit(lc.table, lc.y, lc.x, tight_options());
  EXPECT_TRUE(lc.fitted.ok()) << lc.fitted.message;
  lc.xext.resize(n, l + 1);
  lc.xext.col(0).setOnes();
  lc.xext.rightCols(l) = lc.x;
  const Eigen::MatrixXd xtx = lc.xext.transpose() * lc.xext;
  const Eigen::MatrixXd hat_full =
      lc.xext * xtx.ldlt().solve(lc.xext.transpose());
  lc.hat = hat_full.diagonal();
  const Eigen::VectorXd ols =
      xtx.ldlt().solve(lc.xext.transpose() * lc.y.col(0));
  lc.rss = (lc.y.col(0) - lc.xext * ols).squaredNorm();
  return lc;
}

/** One-factor model with a covariate on the latent (free loadings, so some
 *  parameters enter both the mean and the covariance). */
struct factor_case {
  parameter_table table;
  fit_result fitted;
  Eigen::MatrixXd x, y;
};

factor_case make_factor(int n, unsigned seed,
                        const fit_options& options = factor_options()) {
  factor_case fc;
  fc.table = index_parameters(
      parse_model("Y1 ~ eta\nY2 ~ eta\nY3 ~ eta\neta ~ X1"));
  const Eigen::VectorXd truth = lvmi_test::default_theta(fc.table);
  fc.x = random_x(n, 1, seed);
  const moment_bundle b = conditional_moments(fc.table, truth, fc.x);
  fc.y = lvmi_test::sample_y(b, seed + 1000);
  fc.fitted = fit(fc.table, fc.y, fc.x, options);
  EXPECT_TRUE(fc.fitted.ok()) << fc.fitted.message;
  return fc;
}

/** Exchangeable random-intercept model: fixed unit loadings, shared residual
 *  variance, no covariates. Mean and variance parameters are disjoint. */
struct intercept_case {
  parameter_table table;
  fit_result fitted;
  Eigen::MatrixXd x, y;
};

intercept_case make_random_intercept(int n, unsigned seed) {
  intercept_case ic;
  ic.table = index_parameters(
      parse_model("Y1 ~ 1*eta\nY2 ~ 1*eta\nY3 ~ 1*eta\n"
                  "Y1 ~~ s*Y1\nY2 ~~ s*Y2\nY3 ~~ s*Y3\neta ~~ eta"));
  Eigen::VectorXd truth = Eigen::VectorXd::Zero(ic.table.p);
  EXPECT_EQ(ic.table.p, 5);
  EXPECT_GE(ic.table.index_of("s"), 0);
  truth(ic.table.index_of("Y1~1")) = 0.3;
  truth(ic.table.index_of("Y2~1")) = -0.2;
  truth(ic.table.index_of("Y3~1")) = 0.1;
  truth(ic.table.index_of("s")) = 0.8;  // shared residual variance label
  truth(ic.table.index_of("eta~~eta")) = 0.5;
  ic.x = Eigen::MatrixXd(n, 0);
  const moment_bundle b = conditional_moments(ic.table, truth, ic.x);
  ic.y = lvmi_test::sample_y(b, seed + 1000);
  ic.fitted = fit(ic.table, ic.y, ic.x, tight_options());
  EXPECT_TRUE(ic.fitted.ok()) << ic.fitted.message;
  return ic;
}

/** Position of a named parameter within the theta_sigma subvector. */
int sigma_pos(const parameter_table& table, const std::string& name) {
  const int k = table.index_of(name);
  for (std::size_t j = 0; j < table.theta_sigma.size(); ++j) {
    if (table.theta_sigma[j] == k) return static_cast<int>(j);
  }
  return -1;
}

Eigen::MatrixXd random_psd(int d, unsigned seed, double scale = 1.0) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) a(i, j) = z(rng);
  }
  return scale * (a * a.transpose()) / d;
}

}  // namespace

// ---------------------------------------------------------------------------
// matrix_sqrt_sym
// ---------------------------------------------------------------------------

TEST(MatrixSqrtSym, IdentityAndDiagonal) {
  EXPECT_NEAR((matrix_sqrt_sym(Eigen::MatrixXd::Identity(3, 3)) -
               Eigen::MatrixXd::Identity(3, 3))
                  .norm(),
              0.0, 1e-14);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  const Eigen::MatrixXd r = matrix_sqrt_sym(d);
  EXPECT_NEAR(r(0, 0), 2.0, 1e-13);
  EXPECT_NEAR(r(1, 1), 3.0, 1e-13);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-13);
}

TEST(MatrixSqrtSym, RandomPsdSelfConsistent) {
  const Eigen::MatrixXd a = random_psd(5, 42);
  const Eigen::MatrixXd r = matrix_sqrt_sym(a);
  EXPECT_LT((r * r - a).norm(), 1e-10 * (1.0 + a.norm()));
  EXPECT_LT((r - r.transpose()).norm(), 1e-12);
}

TEST(MatrixSqrtSym, ClampsTinyNegativeEigenvalues) {
  Eigen::MatrixXd a = random_psd(3, 7);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  Eigen::VectorXd ev = es.eigenvalues();
  ev(0) = -1e-13 * ev(2);  // within the clamp band
  a = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  const Eigen::MatrixXd r = matrix_sqrt_sym(a);
  EXPECT_TRUE(r.allFinite());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> check(r);
  EXPECT_GE(check.eigenvalues()(0), 0.0);
}

TEST(MatrixSqrtSym, MateriallyNegativeThrows) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  a(1, 1) = -0.5;
  EXPECT_THROW(matrix_sqrt_sym(a), numeric_error);
  EXPECT_THROW(matrix_sqrt_sym(Eigen::MatrixXd::Zero(2, 3)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// bias_psi
// ---------------------------------------------------------------------------

TEST(BiasPsi, LinearModelGivesHatScaledVariance) {
  const linear_case lc = make_linear(80, 3, 21);
  const double sigma2 = lc.fitted.theta(lc.p_mu);
  double total = 0.0;
  for (int i = 0; i < lc.n; ++i) {
    const Eigen::MatrixXd psi =
        bias_psi(lc.fitted.bundle.mu_deriv_obs(i), lc.fitted.vcov);
    ASSERT_EQ(psi.rows(), 1);
    EXPECT_NEAR(psi(0, 0), sigma2 * lc.hat(i), 1e-8 * sigma2);
    total += psi(0, 0);
  }
  EXPECT_NEAR(total / lc.n, sigma2 * lc.p_mu / lc.n, 1e-8 * sigma2);
}

TEST(BiasPsi, ZeroDerivativeGivesZero) {
  const Eigen::MatrixXd psi = bias_psi(Eigen::MatrixXd::Zero(4, 2),
                                       Eigen::MatrixXd::Identity(4, 4));
  EXPECT_EQ(psi.norm(), 0.0);
}

TEST(BiasPsi, PositiveSemidefiniteOnFactorModel) {
  const factor_case fc = make_factor(70, 31);
  for (int i = 0; i < 10; ++i) {
    const Eigen::MatrixXd psi =
        bias_psi(fc.fitted.bundle.mu_deriv_obs(i), fc.fitted.vcov);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(psi,
                                                      Eigen::EigenvaluesOnly);
    EXPECT_GE(es.eigenvalues()(0), -1e-12 * (1.0 + psi.norm()));
    EXPECT_LT((psi - psi.transpose()).norm(), 1e-14);
  }
  EXPECT_THROW(bias_psi(Eigen::MatrixXd::Zero(3, 2),
                        Eigen::MatrixXd::Identity(4, 4)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// solve_variance_params
// ---------------------------------------------------------------------------

TEST(SolveVarianceParams, RecoversExchangeableStructureExactly) {
  const intercept_case ic = make_random_intercept(40, 3);
  const double tau0 = 0.37, s0 = 0.91;
  const Eigen::MatrixXd target = tau0 * Eigen::MatrixXd::Ones(3, 3) +
                                 s0 * Eigen::MatrixXd::Identity(3, 3);
  const Eigen::VectorXd ts =
      solve_variance_params(ic.table, ic.fitted.bundle, target);
  ASSERT_EQ(ts.size(), 2);
  EXPECT_NEAR(ts(sigma_pos(ic.table, "s")), s0, 1e-12);
  EXPECT_NEAR(ts(sigma_pos(ic.table, "eta~~eta")), tau0, 1e-12);
}

TEST(SolveVarianceParams, OffManifoldMatchesDenseNormalEquations) {
  const factor_case fc = make_factor(60, 17);
  const moment_bundle& b = fc.fitted.bundle;
  const int m = b.m;
  const auto& sig = fc.table.theta_sigma;
  ASSERT_GT(sig.size(), 0u);

  // Perturb the fitted covariance off the model manifold.
  Eigen::MatrixXd target = b.omega + 1e-3 * random_psd(m, 5);

  // Oracle: unweighted least squares over all m^2 cells (duplicates both
  // off-diagonal entries, which is what the weight-2 deduplication encodes).
  const int kk = static_cast<int>(sig.size());
  Eigen::MatrixXd z2(m * m, kk);
  Eigen::MatrixXd span = Eigen::MatrixXd::Zero(m, m);
  for (int j = 0; j < kk; ++j) {
    const Eigen::MatrixXd& d = b.d_omega[sig[j]];
    z2.col(j) = Eigen::Map<const Eigen::VectorXd>(d.data(), m * m);
    span += b.theta(sig[j]) * d;
  }
  const Eigen::MatrixXd base = b.omega - span;
  const Eigen::MatrixXd rhs_mat = target - base;
  const Eigen::VectorXd rhs =
      Eigen::Map<const Eigen::VectorXd>(rhs_mat.data(), m * m);
  const Eigen::VectorXd oracle =
      (z2.transpose() * z2).ldlt().solve(z2.transpose() * rhs);

  const Eigen::VectorXd ts = solve_variance_params(fc.table, b, target);
  ASSERT_EQ(ts.size(), oracle.size());
  EXPECT_LT((ts - oracle).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveVarianceParams, RankDeficientDesignThrows) {
  // A single indicator cannot separate the latent variance from the
  // residual variance: both derivative directions are the same 1x1 cell.
  const parameter_table t =
      index_parameters(parse_model("Y1 ~ 1*eta\neta ~~ eta"));
  const Eigen::VectorXd theta = lvmi_test::default_theta(t);
  const moment_bundle b =
      conditional_moments(t, theta, Eigen::MatrixXd(10, 0));
  EXPECT_THROW(solve_variance_params(t, b, Eigen::MatrixXd::Identity(1, 1)),
               numeric_error);
}

TEST(SolveVarianceParams, RejectsWrongTargetShape) {
  const intercept_case ic = make_random_intercept(25, 9);
  EXPECT_THROW(solve_variance_params(ic.table, ic.fitted.bundle,
                                     Eigen::MatrixXd::Identity(2, 2)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// corrected_residuals
// ---------------------------------------------------------------------------

TEST(CorrectedResiduals, EmptyOrZeroPsiLeavesResidualsUntouched) {
  const linear_case lc = make_linear(30, 2, 41);
  const corrected_residual_result empty =
      corrected_residuals(lc.fitted, std::vector<Eigen::MatrixXd>());
  EXPECT_EQ((empty.xi - lc.fitted.residuals).norm(), 0.0);
  EXPECT_TRUE(empty.nonpd_obs.empty());

  std::vector<Eigen::MatrixXd> zeros(30, Eigen::MatrixXd::Zero(1, 1));
  const corrected_residual_result zr = corrected_residuals(lc.fitted, zeros);
  EXPECT_EQ((zr.xi - lc.fitted.residuals).norm(), 0.0);
}

TEST(CorrectedResiduals, LinearModelScalesByRootOneMinusLeverage) {
  const linear_case lc = make_linear(50, 3, 13);
  std::vector<Eigen::MatrixXd> psi(lc.n);
  for (int i = 0; i < lc.n; ++i) {
    psi[i] = bias_psi(lc.fitted.bundle.mu_deriv_obs(i), lc.fitted.vcov);
  }
  const corrected_residual_result cr = corrected_residuals(lc.fitted, psi);
  EXPECT_TRUE(cr.nonpd_obs.empty());
  for (int i = 0; i < lc.n; ++i) {
    const double expect =
        lc.fitted.residuals(i, 0) / std::sqrt(1.0 - lc.hat(i));
    EXPECT_NEAR(cr.xi(i, 0), expect, 1e-10 * (1.0 + std::abs(expect)));
  }
}

TEST(CorrectedResiduals, RescalingRoundTrips) {
  const factor_case fc = make_factor(60, 23);
  const int n = fc.fitted.bundle.n, m = fc.fitted.bundle.m;
  std::vector<Eigen::MatrixXd> psi(n);
  for (int i = 0; i < n; ++i) {
    psi[i] = bias_psi(fc.fitted.bundle.mu_deriv_obs(i), fc.fitted.vcov);
  }
  const corrected_residual_result cr = corrected_residuals(fc.fitted, psi);
  ASSERT_TRUE(cr.nonpd_obs.empty());
  const Eigen::MatrixXd& omega = fc.fitted.bundle.omega;
  const Eigen::MatrixXd omega_sqrt = matrix_sqrt_sym(omega);
  const Eigen::MatrixXd omega_sqrt_inv = omega_sqrt.inverse();
  for (int i = 0; i < n; i += 7) {
    const Eigen::MatrixXd h =
        omega * omega - omega_sqrt * psi[i] * omega_sqrt;
    const Eigen::RowVectorXd back = cr.xi.row(i) * omega_sqrt_inv *
                                    matrix_sqrt_sym(h) * omega_sqrt_inv;
    EXPECT_LT((back - fc.fitted.residuals.row(i)).norm(),
              1e-9 * (1.0 + fc.fitted.residuals.row(i).norm()))
        << "observation " << i;
  }
  EXPECT_EQ(cr.xi.rows(), n);
  EXPECT_EQ(cr.xi.cols(), m);
}

TEST(CorrectedResiduals, FlagsNonPositiveDefiniteRescaling) {
  const factor_case fc = make_factor(40, 29);
  const int n = fc.fitted.bundle.n;
  std::vector<Eigen::MatrixXd> psi(
      n, Eigen::MatrixXd::Zero(fc.fitted.bundle.m, fc.fitted.bundle.m));
  psi[3] = 2.0 * fc.fitted.bundle.omega;  // Omega^2 - Omega^{1/2} Psi ... < 0
  const corrected_residual_result cr = corrected_residuals(fc.fitted, psi);
  ASSERT_EQ(cr.nonpd_obs.size(), 1u);
  EXPECT_EQ(cr.nonpd_obs[0], 3);
  EXPECT_EQ((cr.xi.row(3) - fc.fitted.residuals.row(3)).norm(), 0.0);

  std::vector<Eigen::MatrixXd> short_list(5);
  EXPECT_THROW(corrected_residuals(fc.fitted, short_list),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// leverage / effective_sample_size
// ---------------------------------------------------------------------------

TEST(Leverage, LinearModelReproducesHatDiagonal) {
  const linear_case lc = make_linear(60, 3, 51);
  const Eigen::MatrixXd lev = leverage(lc.fitted, lc.fitted.residuals);
  ASSERT_EQ(lev.rows(), lc.n);
  ASSERT_EQ(lev.cols(), 1);
  for (int i = 0; i < lc.n; ++i) {
    EXPECT_NEAR(lev(i, 0), lc.hat(i), 1e-8);
  }
  // The variance term is annihilated by the block-diagonal parameter
  // covariance, so the residuals do not matter.
  const Eigen::MatrixXd lev0 =
      leverage(lc.fitted, Eigen::MatrixXd::Zero(lc.n, 1));
  EXPECT_LT((lev - lev0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Leverage, VarianceTermVanishesWhenRolesAreDisjoint) {
  const intercept_case ic = make_random_intercept(35, 61);
  const Eigen::MatrixXd lev = leverage(ic.fitted, ic.fitted.residuals);
  const Eigen::MatrixXd lev0 =
      leverage(ic.fitted, Eigen::MatrixXd::Zero(35, 3));
  EXPECT_LT((lev - lev0).cwiseAbs().maxCoeff(), 1e-10);
  // Intercept-only exchangeable model: every leverage is exactly 1/n.
  for (int i = 0; i < lev.rows(); ++i) {
    for (int t = 0; t < lev.cols(); ++t) {
      EXPECT_NEAR(lev(i, t), 1.0 / 35.0, 1e-10);
    }
  }
}

TEST(Leverage, MatchesRefitPerturbationDerivative) {
  const int n = 50;
  factor_case fc = make_factor(n, 71);
  const Eigen::MatrixXd lev = leverage(fc.fitted, fc.fitted.residuals);

  fit_options refit_opts = factor_options();
  refit_opts.start = fc.fitted.theta;
  const double h = 0.2;
  for (int i : {0, 5, 9}) {
    for (int t = 0; t < 3; ++t) {
      auto mu_at = [&](double delta) {
        Eigen::MatrixXd y = fc.y;
        y(i, t) += delta;
        const fit_result r = fit(fc.table, y, fc.x, refit_opts);
        EXPECT_TRUE(r.ok()) << r.message;
        return r.bundle.mu(i, t);
      };
      const double fd = (mu_at(h) - mu_at(-h)) / (2.0 * h);
      EXPECT_NEAR(lev(i, t), fd, std::max(0.004, 0.05 * std::abs(fd)))
          << "observation " << i << ", outcome " << t;
    }
  }
}

TEST(Leverage, FastPathMatchesReferenceImplementation) {
  const factor_case fc = make_factor(45, 83);
  const moment_bundle& b = fc.fitted.bundle;
  const Eigen::MatrixXd sigma =
      0.5 * (fc.fitted.vcov + fc.fitted.vcov.transpose());
  const moment_bundle state =
      with_omega_override(b, b.omega + random_psd(b.m, 6, 0.4));
  detail::correction_workspace ws(b);
  ASSERT_TRUE(ws.fast);
  const Eigen::MatrixXd fast = ws.leverage(state, sigma, fc.fitted.residuals);
  const Eigen::MatrixXd ref =
      detail::leverage_reference(b, state, sigma, fc.fitted.residuals);
  EXPECT_LT(rel_err(fast, ref), 1e-12);
}

TEST(Leverage, RejectsBadInputs) {
  const linear_case lc = make_linear(20, 1, 91);
  EXPECT_THROW(leverage(lc.fitted, Eigen::MatrixXd::Zero(19, 1)),
               std::invalid_argument);
  fit_result broken = lc.fitted;
  broken.status = fit_status::gradient_nonzero;
  EXPECT_THROW(leverage(broken, lc.fitted.residuals), std::invalid_argument);
}

TEST(EffectiveSampleSize, LinearModelGivesNMinusP) {
  const linear_case lc = make_linear(55, 4, 101);
  const Eigen::VectorXd n_eff =
      effective_sample_size(leverage(lc.fitted, lc.fitted.residuals));
  ASSERT_EQ(n_eff.size(), 1);
  EXPECT_NEAR(n_eff(0), lc.n - lc.p_mu, 1e-8);
}

TEST(EffectiveSampleSize, InterceptOnlyGivesNMinusOne) {
  const parameter_table t = index_parameters(parse_model("Y ~ 1"));
  const Eigen::MatrixXd x(40, 0);
  Eigen::VectorXd truth(2);
  truth << 0.5, 1.3;
  const moment_bundle b = conditional_moments(t, truth, x);
  const Eigen::MatrixXd y = lvmi_test::sample_y(b, 11);
  const fit_result r = fit(t, y, x, tight_options());
  ASSERT_TRUE(r.ok());
  const Eigen::VectorXd n_eff =
      effective_sample_size(leverage(r, r.residuals));
  EXPECT_NEAR(n_eff(0), 39.0, 1e-8);
}

TEST(EffectiveSampleSize, ExchangeableOutcomesShareTheirValue) {
  const intercept_case ic = make_random_intercept(45, 111);
  const Eigen::VectorXd n_eff =
      effective_sample_size(leverage(ic.fitted, ic.fitted.residuals));
  ASSERT_EQ(n_eff.size(), 3);
  EXPECT_NEAR(n_eff(0), n_eff(1), 1e-8);
  EXPECT_NEAR(n_eff(1), n_eff(2), 1e-8);
  EXPECT_NEAR(n_eff(0), 44.0, 1e-8);  // per-outcome leverage is exactly 1/n
}

TEST(EffectiveSampleSize, ClampsAboveAndThrowsBelow) {
  Eigen::MatrixXd lev = Eigen::MatrixXd::Constant(10, 2, -0.1);
  const Eigen::VectorXd n_eff = effective_sample_size(lev);
  EXPECT_DOUBLE_EQ(n_eff(0), 10.0);  // clamped at n
  lev.col(1).setConstant(1.0);       // column sum 10 = n -> non-positive
  EXPECT_THROW(effective_sample_size(lev), numeric_error);
}

// ---------------------------------------------------------------------------
// workspace fast paths agree with the direct definitions
// ---------------------------------------------------------------------------

TEST(CorrectionWorkspace, PsiMatchesDirectDefinition) {
  const factor_case fc = make_factor(50, 121);
  const moment_bundle& b = fc.fitted.bundle;
  detail::correction_workspace ws(b);
  ASSERT_TRUE(ws.fast);
  const Eigen::MatrixXd sigma = random_psd(b.p, 9);

  Eigen::MatrixXd direct = Eigen::MatrixXd::Zero(b.m, b.m);
  for (int i = 0; i < b.n; ++i) direct += bias_psi(b.mu_deriv_obs(i), sigma);
  direct /= b.n;
  EXPECT_LT(rel_err(ws.psi_bar(sigma), direct), 1e-12);

  const std::vector<Eigen::MatrixXd> list = ws.psi_obs(sigma);
  ASSERT_EQ(static_cast<int>(list.size()), b.n);
  EXPECT_LT(rel_err(list[7], bias_psi(b.mu_deriv_obs(7), sigma)), 1e-12);
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(b.m, b.m);
  for (const auto& psi : list) mean += psi;
  EXPECT_LT(rel_err(mean / b.n, direct), 1e-12);
}

TEST(CorrectionWorkspace, InformationMatchesGenericEvaluator) {
  const factor_case fc = make_factor(40, 131);
  const moment_bundle& b = fc.fitted.bundle;
  detail::correction_workspace ws(b);
  ASSERT_TRUE(ws.fast);
  const moment_bundle state =
      with_omega_override(b, b.omega + random_psd(b.m, 3, 0.5));

  Eigen::RowVectorXd w(b.m);
  w << 37.5, 34.0, 39.25;  // distinct per-outcome weights
  EXPECT_LT(rel_err(ws.information(state, w), expected_information(state, w)),
            1e-12);

  const Eigen::RowVectorXd wn = Eigen::RowVectorXd::Constant(b.m, double(b.n));
  EXPECT_LT(rel_err(ws.information(state, wn), expected_information(state)),
            1e-12);
}

// ---------------------------------------------------------------------------
// bias_correct (covariance fixed point)
// ---------------------------------------------------------------------------

TEST(BiasCorrect, LinearModelReachesDegreesOfFreedomFixedPoint) {
  const linear_case lc = make_linear(40, 4, 141);
  correction_options opts;
  opts.tol_frob = 1e-12;
  opts.max_iter = 10000;
  const corrected_fit cf = bias_correct(lc.table, lc.fitted, opts);
  EXPECT_TRUE(cf.converged);
  EXPECT_EQ(cf.method, correction_method::bias);

  const double sigma2_ml = lc.fitted.theta(lc.p_mu);
  const double fixed_point = sigma2_ml * lc.n / (lc.n - lc.p_mu);
  // Algorithm identity in terms of the fitted variance...
  EXPECT_NEAR(cf.omega_corrected(0, 0), fixed_point, 1e-9 * fixed_point);
  EXPECT_NEAR(cf.theta_sigma_corrected(0), fixed_point, 1e-9 * fixed_point);
  EXPECT_NEAR(cf.theta_corrected(lc.p_mu), fixed_point, 1e-9 * fixed_point);
  // ...and end to end against the unbiased least-squares estimate.
  const double s2_unbiased = lc.rss / (lc.n - lc.p_mu);
  EXPECT_NEAR(cf.omega_corrected(0, 0), s2_unbiased, 1e-6 * s2_unbiased);

  // The corrected information's variance cell is n / (2 sigma_c^4).
  const int k_sigma = lc.p_mu;
  const double expect_cell =
      lc.n / (2.0 * fixed_point * fixed_point);
  EXPECT_NEAR(cf.information(k_sigma, k_sigma), expect_cell,
              1e-8 * expect_cell);

  // Internal consistency of the report.
  EXPECT_EQ((cf.omega_corrected -
             (lc.fitted.bundle.omega + cf.psi_bar))
                .norm(),
            0.0);
  Eigen::MatrixXd mean_psi = Eigen::MatrixXd::Zero(1, 1);
  for (const auto& psi : cf.psi_obs) mean_psi += psi;
  mean_psi /= lc.n;
  EXPECT_LT(rel_err(mean_psi, cf.psi_bar), 1e-12);
  EXPECT_NEAR(cf.psi_bar(0, 0), fixed_point * lc.p_mu / lc.n,
              1e-9 * fixed_point);
  // Plain bias correction keeps the nominal sample size.
  ASSERT_EQ(cf.n_eff.size(), 1);
  EXPECT_DOUBLE_EQ(cf.n_eff(0), double(lc.n));
}

TEST(BiasCorrect, LinearModelContractsGeometrically) {
  const linear_case lc = make_linear(50, 4, 151);
  correction_options opts;
  opts.tol_frob = 1e-11;
  opts.max_iter = 2000;
  const corrected_fit cf = bias_correct(lc.table, lc.fitted, opts);
  ASSERT_TRUE(cf.converged);
  const double rho = double(lc.p_mu) / lc.n;
  ASSERT_GE(cf.omega_change_trace.size(), 4u);
  for (std::size_t k = 1; k < 4; ++k) {
    EXPECT_NEAR(cf.omega_change_trace[k] / cf.omega_change_trace[k - 1], rho,
                1e-6);
  }
}

TEST(BiasCorrect, PsiNormTraceIsMonotoneForDisjointRoles) {
  const intercept_case ic = make_random_intercept(35, 161);
  const corrected_fit cf = bias_correct(ic.table, ic.fitted);
  EXPECT_TRUE(cf.converged);
  for (std::size_t k = 1; k < cf.psi_norm_trace.size(); ++k) {
    EXPECT_GE(cf.psi_norm_trace[k], cf.psi_norm_trace[k - 1] - 1e-10);
  }
  // Corrected covariance stays positive definite.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cf.omega_corrected,
                                                    Eigen::EigenvaluesOnly);
  EXPECT_GT(es.eigenvalues()(0), 0.0);
}

TEST(BiasCorrect, ReportsDivergenceWhenMeanParametersReachN) {
  // With as many mean parameters as observations the mean absorbs all the
  // variance: the hat trace equals n and the update adds the full fitted
  // variance every round, so no fixed point exists.
  const int n = 5, l = 4;
  const parameter_table t =
      index_parameters(parse_model("Y ~ X1 + X2 + X3 + X4"));
  Eigen::VectorXd theta(l + 2);
  theta << 0.2, 0.5, -0.4, 0.3, 0.6, 1.0;
  const Eigen::MatrixXd x = random_x(n, l, 171);
  const moment_bundle b = conditional_moments(t, theta, x);
  ASSERT_TRUE(b.valid);
  fit_result fake;
  fake.status = fit_status::converged;
  fake.theta = theta;
  fake.bundle = b;
  fake.residuals = lvmi_test::sample_y(b, 4) - b.mu;
  fake.information = expected_information(b);
  fake.vcov = fake.information.inverse();

  correction_options opts;
  opts.max_iter = 25;
  const corrected_fit cf = bias_correct(t, fake, opts);
  EXPECT_FALSE(cf.converged);
  EXPECT_EQ(cf.iterations, 25);
  ASSERT_EQ(cf.omega_change_trace.size(), 25u);
  // Non-contracting updates: the step size never decays.
  EXPECT_GT(cf.omega_change_trace.back(),
            0.5 * cf.omega_change_trace.front());
}

TEST(BiasCorrect, CorrectedInformationMatchesGenericEvaluatorAtExit) {
  const factor_case fc = make_factor(60, 181);
  const corrected_fit cf = bias_correct(fc.table, fc.fitted);
  ASSERT_TRUE(cf.converged);
  // The reported bundle is the corrected state; re-evaluating the generic
  // information there must reproduce the reported matrix.
  EXPECT_EQ((cf.bundle.omega - cf.omega_corrected).norm(), 0.0);
  EXPECT_LT(rel_err(cf.information, expected_information(cf.bundle)), 1e-12);
  const Eigen::MatrixXd prod = cf.vcov * cf.information;
  EXPECT_LT((prod - Eigen::MatrixXd::Identity(prod.rows(), prod.cols()))
                .cwiseAbs()
                .maxCoeff(),
            1e-8);
}

TEST(BiasCorrect, RejectsUnconvergedFitAndBadOptions) {
  const linear_case lc = make_linear(20, 1, 191);
  fit_result broken = lc.fitted;
  broken.status = fit_status::huge_se;
  EXPECT_THROW(bias_correct(lc.table, broken), std::invalid_argument);
  correction_options opts;
  opts.max_iter = 0;
  EXPECT_THROW(bias_correct(lc.table, lc.fitted, opts), std::invalid_argument);
}

TEST(BiasCorrect, IterationCapIsReportedHonestly) {
  const linear_case lc = make_linear(30, 2, 201);
  correction_options opts;
  opts.tol_frob = 1e-300;  // unreachable
  opts.max_iter = 2;
  const corrected_fit cf = bias_correct(lc.table, lc.fitted, opts);
  EXPECT_FALSE(cf.converged);
  EXPECT_EQ(cf.iterations, 2);
  EXPECT_EQ(cf.omega_change_trace.size(), 2u);
  EXPECT_EQ(cf.psi_norm_trace.size(), 2u);
}

// ---------------------------------------------------------------------------
// bias_correct_neff (effective sample size variant)
// ---------------------------------------------------------------------------

TEST(BiasCorrectNeff, LinearModelClosedForms) {
  const linear_case lc = make_linear(30, 3, 211);
  correction_options opts;
  opts.tol_frob = 1e-12;
  opts.max_iter = 10000;
  const corrected_fit cf = bias_correct_neff(lc.table, lc.fitted, opts);
  EXPECT_TRUE(cf.converged);
  EXPECT_EQ(cf.method, correction_method::bias_neff);
  EXPECT_TRUE(cf.nonpd_obs.empty());

  // Effective sample size is exactly n - p for any iterate.
  ASSERT_EQ(cf.n_eff.size(), 1);
  EXPECT_NEAR(cf.n_eff(0), lc.n - lc.p_mu, 1e-8);

  // Same covariance fixed point as the plain correction.
  const double sigma2_ml = lc.fitted.theta(lc.p_mu);
  const double fixed_point = sigma2_ml * lc.n / (lc.n - lc.p_mu);
  EXPECT_NEAR(cf.omega_corrected(0, 0), fixed_point, 1e-9 * fixed_point);

  // Variance cell of the weighted information: n_eff / (2 sigma_c^4).
  const int k_sigma = lc.p_mu;
  const double expect_cell =
      (lc.n - lc.p_mu) / (2.0 * fixed_point * fixed_point);
  EXPECT_NEAR(cf.information(k_sigma, k_sigma), expect_cell,
              1e-8 * expect_cell);

  // Corrected residuals collapse to xi / sqrt(1 - h).
  for (int i = 0; i < lc.n; ++i) {
    const double expect =
        lc.fitted.residuals(i, 0) / std::sqrt(1.0 - lc.hat(i));
    EXPECT_NEAR(cf.residuals_corrected(i, 0), expect,
                1e-9 * (1.0 + std::abs(expect)));
  }

  // psi_obs is the list that produced psi_bar.
  Eigen::MatrixXd mean_psi = Eigen::MatrixXd::Zero(1, 1);
  for (const auto& psi : cf.psi_obs) mean_psi += psi;
  mean_psi /= lc.n;
  EXPECT_EQ((mean_psi - cf.psi_bar).norm(), 0.0);
}

TEST(BiasCorrectNeff, FixedMeanModelIsUntouched) {
  // No mean parameters: Psi vanishes, every leverage is zero, and both
  // corrections return the fitted state after one iteration.
  const parameter_table t = index_parameters(parse_model("Y1 ~ 0*1"));
  const Eigen::MatrixXd x(50, 0);
  Eigen::VectorXd truth(1);
  truth << 1.4;
  const moment_bundle b = conditional_moments(t, truth, x);
  const Eigen::MatrixXd y = lvmi_test::sample_y(b, 19);
  const fit_result r = fit(t, y, x, tight_options());
  ASSERT_TRUE(r.ok());

  const corrected_fit c2 = bias_correct_neff(t, r);
  EXPECT_TRUE(c2.converged);
  EXPECT_EQ(c2.iterations, 1);
  EXPECT_EQ((c2.omega_corrected - r.bundle.omega).norm(), 0.0);
  EXPECT_EQ((c2.residuals_corrected - r.residuals).norm(), 0.0);
  EXPECT_DOUBLE_EQ(c2.n_eff(0), 50.0);
  EXPECT_LT(rel_err(c2.information, r.information), 1e-12);
  EXPECT_EQ(c2.psi_bar.norm(), 0.0);

  const corrected_fit c1 = bias_correct(t, r);
  EXPECT_TRUE(c1.converged);
  EXPECT_EQ((c1.omega_corrected - r.bundle.omega).norm(), 0.0);
  EXPECT_LT(rel_err(c1.information, c2.information), 1e-12);
}

TEST(BiasCorrectNeff, FallsBackWhenRescalingIsNotPositiveDefinite) {
  // Plant a high-leverage covariate row, then hand the correction a fit
  // whose information is understated fourfold: the inflated parameter
  // covariance makes Psi_3x exceed the corrected variance at the outlier,
  // so the residual rescaling loses positive definiteness and the
  // procedure must restart as the plain bias correction.
  const int n = 20, l = 1;
  const parameter_table t = index_parameters(parse_model("Y ~ X1"));
  Eigen::MatrixXd x = random_x(n, l, 221);
  x(0, 0) = 6.0;  // outlier: hat value well above p/n
  Eigen::VectorXd theta(3);
  theta << 0.3, 0.8, 1.1;
  const moment_bundle b = conditional_moments(t, theta, x);
  fit_result fake;
  fake.status = fit_status::converged;
  fake.theta = theta;
  fake.bundle = b;
  fake.residuals = lvmi_test::sample_y(b, 8) - b.mu;
  fake.information = 0.25 * expected_information(b);
  fake.vcov = fake.information.inverse();

  // Precondition: the planted row really is extreme enough.
  Eigen::MatrixXd xext(n, 2);
  xext.col(0).setOnes();
  xext.col(1) = x;
  const Eigen::MatrixXd hat =
      xext * (xext.transpose() * xext).ldlt().solve(xext.transpose());
  ASSERT_GT(hat.diagonal().maxCoeff(), 0.45);

  const corrected_fit cf = bias_correct_neff(t, fake);
  EXPECT_EQ(cf.method, correction_method::bias_neff_fallback);
  EXPECT_FALSE(cf.nonpd_obs.empty());
  EXPECT_EQ(cf.nonpd_obs[0], 0);
  EXPECT_TRUE(cf.converged);
  EXPECT_EQ(cf.residuals_corrected.size(), 0);  // fallback reports none

  // The fallback result is exactly the plain correction of the same fit.
  const corrected_fit plain = bias_correct(t, fake);
  EXPECT_EQ((cf.omega_corrected - plain.omega_corrected).norm(), 0.0);
  EXPECT_EQ((cf.information - plain.information).norm(), 0.0);
  EXPECT_EQ(cf.iterations, plain.iterations);
}

TEST(BiasCorrectNeff, ExchangeableModelConvergesQuickly) {
  const intercept_case ic = make_random_intercept(40, 231);
  const corrected_fit cf = bias_correct_neff(ic.table, ic.fitted);
  EXPECT_TRUE(cf.converged);
  EXPECT_LE(cf.iterations, 30);
  EXPECT_EQ(cf.method, correction_method::bias_neff);
  ASSERT_EQ(cf.n_eff.size(), 3);
  for (int t = 0; t < 3; ++t) {
    EXPECT_GT(cf.n_eff(t), 0.0);
    EXPECT_LE(cf.n_eff(t), 40.0);
  }
  EXPECT_NEAR(cf.n_eff(0), cf.n_eff(1), 1e-6);
  EXPECT_NEAR(cf.n_eff(1), cf.n_eff(2), 1e-6);
  EXPECT_EQ(cf.residuals_corrected.rows(), 40);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cf.psi_bar,
                                                    Eigen::EigenvaluesOnly);
  EXPECT_GE(es.eigenvalues()(0), -1e-12);
}

TEST(BiasCorrectNeff, FactorModelStateIsInternallyConsistent) {
  const factor_case fc = make_factor(80, 241);
  const corrected_fit cf = bias_correct_neff(fc.table, fc.fitted);
  ASSERT_TRUE(cf.converged);
  ASSERT_EQ(cf.method, correction_method::bias_neff);
  // Weighted information at the reported state reproduces the report.
  EXPECT_LT(rel_err(cf.information,
                    expected_information(cf.bundle, cf.n_eff.transpose())),
            1e-12);
  // Corrected covariance is the fitted one plus the reported bias.
  EXPECT_LT(
      (cf.omega_corrected - (fc.fitted.bundle.omega + cf.psi_bar)).norm(),
      1e-14);
  // Effective n cannot exceed the sample size.
  for (int t = 0; t < cf.n_eff.size(); ++t) {
    EXPECT_LE(cf.n_eff(t), 80.0 + 1e-12);
    EXPECT_GT(cf.n_eff(t), 0.0);
  }
}
