#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "lvmi/errors.hpp"

// Distribution kernels for Student-t, F, chi-squared and Gaussian references.
// Everything is built on the regularized incomplete beta and gamma functions,
// evaluated with modified Lentz continued fractions / power series in double
// precision. No tables, no global state; every function is reentrant.

namespace lvmi {

namespace detail {

inline constexpr double cf_fpmin = 1e-300;
inline constexpr double cf_eps = 3e-16;
inline constexpr int cf_max_iter = 500;

/**
 * Continued fraction for the incomplete beta function (modified Lentz).
 * Converges quickly for x < (a+1)/(a+b+2); callers switch to the symmetric
 * form otherwise.
 */
inline double betacf(double a, double b, double x) {
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < cf_fpmin) d = cf_fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= cf_max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < cf_fpmin) d = cf_fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < cf_fpmin) c = cf_fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < cf_fpmin) d = cf_fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < cf_fpmin) c = cf_fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < cf_eps) return h;
  }
  throw numeric_error("incomplete beta continued fraction did not converge (a=" +
                      std::to_string(a) + ", b=" + std::to_string(b) +
                      ", x=" + std::to_string(x) + ")");
}

/** Power series for the regularized lower incomplete gamma P(a, x), x < a+1. */
inline double gamma_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < cf_max_iter; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * cf_eps) {
      return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
  }
  throw numeric_error("incomplete gamma series did not converge (a=" +
                      std::to_string(a) + ", x=" + std::to_string(x) + ")");
}

/** Continued fraction for the regularized upper incomplete gamma Q(a, x). */
inline double gamma_cf(double a, double x) {
  double b = x + 1.0 - a;
  double c = 1.0 / cf_fpmin;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= cf_max_iter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < cf_fpmin) d = cf_fpmin;
    c = b + an / c;
    if (std::fabs(c) < cf_fpmin) c = cf_fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < cf_eps) {
      return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
  }
  throw numeric_error("incomplete gamma continued fraction did not converge (a=" +
                      std::to_string(a) + ", x=" + std::to_string(x) + ")");
}

}  // namespace detail

/** Regularized incomplete beta function I_x(a, b) for a, b > 0, x in [0, 1]. */
inline double ibeta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw std::invalid_argument("ibeta: shape parameters must be positive");
  }
  if (x < 0.0 || x > 1.0 || std::isnan(x)) {
    throw std::invalid_argument("ibeta: x must lie in [0, 1]");
  }
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::betacf(a, b, x) / a;
  }
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

/** Regularized lower incomplete gamma P(a, x) for a > 0, x >= 0. */
inline double gammp(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gammp: a must be positive");
  if (x < 0.0 || std::isnan(x)) {
    throw std::invalid_argument("gammp: x must be non-negative");
  }
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_series(a, x);
  return 1.0 - detail::gamma_cf(a, x);
}

/** Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x). */
inline double gammq(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gammq: a must be positive");
  if (x < 0.0 || std::isnan(x)) {
    throw std::invalid_argument("gammq: x must be non-negative");
  }
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_series(a, x);
  return detail::gamma_cf(a, x);
}

/** Standard normal CDF. */
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

/** Student-t CDF with df > 0 degrees of freedom; df = +inf gives the normal. */
inline double t_cdf(double x, double df) {
  if (!(df > 0.0)) throw std::invalid_argument("t_cdf: df must be positive");
  if (std::isinf(df)) return normal_cdf(x);
  if (x == 0.0) return 0.5;
  const double z = df / (df + x * x);
  const double tail = 0.5 * ibeta(0.5 * df, 0.5, z);
  return x > 0.0 ? 1.0 - tail : tail;
}

/** Chi-squared CDF with df > 0 degrees of freedom. */
inline double chi2_cdf(double x, double df) {
  if (!(df > 0.0)) throw std::invalid_argument("chi2_cdf: df must be positive");
  if (x <= 0.0) return 0.0;
  return gammp(0.5 * df, 0.5 * x);
}

/**
 * F(df1, df2) CDF. df2 = +inf degenerates to the chi-squared reference
 * (df1 * F ~ chi2(df1)), the limit used for asymptotic multivariate tests.
 */
inline double f_cdf(double x, double df1, double df2) {
  if (!(df1 > 0.0) || !(df2 > 0.0)) {
    throw std::invalid_argument("f_cdf: degrees of freedom must be positive");
  }
  if (x <= 0.0) return 0.0;
  if (std::isinf(df2)) return chi2_cdf(df1 * x, df1);
  if (std::isinf(df1)) return 1.0 - chi2_cdf(df2 / x, df2);
  const double z = df1 * x / (df1 * x + df2);
  return ibeta(0.5 * df1, 0.5 * df2, z);
}

/**
 * Two-sided tail probability P(|T| > |t|) of a Student-t (or normal when
 * df = +inf), evaluated without cancellation through the incomplete beta.
 */
inline double t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) {
    throw std::invalid_argument("t_two_sided_p: df must be positive");
  }
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(df)) return std::erfc(std::fabs(t) / std::sqrt(2.0));
  if (t == 0.0) return 1.0;
  return ibeta(0.5 * df, 0.5, df / (df + t * t));
}

/** Upper tail P(F > x) of an F(df1, df2); df2 = +inf uses the chi2 limit. */
inline double f_upper_p(double x, double df1, double df2) {
  if (!(df1 > 0.0) || !(df2 > 0.0)) {
    throw std::invalid_argument("f_upper_p: degrees of freedom must be positive");
  }
  if (x <= 0.0) return 1.0;
  if (std::isinf(df2)) return gammq(0.5 * df1, 0.5 * df1 * x);
  return ibeta(0.5 * df2, 0.5 * df1, df2 / (df2 + df1 * x));
}

/**
 * Standard normal quantile. Rational initial guess (Acklam's minimax
 * coefficients) polished with one Halley step on the CDF, giving absolute
 * error well below 1e-12 across (0, 1).
 */
inline double normal_quantile(double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::invalid_argument("normal_quantile: p must lie in (0, 1)");
  }
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // One Halley iteration on normal_cdf(x) - p.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x -= u / (1.0 + 0.5 * x * u);
  return x;
}

}  // namespace lvmi
