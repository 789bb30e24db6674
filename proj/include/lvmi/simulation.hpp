#pragma once

/**
 * Monte Carlo data generation and type-1-error calibration.
 *
 * simulate() draws exact samples from a model by the structural recursion
 * (covariates, then latent disturbances, then measurement noise), using a
 * per-replicate deterministic random stream so a study is reproducible from
 * a single seed no matter how many worker threads run it.  calibrate_type1()
 * repeatedly simulates under a generative model, refits an investigator
 * model, runs every requested Wald correction on every hypothesis, and
 * tallies rejection rates at level alpha together with an exact accounting
 * of discarded replicates.  builtin_studies() ships three ready-made
 * calibration designs of increasing size (7, 15, and 36 free parameters).
 *
 * Reports are bit-identical for a fixed (config, seed) regardless of the
 * worker count: replicate r always consumes stream (seed, r) and nothing
 * else, and per-cell reductions run in replicate order after the pool
 * joins.  Wall-clock time is carried next to the data, never inside it.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lvmi/correction.hpp"
#include "lvmi/errors.hpp"
#include "lvmi/estimation.hpp"
#include "lvmi/inference.hpp"
#include "lvmi/model.hpp"
#include "lvmi/moments.hpp"
#include "lvmi/version.hpp"

namespace lvmi {

namespace detail {

/** SplitMix64 output step: mixes a counter into a well-distributed word. */
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/**
 * Deterministic random stream for one simulation replicate.
 *
 * Stream (seed, index) seeds a 64-bit Mersenne Twister from four SplitMix64
 * words of seed mixed with the index, so consecutive indices give
 * decorrelated streams and the draw sequence depends only on (seed, index),
 * never on thread scheduling.  The generator and the normal transform (the
 * Box-Muller cosine branch) are pinned here rather than delegated to
 * std::normal_distribution so sequences are stable across standard
 * libraries.
 */
class rng_stream {
 public:
  rng_stream(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t state = seed ^ (0xd1342543de82ef95ULL * (index + 1));
    std::uint32_t words[8];
    for (int i = 0; i < 4; ++i) {
      const std::uint64_t w = detail::splitmix64(state);
      words[2 * i] = static_cast<std::uint32_t>(w);
      words[2 * i + 1] = static_cast<std::uint32_t>(w >> 32);
    }
    std::seed_seq seq(words, words + 8);
    gen_.seed(seq);
  }

  /** Uniform draw in [0, 1) with 53 random bits. */
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /** Standard normal draw (Box-Muller cosine branch, one per call). */
  double normal() {
    const double u = 1.0 - uniform();  // (0, 1]: keeps the log finite
    const double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) *
           std::cos(2.0 * 3.14159265358979323846 * v);
  }

 private:
  std::mt19937_64 gen_;
};

/** One simulated sample: outcomes plus the covariates they were drawn with. */
struct simulated_data {
  Eigen::MatrixXd y;  // n x m
  Eigen::MatrixXd x;  // n x l
};

/**
 * Draw n observations from the model at theta by the structural recursion.
 * Per observation, in this order: covariates x_i (iid standard normal),
 * zeta_i ~ N(0, Sigma_zeta), then eps_i ~ N(0, Sigma_eps); the latents
 * solve eta_i = (alpha + x_i Gamma + zeta_i)(1 - B)^{-1} and the outcome is
 * y_i = nu + eta_i Lambda + x_i K + eps_i.  Variance matrices may be
 * singular -- sampling goes through a symmetric PSD square root, so zero
 * variances yield deterministic coordinates -- but materially negative
 * eigenvalues and a singular (1 - B) are errors.
 */
inline simulated_data simulate(const parameter_table& table,
                        const Eigen::VectorXd& theta, int n, rng_stream& rng) {
  if (theta.size() != table.p) {
    throw std::invalid_argument("simulate: theta has " +
                                std::to_string(theta.size()) +
                                " entries for a model with " +
                                std::to_string(table.p) + " parameters");
  }
  if (n < 1) throw std::invalid_argument("simulate: need n >= 1");

  const model_matrices mm = assemble(table, theta);
  const int m = table.m;
  const int q = table.q;
  const int l = table.l;

  Eigen::MatrixXd mmat;  // (1 - B)^{-1}
  Eigen::MatrixXd zeta_sqrt;
  if (q > 0) {
    const Eigen::MatrixXd eye_minus_b =
        Eigen::MatrixXd::Identity(q, q) - mm.bmat;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(eye_minus_b);
    if (!lu.isInvertible()) {
      throw numeric_error("simulate: (1 - B) is singular at theta");
    }
    mmat = lu.inverse();
    zeta_sqrt = matrix_sqrt_sym(mm.sigma_zeta);
  }
  const Eigen::MatrixXd eps_sqrt = matrix_sqrt_sym(mm.sigma_eps);

  simulated_data ds;
  ds.x.resize(n, l);
  ds.y.resize(n, m);
  Eigen::RowVectorXd zraw(q), eraw(m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < l; ++j) ds.x(i, j) = rng.normal();
    for (int j = 0; j < q; ++j) zraw(j) = rng.normal();
    for (int j = 0; j < m; ++j) eraw(j) = rng.normal();
    ds.y.row(i) = mm.nu + ds.x.row(i) * mm.kmat + eraw * eps_sqrt;
    if (q > 0) {
      const Eigen::RowVectorXd eta =
          (mm.alpha + ds.x.row(i) * mm.gamma + zraw * zeta_sqrt) * mmat;
      ds.y.row(i) += eta * mm.lambda;
    }
  }
  return ds;
}

/** One calibration hypothesis: a named contrast tested at a null value. */
struct hypothesis_spec {
  std::string name;          // display name, e.g. "gamma1"
  Eigen::VectorXd contrast;  // length p of the investigator model
  double null_value = 0.0;
};

/**
 * Full description of one calibration study: the model data are drawn
 * from, the (possibly different) model fitted to each replicate, which
 * hypotheses to test under which corrections, and the Monte Carlo controls.
 */
struct study_config {
  std::string name;         // short identifier, e.g. "A"
  std::string description;  // one line for the report header

  parameter_table generative;    // model the data are drawn from
  Eigen::VectorXd theta_true;    // generative parameter values
  parameter_table investigator;  // model fitted to each replicate

  std::vector<hypothesis_spec> hypotheses;
  std::vector<int> sample_sizes = {20, 50, 100, 500};
  int replicates = 2000;
  std::uint64_t seed = 2026;
  double alpha = 0.05;
  bool robust = false;  // robust Wald with one cluster per observation
  std::vector<correction_mode> corrections = {correction_mode::none,
                                              correction_mode::full_neff};

  fit_options fit;
  correction_options correction;
};

/** Tally for one (hypothesis, sample size, correction) calibration cell. */
struct calibration_cell {
  std::string hypothesis;
  int sample_size = 0;
  correction_mode correction = correction_mode::none;
  bool robust = false;

  int replicates = 0;            // attempts = used + all discards
  int used = 0;                  // replicates contributing a p-value
  int discarded_gradient = 0;    // fit stopped with a nonzero gradient
  int discarded_singular = 0;    // information went singular during the fit
  int discarded_huge_se = 0;     // fit converged to implausible SEs
  int discarded_correction = 0;  // bias correction failed to converge
  int discarded_inference = 0;   // test evaluation failed numerically

  int rejections = 0;
  double rejection_rate = std::numeric_limits<double>::quiet_NaN();
  double mean_df = std::numeric_limits<double>::quiet_NaN();
  double mean_se = std::numeric_limits<double>::quiet_NaN();

  int discarded() const {
    return discarded_gradient + discarded_singular + discarded_huge_se +
           discarded_correction + discarded_inference;
  }
};

/** Aggregated calibration results, ordered by sample size, then hypothesis
 *  declaration order, then correction order. */
struct calibration_report {
  std::string study;
  std::string description;
  std::uint64_t seed = 0;
  int replicates = 0;
  double alpha = 0.05;
  bool robust = false;

  std::vector<calibration_cell> cells;

  /** Some sample size yielded zero usable replicates for every cell; the
   *  report is still complete but rejection rates there are undefined. */
  bool exhausted = false;

  /** Wall-clock seconds for the whole run. Deliberately not part of the
   *  cells so reproducibility can be asserted on the data alone. */
  double seconds = 0.0;
};

namespace detail {

enum class rep_state : std::uint8_t {
  used,
  fit_gradient,
  fit_singular,
  fit_huge_se,
  correction_failed,
  inference_failed,
};

struct cell_outcome {
  rep_state state = rep_state::used;
  bool rejected = false;
  double df = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
};

inline rep_state classify_fit_failure(fit_status s) {
  switch (s) {
    case fit_status::singular_info: return rep_state::fit_singular;
    case fit_status::huge_se: return rep_state::fit_huge_se;
    default: return rep_state::fit_gradient;
  }
}

/** Run one replicate end to end: simulate, fit, correct lazily, test every
 *  (hypothesis, correction) cell. Outcomes are hypothesis-major. */
inline std::vector<cell_outcome> run_replicate(const study_config& config,
                                               int n, int replicate,
                                               const cluster_index* clusters) {
  const std::size_t h_count = config.hypotheses.size();
  const std::size_t c_count = config.corrections.size();
  std::vector<cell_outcome> out(h_count * c_count);

  rng_stream rng(config.seed, static_cast<std::uint64_t>(replicate));
  const simulated_data ds = simulate(config.generative, config.theta_true, n, rng);
  const fit_result fitted =
      fit(config.investigator, ds.y, ds.x, config.fit);
  if (!fitted.ok()) {
    const rep_state state = classify_fit_failure(fitted.status);
    for (auto& o : out) o.state = state;
    return out;
  }

  bool need_bias = false;
  bool need_neff = false;
  for (correction_mode mode : config.corrections) {
    need_bias |= (mode == correction_mode::bias ||
                  mode == correction_mode::full);
    need_neff |= (mode == correction_mode::full_neff);
  }
  std::optional<corrected_fit> plain, effective;
  if (need_bias) {
    try {
      plain = bias_correct(config.investigator, fitted, config.correction);
      if (!plain->converged) plain.reset();
    } catch (const std::exception&) {
      plain.reset();
    }
  }
  if (need_neff) {
    try {
      effective =
          bias_correct_neff(config.investigator, fitted, config.correction);
      if (!effective->converged) effective.reset();
    } catch (const std::exception&) {
      effective.reset();
    }
  }

  for (std::size_t h = 0; h < h_count; ++h) {
    const hypothesis_spec& hyp = config.hypotheses[h];
    for (std::size_t c = 0; c < c_count; ++c) {
      cell_outcome& o = out[h * c_count + c];
      const correction_mode mode = config.corrections[c];
      wald_options options;
      options.null_value = hyp.null_value;
      options.clusters = clusters;
      try {
        wald_result r;
        switch (mode) {
          case correction_mode::none:
          case correction_mode::satterthwaite:
            options.satterthwaite = (mode == correction_mode::satterthwaite);
            r = wald_test(fitted, hyp.contrast, options);
            break;
          case correction_mode::bias:
          case correction_mode::full:
            if (!plain) {
              o.state = rep_state::correction_failed;
              continue;
            }
            options.satterthwaite = (mode == correction_mode::full);
            r = wald_test(*plain, hyp.contrast, options);
            break;
          case correction_mode::full_neff:
            if (!effective) {
              o.state = rep_state::correction_failed;
              continue;
            }
            options.satterthwaite = true;
            r = wald_test(*effective, hyp.contrast, options);
            break;
        }
        if (!(r.p_value >= 0.0 && r.p_value <= 1.0)) {
          o.state = rep_state::inference_failed;
          continue;
        }
        o.rejected = (r.p_value < config.alpha);
        o.df = r.df;
        o.se = r.se;
      } catch (const std::exception&) {
        o.state = rep_state::inference_failed;
      }
    }
  }
  return out;
}

inline void validate_config(const study_config& config) {
  if (config.generative.p != config.theta_true.size()) {
    throw std::invalid_argument(
        "calibrate_type1: theta_true has " +
        std::to_string(config.theta_true.size()) +
        " entries for a generative model with " +
        std::to_string(config.generative.p) + " parameters");
  }
  if (config.hypotheses.empty()) {
    throw std::invalid_argument("calibrate_type1: no hypotheses");
  }
  for (const hypothesis_spec& h : config.hypotheses) {
    if (h.contrast.size() != config.investigator.p) {
      throw std::invalid_argument(
          "calibrate_type1: hypothesis '" + h.name + "' has a length-" +
          std::to_string(h.contrast.size()) +
          " contrast for an investigator model with " +
          std::to_string(config.investigator.p) + " parameters");
    }
    if (!std::isfinite(h.null_value)) {
      throw std::invalid_argument("calibrate_type1: hypothesis '" + h.name +
                                  "' has a non-finite null value");
    }
  }
  if (config.sample_sizes.empty()) {
    throw std::invalid_argument("calibrate_type1: no sample sizes");
  }
  for (int n : config.sample_sizes) {
    if (n < 2) {
      throw std::invalid_argument("calibrate_type1: sample sizes must be >= 2");
    }
  }
  if (config.replicates < 1) {
    throw std::invalid_argument("calibrate_type1: need replicates >= 1");
  }
  if (config.corrections.empty()) {
    throw std::invalid_argument("calibrate_type1: no corrections requested");
  }
  if (!(config.alpha > 0.0 && config.alpha < 1.0)) {
    throw std::invalid_argument("calibrate_type1: alpha must lie in (0, 1)");
  }
}

}  // namespace detail

/**
 * Monte Carlo type-1-error calibration.  For each sample size, runs
 * config.replicates independent replicates (simulate under the generative
 * model, fit the investigator model, evaluate every hypothesis under every
 * requested correction at level alpha) and tallies rejections together with
 * an exact accounting of discards: used + discarded == replicates in every
 * cell.  A fit that does not converge discards the replicate for all cells
 * at that sample size, by failure status; a bias correction that does not
 * converge discards it only for the cells that need that correction.
 *
 * Replicate r draws exclusively from rng_stream(config.seed, r), and cell
 * reductions run in replicate order after all workers join, so the report's
 * cells are bit-identical for a given config no matter the worker count.
 */
inline calibration_report calibrate_type1(const study_config& config,
                                          int workers = 1) {
  detail::validate_config(config);
  const auto start = std::chrono::steady_clock::now();

  calibration_report report;
  report.study = config.name;
  report.description = config.description;
  report.seed = config.seed;
  report.replicates = config.replicates;
  report.alpha = config.alpha;
  report.robust = config.robust;

  const std::size_t h_count = config.hypotheses.size();
  const std::size_t c_count = config.corrections.size();

  for (int n : config.sample_sizes) {
    cluster_index clusters;
    if (config.robust) clusters = singleton_clusters(n);
    const cluster_index* cluster_ptr = config.robust ? &clusters : nullptr;

    std::vector<std::vector<detail::cell_outcome>> results(config.replicates);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto drain = [&]() {
      for (;;) {
        const int r = next.fetch_add(1);
        if (r >= config.replicates || failed.load()) break;
        try {
          results[r] = detail::run_replicate(config, n, r, cluster_ptr);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          failed.store(true);
          break;
        }
      }
    };

    const int pool = std::max(1, std::min(workers, config.replicates));
    if (pool == 1) {
      drain();
    } else {
      std::vector<std::thread> threads;
      threads.reserve(static_cast<std::size_t>(pool));
      for (int t = 0; t < pool; ++t) threads.emplace_back(drain);
      for (std::thread& t : threads) t.join();
    }
    if (error) std::rethrow_exception(error);

    int max_used = 0;
    for (std::size_t h = 0; h < h_count; ++h) {
      for (std::size_t c = 0; c < c_count; ++c) {
        calibration_cell cell;
        cell.hypothesis = config.hypotheses[h].name;
        cell.sample_size = n;
        cell.correction = config.corrections[c];
        cell.robust = config.robust;
        cell.replicates = config.replicates;

        double df_sum = 0.0;
        double se_sum = 0.0;
        for (int r = 0; r < config.replicates; ++r) {
          const detail::cell_outcome& o = results[r][h * c_count + c];
          switch (o.state) {
            case detail::rep_state::used:
              ++cell.used;
              cell.rejections += o.rejected ? 1 : 0;
              df_sum += o.df;
              se_sum += o.se;
              break;
            case detail::rep_state::fit_gradient:
              ++cell.discarded_gradient;
              break;
            case detail::rep_state::fit_singular:
              ++cell.discarded_singular;
              break;
            case detail::rep_state::fit_huge_se:
              ++cell.discarded_huge_se;
              break;
            case detail::rep_state::correction_failed:
              ++cell.discarded_correction;
              break;
            case detail::rep_state::inference_failed:
              ++cell.discarded_inference;
              break;
          }
        }
        if (cell.used > 0) {
          cell.rejection_rate =
              static_cast<double>(cell.rejections) / cell.used;
          cell.mean_df = df_sum / cell.used;
          cell.mean_se = se_sum / cell.used;
        }
        max_used = std::max(max_used, cell.used);
        report.cells.push_back(std::move(cell));
      }
    }
    if (max_used == 0) report.exhausted = true;
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return report;
}

namespace detail {

/** Format with six significant digits; infinities print as "inf". */
inline std::string format_stat(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.6g", v);
  return buffer;
}

}  // namespace detail

/**
 * Render a report as CSV: '#' header lines carrying the version stamp and
 * the study's sampling assumptions, one data row per cell, and a trailing
 * '#' comment with the wall-clock time (kept out of the data rows so they
 * stay byte-identical across reruns of the same seed).
 */
inline std::string to_csv(const calibration_report& report) {
  std::ostringstream out;
  out << "# " << version_string << " calibration report\n";
  out << "# study " << report.study << ": " << report.description << "\n";
  out << "# covariates iid standard normal; seed " << report.seed
      << "; replicates " << report.replicates << "; alpha "
      << detail::format_stat(report.alpha)
      << (report.robust ? "; robust (one cluster per observation)" : "")
      << "\n";
  if (report.exhausted) {
    out << "# WARNING: a sample size yielded zero usable replicates\n";
  }
  out << "hypothesis,n,correction,robust,replicates,used,"
         "discarded_gradient,discarded_singular,discarded_huge_se,"
         "discarded_correction,discarded_inference,rejections,"
         "rejection_rate,mean_df,mean_se\n";
  for (const calibration_cell& cell : report.cells) {
    out << cell.hypothesis << ',' << cell.sample_size << ','
        << to_string(cell.correction) << ',' << (cell.robust ? 1 : 0) << ','
        << cell.replicates << ',' << cell.used << ','
        << cell.discarded_gradient << ',' << cell.discarded_singular << ','
        << cell.discarded_huge_se << ',' << cell.discarded_correction << ','
        << cell.discarded_inference << ',' << cell.rejections << ','
        << detail::format_stat(cell.rejection_rate) << ','
        << detail::format_stat(cell.mean_df) << ','
        << detail::format_stat(cell.mean_se) << '\n';
  }
  out << "# wall clock " << detail::format_stat(report.seconds) << " s\n";
  return out.str();
}

namespace detail {

inline Eigen::VectorXd unit_contrast(const parameter_table& table,
                                     const std::string& name) {
  const int k = table.index_of(name);
  if (k < 0) {
    throw model_error("no free parameter named '" + name + "' in the model");
  }
  Eigen::VectorXd c = Eigen::VectorXd::Zero(table.p);
  c(k) = 1.0;
  return c;
}

inline void set_parameter(const parameter_table& table, Eigen::VectorXd& theta,
                          const std::string& name, double value) {
  const int k = table.index_of(name);
  if (k < 0) {
    throw model_error("no free parameter named '" + name + "' in the model");
  }
  theta(k) = value;
}

}  // namespace detail

/**
 * The three built-in calibration studies.  Shared conventions: generative
 * intercepts and tested parameters are 0 (so every listed hypothesis is a
 * true null), every other free parameter is 1, and the covariates are iid
 * standard normal.  Fits use the default working tolerances; small-sample
 * replicates where the likelihood plateaus before the score tolerance is
 * met are discarded and show up in the report's discard columns.
 *
 *   A -- one latent, three exchangeable indicators (fixed unit loadings,
 *        shared residual variance), two structural covariates; 7 free
 *        parameters. Hypotheses: nu2, gamma1.
 *   B -- one latent, four indicators with free loadings and per-indicator
 *        variances, a direct covariate effect on Y1; 15 free parameters;
 *        robust (per-observation) Wald. Hypotheses: nu2, lambda4, gamma1, k1.
 *   C -- two latents in a chain, five indicators each, one residual
 *        covariance; 36 free parameters. Hypotheses: nu2, k1, lambda4,
 *        gamma1, b1, sigma12.
 */
inline study_config builtin_study(const std::string& name) {
  study_config config;
  config.name = name;

  if (name == "A") {
    config.description =
        "one latent, three exchangeable indicators, two covariates (p=7)";
    config.generative = index_parameters(parse_model(R"(Y1 ~ 1*eta + 0*1
Y2 ~ 1*eta
Y3 ~ 1*eta
eta ~ 1 + G1 + G2
Y1 ~~ s*Y1
Y2 ~~ s*Y2
Y3 ~~ s*Y3
)"));
    const parameter_table& t = config.generative;
    config.theta_true = Eigen::VectorXd::Zero(t.p);
    detail::set_parameter(t, config.theta_true, "eta~G2", 1.0);
    detail::set_parameter(t, config.theta_true, "s", 1.0);
    detail::set_parameter(t, config.theta_true, "eta~~eta", 1.0);
    config.hypotheses = {
        {"nu2", detail::unit_contrast(t, "Y2~1"), 0.0},
        {"gamma1", detail::unit_contrast(t, "eta~G1"), 0.0},
    };
  } else if (name == "B") {
    config.description =
        "one latent, four indicators, direct covariate effect on Y1 (p=15), "
        "robust Wald";
    config.generative = index_parameters(parse_model(R"(Y1 ~ eta + G2 + 0*1
Y2 ~ eta
Y3 ~ eta
Y4 ~ eta
eta ~ 1 + G1 + G2
)"));
    const parameter_table& t = config.generative;
    config.theta_true = Eigen::VectorXd::Zero(t.p);
    for (const char* name_on : {"Y2~eta", "Y3~eta", "eta~G2", "Y1~~Y1",
                                "Y2~~Y2", "Y3~~Y3", "Y4~~Y4", "eta~~eta"}) {
      detail::set_parameter(t, config.theta_true, name_on, 1.0);
    }
    config.hypotheses = {
        {"nu2", detail::unit_contrast(t, "Y2~1"), 0.0},
        {"lambda4", detail::unit_contrast(t, "Y4~eta"), 0.0},
        {"gamma1", detail::unit_contrast(t, "eta~G1"), 0.0},
        {"k1", detail::unit_contrast(t, "Y1~G2"), 0.0},
    };
    config.robust = true;
  } else if (name == "C") {
    config.description =
        "two chained latents, five indicators each, one residual covariance "
        "(p=36)";
    config.generative = index_parameters(parse_model(R"(Y1 ~ eta1 + G2 + 0*1
Y2 ~ eta1
Y3 ~ eta1
Y4 ~ eta1
Y5 ~ eta1
Y6 ~ eta2 + 0*1
Y7 ~ eta2
Y8 ~ eta2
Y9 ~ eta2
Y10 ~ eta2
eta1 ~ 1 + G1 + G2
eta2 ~ 1 + eta1 + G2
Y1 ~~ Y2
)"));
    const parameter_table& t = config.generative;
    config.theta_true = Eigen::VectorXd::Zero(t.p);
    for (const char* name_on :
         {"Y2~eta1", "Y3~eta1", "Y5~eta1", "Y7~eta2", "Y8~eta2", "Y9~eta2",
          "Y10~eta2", "eta1~G2", "eta2~G2", "Y1~~Y1", "Y2~~Y2", "Y3~~Y3",
          "Y4~~Y4", "Y5~~Y5", "Y6~~Y6", "Y7~~Y7", "Y8~~Y8", "Y9~~Y9",
          "Y10~~Y10", "eta1~~eta1", "eta2~~eta2"}) {
      detail::set_parameter(t, config.theta_true, name_on, 1.0);
    }
    config.hypotheses = {
        {"nu2", detail::unit_contrast(t, "Y2~1"), 0.0},
        {"k1", detail::unit_contrast(t, "Y1~G2"), 0.0},
        {"lambda4", detail::unit_contrast(t, "Y4~eta1"), 0.0},
        {"gamma1", detail::unit_contrast(t, "eta1~G1"), 0.0},
        {"b1", detail::unit_contrast(t, "eta2~eta1"), 0.0},
        {"sigma12", detail::unit_contrast(t, "Y1~~Y2"), 0.0},
    };
  } else {
    throw std::invalid_argument("unknown built-in study '" + name +
                                "' (expected A, B, or C)");
  }

  config.investigator = config.generative;
  return config;
}

/** All built-in studies, in size order. */
inline std::vector<study_config> builtin_studies() {
  return {builtin_study("A"), builtin_study("B"), builtin_study("C")};
}

}  // namespace lvmi
