#pragma once

/**
 * Command-line front end.
 *
 * Four subcommands share one model/data pipeline: `fit` prints a parameter
 * table (estimate, SE, df, t, p) under a chosen correction, `test` runs a
 * multi-contrast F test, `calibrate` runs a Monte Carlo type-1-error study
 * (built-in or custom), and `simulate` writes one simulated dataset as CSV.
 *
 * run_cli() is the whole program: it parses argv, executes, and returns the
 * process exit code -- 0 success, 1 usage error, 2 numerical failure (fit or
 * correction did not converge, or a test could not be evaluated), 3 I/O
 * failure.  Diagnostics go to the error stream; results go to the output
 * stream or to --out.  All numbers print with six significant digits (which
 * puts p-values below 1e-4 in scientific notation), and nothing volatile --
 * timestamps, durations -- appears in data rows, so output is byte-stable
 * for fixed inputs and flags.
 */

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lvmi/correction.hpp"
#include "lvmi/data.hpp"
#include "lvmi/errors.hpp"
#include "lvmi/estimation.hpp"
#include "lvmi/inference.hpp"
#include "lvmi/model.hpp"
#include "lvmi/simulation.hpp"
#include "lvmi/version.hpp"

namespace lvmi {

namespace detail {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path + "' for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw io_error("failed while reading '" + path + "'");
  return buffer.str();
}

inline parameter_table load_model_file(const std::string& path) {
  return index_parameters(parse_model(read_text_file(path)));
}

/** Parse "a=1, b=-2.5" into ordered (name, value) pairs. */
inline std::vector<std::pair<std::string, double>> parse_assignments(
    const std::string& text) {
  std::vector<std::pair<std::string, double>> out;
  std::istringstream in(text);
  std::string term;
  while (std::getline(in, term, ',')) {
    const std::string item = trim(term);
    if (item.empty()) continue;
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("expected name=value, got '" + item + "'");
    }
    const std::string name = trim(item.substr(0, eq));
    const std::string digits = trim(item.substr(eq + 1));
    if (name.empty() || digits.empty()) {
      throw std::invalid_argument("expected name=value, got '" + item + "'");
    }
    char* end = nullptr;
    const double value = std::strtod(digits.c_str(), &end);
    if (end != digits.c_str() + digits.size()) {
      throw std::invalid_argument("'" + digits + "' is not a number in '" +
                                  item + "'");
    }
    out.emplace_back(name, value);
  }
  if (out.empty()) {
    throw std::invalid_argument("no name=value terms in '" + text + "'");
  }
  return out;
}

/** Integer-coded cluster labels from a named data column. */
inline cluster_index clusters_from_column(const dataset& data,
                                          const std::string& column) {
  const int c = data.column_index(column);
  if (c < 0) {
    throw std::invalid_argument("no cluster column named '" + column +
                                "' in the data");
  }
  std::vector<long long> ids(static_cast<std::size_t>(data.n()));
  for (int i = 0; i < data.n(); ++i) {
    const double v = data.values(i, c);
    const long long label = std::llround(v);
    if (std::abs(v - static_cast<double>(label)) > 1e-9) {
      throw std::invalid_argument("cluster column '" + column +
                                  "' must hold integer labels");
    }
    ids[static_cast<std::size_t>(i)] = label;
  }
  return make_cluster_index(ids);
}

/** Two-space-guttered table: the first `left` columns left-aligned, the
 *  rest right-aligned. */
inline void write_aligned(std::ostream& out,
                          const std::vector<std::vector<std::string>>& rows,
                          std::size_t left) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t j = 0; j < row.size(); ++j) {
      widths[j] = std::max(widths[j], row[j].size());
    }
  }
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out << "  ";
      const int pad = static_cast<int>(widths[j] - row[j].size());
      if (j < left) {
        out << row[j];
        if (j + 1 < row.size()) out << std::string(static_cast<std::size_t>(pad), ' ');
      } else {
        out << std::string(static_cast<std::size_t>(pad), ' ') << row[j];
      }
    }
    out << '\n';
  }
}

/** Open --out for writing, or fall back to the process output stream. */
class output_sink {
 public:
  output_sink(const std::string& path, std::ostream& fallback)
      : fallback_(fallback) {
    if (!path.empty()) {
      file_.emplace(path);
      if (!*file_) throw io_error("cannot open '" + path + "' for writing");
      path_ = path;
    }
  }

  std::ostream& stream() { return file_ ? *file_ : fallback_; }

  void finish() {
    if (file_ && !*file_) throw io_error("failed while writing '" + path_ + "'");
  }

 private:
  std::ostream& fallback_;
  std::optional<std::ofstream> file_;
  std::string path_;
};

/** Worker default: LVM_INFER_THREADS when set to a positive integer. */
inline int default_workers() {
  const char* env = std::getenv("LVM_INFER_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min(v, 256L));
}

/** The corrected state a correction mode asks for, plus whether rows use
 *  Satterthwaite degrees of freedom. Throws numeric_error when the
 *  requested correction does not converge. */
struct resolved_correction {
  correction_mode mode = correction_mode::none;
  bool satterthwaite = false;
  std::optional<corrected_fit> corrected;
};

inline resolved_correction resolve_correction(
    const parameter_table& table, const fit_result& fitted,
    correction_mode mode, const correction_options& options) {
  resolved_correction state;
  state.mode = mode;
  state.satterthwaite = (mode == correction_mode::satterthwaite ||
                         mode == correction_mode::full ||
                         mode == correction_mode::full_neff);
  if (mode == correction_mode::bias || mode == correction_mode::full) {
    state.corrected = bias_correct(table, fitted, options);
  } else if (mode == correction_mode::full_neff) {
    state.corrected = bias_correct_neff(table, fitted, options);
  }
  if (state.corrected && !state.corrected->converged) {
    throw numeric_error("bias correction did not converge after " +
                        std::to_string(state.corrected->iterations) +
                        " iterations");
  }
  return state;
}

// -- shared flag bundles ----------------------------------------------------

struct tolerance_flags {
  int max_iter = fit_options{}.max_iter;
  double gradient_tol = fit_options{}.gradient_tol;
  int correction_max_iter = correction_options{}.max_iter;
  double correction_tol = correction_options{}.tol_frob;

  void attach(CLI::App* cmd) {
    cmd->add_option("--max-iter", max_iter, "fit iteration budget");
    cmd->add_option("--gradient-tol", gradient_tol,
                    "fit score convergence tolerance");
    cmd->add_option("--correction-max-iter", correction_max_iter,
                    "bias-correction iteration budget");
    cmd->add_option("--correction-tol", correction_tol,
                    "bias-correction Frobenius tolerance");
  }

  fit_options fit() const {
    fit_options o;
    o.max_iter = max_iter;
    o.gradient_tol = gradient_tol;
    return o;
  }

  correction_options correction() const {
    correction_options o;
    o.max_iter = correction_max_iter;
    o.tol_frob = correction_tol;
    return o;
  }
};

struct fit_flags {
  std::string model, data, out;
  std::string correction = "full-neff";
  std::string robust_cluster;
  std::string format = "table";
  tolerance_flags tolerances;
};

struct test_flags {
  std::string model, data, out, contrast;
  std::string correction = "full-neff";
  std::string format = "table";
  tolerance_flags tolerances;
};

struct calibrate_flags {
  std::string study, model, truth, hypotheses, out;
  std::vector<int> sample_sizes;
  int replicates = 2000;
  std::uint64_t seed = 2026;
  double alpha = 0.05;
  int workers = 0;  // 0: use LVM_INFER_THREADS or 1
  bool robust = false;
  std::vector<std::string> corrections = {"none", "full-neff"};
  std::string format = "csv";
  tolerance_flags tolerances;
};

struct simulate_flags {
  std::string model, truth, out;
  int n = 0;
  std::uint64_t seed = 2026;
};

// -- subcommand bodies --------------------------------------------------------

inline int cmd_fit(const fit_flags& f, std::ostream& out, std::ostream& err) {
  const parameter_table table = load_model_file(f.model);
  const dataset data = read_csv_file(f.data);
  const correction_mode mode = parse_correction_mode(f.correction);

  const fit_result fitted = fit(table, data, f.tolerances.fit());
  if (!fitted.ok()) {
    err << "fit failed [" << to_string(fitted.status)
        << "]: " << fitted.message << '\n';
    return 2;
  }
  const resolved_correction state =
      resolve_correction(table, fitted, mode, f.tolerances.correction());

  std::optional<cluster_index> clusters;
  if (!f.robust_cluster.empty()) {
    clusters = clusters_from_column(data, f.robust_cluster);
  }

  std::vector<std::vector<std::string>> rows;
  rows.push_back({"parameter", "estimate", "se", "df", "t", "p"});
  for (int k = 0; k < table.p; ++k) {
    wald_options options;
    options.satterthwaite = state.satterthwaite;
    options.clusters = clusters ? &*clusters : nullptr;
    const Eigen::VectorXd contrast = Eigen::VectorXd::Unit(table.p, k);
    const wald_result r = state.corrected
                              ? wald_test(*state.corrected, contrast, options)
                              : wald_test(fitted, contrast, options);
    rows.push_back({table.params[static_cast<std::size_t>(k)].name,
                    format_stat(r.estimate), format_stat(r.se),
                    format_stat(r.df), format_stat(r.statistic),
                    format_stat(r.p_value)});
  }

  output_sink sink(f.out, out);
  std::ostream& os = sink.stream();
  os << "# " << version_string << '\n';
  os << "# fit: model=" << f.model << " data=" << f.data
     << " n=" << fitted.bundle.n << " correction=" << to_string(mode)
     << " robust="
     << (f.robust_cluster.empty() ? std::string("none") : f.robust_cluster)
     << '\n';
  os << "# status=" << to_string(fitted.status)
     << " loglik=" << format_stat(fitted.loglik)
     << " iterations=" << fitted.iterations << '\n';
  if (f.format == "csv") {
    for (const auto& row : rows) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) os << ',';
        os << row[j];
      }
      os << '\n';
    }
  } else {
    write_aligned(os, rows, 1);
  }
  sink.finish();
  return 0;
}

inline int cmd_test(const test_flags& f, std::ostream& out,
                    std::ostream& err) {
  const parameter_table table = load_model_file(f.model);
  const dataset data = read_csv_file(f.data);
  const correction_mode mode = parse_correction_mode(f.correction);
  const auto terms = parse_assignments(f.contrast);

  Eigen::MatrixXd contrasts =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(terms.size()), table.p);
  Eigen::VectorXd nulls(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t q = 0; q < terms.size(); ++q) {
    const int k = table.index_of(terms[q].first);
    if (k < 0) {
      throw std::invalid_argument("no parameter named '" + terms[q].first +
                                  "' in the model");
    }
    contrasts(static_cast<Eigen::Index>(q), k) = 1.0;
    nulls(static_cast<Eigen::Index>(q)) = terms[q].second;
  }

  const fit_result fitted = fit(table, data, f.tolerances.fit());
  if (!fitted.ok()) {
    err << "fit failed [" << to_string(fitted.status)
        << "]: " << fitted.message << '\n';
    return 2;
  }
  const resolved_correction state =
      resolve_correction(table, fitted, mode, f.tolerances.correction());

  f_test_options options;
  options.null_values = nulls;
  options.satterthwaite = state.satterthwaite;
  const f_test_result r = state.corrected
                              ? f_test(*state.corrected, contrasts, options)
                              : f_test(fitted, contrasts, options);

  output_sink sink(f.out, out);
  std::ostream& os = sink.stream();
  os << "# " << version_string << '\n';
  os << "# test: model=" << f.model << " data=" << f.data
     << " correction=" << to_string(mode) << " q=" << r.q << '\n';
  if (f.format == "csv") {
    os << "statistic,df1,df2,p\n"
       << format_stat(r.statistic) << ',' << format_stat(r.df1) << ','
       << format_stat(r.df2) << ',' << format_stat(r.p_value) << '\n';
  } else {
    std::vector<std::vector<std::string>> head;
    head.push_back({"contrast", "null"});
    for (const auto& [name, null_value] : terms) {
      head.push_back({name, format_stat(null_value)});
    }
    write_aligned(os, head, 1);
    std::vector<std::vector<std::string>> tail;
    tail.push_back({"F", "df1", "df2", "p"});
    tail.push_back({format_stat(r.statistic), format_stat(r.df1),
                    format_stat(r.df2), format_stat(r.p_value)});
    write_aligned(os, tail, 0);
  }
  sink.finish();
  return 0;
}

/** Human-readable variant of the calibration CSV (discards folded into one
 *  column; the full breakdown lives in the CSV format). */
inline void write_report_table(const calibration_report& report,
                               std::ostream& os) {
  os << "# " << version_string << " calibration report\n";
  os << "# study " << report.study << ": " << report.description << '\n';
  os << "# covariates iid standard normal; seed " << report.seed
     << "; replicates " << report.replicates << "; alpha "
     << format_stat(report.alpha)
     << (report.robust ? "; robust (one cluster per observation)" : "")
     << '\n';
  if (report.exhausted) {
    os << "# WARNING: a sample size yielded zero usable replicates\n";
  }
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"hypothesis", "n", "correction", "used", "discarded",
                  "rejections", "rate", "mean_df", "mean_se"});
  for (const calibration_cell& cell : report.cells) {
    rows.push_back({cell.hypothesis, std::to_string(cell.sample_size),
                    to_string(cell.correction), std::to_string(cell.used),
                    std::to_string(cell.discarded()),
                    std::to_string(cell.rejections),
                    format_stat(cell.rejection_rate),
                    format_stat(cell.mean_df), format_stat(cell.mean_se)});
  }
  write_aligned(os, rows, 3);
  os << "# wall clock " << format_stat(report.seconds) << " s\n";
}

inline int cmd_calibrate(const calibrate_flags& f, std::ostream& out,
                         std::ostream& err) {
  study_config config;
  if (!f.study.empty()) {
    if (!f.model.empty() || !f.truth.empty() || !f.hypotheses.empty()) {
      throw std::invalid_argument(
          "--study is a built-in design; it cannot be combined with "
          "--model/--truth/--hypotheses");
    }
    config = builtin_study(f.study);
  } else {
    if (f.model.empty() || f.hypotheses.empty()) {
      throw std::invalid_argument(
          "custom calibration needs --model and --hypotheses "
          "(or use --study A|B|C)");
    }
    config.name = "custom";
    config.description = f.model;
    config.generative = load_model_file(f.model);
    config.investigator = config.generative;
    config.theta_true = Eigen::VectorXd::Zero(config.generative.p);
    if (!f.truth.empty()) {
      for (const auto& [name, value] : parse_assignments(f.truth)) {
        set_parameter(config.generative, config.theta_true, name, value);
      }
    }
    for (const auto& [name, value] : parse_assignments(f.hypotheses)) {
      config.hypotheses.push_back(
          {name, unit_contrast(config.investigator, name), value});
    }
    config.robust = f.robust;
  }

  if (!f.sample_sizes.empty()) config.sample_sizes = f.sample_sizes;
  config.replicates = f.replicates;
  config.seed = f.seed;
  config.alpha = f.alpha;
  config.fit = f.tolerances.fit();
  config.correction = f.tolerances.correction();
  config.corrections.clear();
  for (const std::string& token : f.corrections) {
    const correction_mode mode = parse_correction_mode(token);
    bool seen = false;
    for (correction_mode have : config.corrections) seen |= (have == mode);
    if (!seen) config.corrections.push_back(mode);
  }

  const int workers = f.workers > 0 ? f.workers : default_workers();
  const calibration_report report = calibrate_type1(config, workers);

  output_sink sink(f.out, out);
  if (f.format == "table") {
    write_report_table(report, sink.stream());
  } else {
    sink.stream() << to_csv(report);
  }
  sink.finish();

  if (report.exhausted) {
    err << "calibration failed: a sample size yielded zero usable "
           "replicates (see the discard columns)\n";
    return 2;
  }
  return 0;
}

inline int cmd_simulate(const simulate_flags& f, std::ostream& out,
                        std::ostream& err) {
  (void)err;
  const parameter_table table = load_model_file(f.model);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(table.p);
  if (!f.truth.empty()) {
    for (const auto& [name, value] : parse_assignments(f.truth)) {
      set_parameter(table, theta, name, value);
    }
  }

  rng_stream rng(f.seed, 0);
  const simulated_data sim = simulate(table, theta, f.n, rng);

  dataset ds;
  ds.columns = table.spec.exogenous;
  ds.columns.insert(ds.columns.end(), table.spec.endogenous.begin(),
                    table.spec.endogenous.end());
  ds.values.resize(sim.y.rows(), sim.x.cols() + sim.y.cols());
  ds.values << sim.x, sim.y;

  output_sink sink(f.out, out);
  write_csv(ds, sink.stream());
  sink.finish();
  return 0;
}

}  // namespace detail

/**
 * Parse argv and execute one subcommand. Returns the process exit code:
 * 0 success, 1 usage, 2 numerical failure, 3 I/O failure.
 */
inline int run_cli(int argc, const char* const* argv, std::ostream& out,
                   std::ostream& err) {
  CLI::App app{
      "latent variable models: maximum-likelihood fitting with "
      "small-sample-corrected Wald inference"};
  app.name("lvm-infer");
  app.require_subcommand(1);

  const char* correction_help =
      "correction mode: none, bias, satterthwaite, full, or full-neff";

  detail::fit_flags ff;
  CLI::App* c_fit =
      app.add_subcommand("fit", "fit a model and print its parameter table");
  c_fit->add_option("--model", ff.model, "model definition file")->required();
  c_fit->add_option("--data", ff.data, "CSV data file")->required();
  c_fit->add_option("--correction", ff.correction, correction_help);
  c_fit->add_option("--robust-cluster", ff.robust_cluster,
                    "data column with integer cluster labels for robust SEs");
  c_fit->add_option("--format", ff.format, "output format")
      ->check(CLI::IsMember({"table", "csv"}));
  c_fit->add_option("--out", ff.out, "write output to this file");
  ff.tolerances.attach(c_fit);

  detail::test_flags tf;
  CLI::App* c_test = app.add_subcommand(
      "test", "joint F test of parameter contrasts like \"k1=0,k2=0\"");
  c_test->add_option("--model", tf.model, "model definition file")->required();
  c_test->add_option("--data", tf.data, "CSV data file")->required();
  c_test->add_option("--contrast", tf.contrast,
                     "comma-separated name=null terms tested jointly")
      ->required();
  c_test->add_option("--correction", tf.correction, correction_help);
  c_test->add_option("--format", tf.format, "output format")
      ->check(CLI::IsMember({"table", "csv"}));
  c_test->add_option("--out", tf.out, "write output to this file");
  tf.tolerances.attach(c_test);

  detail::calibrate_flags cf;
  CLI::App* c_cal = app.add_subcommand(
      "calibrate", "Monte Carlo type-1-error rates for a study design");
  c_cal->add_option("--study", cf.study, "built-in study: A, B, or C");
  c_cal->add_option("--model", cf.model,
                    "custom study: model definition file");
  c_cal->add_option("--truth", cf.truth,
                    "custom study: generative values as name=value terms "
                    "(unlisted parameters are 0)");
  c_cal->add_option("--hypotheses", cf.hypotheses,
                    "custom study: tested name=null terms");
  c_cal->add_flag("--robust", cf.robust,
                  "custom study: robust Wald, one cluster per observation");
  c_cal->add_option("--n", cf.sample_sizes, "sample sizes")
      ->delimiter(',');
  c_cal->add_option("--reps", cf.replicates, "replicates per sample size");
  c_cal->add_option("--seed", cf.seed, "master seed");
  c_cal->add_option("--alpha", cf.alpha, "test level");
  c_cal->add_option("--workers", cf.workers,
                    "worker threads (default: LVM_INFER_THREADS or 1)");
  c_cal->add_option("--correction", cf.corrections, correction_help)
      ->delimiter(',');
  c_cal->add_option("--format", cf.format, "output format")
      ->check(CLI::IsMember({"table", "csv"}));
  c_cal->add_option("--out", cf.out, "write the report to this file");
  cf.tolerances.attach(c_cal);

  detail::simulate_flags sf;
  CLI::App* c_sim = app.add_subcommand(
      "simulate", "draw one dataset from a model and write it as CSV");
  c_sim->add_option("--model", sf.model, "model definition file")->required();
  c_sim->add_option("--truth", sf.truth,
                    "generative values as name=value terms "
                    "(unlisted parameters are 0)");
  c_sim->add_option("--n", sf.n, "number of observations")->required();
  c_sim->add_option("--seed", sf.seed, "master seed");
  c_sim->add_option("--out", sf.out, "write the CSV to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_fit->parsed()) return detail::cmd_fit(ff, out, err);
    if (c_test->parsed()) return detail::cmd_test(tf, out, err);
    if (c_cal->parsed()) return detail::cmd_calibrate(cf, out, err);
    return detail::cmd_simulate(sf, out, err);
  } catch (const io_error& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const parse_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const model_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const data_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace lvmi
