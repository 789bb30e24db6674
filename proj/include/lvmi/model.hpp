#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lvmi/errors.hpp"

// Symbolic model layer: a small path-diagram DSL is parsed into a model_spec
// (variables, edges, intercept/variance slots), which index_parameters turns
// into a parameter_table mapping each free parameter to the matrix cells it
// occupies. The model family is
//
//   measurement:  Y_i = nu + eta_i Lambda + X_i K + eps_i
//   structural:   eta_i = alpha + eta_i B + X_i Gamma + zeta_i
//
// with every vector a row vector, eps ~ N(0, Sigma_eps), zeta ~ N(0, Sigma_zeta).

namespace lvmi {

// ---------------------------------------------------------------------------
// model_spec
// ---------------------------------------------------------------------------

enum class slot_kind { free, fixed, shared };

/** Coefficient slot on an edge/intercept/variance: free, fixed, or shared. */
struct slot {
  slot_kind kind = slot_kind::free;
  double value = 0.0;   // meaningful for fixed slots
  std::string label;    // meaningful for shared slots

  bool operator==(const slot&) const = default;
};

inline slot free_slot() { return {slot_kind::free, 0.0, ""}; }
inline slot fixed_slot(double v) { return {slot_kind::fixed, v, ""}; }
inline slot shared_slot(std::string label) {
  return {slot_kind::shared, 0.0, std::move(label)};
}

/** One regression arrow: target ~ coef * source. */
struct edge {
  std::string target;
  std::string source;
  slot coef;

  bool operator==(const edge&) const = default;
};

/** One residual covariance: a ~~ coef * b with a != b. */
struct cov_edge {
  std::string a;
  std::string b;
  slot coef;

  bool operator==(const cov_edge&) const = default;
};

/**
 * A parsed and default-completed model. Variables are partitioned into
 * endogenous (measured outcomes), latent, and exogenous (covariates);
 * intercept and residual-variance slots are stored per variable, residual
 * covariances as explicit edges.
 */
struct model_spec {
  std::vector<std::string> endogenous;
  std::vector<std::string> latent;
  std::vector<std::string> exogenous;

  std::vector<edge> measurement_edges;  // target endogenous
  std::vector<edge> structural_edges;   // target latent
  std::vector<cov_edge> covariance_edges;

  std::vector<slot> nu;        // endogenous intercepts (default free)
  std::vector<slot> alpha;     // latent intercepts (default fixed 0)
  std::vector<slot> eps_var;   // endogenous residual variances (default free)
  std::vector<slot> zeta_var;  // latent residual variances (default free)

  bool operator==(const model_spec&) const = default;

  int index_of_endogenous(const std::string& name) const {
    auto it = std::find(endogenous.begin(), endogenous.end(), name);
    return it == endogenous.end() ? -1
                                  : static_cast<int>(it - endogenous.begin());
  }
  int index_of_latent(const std::string& name) const {
    auto it = std::find(latent.begin(), latent.end(), name);
    return it == latent.end() ? -1 : static_cast<int>(it - latent.begin());
  }
  int index_of_exogenous(const std::string& name) const {
    auto it = std::find(exogenous.begin(), exogenous.end(), name);
    return it == exogenous.end() ? -1
                                 : static_cast<int>(it - exogenous.begin());
  }
};

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

namespace detail {

struct raw_term {
  bool intercept = false;  // the literal `1`
  std::string name;        // variable name when !intercept
  slot coef;
  int line = 0;
  int column = 0;
};

struct raw_statement {
  std::string lhs;
  bool covariance = false;  // `~~` vs `~`
  std::vector<raw_term> terms;
  int line = 0;
  int column = 0;
};

inline bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}
inline bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

/** Cursor over one logical statement (newline/';'-delimited, '#' comments). */
class statement_lexer {
 public:
  statement_lexer(std::string_view text, int line, int first_column)
      : text_(text), line_(line), column_(first_column) {}

  void skip_space() {
    while (pos_ < text_.size() &&
           (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) {
      advance();
    }
  }

  bool eof() {
    skip_space();
    return pos_ >= text_.size();
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  int line() const { return line_; }
  int column() const { return column_; }

  [[noreturn]] void fail(const std::string& message) const {
    throw parse_error(message, line_, column_);
  }

  std::string ident() {
    skip_space();
    if (pos_ >= text_.size() || !is_ident_start(text_[pos_])) {
      fail("expected an identifier");
    }
    std::string out;
    while (pos_ < text_.size() && is_ident_char(text_[pos_])) {
      out.push_back(text_[pos_]);
      advance();
    }
    return out;
  }

  double number() {
    skip_space();
    const char* begin = text_.data() + pos_;
    const char* end = text_.data() + text_.size();
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr == begin) fail("expected a number");
    for (const char* c = begin; c != ptr; ++c) advance();
    return value;
  }

  bool try_consume(char c) {
    skip_space();
    if (pos_ < text_.size() && text_[pos_] == c) {
      advance();
      return true;
    }
    return false;
  }

  void expect(char c, const std::string& what) {
    if (!try_consume(c)) fail("expected '" + std::string(1, c) + "' " + what);
  }

 private:
  void advance() {
    ++pos_;
    ++column_;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  int line_;
  int column_;
};

inline raw_term parse_term(statement_lexer& lex) {
  raw_term term;
  term.line = lex.line();
  lex.skip_space();
  term.column = lex.column();
  const char c = lex.peek();
  if (c == '\0') lex.fail("expected a term");
  if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' ||
      c == '.') {
    const double value = lex.number();
    if (lex.try_consume('*')) {
      term.coef = fixed_slot(value);
    } else if (value == 1.0) {
      term.intercept = true;  // bare `1`
      return term;
    } else {
      lex.fail("a bare number must be 1 (intercept); use value*variable to "
               "fix a coefficient");
    }
  } else if (is_ident_start(c)) {
    const std::string first = lex.ident();
    if (lex.try_consume('*')) {
      term.coef = shared_slot(first);
    } else {
      term.name = first;
      return term;
    }
  } else {
    lex.fail("expected a term");
  }
  // After `prefix*`: either a variable or the intercept literal `1`.
  lex.skip_space();
  if (std::isdigit(static_cast<unsigned char>(lex.peek()))) {
    if (lex.number() != 1.0) {
      lex.fail("expected a variable or the intercept '1' after '*'");
    }
    term.intercept = true;
    return term;
  }
  if (!is_ident_start(lex.peek())) lex.fail("expected a variable after '*'");
  term.name = lex.ident();
  return term;
}

inline std::optional<raw_statement> parse_statement(std::string_view text,
                                                    int line,
                                                    int first_column) {
  statement_lexer lex(text, line, first_column);
  if (lex.eof()) return std::nullopt;
  raw_statement stmt;
  stmt.line = lex.line();
  stmt.column = lex.column();
  stmt.lhs = lex.ident();
  lex.expect('~', "after the left-hand variable");
  stmt.covariance = lex.try_consume('~');
  stmt.terms.push_back(parse_term(lex));
  while (lex.try_consume('+')) stmt.terms.push_back(parse_term(lex));
  if (!lex.eof()) lex.fail("unexpected trailing input");
  return stmt;
}

/** Split into statements on newlines and ';', strip '#' comments. */
inline std::vector<raw_statement> parse_statements(const std::string& text) {
  std::vector<raw_statement> out;
  int line = 1;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view physical(text.data() + pos, eol - pos);
    if (const auto hash = physical.find('#'); hash != std::string_view::npos) {
      physical = physical.substr(0, hash);
    }
    int column = 1;
    std::size_t start = 0;
    while (start <= physical.size()) {
      std::size_t semi = physical.find(';', start);
      if (semi == std::string_view::npos) semi = physical.size();
      const auto piece = physical.substr(start, semi - start);
      if (auto stmt = parse_statement(piece, line, column)) {
        out.push_back(std::move(*stmt));
      }
      column += static_cast<int>(piece.size()) + 1;
      start = semi + 1;
    }
    pos = eol + 1;
    ++line;
  }
  return out;
}

}  // namespace detail

/**
 * Parse the model DSL into a model_spec.
 *
 * Grammar (one statement per line or ';'-separated, '#' comments):
 *   target ~ term + term + ...     regression (measurement or structural)
 *   a ~~ term                      residual covariance; `a ~~ a` variance
 *   term := [number* | label*] variable | [number* | label*] 1
 * `1` declares an intercept (frees a latent intercept; `0*1` fixes one).
 *
 * Classification: a name is latent when it appears as a regression source
 * and also as a regression target or inside a `~~` statement; regression
 * targets that are not latent are endogenous; remaining sources are
 * exogenous covariates.
 *
 * Defaults: endogenous intercepts free; latent intercepts fixed at 0 until
 * freed with `eta ~ 1`; all residual variances free; for each latent the
 * first declared loading is fixed to 1 unless the user fixed one of its
 * loadings (or its residual variance) explicitly.
 */
inline model_spec parse_model(const std::string& text) {
  const auto statements = detail::parse_statements(text);
  if (statements.empty()) {
    throw parse_error("model text contains no statements", 1, 1);
  }

  // --- classify variables -------------------------------------------------
  std::vector<std::string> appearance;  // insertion order of every name
  auto note = [&appearance](const std::string& name) {
    if (std::find(appearance.begin(), appearance.end(), name) ==
        appearance.end()) {
      appearance.push_back(name);
    }
  };
  std::set<std::string> reg_lhs, reg_src, cov_vars;
  for (const auto& s : statements) {
    note(s.lhs);
    if (s.covariance) {
      cov_vars.insert(s.lhs);
      for (const auto& t : s.terms) {
        if (t.intercept) {
          throw parse_error("'1' is not valid in a covariance statement",
                            t.line, t.column);
        }
        note(t.name);
        cov_vars.insert(t.name);
      }
    } else {
      reg_lhs.insert(s.lhs);
      for (const auto& t : s.terms) {
        if (t.intercept) continue;
        note(t.name);
        reg_src.insert(t.name);
      }
    }
  }

  model_spec spec;
  for (const auto& name : appearance) {
    const bool is_src = reg_src.count(name) > 0;
    const bool is_lhs = reg_lhs.count(name) > 0;
    const bool in_cov = cov_vars.count(name) > 0;
    if (is_src && (is_lhs || in_cov)) {
      spec.latent.push_back(name);
    } else if (is_lhs) {
      spec.endogenous.push_back(name);
    } else if (is_src) {
      spec.exogenous.push_back(name);
    } else {
      // appears only inside `~~` statements
      throw model_error("variable '" + name +
                        "' appears only in covariance statements and cannot "
                        "be classified");
    }
  }
  if (spec.endogenous.empty()) {
    throw model_error("model declares no endogenous (measured) variable");
  }

  spec.nu.assign(spec.endogenous.size(), free_slot());
  spec.alpha.assign(spec.latent.size(), fixed_slot(0.0));
  spec.eps_var.assign(spec.endogenous.size(), free_slot());
  spec.zeta_var.assign(spec.latent.size(), free_slot());

  std::vector<bool> eps_var_set(spec.endogenous.size(), false);
  std::vector<bool> zeta_var_set(spec.latent.size(), false);
  std::vector<bool> nu_set(spec.endogenous.size(), false);
  std::vector<bool> alpha_set(spec.latent.size(), false);

  // --- assemble edges -----------------------------------------------------
  auto duplicate_regression = [&spec](const std::string& target,
                                      const std::string& source) {
    auto hit = [&](const std::vector<edge>& edges) {
      return std::any_of(edges.begin(), edges.end(), [&](const edge& e) {
        return e.target == target && e.source == source;
      });
    };
    return hit(spec.measurement_edges) || hit(spec.structural_edges);
  };

  for (const auto& s : statements) {
    if (!s.covariance) {
      const int endo = spec.index_of_endogenous(s.lhs);
      const int lat = spec.index_of_latent(s.lhs);
      for (const auto& t : s.terms) {
        if (t.intercept) {
          if (endo >= 0) {
            if (nu_set[endo]) {
              throw parse_error("intercept of '" + s.lhs +
                                    "' declared more than once",
                                t.line, t.column);
            }
            nu_set[endo] = true;
            spec.nu[endo] = t.coef;  // bare `1` keeps the free default
          } else {
            if (alpha_set[lat]) {
              throw parse_error("intercept of '" + s.lhs +
                                    "' declared more than once",
                                t.line, t.column);
            }
            alpha_set[lat] = true;
            spec.alpha[lat] = t.coef;  // bare `1` frees the latent intercept
          }
          continue;
        }
        if (lat >= 0 && t.name == s.lhs) {
          throw parse_error("latent variable '" + s.lhs +
                                "' cannot regress on itself",
                            t.line, t.column);
        }
        if (duplicate_regression(s.lhs, t.name)) {
          throw parse_error("duplicate edge '" + s.lhs + " ~ " + t.name + "'",
                            t.line, t.column);
        }
        edge e{s.lhs, t.name, t.coef};
        if (endo >= 0) {
          spec.measurement_edges.push_back(std::move(e));
        } else {
          spec.structural_edges.push_back(std::move(e));
        }
      }
      continue;
    }

    // covariance statement
    const auto side = [&spec](const std::string& name, int line, int column) {
      if (spec.index_of_endogenous(name) >= 0) return 0;
      if (spec.index_of_latent(name) >= 0) return 1;
      throw parse_error("'" + name +
                            "' is neither endogenous nor latent; covariances "
                            "apply to residuals only",
                        line, column);
    };
    const int lhs_side = side(s.lhs, s.line, s.column);
    for (const auto& t : s.terms) {
      if (side(t.name, t.line, t.column) != lhs_side) {
        throw parse_error(
            "covariance between '" + s.lhs + "' and '" + t.name +
                "' mixes endogenous and latent residuals",
            t.line, t.column);
      }
      if (t.name == s.lhs) {  // variance
        if (lhs_side == 0) {
          const int i = spec.index_of_endogenous(s.lhs);
          if (eps_var_set[i]) {
            throw parse_error("variance of '" + s.lhs +
                                  "' declared more than once",
                              t.line, t.column);
          }
          eps_var_set[i] = true;
          spec.eps_var[i] = t.coef;
        } else {
          const int i = spec.index_of_latent(s.lhs);
          if (zeta_var_set[i]) {
            throw parse_error("variance of '" + s.lhs +
                                  "' declared more than once",
                              t.line, t.column);
          }
          zeta_var_set[i] = true;
          spec.zeta_var[i] = t.coef;
        }
        continue;
      }
      const bool dup = std::any_of(
          spec.covariance_edges.begin(), spec.covariance_edges.end(),
          [&](const cov_edge& c) {
            return (c.a == s.lhs && c.b == t.name) ||
                   (c.a == t.name && c.b == s.lhs);
          });
      if (dup) {
        throw parse_error("duplicate covariance '" + s.lhs + " ~~ " + t.name +
                              "'",
                          t.line, t.column);
      }
      spec.covariance_edges.push_back(cov_edge{s.lhs, t.name, t.coef});
    }
  }

  // --- identifiability defaults & structural checks -----------------------
  for (std::size_t j = 0; j < spec.latent.size(); ++j) {
    const std::string& name = spec.latent[j];
    std::vector<edge*> loadings;
    for (auto& e : spec.measurement_edges) {
      if (e.source == name) loadings.push_back(&e);
    }
    if (loadings.empty()) {
      throw model_error("latent variable '" + name +
                        "' has no measurement edge");
    }
    const bool any_fixed_loading =
        std::any_of(loadings.begin(), loadings.end(), [](const edge* e) {
          return e->coef.kind == slot_kind::fixed;
        });
    const bool variance_fixed = spec.zeta_var[j].kind == slot_kind::fixed;
    if (!any_fixed_loading && !variance_fixed) {
      loadings.front()->coef = fixed_slot(1.0);
    }
  }

  return spec;
}

/** Render a spec back to DSL text; parse(render(spec)) == spec. */
inline std::string render(const model_spec& spec) {
  std::ostringstream out;
  auto prefix = [](const slot& s) -> std::string {
    std::ostringstream p;
    switch (s.kind) {
      case slot_kind::free:
        return "";
      case slot_kind::fixed:
        p << s.value << "*";
        return p.str();
      case slot_kind::shared:
        return s.label + "*";
    }
    return "";
  };
  for (const auto& e : spec.measurement_edges) {
    out << e.target << " ~ " << prefix(e.coef) << e.source << "\n";
  }
  for (const auto& e : spec.structural_edges) {
    out << e.target << " ~ " << prefix(e.coef) << e.source << "\n";
  }
  for (std::size_t t = 0; t < spec.endogenous.size(); ++t) {
    const slot& s = spec.nu[t];
    if (s.kind != slot_kind::free) {
      out << spec.endogenous[t] << " ~ " << prefix(s) << "1\n";
    }
  }
  for (std::size_t j = 0; j < spec.latent.size(); ++j) {
    const slot& s = spec.alpha[j];
    if (!(s.kind == slot_kind::fixed && s.value == 0.0)) {
      out << spec.latent[j] << " ~ " << prefix(s) << "1\n";
    }
  }
  for (std::size_t t = 0; t < spec.endogenous.size(); ++t) {
    const slot& s = spec.eps_var[t];
    if (s.kind != slot_kind::free) {
      out << spec.endogenous[t] << " ~~ " << prefix(s) << spec.endogenous[t]
          << "\n";
    }
  }
  for (std::size_t j = 0; j < spec.latent.size(); ++j) {
    const slot& s = spec.zeta_var[j];
    if (s.kind != slot_kind::free) {
      out << spec.latent[j] << " ~~ " << prefix(s) << spec.latent[j] << "\n";
    }
  }
  for (const auto& c : spec.covariance_edges) {
    out << c.a << " ~~ " << prefix(c.coef) << c.b << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// parameter_table
// ---------------------------------------------------------------------------

enum class param_role { mean, variance, both };

enum class model_matrix { nu, alpha, lambda, kmat, gamma, bmat, eps, zeta };

/** One matrix cell owned by a free parameter. Sigma cells store row <= col. */
struct matrix_cell {
  model_matrix mat;
  int row;
  int col;

  bool operator==(const matrix_cell&) const = default;
};

/** One free parameter: display name, role, positivity, and its cells. */
struct parameter {
  std::string name;   // user label, or canonical "target~source" style name
  param_role role;
  bool positive;      // optimized on the log scale (all-diagonal Sigma cells)
  std::vector<matrix_cell> cells;
};

/** Values of the eight model matrices at a concrete parameter vector. */
struct model_matrices {
  Eigen::RowVectorXd nu;      // 1 x m
  Eigen::RowVectorXd alpha;   // 1 x q
  Eigen::MatrixXd lambda;     // q x m
  Eigen::MatrixXd kmat;       // l x m
  Eigen::MatrixXd gamma;      // l x q
  Eigen::MatrixXd bmat;       // q x q, zero diagonal
  Eigen::MatrixXd sigma_eps;  // m x m symmetric
  Eigen::MatrixXd sigma_zeta; // q x q symmetric
};

/**
 * The indexed free-parameter table: an ordered parameter list plus the fixed
 * base values of every matrix. Parameter order is nu, alpha, then Lambda, K,
 * Gamma, B free cells in declaration order, then Sigma_eps (diagonal before
 * declared covariances), then Sigma_zeta. Shared labels appear once, at the
 * position of their first occurrence.
 */
struct parameter_table {
  model_spec spec;
  int m = 0;  // endogenous count
  int q = 0;  // latent count
  int l = 0;  // exogenous count
  int p = 0;  // free parameters

  std::vector<parameter> params;
  std::vector<int> theta_mu;     // indices with role mean or both
  std::vector<int> theta_sigma;  // indices with role variance (corrected set)

  model_matrices base;  // fixed cells filled in, free cells zero

  int index_of(const std::string& name) const {
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k].name == name) return static_cast<int>(k);
    }
    return -1;
  }
};

namespace detail {

inline param_role cell_role(model_matrix mat) {
  switch (mat) {
    case model_matrix::nu:
    case model_matrix::alpha:
    case model_matrix::kmat:
    case model_matrix::gamma:
      return param_role::mean;
    case model_matrix::lambda:
    case model_matrix::bmat:
      return param_role::both;
    case model_matrix::eps:
    case model_matrix::zeta:
      return param_role::variance;
  }
  return param_role::both;
}

inline param_role merge_roles(param_role a, param_role b) {
  if (a == b) return a;
  return param_role::both;
}

inline bool diagonal_sigma_cell(const matrix_cell& c) {
  return (c.mat == model_matrix::eps || c.mat == model_matrix::zeta) &&
         c.row == c.col;
}

}  // namespace detail

/**
 * Index the free parameters of a spec in canonical order and collect the
 * fixed base matrices. Shared labels unify cells (possibly across matrices);
 * a user label colliding with the canonical name of a different parameter is
 * rejected.
 */
inline parameter_table index_parameters(const model_spec& spec) {
  parameter_table table;
  table.spec = spec;
  table.m = static_cast<int>(spec.endogenous.size());
  table.q = static_cast<int>(spec.latent.size());
  table.l = static_cast<int>(spec.exogenous.size());

  table.base.nu = Eigen::RowVectorXd::Zero(table.m);
  table.base.alpha = Eigen::RowVectorXd::Zero(table.q);
  table.base.lambda = Eigen::MatrixXd::Zero(table.q, table.m);
  table.base.kmat = Eigen::MatrixXd::Zero(table.l, table.m);
  table.base.gamma = Eigen::MatrixXd::Zero(table.l, table.q);
  table.base.bmat = Eigen::MatrixXd::Zero(table.q, table.q);
  table.base.sigma_eps = Eigen::MatrixXd::Zero(table.m, table.m);
  table.base.sigma_zeta = Eigen::MatrixXd::Zero(table.q, table.q);

  std::map<std::string, int> shared_index;

  auto place = [&](const slot& s, matrix_cell cell,
                   const std::string& auto_name) {
    switch (s.kind) {
      case slot_kind::fixed:
        switch (cell.mat) {
          case model_matrix::nu:
            table.base.nu(cell.col) = s.value;
            break;
          case model_matrix::alpha:
            table.base.alpha(cell.col) = s.value;
            break;
          case model_matrix::lambda:
            table.base.lambda(cell.row, cell.col) = s.value;
            break;
          case model_matrix::kmat:
            table.base.kmat(cell.row, cell.col) = s.value;
            break;
          case model_matrix::gamma:
            table.base.gamma(cell.row, cell.col) = s.value;
            break;
          case model_matrix::bmat:
            table.base.bmat(cell.row, cell.col) = s.value;
            break;
          case model_matrix::eps:
            table.base.sigma_eps(cell.row, cell.col) = s.value;
            table.base.sigma_eps(cell.col, cell.row) = s.value;
            break;
          case model_matrix::zeta:
            table.base.sigma_zeta(cell.row, cell.col) = s.value;
            table.base.sigma_zeta(cell.col, cell.row) = s.value;
            break;
        }
        return;
      case slot_kind::free: {
        parameter par;
        par.name = auto_name;
        par.role = detail::cell_role(cell.mat);
        par.positive = detail::diagonal_sigma_cell(cell);
        par.cells.push_back(cell);
        table.params.push_back(std::move(par));
        return;
      }
      case slot_kind::shared: {
        auto it = shared_index.find(s.label);
        if (it != shared_index.end()) {
          parameter& par = table.params[it->second];
          par.cells.push_back(cell);
          par.role = detail::merge_roles(par.role, detail::cell_role(cell.mat));
          par.positive =
              par.positive && detail::diagonal_sigma_cell(cell);
          return;
        }
        parameter par;
        par.name = s.label;
        par.role = detail::cell_role(cell.mat);
        par.positive = detail::diagonal_sigma_cell(cell);
        par.cells.push_back(cell);
        shared_index.emplace(s.label, static_cast<int>(table.params.size()));
        table.params.push_back(std::move(par));
        return;
      }
    }
  };

  // nu, alpha
  for (int t = 0; t < table.m; ++t) {
    place(spec.nu[t], {model_matrix::nu, 0, t}, spec.endogenous[t] + "~1");
  }
  for (int j = 0; j < table.q; ++j) {
    place(spec.alpha[j], {model_matrix::alpha, 0, j}, spec.latent[j] + "~1");
  }
  // Lambda, K (measurement edges in declaration order)
  for (const auto& e : spec.measurement_edges) {
    const int t = spec.index_of_endogenous(e.target);
    const int j = spec.index_of_latent(e.source);
    if (j >= 0) {
      place(e.coef, {model_matrix::lambda, j, t}, e.target + "~" + e.source);
    }
  }
  for (const auto& e : spec.measurement_edges) {
    const int t = spec.index_of_endogenous(e.target);
    const int x = spec.index_of_exogenous(e.source);
    if (x >= 0) {
      place(e.coef, {model_matrix::kmat, x, t}, e.target + "~" + e.source);
    }
  }
  // Gamma, B (structural edges in declaration order)
  for (const auto& e : spec.structural_edges) {
    const int j = spec.index_of_latent(e.target);
    const int x = spec.index_of_exogenous(e.source);
    if (x >= 0) {
      place(e.coef, {model_matrix::gamma, x, j}, e.target + "~" + e.source);
    }
  }
  for (const auto& e : spec.structural_edges) {
    const int jt = spec.index_of_latent(e.target);
    const int js = spec.index_of_latent(e.source);
    if (js >= 0) {
      if (js == jt) {
        throw model_error("latent variable '" + e.target +
                          "' cannot regress on itself");
      }
      place(e.coef, {model_matrix::bmat, js, jt}, e.target + "~" + e.source);
    }
  }
  // Sigma_eps: diagonal, then declared endogenous covariances
  for (int t = 0; t < table.m; ++t) {
    place(spec.eps_var[t], {model_matrix::eps, t, t},
          spec.endogenous[t] + "~~" + spec.endogenous[t]);
  }
  for (const auto& c : spec.covariance_edges) {
    const int a = spec.index_of_endogenous(c.a);
    const int b = spec.index_of_endogenous(c.b);
    if (a >= 0) {
      place(c.coef, {model_matrix::eps, std::min(a, b), std::max(a, b)},
            c.a + "~~" + c.b);
    }
  }
  // Sigma_zeta: diagonal, then declared latent covariances
  for (int j = 0; j < table.q; ++j) {
    place(spec.zeta_var[j], {model_matrix::zeta, j, j},
          spec.latent[j] + "~~" + spec.latent[j]);
  }
  for (const auto& c : spec.covariance_edges) {
    const int a = spec.index_of_latent(c.a);
    const int b = spec.index_of_latent(c.b);
    if (a >= 0) {
      place(c.coef, {model_matrix::zeta, std::min(a, b), std::max(a, b)},
            c.a + "~~" + c.b);
    }
  }

  table.p = static_cast<int>(table.params.size());

  // Name collisions between user labels and other parameters' names.
  {
    std::set<std::string> seen;
    for (const auto& par : table.params) {
      if (!seen.insert(par.name).second) {
        throw model_error("parameter label '" + par.name +
                          "' collides with another parameter");
      }
    }
  }

  for (int k = 0; k < table.p; ++k) {
    if (table.params[k].role == param_role::variance) {
      table.theta_sigma.push_back(k);
    } else {
      table.theta_mu.push_back(k);
    }
  }
  return table;
}

/** Fill the eight matrices from a parameter vector. */
inline model_matrices assemble(const parameter_table& table,
                               const Eigen::VectorXd& theta) {
  if (theta.size() != table.p) {
    throw std::invalid_argument("assemble: parameter vector has length " +
                                std::to_string(theta.size()) + ", expected " +
                                std::to_string(table.p));
  }
  model_matrices mm = table.base;
  for (int k = 0; k < table.p; ++k) {
    for (const auto& cell : table.params[k].cells) {
      switch (cell.mat) {
        case model_matrix::nu:
          mm.nu(cell.col) = theta(k);
          break;
        case model_matrix::alpha:
          mm.alpha(cell.col) = theta(k);
          break;
        case model_matrix::lambda:
          mm.lambda(cell.row, cell.col) = theta(k);
          break;
        case model_matrix::kmat:
          mm.kmat(cell.row, cell.col) = theta(k);
          break;
        case model_matrix::gamma:
          mm.gamma(cell.row, cell.col) = theta(k);
          break;
        case model_matrix::bmat:
          mm.bmat(cell.row, cell.col) = theta(k);
          break;
        case model_matrix::eps:
          mm.sigma_eps(cell.row, cell.col) = theta(k);
          mm.sigma_eps(cell.col, cell.row) = theta(k);
          break;
        case model_matrix::zeta:
          mm.sigma_zeta(cell.row, cell.col) = theta(k);
          mm.sigma_zeta(cell.col, cell.row) = theta(k);
          break;
      }
    }
  }
  return mm;
}

/**
 * Validate a spec against a data header: every endogenous and exogenous name
 * must be a column, and (1 - B) must be invertible with free B cells at their
 * starting value 0. Returns human-readable problems; empty means valid.
 */
inline std::vector<std::string> validate(const model_spec& spec,
                                         const std::vector<std::string>& header) {
  std::vector<std::string> errors;
  auto has_column = [&header](const std::string& name) {
    return std::find(header.begin(), header.end(), name) != header.end();
  };
  for (const auto& name : spec.endogenous) {
    if (!has_column(name)) {
      errors.push_back("endogenous variable '" + name +
                       "' is not a data column");
    }
  }
  for (const auto& name : spec.exogenous) {
    if (!has_column(name)) {
      errors.push_back("exogenous variable '" + name +
                       "' is not a data column");
    }
  }
  const int q = static_cast<int>(spec.latent.size());
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(q, q);
  for (const auto& e : spec.structural_edges) {
    const int js = spec.index_of_latent(e.source);
    const int jt = spec.index_of_latent(e.target);
    if (js >= 0 && jt >= 0 && e.coef.kind == slot_kind::fixed) {
      b(js, jt) = e.coef.value;
    }
  }
  if (q > 0) {
    const Eigen::MatrixXd eye_minus_b = Eigen::MatrixXd::Identity(q, q) - b;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(eye_minus_b);
    if (!lu.isInvertible()) {
      errors.push_back(
          "(1 - B) is singular at the starting values; the structural system "
          "has no reduced form");
    }
  }
  return errors;
}

/** Throwing wrapper around validate(). */
inline void validate_or_throw(const model_spec& spec,
                              const std::vector<std::string>& header) {
  const auto errors = validate(spec, header);
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) {
      if (!joined.empty()) joined += "; ";
      joined += e;
    }
    throw model_error(joined);
  }
}

}  // namespace lvmi
