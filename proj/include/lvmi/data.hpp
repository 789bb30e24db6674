#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "lvmi/errors.hpp"
#include "lvmi/model.hpp"

// Numeric rectangular data with named columns, plus a strict CSV reader and
// a round-trip-exact writer. Missing or non-numeric cells are rejected: the
// estimators assume complete data.

namespace lvmi {

/** A numeric table: column names plus an n x #columns value matrix. */
struct dataset {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;  // n x columns.size()

  int n() const { return static_cast<int>(values.rows()); }

  int column_index(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
  }

  bool has_column(const std::string& name) const {
    return column_index(name) >= 0;
  }

  /** n x names.size() matrix of the named columns, in the given order. */
  Eigen::MatrixXd select(const std::vector<std::string>& names) const {
    Eigen::MatrixXd out(values.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t j = 0; j < names.size(); ++j) {
      const int c = column_index(names[j]);
      if (c < 0) throw data_error("no column named '" + names[j] + "'");
      out.col(static_cast<Eigen::Index>(j)) = values.col(c);
    }
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) {
    --e;
  }
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

}  // namespace detail

/**
 * Read a headered CSV of numbers. Every cell must parse as a finite double;
 * empty cells, NA markers, and ragged rows raise data_error with the
 * offending row number (1-based, header = row 1).
 */
inline dataset read_csv(std::istream& in, const std::string& origin = "<csv>") {
  std::string line;
  if (!std::getline(in, line)) {
    throw data_error(origin + ": empty input, expected a header row");
  }
  dataset ds;
  ds.columns = detail::split_csv_line(line);
  if (ds.columns.empty() ||
      std::any_of(ds.columns.begin(), ds.columns.end(),
                  [](const std::string& c) { return c.empty(); })) {
    throw data_error(origin + ": header row has an empty column name");
  }
  {
    auto sorted = ds.columns;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw data_error(origin + ": duplicate column name in header");
    }
  }

  const std::size_t width = ds.columns.size();
  std::vector<double> cells;
  int rows = 0;
  int row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (detail::trim(line).empty()) continue;  // ignore blank lines
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != width) {
      throw data_error(origin + ": row " + std::to_string(row_number) +
                       " has " + std::to_string(fields.size()) +
                       " fields, expected " + std::to_string(width));
    }
    for (std::size_t j = 0; j < width; ++j) {
      const std::string& f = fields[j];
      if (f.empty() || f == "NA" || f == "na" || f == "NaN" || f == "nan") {
        throw data_error(origin + ": missing value in column '" +
                         ds.columns[j] + "', row " +
                         std::to_string(row_number) +
                         "; complete data is required");
      }
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != f.size() || !std::isfinite(v)) {
        throw data_error(origin + ": non-numeric value '" + f +
                         "' in column '" + ds.columns[j] + "', row " +
                         std::to_string(row_number));
      }
      cells.push_back(v);
    }
    ++rows;
  }
  ds.values.resize(rows, static_cast<Eigen::Index>(width));
  for (int i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      ds.values(i, static_cast<Eigen::Index>(j)) = cells[i * width + j];
    }
  }
  return ds;
}

/** Read a headered CSV file; io_error when the file cannot be opened. */
inline dataset read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path + "' for reading");
  return read_csv(in, path);
}

/** Write a dataset as CSV with round-trip-exact (%.17g) numbers. */
inline void write_csv(const dataset& ds, std::ostream& out) {
  for (std::size_t j = 0; j < ds.columns.size(); ++j) {
    if (j) out << ',';
    out << ds.columns[j];
  }
  out << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < ds.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.values.cols(); ++j) {
      if (j) out << ',';
      std::snprintf(buf, sizeof buf, "%.17g", ds.values(i, j));
      out << buf;
    }
    out << '\n';
  }
}

/** Write a dataset to a CSV file; io_error when the file cannot be opened. */
inline void write_csv_file(const dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  write_csv(ds, out);
  if (!out) throw io_error("failed while writing '" + path + "'");
}

}  // namespace lvmi
