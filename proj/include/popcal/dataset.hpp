/*
 * Copyright (C) 2026 The popcal authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "popcal/errors.hpp"

#include <Eigen/Dense>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace popcal {

/// n x d real matrix of population observations (rows are unordered individuals).
struct Dataset {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }

  /// Column as a contiguous vector.
  std::vector<double> column(std::size_t j) const {
    const auto c = values.col(static_cast<Eigen::Index>(j));
    return {c.data(), c.data() + c.size()};
  }

  std::size_t column_index(const std::string& name) const {
    for (std::size_t j = 0; j < columns.size(); ++j)
      if (columns[j] == name) return j;
    throw DataError("dataset has no column '" + name + "'");
  }
};

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ' || cell.back() == '\t')) cell.pop_back();
    std::size_t start = 0;
    while (start < cell.size() && (cell[start] == ' ' || cell[start] == '\t')) ++start;
    out.push_back(cell.substr(start));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline Dataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("data file '" + path + "' is empty");
  Dataset ds;
  ds.columns = detail::split_csv_line(line);
  if (ds.columns.empty()) throw DataError("data file '" + path + "' has an empty header");
  for (const auto& c : ds.columns) {
    char* end = nullptr;
    std::strtod(c.c_str(), &end);
    if (!c.empty() && end == c.c_str() + c.size())
      throw DataError("data file '" + path + "' must start with a header row");
  }
  std::vector<double> flat;
  std::size_t line_no = 1, n = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != ds.columns.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(ds.columns.size()) +
                      " fields, found " + std::to_string(cells.size()));
    for (const auto& c : cells) {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(c.c_str(), &end);
      if (c.empty() || end != c.c_str() + c.size() || errno == ERANGE)
        throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric field '" + c + "'");
      flat.push_back(v);
    }
    ++n;
  }
  if (n == 0) throw DataError("data file '" + path + "' has no observations");
  const auto d = ds.columns.size();
  ds.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      ds.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = flat[i * d + j];
  return ds;
}

inline void write_csv(std::ostream& out, const Dataset& ds) {
  for (std::size_t j = 0; j < ds.columns.size(); ++j) out << (j ? "," : "") << ds.columns[j];
  out << '\n';
  for (Eigen::Index i = 0; i < ds.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.values.cols(); ++j) out << (j ? "," : "") << format_double(ds.values(i, j));
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, ds);
}

/// Checks that a dataset carries exactly the expected header.
inline void require_columns(const Dataset& ds, const std::vector<std::string>& expected, const std::string& what) {
  if (ds.columns != expected) {
    std::string want;
    for (const auto& c : expected) want += (want.empty() ? "" : ",") + c;
    throw DataError(what + " must have header '" + want + "'");
  }
}

}  // namespace popcal
