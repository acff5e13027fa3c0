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

#include "popcal/dataset.hpp"
#include "popcal/distributions.hpp"
#include "popcal/errors.hpp"
#include "popcal/inference.hpp"
#include "popcal/parallel.hpp"
#include "popcal/stats.hpp"
#include "popcal/summaries.hpp"

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace popcal {

/// Pointwise (2.5%, 50%, 97.5%) quantiles over draws, one row per grid point.
struct BandTable {
  std::vector<double> grid, lower, median, upper;
  std::optional<std::vector<double>> truth;

  std::size_t size() const { return grid.size(); }

  Dataset dataset() const {
    Dataset ds;
    ds.columns = {"grid", "lower", "median", "upper"};
    if (truth) ds.columns.push_back("truth");
    ds.values.resize(static_cast<Eigen::Index>(grid.size()), static_cast<Eigen::Index>(ds.columns.size()));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      ds.values(r, 0) = grid[i];
      ds.values(r, 1) = lower[i];
      ds.values(r, 2) = median[i];
      ds.values(r, 3) = upper[i];
      if (truth) ds.values(r, 4) = (*truth)[i];
    }
    return ds;
  }

  static BandTable from_dataset(const Dataset& ds) {
    if (ds.cols() < 4 || ds.columns[0] != "grid" || ds.columns[1] != "lower" || ds.columns[2] != "median" ||
        ds.columns[3] != "upper")
      throw DataError("band table must have columns grid,lower,median,upper[,truth]");
    BandTable b;
    b.grid = ds.column(0);
    b.lower = ds.column(1);
    b.median = ds.column(2);
    b.upper = ds.column(3);
    if (ds.cols() > 4) b.truth = ds.column(4);
    return b;
  }

  /// Fraction of grid points whose truth lies within [lower, upper], restricted to [lo, hi].
  double coverage(double lo = -kInf, double hi = kInf) const {
    if (!truth) throw std::logic_error("band table has no truth column");
    std::size_t in = 0, total = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i] < lo || grid[i] > hi) continue;
      ++total;
      if ((*truth)[i] >= lower[i] && (*truth)[i] <= upper[i]) ++in;
    }
    return total == 0 ? 0.0 : static_cast<double>(in) / static_cast<double>(total);
  }
};

inline std::vector<double> linear_grid(double lo, double hi, std::size_t points) {
  if (points < 2) throw std::invalid_argument("grid needs at least two points");
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

/// Bands from a draws x grid matrix (rows are draws).
inline BandTable pointwise_bands(std::vector<double> grid, const std::vector<std::vector<double>>& curves) {
  if (curves.empty()) throw DiagnosticError("no draws to form bands from");
  BandTable b;
  b.grid = std::move(grid);
  std::vector<double> column(curves.size());
  for (std::size_t i = 0; i < b.grid.size(); ++i) {
    for (std::size_t k = 0; k < curves.size(); ++k) column[k] = curves[k][i];
    std::sort(column.begin(), column.end());
    b.lower.push_back(quantile_sorted(column, 0.025));
    b.median.push_back(quantile_sorted(column, 0.5));
    b.upper.push_back(quantile_sorted(column, 0.975));
  }
  return b;
}

/// Evenly spaced indices into [0, size); every index once when draws >= size.
inline std::vector<std::size_t> systematic_indices(std::size_t size, std::size_t draws) {
  std::vector<std::size_t> idx;
  if (draws >= size) {
    for (std::size_t i = 0; i < size; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < draws; ++k) idx.push_back(k * size / draws);
  return idx;
}

/// Density bands of marginal `parameter` of f_theta over the rows of
/// `theta_samples` (full theta vectors). Rows the family rejects are skipped.
inline BandTable posterior_density_bands(const Eigen::MatrixXd& theta_samples, const PopulationFamily& family,
                                         std::size_t parameter, std::vector<double> grid) {
  std::vector<std::vector<double>> curves;
  for (Eigen::Index r = 0; r < theta_samples.rows(); ++r) {
    const Eigen::VectorXd row = theta_samples.row(r).transpose();
    std::optional<PopulationDistribution> f;
    try {
      f = family.build(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    } catch (const std::domain_error&) {
      continue;
    }
    const auto& m = marginal(*f, parameter);
    std::vector<double> c(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) c[i] = density(m, grid[i]);
    curves.push_back(std::move(c));
  }
  return pointwise_bands(std::move(grid), curves);
}

/// Full theta rows of the retained chain states.
inline Eigen::MatrixXd theta_samples(const PosteriorChain& chain, const ParameterLayout& layout, double burn_in) {
  const auto kept = chain.post_burn_in(burn_in);
  Eigen::MatrixXd out(kept.rows(), static_cast<Eigen::Index>(layout.theta_dim));
  for (Eigen::Index r = 0; r < kept.rows(); ++r) {
    const Eigen::VectorXd row = kept.row(r).transpose();
    const auto full = layout.expand(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    for (std::size_t j = 0; j < layout.theta_dim; ++j) out(r, static_cast<Eigen::Index>(j)) = full[j];
  }
  return out;
}

struct PredictiveSettings {
  std::size_t draws = 200;
  double burn_in = 0.2;
  /// Summary mode compares S(.) per coordinate; otherwise a KDE of `column` on `grid`.
  bool summaries = false;
  std::size_t column = 0;
  std::vector<double> grid;
  /// KDE bandwidth for every curve; defaults to Silverman's rule on the observed column.
  std::optional<double> bandwidth;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

struct PredictiveResult {
  BandTable bands;  // truth column holds the observed KDE or summaries
  std::size_t draws = 0;
  std::size_t failures = 0;
};

inline PredictiveResult posterior_predictive_check(const PosteriorChain& chain, const CalibrationProblem& problem,
                                                   const PredictiveSettings& settings) {
  if (chain.size() == 0) throw DiagnosticError("empty chain");
  const auto kept = chain.post_burn_in(settings.burn_in);
  if (kept.rows() == 0) throw DiagnosticError("no chain states after burn-in");
  const auto idx = systematic_indices(static_cast<std::size_t>(kept.rows()), settings.draws);

  std::vector<double> grid, observed;
  std::optional<double> bw = settings.bandwidth;
  if (settings.summaries) {
    if (!problem.summary) throw ConfigError("summary predictive check needs a summary statistic");
    const Eigen::VectorXd s = (*problem.summary)(problem.observed);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      grid.push_back(static_cast<double>(i));
      observed.push_back(s(i));
    }
  } else {
    if (settings.grid.empty()) throw ConfigError("KDE predictive check needs a grid");
    if (settings.column >= problem.observed.cols()) throw ConfigError("predictive column out of range");
    grid = settings.grid;
    const auto col = problem.observed.column(settings.column);
    if (!bw) bw = silverman_bandwidth(col);
    observed = gaussian_kde(col, grid, bw);
  }

  std::vector<std::optional<std::vector<double>>> curves(idx.size());
  parallel_for(idx.size(), settings.threads, [&](std::size_t k) {
    const Eigen::VectorXd row = kept.row(static_cast<Eigen::Index>(idx[k])).transpose();
    auto s = substream(settings.seed, StreamTag::predictive, {k});
    const auto z = simulate_mock_population_free(
        problem, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), s);
    if (!z) return;
    if (settings.summaries) {
      const Eigen::VectorXd v = (*problem.summary)(*z);
      if (!v.allFinite()) return;
      curves[k] = std::vector<double>(v.data(), v.data() + v.size());
    } else {
      curves[k] = gaussian_kde(z->column(settings.column), grid, bw);
    }
  });
  std::vector<std::vector<double>> ok;
  PredictiveResult out;
  for (auto& c : curves) {
    if (c) ok.push_back(std::move(*c));
    else ++out.failures;
  }
  out.draws = idx.size();
  if (2 * out.failures > idx.size())
    throw DiagnosticError("more than half of the posterior predictive simulations failed");
  out.bands = pointwise_bands(grid, ok);
  out.bands.truth = observed;
  return out;
}

}  // namespace popcal
