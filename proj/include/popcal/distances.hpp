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
#include "popcal/errors.hpp"
#include "popcal/stats.hpp"
#include "popcal/summaries.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace popcal {

namespace detail {

inline std::vector<double> sorted_copy(std::span<const double> xs) {
  std::vector<double> v(xs.begin(), xs.end());
  std::sort(v.begin(), v.end());
  return v;
}

/// Empirical quantile at p with order statistic x_(k) sitting at k/(n+1).
inline double plotting_quantile(const std::vector<double>& sorted, double p) {
  const double h = p * static_cast<double>(sorted.size() + 1);
  if (h <= 1.0) return sorted.front();
  if (h >= static_cast<double>(sorted.size())) return sorted.back();
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  return sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1]);
}

inline void require_nonempty(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.empty() || b.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace detail

/// First Wasserstein distance between two empirical distributions.
inline double wasserstein1(std::span<const double> a, std::span<const double> b) {
  detail::require_nonempty(a, b, "wasserstein1");
  const auto sa = detail::sorted_copy(a), sb = detail::sorted_copy(b);
  if (sa.size() == sb.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) s += std::abs(sa[i] - sb[i]);
    return s / static_cast<double>(sa.size());
  }
  const std::size_t k = std::max(sa.size(), sb.size());
  double s = 0.0;
  for (std::size_t i = 1; i <= k; ++i) {
    const double p = static_cast<double>(i) / static_cast<double>(k + 1);
    s += std::abs(detail::plotting_quantile(sa, p) - detail::plotting_quantile(sb, p));
  }
  return s / static_cast<double>(k);
}

/// Two-sample Cramer-von Mises criterion from joint (mid-)ranks.
inline double cramer_von_mises(std::span<const double> a, std::span<const double> b) {
  detail::require_nonempty(a, b, "cramer_von_mises");
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::pair<double, int>> pooled;
  pooled.reserve(n + m);
  for (double x : a) pooled.emplace_back(x, 0);
  for (double x : b) pooled.emplace_back(x, 1);
  std::sort(pooled.begin(), pooled.end());
  double ua = 0.0, ub = 0.0;
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (pooled[k].second == 0) {
        const double d = mid_rank - static_cast<double>(++ia);
        ua += d * d;
      } else {
        const double d = mid_rank - static_cast<double>(++ib);
        ub += d * d;
      }
    }
    i = j;
  }
  const double dn = static_cast<double>(n), dm = static_cast<double>(m);
  const double u = dn * ua + dm * ub;
  const double t = u / (dn * dm * (dn + dm)) - (4.0 * dn * dm - 1.0) / (6.0 * (dn + dm));
  return std::max(t, 0.0);
}

namespace detail {

/// Sum over all ordered pairs of |a_i - b_j|, both inputs sorted.
inline double cross_abs_sum(const std::vector<double>& a, const std::vector<double>& b) {
  double total_b = 0.0;
  for (double x : b) total_b += x;
  double prefix = 0.0, s = 0.0;
  std::size_t j = 0;
  for (double x : a) {
    while (j < b.size() && b[j] <= x) prefix += b[j++];
    const double below = static_cast<double>(j), above = static_cast<double>(b.size() - j);
    s += x * below - prefix + (total_b - prefix) - x * above;
  }
  return s;
}

/// Sum over all ordered pairs of |a_i - a_j| for sorted a.
inline double within_abs_sum(const std::vector<double>& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * (2.0 * static_cast<double>(i) - n + 1.0);
  return 2.0 * s;
}

inline bool same_row_multiset(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  auto rows = [](const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> r(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(i)].push_back(m(i, j));
    std::sort(r.begin(), r.end());
    return r;
  };
  return rows(a) == rows(b);
}

}  // namespace detail

/// Energy distance 2E|A-B| - E|A-A'| - E|B-B'| over all pairs (V-statistic form).
inline double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("energy_distance: dimension mismatch");
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("energy_distance: empty input");
  if (detail::same_row_multiset(a, b)) return 0.0;
  const double n = static_cast<double>(a.rows()), m = static_cast<double>(b.rows());
  if (a.cols() == 1) {
    const auto sa = detail::sorted_copy({a.data(), static_cast<std::size_t>(a.rows())});
    const auto sb = detail::sorted_copy({b.data(), static_cast<std::size_t>(b.rows())});
    const double e = 2.0 * detail::cross_abs_sum(sa, sb) / (n * m) - detail::within_abs_sum(sa) / (n * n) -
                     detail::within_abs_sum(sb) / (m * m);
    return std::max(e, 0.0);
  }
  auto pair_sum = [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < y.rows(); ++j) s += (x.row(i) - y.row(j)).norm();
    return s;
  };
  const double e = 2.0 * pair_sum(a, b) / (n * m) - pair_sum(a, a) / (n * n) - pair_sum(b, b) / (m * m);
  return std::max(e, 0.0);
}

/// Discretised Anderson-Darling discrepancy of a simulated sample z against a
/// fixed observed sample y:
///
///   sum_i (F_z(y_i) - F_y(y_i))^2 / (F_y(y_i) (1 - F_y(y_i)))
///
/// F_y is the mid-rank empirical CDF of y, equal to (i - 0.5)/N at the i-th
/// order statistic when there are no ties. F_z interpolates linearly between
/// the mid-rank levels of z at its distinct values, with linear tails of width
/// equal to the mean spacing of z; it is therefore continuous in the data and
/// agrees with F_y exactly when z = y. The observed side is precomputed.
class AndersonDarling {
 public:
  explicit AndersonDarling(std::span<const double> observed) {
    if (observed.empty()) throw std::invalid_argument("anderson_darling: empty observed sample");
    const auto sorted = detail::sorted_copy(observed);
    const double n = static_cast<double>(sorted.size());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double level = (static_cast<double>(i) + 0.5 * static_cast<double>(j - i)) / n;
      values_.push_back(sorted[i]);
      levels_.push_back(level);
      counts_.push_back(static_cast<double>(j - i));
      i = j;
    }
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (double c : counts_) n += static_cast<std::size_t>(c);
    return n;
  }

  double operator()(std::span<const double> simulated) const {
    if (simulated.empty()) throw std::invalid_argument("anderson_darling: empty simulated sample");
    const InterpolatedCdf fz(simulated);
    double s = 0.0;
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < values_.size(); ++k) {
      const double u = levels_[k];
      const double d = fz.at_sorted(values_[k], cursor) - u;
      s += counts_[k] * d * d / (u * (1.0 - u));
    }
    return s;
  }

  /// Piecewise-linear mid-rank CDF of a sample; see class comment.
  class InterpolatedCdf {
   public:
    explicit InterpolatedCdf(std::span<const double> sample) {
      const auto sorted = detail::sorted_copy(sample);
      const double n = static_cast<double>(sorted.size());
      for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        knots_.push_back(sorted[i]);
        levels_.push_back((static_cast<double>(i) + 0.5 * static_cast<double>(j - i)) / n);
        i = j;
      }
      tail_ = knots_.size() > 1 ? (knots_.back() - knots_.front()) / (n - 1.0) : 0.0;
    }

    double operator()(double w) const {
      std::size_t cursor = 0;
      return at_sorted(w, cursor);
    }

    /// Evaluation for non-decreasing query sequences; `cursor` carries state.
    double at_sorted(double w, std::size_t& cursor) const {
      const double first = knots_.front(), last = knots_.back();
      if (w < first) {
        if (tail_ <= 0.0 || w <= first - tail_) return 0.0;
        return levels_.front() * (w - (first - tail_)) / tail_;
      }
      if (w > last) {
        if (tail_ <= 0.0 || w >= last + tail_) return 1.0;
        return levels_.back() + (1.0 - levels_.back()) * (w - last) / tail_;
      }
      while (cursor + 1 < knots_.size() && knots_[cursor + 1] <= w) ++cursor;
      if (knots_[cursor] == w || cursor + 1 == knots_.size()) return levels_[cursor];
      const double x0 = knots_[cursor], x1 = knots_[cursor + 1];
      return levels_[cursor] + (levels_[cursor + 1] - levels_[cursor]) * (w - x0) / (x1 - x0);
    }

   private:
    std::vector<double> knots_, levels_;
    double tail_ = 0.0;
  };

 private:
  std::vector<double> values_, levels_, counts_;
};

inline double anderson_darling(std::span<const double> observed, std::span<const double> simulated) {
  return AndersonDarling(observed)(simulated);
}

// ---------------------------------------------------------------------------
// Flow-cytometry composite discrepancy.

inline const std::vector<std::string> kFlowColumns{"time", "quenched", "M1", "M2"};

struct FlowCondition {
  double time = 0.0;
  bool quenched = false;
  auto operator<=>(const FlowCondition&) const = default;
};

/// Rows of a flow dataset grouped by experimental condition.
struct FlowGroups {
  std::vector<FlowCondition> conditions;
  std::vector<std::vector<double>> m1, m2;
};

inline FlowGroups group_flow(const Dataset& ds) {
  require_columns(ds, kFlowColumns, "flow dataset");
  std::map<FlowCondition, std::size_t> index;
  for (Eigen::Index i = 0; i < ds.values.rows(); ++i) index.emplace(FlowCondition{ds.values(i, 0), ds.values(i, 1) != 0.0}, 0);
  FlowGroups g;
  for (auto& [cond, idx] : index) {
    idx = g.conditions.size();
    g.conditions.push_back(cond);
  }
  g.m1.resize(g.conditions.size());
  g.m2.resize(g.conditions.size());
  for (Eigen::Index i = 0; i < ds.values.rows(); ++i) {
    const auto k = index.at(FlowCondition{ds.values(i, 0), ds.values(i, 1) != 0.0});
    g.m1[k].push_back(ds.values(i, 2));
    g.m2[k].push_back(ds.values(i, 3));
  }
  return g;
}

/// Weights of the composite. A missing correlation weight means N_c / 2, with
/// N_c the observed count of the condition.
struct FlowWeights {
  std::optional<double> correlation;
  double m1 = 1.0;
  double m2 = 1.0;
};

/// Sum over conditions of w_corr |corr_y - corr_z| + w1 AD(M1) + w2 AD(M2).
class FlowComposite {
 public:
  FlowComposite(const Dataset& observed, FlowWeights weights = {}) : weights_(weights) {
    auto g = group_flow(observed);
    conditions_ = g.conditions;
    for (std::size_t k = 0; k < conditions_.size(); ++k) {
      ad1_.emplace_back(g.m1[k]);
      ad2_.emplace_back(g.m2[k]);
      corr_.push_back(pearson(g.m1[k], g.m2[k]));
      w_corr_.push_back(weights.correlation ? *weights.correlation : 0.5 * static_cast<double>(g.m1[k].size()));
    }
  }

  const std::vector<FlowCondition>& conditions() const { return conditions_; }

  double operator()(const Dataset& simulated) const {
    const auto g = group_flow(simulated);
    if (g.conditions != conditions_) throw std::invalid_argument("flow_composite: experimental design mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < conditions_.size(); ++k) {
      s += w_corr_[k] * std::abs(corr_[k] - pearson(g.m1[k], g.m2[k]));
      s += weights_.m1 * ad1_[k](g.m1[k]) + weights_.m2 * ad2_[k](g.m2[k]);
    }
    return s;
  }

 private:
  FlowWeights weights_;
  std::vector<FlowCondition> conditions_;
  std::vector<AndersonDarling> ad1_, ad2_;
  std::vector<double> corr_, w_corr_;
};

inline double flow_composite(const Dataset& observed, const Dataset& simulated, FlowWeights weights = {}) {
  return FlowComposite(observed, weights)(simulated);
}

// ---------------------------------------------------------------------------
// Summary-space distances.

enum class DiscrepancyKind { euclidean, mahalanobis, wasserstein1, cramer_von_mises, energy, anderson_darling, flow_composite };

inline DiscrepancyKind discrepancy_from_tag(const std::string& tag) {
  if (tag == "euclidean") return DiscrepancyKind::euclidean;
  if (tag == "mahalanobis") return DiscrepancyKind::mahalanobis;
  if (tag == "wasserstein1") return DiscrepancyKind::wasserstein1;
  if (tag == "cramer_von_mises") return DiscrepancyKind::cramer_von_mises;
  if (tag == "energy") return DiscrepancyKind::energy;
  if (tag == "anderson_darling") return DiscrepancyKind::anderson_darling;
  if (tag == "flow_composite") return DiscrepancyKind::flow_composite;
  throw ConfigError("unknown discrepancy '" + tag + "'");
}

/// Weighted Euclidean distance; weights default to one.
inline double summary_distance_euclidean(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                                         const std::optional<Eigen::VectorXd>& weights = std::nullopt) {
  if (a.size() != b.size()) throw std::invalid_argument("summary_distance: length mismatch");
  const Eigen::VectorXd d = a - b;
  if (!weights) return d.norm();
  if (weights->size() != d.size()) throw std::invalid_argument("summary_distance: weight length mismatch");
  return std::sqrt((weights->array() * d.array().square()).sum());
}

/// sqrt(d' W d) with W the inverse of a pilot covariance of summaries.
inline double summary_distance_mahalanobis(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                                           const Eigen::MatrixXd& weight) {
  if (a.size() != b.size() || weight.rows() != a.size() || weight.cols() != a.size())
    throw std::invalid_argument("summary_distance: length mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(weight);
  if (llt.info() != Eigen::Success) throw std::domain_error("summary_distance: weight matrix is not positive definite");
  const Eigen::VectorXd d = a - b;
  return std::sqrt(std::max(0.0, d.dot(weight * d)));
}

/// A discrepancy rho(y, z) with the observed side precomputed once.
///
/// Data-space kinds treat each column independently and add the per-column
/// values (energy and flow_composite use all columns jointly).
class Discrepancy {
 public:
  struct Options {
    std::optional<Eigen::VectorXd> weights;     // euclidean
    std::optional<Eigen::MatrixXd> weight_matrix;  // mahalanobis
    FlowWeights flow;
  };

  Discrepancy(DiscrepancyKind kind, const Dataset& observed, std::optional<SummaryFunction> summary = std::nullopt,
              Options options = {})
      : kind_(kind), observed_(observed), summary_(std::move(summary)), options_(std::move(options)) {
    switch (kind_) {
      case DiscrepancyKind::euclidean:
      case DiscrepancyKind::mahalanobis:
        if (!summary_) throw ConfigError("summary-space discrepancy needs a summary statistic");
        observed_summary_ = (*summary_)(observed_);
        if (kind_ == DiscrepancyKind::mahalanobis && !options_.weight_matrix)
          options_.weight_matrix = Eigen::MatrixXd::Identity(observed_summary_.size(), observed_summary_.size());
        break;
      case DiscrepancyKind::anderson_darling:
        for (std::size_t j = 0; j < observed_.cols(); ++j) ad_.emplace_back(observed_.column(j));
        break;
      case DiscrepancyKind::flow_composite: flow_.emplace(observed_, options_.flow); break;
      default: break;
    }
  }

  DiscrepancyKind kind() const { return kind_; }
  const Dataset& observed() const { return observed_; }
  const std::optional<SummaryFunction>& summary() const { return summary_; }
  const Eigen::VectorXd& observed_summary() const { return observed_summary_; }

  /// Replaces the Mahalanobis weight (inverse pilot covariance of summaries).
  void set_weight_matrix(Eigen::MatrixXd w) { options_.weight_matrix = std::move(w); }

  double operator()(const Dataset& z) const {
    switch (kind_) {
      case DiscrepancyKind::euclidean:
        return summary_distance_euclidean(observed_summary_, (*summary_)(z), options_.weights);
      case DiscrepancyKind::mahalanobis:
        return summary_distance_mahalanobis(observed_summary_, (*summary_)(z), *options_.weight_matrix);
      case DiscrepancyKind::energy: return energy_distance(observed_.values, z.values);
      case DiscrepancyKind::flow_composite: return (*flow_)(z);
      default: break;
    }
    if (z.cols() != observed_.cols()) throw std::invalid_argument("discrepancy: column count mismatch");
    double s = 0.0;
    for (std::size_t j = 0; j < observed_.cols(); ++j) {
      const auto zj = z.column(j);
      switch (kind_) {
        case DiscrepancyKind::wasserstein1: s += wasserstein1(observed_.column(j), zj); break;
        case DiscrepancyKind::cramer_von_mises: s += cramer_von_mises(observed_.column(j), zj); break;
        case DiscrepancyKind::anderson_darling: s += ad_[j](zj); break;
        default: break;
      }
    }
    return s;
  }

 private:
  DiscrepancyKind kind_;
  Dataset observed_;
  std::optional<SummaryFunction> summary_;
  Options options_;
  Eigen::VectorXd observed_summary_;
  std::vector<AndersonDarling> ad_;
  std::optional<FlowComposite> flow_;
};

}  // namespace popcal
