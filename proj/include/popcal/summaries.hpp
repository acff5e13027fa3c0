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
#include "popcal/random.hpp"
#include "popcal/stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace popcal {

struct SummaryVector {
  Eigen::VectorXd values;
  std::vector<std::string> labels;
};

/// Two-component Gaussian mixture fitted by EM, used as the reference point of
/// the score summary. Components are ordered so that mu1 < mu2.
struct ReferenceGMM {
  double mu1 = 0.0, mu2 = 0.0;
  double sigma1 = 1.0, sigma2 = 1.0;
  double omega = 0.5;
  int iterations = 0;
  double log_likelihood = -kInf;
  std::vector<double> log_likelihood_trace;  // of the winning start
};

struct EmSettings {
  int starts = 20;
  double tolerance = 1e-8;  // on the total log-likelihood gain
  int max_iterations = 2000;
};

namespace detail {

struct GmmParams {
  double mu1, mu2, s1, s2, w;
};

inline double gmm_total_loglik(const GmmParams& p, std::span<const double> xs) {
  double ll = 0.0;
  for (double x : xs) {
    const double a = std::log(p.w) + normal_log_pdf(x, p.mu1, p.s1);
    const double b = std::log1p(-p.w) + normal_log_pdf(x, p.mu2, p.s2);
    const double m = std::max(a, b);
    ll += m + std::log(std::exp(a - m) + std::exp(b - m));
  }
  return ll;
}

}  // namespace detail

/// Multi-start EM for a two-component Gaussian mixture. Each start partitions
/// the data around two randomly chosen centres; starts whose components
/// collapse onto a point are discarded. Throws if every start collapses.
inline ReferenceGMM fit_gmm2_em(std::span<const double> data, std::uint64_t seed, const EmSettings& settings = {}) {
  const std::size_t n = data.size();
  if (n < 10) throw std::invalid_argument("fit_gmm2_em: need at least 10 observations");
  const auto [mn, mx] = std::minmax_element(data.begin(), data.end());
  const double range = *mx - *mn;
  const double floor_sd = 1e-6 * range;

  std::optional<ReferenceGMM> best;
  std::vector<double> r1(n);
  for (int start = 0; start < settings.starts; ++start) {
    Stream s = substream(seed, StreamTag::reference_fit, {static_cast<std::uint64_t>(start)});
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const double c1 = data[pick(s)], c2 = data[pick(s)];
    if (c1 == c2) continue;
    // Partition moments.
    double n1 = 0, s1 = 0, q1 = 0, n2 = 0, s2 = 0, q2 = 0;
    for (double x : data) {
      if (std::abs(x - c1) <= std::abs(x - c2)) {
        n1 += 1; s1 += x; q1 += x * x;
      } else {
        n2 += 1; s2 += x; q2 += x * x;
      }
    }
    if (n1 < 2 || n2 < 2) continue;
    detail::GmmParams p{s1 / n1, s2 / n2, std::sqrt(std::max(q1 / n1 - (s1 / n1) * (s1 / n1), 0.0)),
                        std::sqrt(std::max(q2 / n2 - (s2 / n2) * (s2 / n2), 0.0)), n1 / static_cast<double>(n)};
    if (!(p.s1 > floor_sd) || !(p.s2 > floor_sd)) continue;

    std::vector<double> trace;
    double ll = detail::gmm_total_loglik(p, data);
    trace.push_back(ll);
    bool collapsed = false;
    int it = 0;
    for (; it < settings.max_iterations; ++it) {
      // E-step
      double sum_r1 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = std::log(p.w) + normal_log_pdf(data[i], p.mu1, p.s1);
        const double b = std::log1p(-p.w) + normal_log_pdf(data[i], p.mu2, p.s2);
        r1[i] = 1.0 / (1.0 + std::exp(b - a));
        sum_r1 += r1[i];
      }
      const double sum_r2 = static_cast<double>(n) - sum_r1;
      if (sum_r1 < 1.0 || sum_r2 < 1.0) {
        collapsed = true;
        break;
      }
      // M-step
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        m1 += r1[i] * data[i];
        m2 += (1.0 - r1[i]) * data[i];
      }
      m1 /= sum_r1;
      m2 /= sum_r2;
      double v1 = 0.0, v2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        v1 += r1[i] * (data[i] - m1) * (data[i] - m1);
        v2 += (1.0 - r1[i]) * (data[i] - m2) * (data[i] - m2);
      }
      p = {m1, m2, std::sqrt(v1 / sum_r1), std::sqrt(v2 / sum_r2), sum_r1 / static_cast<double>(n)};
      if (!(p.s1 > floor_sd) || !(p.s2 > floor_sd)) {
        collapsed = true;
        break;
      }
      const double next = detail::gmm_total_loglik(p, data);
      trace.push_back(next);
      const double gain = next - ll;
      ll = next;
      if (gain < settings.tolerance) break;
    }
    if (collapsed || !std::isfinite(ll)) continue;
    if (!best || ll > best->log_likelihood) {
      ReferenceGMM g{p.mu1, p.mu2, p.s1, p.s2, p.w, it + 1, ll, std::move(trace)};
      if (g.mu1 > g.mu2) {
        std::swap(g.mu1, g.mu2);
        std::swap(g.sigma1, g.sigma2);
        g.omega = 1.0 - g.omega;
      }
      best = std::move(g);
    }
  }
  if (!best) throw std::runtime_error("fit_gmm2_em: every EM start collapsed");
  return *best;
}

/// Gradient of the average per-observation mixture log-likelihood with respect
/// to (mu1, mu2, sigma1, sigma2, omega), evaluated at the reference fit.
inline Eigen::VectorXd gmm_score(const ReferenceGMM& ref, std::span<const double> data) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(5);
  const double w = ref.omega;
  const double inv_v1 = 1.0 / (ref.sigma1 * ref.sigma1), inv_v2 = 1.0 / (ref.sigma2 * ref.sigma2);
  for (double x : data) {
    const double la = std::log(w) + normal_log_pdf(x, ref.mu1, ref.sigma1);
    const double lb = std::log1p(-w) + normal_log_pdf(x, ref.mu2, ref.sigma2);
    const double r1 = 1.0 / (1.0 + std::exp(lb - la));
    const double r2 = 1.0 - r1;
    const double d1 = x - ref.mu1, d2 = x - ref.mu2;
    g(0) += r1 * d1 * inv_v1;
    g(1) += r2 * d2 * inv_v2;
    g(2) += r1 * (d1 * d1 * inv_v1 - 1.0) / ref.sigma1;
    g(3) += r2 * (d2 * d2 * inv_v2 - 1.0) / ref.sigma2;
    g(4) += r1 / w - r2 / (1.0 - w);
  }
  return g / static_cast<double>(data.size());
}

/// (mean1, mean2, var1, var2, cov12) with unbiased denominators.
inline Eigen::VectorXd moment_summary_bivariate(const Eigen::MatrixXd& data) {
  if (data.cols() != 2) throw std::invalid_argument("moment_summary_bivariate: data must have two columns");
  const auto n = data.rows();
  if (n < 2) throw std::invalid_argument("moment_summary_bivariate: need at least two rows");
  const double m1 = data.col(0).mean(), m2 = data.col(1).mean();
  double v1 = 0.0, v2 = 0.0, c = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = data(i, 0) - m1, b = data(i, 1) - m2;
    v1 += a * a;
    v2 += b * b;
    c += a * b;
  }
  const double dn = static_cast<double>(n - 1);
  Eigen::VectorXd s(5);
  s << m1, m2, v1 / dn, v2 / dn, c / dn;
  return s;
}

/// Silverman's rule of thumb, 1.06 * sd * n^(-1/5).
inline double silverman_bandwidth(std::span<const double> data) {
  if (data.size() < 2) throw std::invalid_argument("silverman_bandwidth: need at least two observations");
  return 1.06 * sample_sd(data) * std::pow(static_cast<double>(data.size()), -0.2);
}

/// Gaussian kernel density estimate on `grid`. A missing bandwidth selects
/// Silverman's rule.
inline std::vector<double> gaussian_kde(std::span<const double> data, std::span<const double> grid,
                                        std::optional<double> bandwidth = std::nullopt) {
  if (data.empty()) throw std::invalid_argument("gaussian_kde: empty data");
  const double h = bandwidth ? *bandwidth : silverman_bandwidth(data);
  if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("gaussian_kde: bandwidth must be positive");
  const double norm = 1.0 / (static_cast<double>(data.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double x : data) {
      const double z = (grid[g] - x) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out[g] = acc * norm;
  }
  return out;
}

// ---------------------------------------------------------------------------

enum class SummaryKind { gmm2_score, bivariate_moments, identity, mean };

inline SummaryKind summary_from_tag(const std::string& tag) {
  if (tag == "gmm2_score") return SummaryKind::gmm2_score;
  if (tag == "bivariate_moments") return SummaryKind::bivariate_moments;
  if (tag == "identity") return SummaryKind::identity;
  if (tag == "mean") return SummaryKind::mean;
  throw ConfigError("unknown summary '" + tag + "'");
}

/// Summary statistic S(.) of a dataset. The score summary carries its reference
/// fit, made once on the observed data and frozen afterwards.
class SummaryFunction {
 public:
  SummaryFunction() = default;
  explicit SummaryFunction(SummaryKind kind, std::optional<ReferenceGMM> ref = std::nullopt)
      : kind_(kind), ref_(std::move(ref)) {
    if (kind_ == SummaryKind::gmm2_score && !ref_) throw std::invalid_argument("gmm2_score needs a reference fit");
  }

  /// Builds the summary, fitting the score reference to `observed` when needed.
  static SummaryFunction for_observed(SummaryKind kind, const Dataset& observed, std::uint64_t seed) {
    if (kind == SummaryKind::gmm2_score) {
      if (observed.cols() != 1) throw ConfigError("gmm2_score needs one-dimensional data");
      return SummaryFunction(kind, fit_gmm2_em(observed.column(0), seed));
    }
    return SummaryFunction(kind);
  }

  SummaryKind kind() const { return kind_; }
  const std::optional<ReferenceGMM>& reference() const { return ref_; }

  Eigen::VectorXd operator()(const Dataset& ds) const {
    switch (kind_) {
      case SummaryKind::gmm2_score: {
        const auto c = ds.values.col(0);
        return gmm_score(*ref_, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
      }
      case SummaryKind::bivariate_moments: return moment_summary_bivariate(ds.values);
      case SummaryKind::mean: return ds.values.colwise().mean().transpose();
      case SummaryKind::identity: {
        Eigen::VectorXd v(ds.values.size());
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < ds.values.rows(); ++i)
          for (Eigen::Index j = 0; j < ds.values.cols(); ++j) v(k++) = ds.values(i, j);
        return v;
      }
    }
    throw std::logic_error("unreachable summary kind");
  }

  std::vector<std::string> labels(const Dataset& shape) const {
    switch (kind_) {
      case SummaryKind::gmm2_score: return {"score_mu1", "score_mu2", "score_sigma1", "score_sigma2", "score_omega"};
      case SummaryKind::bivariate_moments: return {"mean1", "mean2", "var1", "var2", "cov12"};
      case SummaryKind::mean: {
        std::vector<std::string> l;
        for (const auto& c : shape.columns) l.push_back("mean_" + c);
        return l;
      }
      case SummaryKind::identity: {
        std::vector<std::string> l;
        for (std::size_t i = 0; i < shape.rows(); ++i)
          for (const auto& c : shape.columns) l.push_back(c + "_" + std::to_string(i));
        return l;
      }
    }
    return {};
  }

  SummaryVector summarise(const Dataset& ds) const { return {(*this)(ds), labels(ds)}; }

 private:
  SummaryKind kind_ = SummaryKind::mean;
  std::optional<ReferenceGMM> ref_;
};

}  // namespace popcal
