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
#include "popcal/inference.hpp"
#include "popcal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace popcal {

inline constexpr double kRhatCap = 1e6;
inline constexpr std::size_t kMinDiagnosticLength = 100;

/// Split-Rhat of one parameter over several chains. Each chain is cut into two
/// halves (the middle draw is dropped for odd lengths) and the between/within
/// variance ratio is formed over all halves. Returns 1 for constant input and
/// kRhatCap when halves are constant at different values.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::vector<std::span<const double>> halves;
  for (const auto& c : chains) {
    const std::size_t h = c.size() / 2;
    if (h < 2) throw DiagnosticError("split-Rhat needs at least four draws per chain");
    halves.emplace_back(c.data(), h);
    halves.emplace_back(c.data() + c.size() - h, h);
  }
  std::size_t n = halves.front().size();
  for (const auto& h : halves) n = std::min(n, h.size());
  const double nn = static_cast<double>(n);
  std::vector<double> means, vars;
  for (auto h : halves) {
    h = h.first(n);
    means.push_back(mean(h));
    vars.push_back(sample_variance(h));
  }
  const double w = mean(vars);
  const double b = nn * sample_variance(means);
  if (!(w > 0.0)) return b > 0.0 ? kRhatCap : 1.0;
  const double var_plus = (nn - 1.0) / nn * w + b / nn;
  return std::min(kRhatCap, std::sqrt(var_plus / w));
}

namespace detail {

inline double autocovariance(std::span<const double> x, double mu, std::size_t lag) {
  double s = 0.0;
  for (std::size_t i = 0; i + lag < x.size(); ++i) s += (x[i] - mu) * (x[i + lag] - mu);
  return s / static_cast<double>(x.size());
}

}  // namespace detail

struct EssResult {
  double ess = 0.0;
  bool zero_variance = false;
};

/// Multi-chain effective sample size with Geyer's initial positive sequence,
/// made monotone. A constant input reports its length and the zero-variance flag.
inline EssResult effective_sample_size(const std::vector<std::vector<double>>& chains) {
  std::size_t n = chains.front().size();
  for (const auto& c : chains) n = std::min(n, c.size());
  const double m = static_cast<double>(chains.size()), nn = static_cast<double>(n);
  if (n < 4) throw DiagnosticError("ESS needs at least four draws per chain");
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    const std::span<const double> s(c.data(), n);
    means.push_back(mean(s));
    vars.push_back(sample_variance(s));
  }
  const double w = mean(vars);
  const double b_over_n = chains.size() > 1 ? sample_variance(means) : 0.0;
  const double var_plus = (nn - 1.0) / nn * w + b_over_n;
  if (!(var_plus > 0.0)) return {m * nn, true};

  auto rho = [&](std::size_t lag) {
    double acov = 0.0;
    for (std::size_t k = 0; k < chains.size(); ++k)
      acov += detail::autocovariance(std::span<const double>(chains[k].data(), n), means[k], lag);
    acov /= m;
    // Stan form: 1 - (W - mean autocovariance) / var+, with autocovariance
    // normalised by n and W by n - 1.
    return 1.0 - (w - acov) / var_plus;
  };

  double tau = -1.0;  // -1 + 2 * sum of pair sums
  double previous_pair = kInf;
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (!(pair > 0.0)) break;
    pair = std::min(pair, previous_pair);
    previous_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(m * nn));
  return {m * nn / tau, false};
}

struct ParameterDiagnostics {
  std::string name;
  double ess = 0.0;
  double rhat = 1.0;
  bool zero_variance = false;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0, q50 = 0.0, q975 = 0.0;
};

struct ChainDiagnostics {
  std::vector<ParameterDiagnostics> parameters;
  std::vector<double> acceptance_rates;
  std::size_t chains = 0;
  std::size_t draws_per_chain = 0;
  /// Row indices (within the post burn-in chain) kept for trace plots.
  std::vector<std::size_t> trace_indices;

  std::size_t count_rhat_above(double threshold) const {
    return static_cast<std::size_t>(std::count_if(parameters.begin(), parameters.end(),
                                                  [&](const auto& p) { return p.rhat > threshold; }));
  }
};

/// Diagnostics over one or more chains of the same layout, computed on the
/// retained (thinned) draws after discarding the burn-in fraction.
inline ChainDiagnostics diagnose_chains(const std::vector<PosteriorChain>& chains, double burn_in = 0.2,
                                        std::size_t trace_points = 1000) {
  if (chains.empty()) throw DiagnosticError("no chains to diagnose");
  ChainDiagnostics out;
  out.chains = chains.size();
  std::vector<Eigen::MatrixXd> kept;
  for (const auto& c : chains) {
    if (c.names != chains.front().names) throw DiagnosticError("chains have different parameter layouts");
    kept.push_back(c.post_burn_in(burn_in));
    if (static_cast<std::size_t>(kept.back().rows()) < kMinDiagnosticLength)
      throw DiagnosticError("chain too short for diagnostics: need at least 100 draws after burn-in");
    out.acceptance_rates.push_back(c.acceptance_rate());
  }
  out.draws_per_chain = static_cast<std::size_t>(kept.front().rows());
  for (std::size_t j = 0; j < chains.front().names.size(); ++j) {
    std::vector<std::vector<double>> series;
    std::vector<double> pooled;
    for (const auto& k : kept) {
      const auto col = k.col(static_cast<Eigen::Index>(j));
      series.emplace_back(col.data(), col.data() + col.size());
      pooled.insert(pooled.end(), series.back().begin(), series.back().end());
    }
    ParameterDiagnostics p;
    p.name = chains.front().names[j];
    const auto ess = effective_sample_size(series);
    p.ess = ess.ess;
    p.zero_variance = ess.zero_variance;
    p.rhat = split_rhat(series);
    p.mean = mean(pooled);
    p.sd = sample_sd(pooled);
    std::sort(pooled.begin(), pooled.end());
    p.q025 = quantile_sorted(pooled, 0.025);
    p.q50 = quantile_sorted(pooled, 0.5);
    p.q975 = quantile_sorted(pooled, 0.975);
    out.parameters.push_back(p);
  }
  const std::size_t step = std::max<std::size_t>(1, (out.draws_per_chain + trace_points - 1) / trace_points);
  for (std::size_t i = 0; i < out.draws_per_chain; i += step) out.trace_indices.push_back(i);
  return out;
}

inline ChainDiagnostics diagnose_chain(const PosteriorChain& chain, double burn_in = 0.2) {
  return diagnose_chains({chain}, burn_in);
}

}  // namespace popcal
