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
#include "popcal/distances.hpp"
#include "popcal/distributions.hpp"
#include "popcal/errors.hpp"
#include "popcal/models.hpp"
#include "popcal/parallel.hpp"
#include "popcal/random.hpp"
#include "popcal/stats.hpp"
#include "popcal/summaries.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace popcal {

// ---------------------------------------------------------------------------
// Priors

struct PriorTerm {
  enum class Kind { uniform, gaussian, exponential };
  Kind kind = Kind::uniform;
  double a = 0.0;  // lower / mean / rate
  double b = 1.0;  // upper / sd

  static PriorTerm uniform(double lo, double hi) {
    if (!(lo < hi)) throw ConfigError("uniform prior needs lower < upper");
    return {Kind::uniform, lo, hi};
  }
  static PriorTerm gaussian(double mean, double sd) {
    if (!(sd > 0.0)) throw ConfigError("gaussian prior needs sd > 0");
    return {Kind::gaussian, mean, sd};
  }
  static PriorTerm exponential(double rate) {
    if (!(rate > 0.0)) throw ConfigError("exponential prior needs rate > 0");
    return {Kind::exponential, rate, 0.0};
  }

  double log_density(double x) const {
    switch (kind) {
      case Kind::uniform: return (x > a && x < b) ? -std::log(b - a) : -kInf;
      case Kind::gaussian: return normal_log_pdf(x, a, b);
      case Kind::exponential: return x >= 0.0 ? std::log(a) - a * x : -kInf;
    }
    return -kInf;
  }

  double sample(Stream& s) const {
    switch (kind) {
      case Kind::uniform: {
        double u = uniform01(s);
        while (u == 0.0) u = uniform01(s);
        return a + (b - a) * u;
      }
      case Kind::gaussian: return std::normal_distribution<double>(a, b)(s);
      case Kind::exponential: return std::exponential_distribution<double>(a)(s);
    }
    return 0.0;
  }

  double sd() const {
    switch (kind) {
      case Kind::uniform: return (b - a) / std::sqrt(12.0);
      case Kind::gaussian: return b;
      case Kind::exponential: return 1.0 / a;
    }
    return 0.0;
  }
};

/// sum_i coefficients[i] * v[index[i]] < upper.
struct LinearConstraint {
  std::vector<std::size_t> index;
  std::vector<double> coefficients;
  double upper = 0.0;

  static LinearConstraint less_than(std::size_t i, std::size_t j) { return {{i, j}, {1.0, -1.0}, 0.0}; }

  bool holds(std::span<const double> v) const {
    double s = 0.0;
    for (std::size_t k = 0; k < index.size(); ++k) s += coefficients[k] * v[index[k]];
    return s < upper;
  }
};

class Prior {
 public:
  Prior() = default;
  Prior(std::vector<PriorTerm> terms, std::vector<LinearConstraint> constraints = {})
      : terms_(std::move(terms)), constraints_(std::move(constraints)) {
    for (const auto& c : constraints_)
      for (auto i : c.index)
        if (i >= terms_.size()) throw ConfigError("prior constraint refers to an unknown parameter");
  }

  std::size_t dimension() const { return terms_.size(); }
  const std::vector<PriorTerm>& terms() const { return terms_; }
  const std::vector<LinearConstraint>& constraints() const { return constraints_; }

  double log_density(std::span<const double> v) const {
    if (v.size() != terms_.size()) throw std::invalid_argument("prior: dimension mismatch");
    for (const auto& c : constraints_)
      if (!c.holds(v)) return -kInf;
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) return -kInf;
      s += terms_[i].log_density(v[i]);
    }
    return s;
  }

  std::vector<double> sample(Stream& s) const {
    std::vector<double> v(terms_.size());
    for (int attempt = 0; attempt < kTruncationCap; ++attempt) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = terms_[i].sample(s);
      if (std::isfinite(log_density(v))) return v;
    }
    throw SamplerError("prior constraints reject every draw");
  }

 private:
  std::vector<PriorTerm> terms_;
  std::vector<LinearConstraint> constraints_;
};

// ---------------------------------------------------------------------------
// Problem definition

/// Full parameter vector (theta, phi) with optionally fixed entries. Samplers
/// work on the free entries only.
struct ParameterLayout {
  std::vector<std::string> names;
  std::size_t theta_dim = 0;
  std::vector<std::optional<double>> fixed;

  ParameterLayout() = default;
  ParameterLayout(std::vector<std::string> theta_names, std::vector<std::string> phi_names)
      : names(std::move(theta_names)), theta_dim(names.size()) {
    names.insert(names.end(), phi_names.begin(), phi_names.end());
    fixed.assign(names.size(), std::nullopt);
  }

  std::size_t full_dim() const { return names.size(); }
  std::size_t phi_dim() const { return names.size() - theta_dim; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("unknown hyperparameter '" + name + "'");
  }

  void fix(const std::string& name, double value) { fixed[index_of(name)] = value; }

  std::vector<std::size_t> free_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (!fixed[i]) out.push_back(i);
    return out;
  }
  std::size_t free_dim() const { return free_indices().size(); }
  std::vector<std::string> free_names() const {
    std::vector<std::string> out;
    for (auto i : free_indices()) out.push_back(names[i]);
    return out;
  }

  std::vector<double> expand(std::span<const double> free) const {
    std::vector<double> full(names.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < names.size(); ++i) full[i] = fixed[i] ? *fixed[i] : free[k++];
    if (k != free.size()) throw std::invalid_argument("parameter layout: free vector has the wrong length");
    return full;
  }
};

struct CalibrationProblem {
  PopulationFamily family;
  std::shared_ptr<const SimulationModel> model;
  ParameterLayout layout;
  std::size_t n_sim = 1;
  Dataset observed;
  std::optional<SummaryFunction> summary;
  std::shared_ptr<const Discrepancy> discrepancy;

  static ParameterLayout default_layout(const PopulationFamily& family, const SimulationModel& model) {
    return ParameterLayout(family.hyper_names(), model.nuisance_names());
  }

  void validate() const {
    if (!model) throw ConfigError("calibration problem has no model");
    if (n_sim < 1) throw ConfigError("n_sim must be at least 1");
    if (layout.theta_dim != family.hyper_names().size())
      throw ConfigError("theta layout does not match the population family");
    if (layout.phi_dim() != model->nuisance_names().size())
      throw ConfigError("phi layout does not match the model");
  }
};

/// Mock population at full (theta, phi); nullopt on simulator failure or
/// hyperparameters the family rejects.
inline std::optional<Dataset> simulate_mock_population(const CalibrationProblem& problem, std::span<const double> theta,
                                                       std::span<const double> phi, Stream& stream) {
  std::optional<PopulationDistribution> f;
  try {
    f = problem.family.build(theta);
  } catch (const std::domain_error&) {
    return std::nullopt;
  }
  return problem.model->simulate_population(*f, phi, problem.n_sim, stream);
}

inline std::optional<Dataset> simulate_mock_population_free(const CalibrationProblem& problem,
                                                            std::span<const double> free, Stream& stream) {
  const auto full = problem.layout.expand(free);
  const std::span<const double> all(full);
  return simulate_mock_population(problem, all.first(problem.layout.theta_dim),
                                  all.subspan(problem.layout.theta_dim), stream);
}

/// Gaussian synthetic log-likelihood of s_obs given m simulated summaries (rows).
inline double estimate_synthetic_loglik(const Eigen::VectorXd& s_obs, const Eigen::MatrixXd& s_sims) {
  const auto d = s_obs.size();
  if (s_sims.cols() != d) throw std::invalid_argument("synthetic likelihood: summary dimension mismatch");
  if (s_sims.rows() < d + 2) throw std::invalid_argument("synthetic likelihood: need m >= d + 2 simulations");
  if (!s_sims.allFinite()) return -kInf;
  const Eigen::VectorXd mu = s_sims.colwise().mean().transpose();
  return gaussian_log_density(s_obs, mu, row_covariance(s_sims));
}

// ---------------------------------------------------------------------------
// Chains

struct PosteriorChain {
  std::vector<std::string> names;
  std::vector<std::vector<double>> states;
  std::vector<double> values;  // log synthetic likelihood or discrepancy
  std::vector<int> accepted;
  std::size_t proposals = 0;
  std::size_t accepted_moves = 0;
  std::size_t simulations = 0;
  std::size_t failed_simulations = 0;
  std::uint64_t seed = 0;
  std::size_t thin = 1;
  std::optional<double> tolerance;

  std::size_t size() const { return states.size(); }
  double acceptance_rate() const {
    return proposals == 0 ? 0.0 : static_cast<double>(accepted_moves) / static_cast<double>(proposals);
  }
  double failure_rate() const {
    return simulations == 0 ? 0.0 : static_cast<double>(failed_simulations) / static_cast<double>(simulations);
  }

  /// Retained states after discarding the first `burn_in` fraction.
  Eigen::MatrixXd post_burn_in(double burn_in = 0.2) const {
    const auto start = static_cast<std::size_t>(std::floor(burn_in * static_cast<double>(states.size())));
    Eigen::MatrixXd m(static_cast<Eigen::Index>(states.size() - start), static_cast<Eigen::Index>(names.size()));
    for (std::size_t i = start; i < states.size(); ++i)
      for (std::size_t j = 0; j < names.size(); ++j)
        m(static_cast<Eigen::Index>(i - start), static_cast<Eigen::Index>(j)) = states[i][j];
    return m;
  }

  void push(std::span<const double> state, double value, bool acc) {
    states.emplace_back(state.begin(), state.end());
    values.push_back(value);
    accepted.push_back(acc ? 1 : 0);
  }
};

inline Dataset chain_dataset(const PosteriorChain& chain) {
  Dataset ds;
  ds.columns = chain.names;
  ds.columns.push_back("loglik_or_disc");
  ds.columns.push_back("accepted");
  ds.values.resize(static_cast<Eigen::Index>(chain.size()), static_cast<Eigen::Index>(ds.columns.size()));
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < chain.names.size(); ++j) ds.values(r, static_cast<Eigen::Index>(j)) = chain.states[i][j];
    ds.values(r, static_cast<Eigen::Index>(chain.names.size())) = chain.values[i];
    ds.values(r, static_cast<Eigen::Index>(chain.names.size() + 1)) = chain.accepted[i];
  }
  return ds;
}

inline PosteriorChain chain_from_dataset(const Dataset& ds) {
  const auto c = ds.cols();
  if (c < 3 || ds.columns[c - 2] != "loglik_or_disc" || ds.columns[c - 1] != "accepted")
    throw DataError("chain file must end with columns loglik_or_disc,accepted");
  PosteriorChain chain;
  chain.names.assign(ds.columns.begin(), ds.columns.end() - 2);
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    std::vector<double> s(c - 2);
    for (std::size_t j = 0; j + 2 < c; ++j) s[j] = ds.values(r, static_cast<Eigen::Index>(j));
    chain.push(s, ds.values(r, static_cast<Eigen::Index>(c - 2)), ds.values(r, static_cast<Eigen::Index>(c - 1)) != 0.0);
    if (i > 0 && chain.accepted.back()) ++chain.accepted_moves;
  }
  chain.proposals = chain.size() > 0 ? chain.size() - 1 : 0;
  return chain;
}

struct McmcSettings {
  std::size_t iterations = 1000;
  std::size_t thin = 1;
  Eigen::MatrixXd proposal_cov;
  std::uint64_t seed = 1;
  std::uint64_t chain_id = 0;
  unsigned threads = 1;
};

namespace detail {

inline Eigen::MatrixXd proposal_factor(const Eigen::MatrixXd& cov, std::size_t dim) {
  if (cov.rows() != static_cast<Eigen::Index>(dim) || cov.cols() != static_cast<Eigen::Index>(dim))
    throw ConfigError("proposal covariance has the wrong dimension");
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw ConfigError("proposal covariance is not positive definite");
  return llt.matrixL();
}

inline std::vector<double> gaussian_step(std::span<const double> x, const Eigen::MatrixXd& factor, Stream& s) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(factor.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(s);
  const Eigen::VectorXd step = factor * z;
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step(static_cast<Eigen::Index>(i));
  return out;
}

/// Random-walk Metropolis skeleton. `step(proposal, iteration, log_prior_ratio,
/// current_value, stream)` returns the proposal's value when accepted, or
/// nullopt when rejected; it owns the acceptance rule.
template <class Step>
PosteriorChain metropolis(const Prior& prior, std::vector<std::string> names, std::vector<double> init, double init_value,
                          const McmcSettings& settings, Step&& step) {
  if (settings.thin < 1) throw ConfigError("thinning must be at least 1");
  const double lp0 = prior.log_density(init);
  if (!std::isfinite(lp0)) throw SamplerError("initial state lies outside the prior support");
  PosteriorChain chain;
  chain.names = std::move(names);
  chain.seed = settings.seed;
  chain.thin = settings.thin;
  chain.push(init, init_value, true);
  if (settings.iterations == 0) return chain;
  const auto factor = proposal_factor(settings.proposal_cov, init.size());
  auto stream = substream(settings.seed, StreamTag::chain, {settings.chain_id});
  std::vector<double> current = std::move(init);
  double current_value = init_value, current_lp = lp0;
  for (std::size_t it = 1; it <= settings.iterations; ++it) {
    auto proposal = gaussian_step(current, factor, stream);
    const double lp = prior.log_density(proposal);
    const double log_u = std::log(uniform01(stream));
    ++chain.proposals;
    bool acc = false;
    if (std::isfinite(lp)) {
      const auto value = step(proposal, it, lp - current_lp, log_u, current_value);
      if (value) {
        current = std::move(proposal);
        current_value = *value;
        current_lp = lp;
        ++chain.accepted_moves;
        acc = true;
      }
    }
    if (it % settings.thin == 0) chain.push(current, current_value, acc);
  }
  return chain;
}

}  // namespace detail

/// Synthetic log-likelihood at `free` from m replicate populations simulated on
/// substreams (seed, chain_id, iteration, replicate).
struct SyntheticLikelihood {
  const CalibrationProblem* problem;
  Eigen::VectorXd observed_summary;
  std::size_t m = 50;

  SyntheticLikelihood(const CalibrationProblem& p, std::size_t m_) : problem(&p), m(m_) {
    if (!p.summary) throw ConfigError("BSL needs a summary statistic");
    observed_summary = (*p.summary)(p.observed);
    if (m < static_cast<std::size_t>(observed_summary.size()) + 2)
      throw ConfigError("BSL needs m >= summary dimension + 2");
  }

  struct Result {
    double loglik;
    std::size_t failures;
  };

  Result operator()(std::span<const double> free, std::uint64_t seed, std::uint64_t chain_id, std::uint64_t iteration,
                    unsigned threads) const {
    const auto d = observed_summary.size();
    Eigen::MatrixXd sims(static_cast<Eigen::Index>(m), d);
    std::vector<char> ok(m, 0);
    parallel_for(m, threads, [&](std::size_t r) {
      auto s = substream(seed, StreamTag::replicate, {chain_id, iteration, r});
      const auto z = simulate_mock_population_free(*problem, free, s);
      if (!z) return;
      sims.row(static_cast<Eigen::Index>(r)) = (*problem->summary)(*z).transpose();
      ok[r] = 1;
    });
    const auto failures = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 0));
    if (failures > 0) return {-kInf, failures};
    return {estimate_synthetic_loglik(observed_summary, sims), 0};
  }
};

struct BslSettings : McmcSettings {
  std::size_t m = 50;
};

inline PosteriorChain bsl_mcmc(const CalibrationProblem& problem, const Prior& prior, std::vector<double> init,
                               const BslSettings& settings) {
  problem.validate();
  if (init.size() != problem.layout.free_dim()) throw ConfigError("initial state has the wrong dimension");
  const SyntheticLikelihood sl(problem, settings.m);
  if (!std::isfinite(prior.log_density(init))) throw SamplerError("initial state lies outside the prior support");
  const auto first = sl(init, settings.seed, settings.chain_id, 0, settings.threads);
  std::size_t sims = settings.m, failures = first.failures;
  auto chain = detail::metropolis(
      prior, problem.layout.free_names(), std::move(init), first.loglik, settings,
      [&](std::span<const double> proposal, std::size_t it, double log_prior_ratio, double log_u,
          double current) -> std::optional<double> {
        const auto est = sl(proposal, settings.seed, settings.chain_id, it, settings.threads);
        sims += settings.m;
        failures += est.failures;
        if (!std::isfinite(est.loglik)) return std::nullopt;
        if (!std::isfinite(current)) return est.loglik;
        if (log_u < est.loglik - current + log_prior_ratio) return est.loglik;
        return std::nullopt;
      });
  chain.simulations = sims;
  chain.failed_simulations = failures;
  return chain;
}

/// Discrepancy of one mock population at `free`; +inf on simulator failure.
inline double mock_discrepancy(const CalibrationProblem& problem, std::span<const double> free, Stream& stream) {
  if (!problem.discrepancy) throw ConfigError("ABC needs a discrepancy");
  const auto z = simulate_mock_population_free(problem, free, stream);
  if (!z) return kInf;
  const double d = (*problem.discrepancy)(*z);
  return std::isnan(d) ? kInf : d;
}

/// ABC-MCMC at tolerance epsilon. A proposal is accepted when it passes the
/// prior ratio test and its mock discrepancy is at most epsilon; the mock
/// population is only simulated once the prior test has passed.
inline PosteriorChain abc_mcmc(const CalibrationProblem& problem, const Prior& prior, std::vector<double> init,
                               double init_discrepancy, double epsilon, const McmcSettings& settings) {
  problem.validate();
  if (!(epsilon > 0.0)) throw ConfigError("ABC tolerance must be positive");
  if (init.size() != problem.layout.free_dim()) throw ConfigError("initial state has the wrong dimension");
  if (!(init_discrepancy <= epsilon)) throw SamplerError("initial state discrepancy exceeds the ABC tolerance");
  std::size_t sims = 0, failures = 0;
  auto chain = detail::metropolis(
      prior, problem.layout.free_names(), std::move(init), init_discrepancy, settings,
      [&](std::span<const double> proposal, std::size_t it, double log_prior_ratio, double log_u,
          double) -> std::optional<double> {
        if (!(log_u < log_prior_ratio)) return std::nullopt;
        auto s = substream(settings.seed, StreamTag::replicate, {settings.chain_id, it, 0});
        const double d = mock_discrepancy(problem, proposal, s);
        ++sims;
        if (!std::isfinite(d)) ++failures;
        if (d <= epsilon) return d;
        return std::nullopt;
      });
  chain.simulations = sims;
  chain.failed_simulations = failures;
  chain.tolerance = epsilon;
  return chain;
}

// ---------------------------------------------------------------------------
// Adaptive SMC-ABC

struct SmcSettings {
  std::size_t particles = 500;
  double drop_fraction = 0.5;
  double stop_acceptance = 0.01;
  /// Target probability that a particle is never moved in a round.
  double unmoved_probability = 0.01;
  std::size_t max_moves = 1000;
  std::size_t max_rounds = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

struct ParticlePopulation {
  std::vector<std::string> names;
  std::vector<std::vector<double>> particles;
  std::vector<double> discrepancies;
  double epsilon = kInf;
  std::vector<double> epsilon_history;
  std::vector<double> acceptance_history;
  std::vector<std::size_t> moves_history;
  std::size_t simulations = 0;
  std::size_t failed_simulations = 0;

  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(particles.size()), static_cast<Eigen::Index>(names.size()));
    for (std::size_t i = 0; i < particles.size(); ++i)
      for (std::size_t j = 0; j < names.size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = particles[i][j];
    return m;
  }

  std::size_t best() const {
    return static_cast<std::size_t>(std::min_element(discrepancies.begin(), discrepancies.end()) - discrepancies.begin());
  }
};

/// Number of MCMC moves so that a particle stays unmoved with probability c.
inline std::size_t moves_for_acceptance(double p_acc, double c, std::size_t cap) {
  if (p_acc <= 0.0) return cap;
  if (p_acc >= 1.0) return 1;
  const double r = std::ceil(std::log(c) / std::log(1.0 - p_acc));
  return static_cast<std::size_t>(std::clamp(r, 1.0, static_cast<double>(cap)));
}

inline ParticlePopulation smc_abc_adaptive(const CalibrationProblem& problem, const Prior& prior,
                                           const SmcSettings& settings) {
  problem.validate();
  const std::size_t n = settings.particles;
  if (n < 50) throw ConfigError("SMC-ABC needs at least 50 particles");
  if (!(settings.drop_fraction > 0.0 && settings.drop_fraction < 1.0)) throw ConfigError("drop fraction must lie in (0, 1)");
  const auto n_drop = static_cast<std::size_t>(std::floor(settings.drop_fraction * static_cast<double>(n)));
  if (n_drop < 1 || n_drop >= n) throw ConfigError("drop fraction leaves no particles to move or keep");
  const std::size_t n_keep = n - n_drop;

  ParticlePopulation pop;
  pop.names = problem.layout.free_names();
  pop.particles.resize(n);
  pop.discrepancies.resize(n);
  parallel_for(n, settings.threads, [&](std::size_t i) {
    auto s = substream(settings.seed, StreamTag::particle_init, {i});
    pop.particles[i] = prior.sample(s);
    pop.discrepancies[i] = mock_discrepancy(problem, pop.particles[i], s);
  });
  pop.simulations = n;
  for (double d : pop.discrepancies)
    if (!std::isfinite(d)) ++pop.failed_simulations;
  if (pop.failed_simulations == n) throw SamplerError("every initial particle failed to simulate");

  std::vector<double> log_prior(n);
  for (std::size_t i = 0; i < n; ++i) log_prior[i] = prior.log_density(pop.particles[i]);

  for (std::size_t round = 1; round <= settings.max_rounds; ++round) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pop.discrepancies[a] < pop.discrepancies[b]; });
    const double eps = pop.discrepancies[order[n_keep - 1]];
    if (!pop.epsilon_history.empty() && !(eps < pop.epsilon_history.back())) break;
    if (!std::isfinite(eps)) {
      // More than the dropped fraction failed; keep going only once a finite tolerance exists.
      throw SamplerError("SMC-ABC: too many simulator failures to set a finite tolerance");
    }
    pop.epsilon = eps;
    pop.epsilon_history.push_back(eps);

    // Survivors first, then refill by uniform resampling of survivors.
    std::vector<std::vector<double>> particles(n);
    std::vector<double> disc(n), lp(n);
    for (std::size_t k = 0; k < n_keep; ++k) {
      particles[k] = pop.particles[order[k]];
      disc[k] = pop.discrepancies[order[k]];
      lp[k] = log_prior[order[k]];
    }
    auto rs = substream(settings.seed, StreamTag::resample, {round});
    std::uniform_int_distribution<std::size_t> pick(0, n_keep - 1);
    for (std::size_t k = n_keep; k < n; ++k) {
      const auto src = pick(rs);
      particles[k] = particles[src];
      disc[k] = disc[src];
      lp[k] = lp[src];
    }

    Eigen::MatrixXd survivors(static_cast<Eigen::Index>(n_keep), static_cast<Eigen::Index>(pop.names.size()));
    for (std::size_t k = 0; k < n_keep; ++k)
      for (std::size_t j = 0; j < pop.names.size(); ++j)
        survivors(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = particles[k][j];
    Eigen::MatrixXd kernel = 2.0 * row_covariance(survivors);
    kernel.diagonal().array() += 1e-12 * (kernel.trace() + 1e-300);
    Eigen::LLT<Eigen::MatrixXd> llt(kernel);
    if (llt.info() != Eigen::Success) throw SamplerError("SMC-ABC: survivor covariance is degenerate");
    const Eigen::MatrixXd factor = llt.matrixL();

    // One trial move per refilled particle estimates p_acc; R_t - 1 further
    // moves follow.
    std::vector<std::size_t> accepted(n, 0), tried(n, 0), simulated(n, 0), failed(n, 0);
    auto move = [&](std::size_t k, std::size_t count, std::uint64_t phase) {
      auto s = substream(settings.seed, StreamTag::particle_move, {round, k, phase});
      for (std::size_t r = 0; r < count; ++r) {
        auto proposal = detail::gaussian_step(particles[k], factor, s);
        const double lpp = prior.log_density(proposal);
        const double log_u = std::log(uniform01(s));
        ++tried[k];
        if (!std::isfinite(lpp) || !(log_u < lpp - lp[k])) continue;
        const double d = mock_discrepancy(problem, proposal, s);
        ++simulated[k];
        if (!std::isfinite(d)) ++failed[k];
        if (d <= eps) {
          particles[k] = std::move(proposal);
          disc[k] = d;
          lp[k] = lpp;
          ++accepted[k];
        }
      }
    };
    parallel_for(n_drop, settings.threads, [&](std::size_t j) { move(n_keep + j, 1, 0); });
    std::size_t acc1 = 0;
    for (std::size_t k = n_keep; k < n; ++k) acc1 += accepted[k];
    const double p_trial = static_cast<double>(acc1) / static_cast<double>(n_drop);
    const std::size_t r_t = moves_for_acceptance(p_trial, settings.unmoved_probability, settings.max_moves);
    if (r_t > 1) parallel_for(n_drop, settings.threads, [&](std::size_t j) { move(n_keep + j, r_t - 1, 1); });

    std::size_t acc = 0, total = 0, sims = 0, fails = 0;
    for (std::size_t k = n_keep; k < n; ++k) {
      acc += accepted[k];
      total += tried[k];
      sims += simulated[k];
      fails += failed[k];
    }
    pop.simulations += sims;
    pop.failed_simulations += fails;
    const double p_acc = static_cast<double>(acc) / static_cast<double>(total);
    pop.acceptance_history.push_back(p_acc);
    pop.moves_history.push_back(r_t);
    pop.particles = std::move(particles);
    pop.discrepancies = std::move(disc);
    log_prior = std::move(lp);
    if (p_acc < settings.stop_acceptance) break;
  }
  return pop;
}

/// (2.38^2 / d) * covariance of `states` (rows), plus 1e-8 * trace * I.
inline Eigen::MatrixXd proposal_from_samples(const Eigen::MatrixXd& states) {
  if (states.rows() < 2) throw SamplerError("proposal adaptation needs at least two states");
  const auto d = static_cast<double>(states.cols());
  Eigen::MatrixXd cov = row_covariance(states);
  const double tr = cov.trace();
  if (!(tr > 0.0)) throw SamplerError("pilot states are all identical; increase the pilot proposal step");
  cov *= 2.38 * 2.38 / d;
  // Jitter each coordinate relative to its own variance. A plain trace * I term
  // swamps small-scale coordinates when scales differ by 1e5 or more.
  const double fallback = 1e-8 * cov.trace() / d;
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    cov(i, i) += cov(i, i) > 0.0 ? 1e-8 * d * cov(i, i) : fallback;
  return cov;
}

struct PilotSpec {
  std::size_t chains = 1;
  std::size_t rounds = 1;
  double burn_in = 0.2;
};

/// Runs `spec.rounds` rounds of pilot chains, each round re-estimating the
/// proposal from the pooled post-burn-in states of the previous one.
/// `run(round, chain, proposal_cov)` returns a pilot chain.
inline Eigen::MatrixXd pilot_adapt_proposal(
    const PilotSpec& spec, Eigen::MatrixXd proposal,
    const std::function<PosteriorChain(std::size_t, std::size_t, const Eigen::MatrixXd&)>& run) {
  if (spec.chains < 1 || spec.rounds < 1) throw ConfigError("pilot spec needs at least one chain and one round");
  for (std::size_t r = 0; r < spec.rounds; ++r) {
    std::vector<Eigen::MatrixXd> parts;
    Eigen::Index rows = 0;
    for (std::size_t c = 0; c < spec.chains; ++c) {
      parts.push_back(run(r, c, proposal).post_burn_in(spec.burn_in));
      rows += parts.back().rows();
    }
    Eigen::MatrixXd pooled(rows, proposal.cols());
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      pooled.middleRows(at, p.rows()) = p;
      at += p.rows();
    }
    proposal = proposal_from_samples(pooled);
  }
  return proposal;
}

// ---------------------------------------------------------------------------
// Hybrid SMC -> MCMC

struct HybridSettings {
  SmcSettings smc;
  McmcSettings mcmc;
  std::size_t calibration_draws = 200;  // K
  double target_acceptance = 0.5;
  std::size_t chains = 1;
};

struct HybridResult {
  ParticlePopulation smc;
  double epsilon_star = kInf;
  std::vector<double> calibration_discrepancies;
  std::vector<PosteriorChain> chains;
};

/// Tolerance at which a proposal equal to `best` would be accepted with
/// probability `target`: the target-quantile of K mock discrepancies.
inline std::pair<double, std::vector<double>> calibrate_tolerance(const CalibrationProblem& problem,
                                                                  std::span<const double> best, std::size_t k,
                                                                  double target, std::uint64_t seed, unsigned threads) {
  if (k < 1) throw ConfigError("tolerance calibration needs at least one draw");
  std::vector<double> d(k);
  parallel_for(k, threads, [&](std::size_t i) {
    auto s = substream(seed, StreamTag::calibration, {i});
    d[i] = mock_discrepancy(problem, best, s);
  });
  return {quantile(d, target), d};
}

inline HybridResult hybrid_smc_then_mcmc(const CalibrationProblem& problem, const Prior& prior,
                                         const HybridSettings& settings) {
  HybridResult out;
  out.smc = smc_abc_adaptive(problem, prior, settings.smc);
  const auto best = out.smc.best();
  const auto& start = out.smc.particles[best];
  auto [eps, draws] = calibrate_tolerance(problem, start, settings.calibration_draws, settings.target_acceptance,
                                          settings.mcmc.seed, settings.mcmc.threads);
  if (!std::isfinite(eps)) throw SamplerError("hybrid: tolerance calibration failed at the best particle");
  out.epsilon_star = eps;
  out.calibration_discrepancies = std::move(draws);
  // Any simulation at the start point is a valid current discrepancy; the
  // smallest calibration draw sits below the quantile by construction.
  const double init_disc = std::min(out.smc.discrepancies[best],
                                    *std::min_element(out.calibration_discrepancies.begin(),
                                                      out.calibration_discrepancies.end()));
  McmcSettings mcmc = settings.mcmc;
  if (mcmc.proposal_cov.size() == 0) mcmc.proposal_cov = proposal_from_samples(out.smc.matrix());
  for (std::size_t c = 0; c < settings.chains; ++c) {
    mcmc.chain_id = settings.mcmc.chain_id + c;
    out.chains.push_back(abc_mcmc(problem, prior, start, init_disc, eps, mcmc));
  }
  return out;
}

}  // namespace popcal
