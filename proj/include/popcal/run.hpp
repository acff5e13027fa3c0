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

#include "popcal/bands.hpp"
#include "popcal/config.hpp"
#include "popcal/diagnostics.hpp"
#include "popcal/inference.hpp"
#include "popcal/svg.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>

namespace popcal {

struct RunResult {
  std::vector<PosteriorChain> chains;
  std::optional<ParticlePopulation> smc;
  std::optional<double> epsilon_star;
  std::optional<ChainDiagnostics> diagnostics;
  std::vector<std::pair<std::string, BandTable>> density_bands;
  std::optional<PredictiveResult> predictive;
  std::string predictive_mode = "none";
  double bands_burn_in = 0.2;
  Json log;

  std::size_t simulations() const {
    std::size_t s = smc ? smc->simulations : 0;
    for (const auto& c : chains) s += c.simulations;
    return s;
  }
  std::size_t failed_simulations() const {
    std::size_t s = smc ? smc->failed_simulations : 0;
    for (const auto& c : chains) s += c.failed_simulations;
    return s;
  }
};

namespace run_detail {

using config_detail::get_or;

/// Mixture start from the observed reference fit with the noise variance removed.
inline std::vector<double> reference_fit_start(const Experiment& e) {
  const auto& p = e.problem;
  const auto* mix = dynamic_cast<const MixtureDenoiseModel*>(p.model.get());
  if (!mix || p.family.kind != FamilyKind::gaussian_mixture_2 || !p.summary || !p.summary->reference())
    throw ConfigError("init 'reference_fit' needs the mixture model, mixture family and gmm2_score summary");
  const auto& r = *p.summary->reference();
  const double n2 = mix->noise_sd() * mix->noise_sd();
  const double floor = 1e-6;
  std::vector<double> full = p.layout.expand(std::vector<double>(p.layout.free_dim(), 0.0));
  const double values[] = {r.mu1, r.mu2, std::max(r.sigma1 * r.sigma1 - n2, floor),
                           std::max(r.sigma2 * r.sigma2 - n2, floor), r.omega};
  for (std::size_t i = 0; i < 5; ++i) full[i] = values[i];
  std::vector<double> v;
  for (auto i : p.layout.free_indices()) v.push_back(full[i]);
  return v;
}

inline std::vector<double> initial_state(const Experiment& e, const Json& spec_all, std::size_t chain) {
  const Json& spec = spec_all.is_array() ? spec_all.at(chain % spec_all.size()) : spec_all;
  const auto names = e.problem.layout.free_names();
  std::vector<double> v;
  if (spec.is_null()) {
    if (e.truth) return e.truth_free();
    auto s = substream(e.seed, StreamTag::misc, {chain, 0});
    return e.prior.sample(s);
  }
  if (spec.is_string()) {
    const auto tag = spec.get<std::string>();
    if (tag == "truth") {
      if (!e.truth) throw ConfigError("init 'truth' needs a synthetic truth block");
      return e.truth_free();
    }
    if (tag == "prior") {
      auto s = substream(e.seed, StreamTag::misc, {chain, 0});
      return e.prior.sample(s);
    }
    if (tag == "reference_fit") return reference_fit_start(e);
    throw ConfigError("unknown init '" + tag + "'");
  }
  for (const auto& n : names) {
    if (!spec.contains(n)) throw ConfigError("init is missing '" + n + "'");
    v.push_back(spec.at(n).get<double>());
  }
  return v;
}

inline Eigen::MatrixXd initial_proposal(const Experiment& e, const Json& spec) {
  const auto names = e.problem.layout.free_names();
  const auto d = static_cast<Eigen::Index>(names.size());
  if (spec.is_object() && spec.contains("covariance")) {
    const auto rows = spec.at("covariance").get<std::vector<std::vector<double>>>();
    if (rows.size() != names.size()) throw ConfigError("proposal covariance has the wrong dimension");
    Eigen::MatrixXd c(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (rows[static_cast<std::size_t>(i)].size() != names.size()) throw ConfigError("proposal covariance is not square");
      for (Eigen::Index k = 0; k < d; ++k) c(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    return c;
  }
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  const double rel = get_or(spec, "relative_sd", 0.1);
  for (Eigen::Index i = 0; i < d; ++i) {
    const auto& n = names[static_cast<std::size_t>(i)];
    double sd = rel * e.prior.terms()[static_cast<std::size_t>(i)].sd();
    if (spec.is_object() && spec.contains("sd") && spec.at("sd").contains(n)) sd = spec.at("sd").at(n).get<double>();
    c(i, i) = sd * sd;
  }
  return c;
}

inline PosteriorChain particles_as_chain(const ParticlePopulation& pop, std::uint64_t seed) {
  PosteriorChain c;
  c.names = pop.names;
  c.seed = seed;
  for (std::size_t i = 0; i < pop.particles.size(); ++i) c.push(pop.particles[i], pop.discrepancies[i], true);
  c.simulations = 0;
  return c;
}

inline SmcSettings smc_settings(const Experiment& e, const Json& j) {
  SmcSettings s;
  s.particles = get_or(j, "particles", s.particles);
  s.drop_fraction = get_or(j, "drop_fraction", s.drop_fraction);
  s.stop_acceptance = get_or(j, "stop_acceptance", s.stop_acceptance);
  s.unmoved_probability = get_or(j, "unmoved_probability", s.unmoved_probability);
  s.max_moves = get_or(j, "max_moves", s.max_moves);
  s.max_rounds = get_or(j, "max_rounds", s.max_rounds);
  s.seed = substream(e.seed, StreamTag::misc, {1})();
  s.threads = e.threads;
  return s;
}

/// Pools post-burn-in states of several chains into one chain (no burn-in left).
inline PosteriorChain pooled(const std::vector<PosteriorChain>& chains, double burn_in) {
  PosteriorChain out;
  out.names = chains.front().names;
  for (const auto& c : chains) {
    const auto start = static_cast<std::size_t>(std::floor(burn_in * static_cast<double>(c.size())));
    for (std::size_t i = start; i < c.size(); ++i) out.push(c.states[i], c.values[i], c.accepted[i] != 0);
  }
  return out;
}

inline std::vector<double> grid_from(const Json& g) {
  return linear_grid(g.at("from").get<double>(), g.at("to").get<double>(), get_or<std::size_t>(g, "points", 201));
}

}  // namespace run_detail

/// Runs the configured sampler. Does not write anything.
inline RunResult run_sampler(const Experiment& e) {
  using namespace run_detail;
  RunResult out;
  out.bands_burn_in = e.burn_in;
  const auto& engine = e.config.at("engine");
  const auto tag = config_detail::require(engine, "tag", "engine").get<std::string>();
  const auto& p = e.problem;
  const std::size_t chains = get_or<std::size_t>(engine, "chains", 1);
  if (chains < 1) throw ConfigError("engine needs at least one chain");
  const Json init_spec = engine.value("init", Json());

  McmcSettings base;
  base.iterations = get_or<std::size_t>(engine, "iterations", 1000);
  base.thin = get_or<std::size_t>(engine, "thin", 1);
  base.seed = e.seed;
  base.threads = e.threads;

  if (tag == "bsl_mcmc" || tag == "abc_mcmc") {
    const bool bsl = tag == "bsl_mcmc";
    Eigen::MatrixXd cov = initial_proposal(e, engine.value("proposal", Json()));
    const std::size_t m = get_or<std::size_t>(engine, "m", 50);
    const double eps = bsl ? 0.0 : config_detail::require(engine, "epsilon", "abc_mcmc").get<double>();
    const std::size_t attempts = get_or<std::size_t>(engine, "init_attempts", 10000);

    auto run_chain = [&](std::uint64_t chain_id, const std::vector<double>& init, const Eigen::MatrixXd& proposal,
                         std::size_t iterations, std::size_t thin) {
      if (bsl) {
        BslSettings s;
        static_cast<McmcSettings&>(s) = base;
        s.m = m;
        s.chain_id = chain_id;
        s.proposal_cov = proposal;
        s.iterations = iterations;
        s.thin = thin;
        return bsl_mcmc(p, e.prior, init, s);
      }
      McmcSettings s = base;
      s.chain_id = chain_id;
      s.proposal_cov = proposal;
      s.iterations = iterations;
      s.thin = thin;
      // Find a start within tolerance: the configured state, then prior draws.
      std::vector<double> start = init;
      auto st = substream(e.seed, StreamTag::misc, {chain_id, 1});
      double d = mock_discrepancy(p, start, st);
      for (std::size_t a = 0; !(d <= eps) && a < attempts; ++a) {
        auto sa = substream(e.seed, StreamTag::misc, {chain_id, 2, a});
        start = e.prior.sample(sa);
        d = mock_discrepancy(p, start, sa);
      }
      if (!(d <= eps)) throw SamplerError("abc_mcmc: no initial state within the tolerance was found");
      return abc_mcmc(p, e.prior, start, d, eps, s);
    };

    if (engine.contains("pilot") && !engine.at("pilot").is_null()) {
      const auto& pj = engine.at("pilot");
      PilotSpec spec;
      spec.chains = get_or<std::size_t>(pj, "chains", 1);
      spec.rounds = get_or<std::size_t>(pj, "rounds", 1);
      spec.burn_in = get_or(pj, "burn_in", 0.2);
      const std::size_t iters = get_or<std::size_t>(pj, "iterations", 1000);
      cov = pilot_adapt_proposal(spec, cov, [&](std::size_t round, std::size_t c, const Eigen::MatrixXd& proposal) {
        const std::uint64_t id = (std::uint64_t{1} << 32) + round * 1024 + c;
        return run_chain(id, initial_state(e, init_spec, c), proposal, iters, 1);
      });
      const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
      out.log["pilot_proposal_sd"] = std::vector<double>(sd.data(), sd.data() + sd.size());
    }
    for (std::size_t c = 0; c < chains; ++c)
      out.chains.push_back(run_chain(c, initial_state(e, init_spec, c), cov, base.iterations, base.thin));
  } else if (tag == "smc_abc") {
    out.smc = smc_abc_adaptive(p, e.prior, smc_settings(e, engine.value("smc", Json::object())));
    out.chains.push_back(particles_as_chain(*out.smc, e.seed));
    out.bands_burn_in = 0.0;
  } else if (tag == "hybrid") {
    HybridSettings h;
    h.smc = smc_settings(e, engine.value("smc", Json::object()));
    h.mcmc = base;
    h.calibration_draws = get_or<std::size_t>(engine, "calibration_draws", 200);
    h.target_acceptance = get_or(engine, "target_acceptance", 0.5);
    h.chains = chains;
    if (engine.contains("proposal") && !engine.at("proposal").is_null())
      h.mcmc.proposal_cov = initial_proposal(e, engine.at("proposal"));
    auto r = hybrid_smc_then_mcmc(p, e.prior, h);
    out.smc = std::move(r.smc);
    out.epsilon_star = r.epsilon_star;
    out.chains = std::move(r.chains);
  } else {
    throw ConfigError("unknown engine '" + tag + "'");
  }
  return out;
}

/// Density bands per population component, posterior predictive check and diagnostics.
inline void summarise_run(const Experiment& e, RunResult& r) {
  using namespace run_detail;
  const auto& p = e.problem;
  const Json settings = e.config.value("output_settings", Json::object());

  try {
    r.diagnostics = diagnose_chains(r.chains, r.bands_burn_in);
  } catch (const DiagnosticError& err) {
    r.log["diagnostics_note"] = err.what();
  }

  const auto pool = pooled(r.chains, r.bands_burn_in);
  if (pool.size() == 0) throw DiagnosticError("no retained chain states");
  const auto samples = theta_samples(pool, p.layout, 0.0);
  const auto idx = systematic_indices(static_cast<std::size_t>(samples.rows()), get_or<std::size_t>(settings, "band_draws", 1000));
  Eigen::MatrixXd thinned(static_cast<Eigen::Index>(idx.size()), samples.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) thinned.row(static_cast<Eigen::Index>(k)) = samples.row(static_cast<Eigen::Index>(idx[k]));

  const Json grids = settings.value("density_grids", Json::object());
  for (std::size_t j = 0; j < p.family.dimension(); ++j) {
    const std::string comp = p.family.kind == FamilyKind::copula ? std::vector<std::string>{"R", "lambda", "beta"}[j]
                                                                 : p.family.components[j];
    std::vector<double> grid;
    if (grids.contains(comp)) {
      grid = grid_from(grids.at(comp));
    } else {
      // Span the population at the posterior median hyperparameters.
      Eigen::VectorXd med(samples.cols());
      for (Eigen::Index c = 0; c < samples.cols(); ++c) {
        std::vector<double> v(samples.col(c).data(), samples.col(c).data() + samples.rows());
        med(c) = quantile(v, 0.5);
      }
      double lo = 0, hi = 1;
      try {
        const auto f = p.family.build(std::span<const double>(med.data(), static_cast<std::size_t>(med.size())));
        auto s = substream(e.seed, StreamTag::misc, {2, j});
        const auto x = sample_population(f, 4000, s);
        std::vector<double> col(x.col(static_cast<Eigen::Index>(j)).data(), x.col(static_cast<Eigen::Index>(j)).data() + x.rows());
        std::sort(col.begin(), col.end());
        lo = quantile_sorted(col, 0.001);
        hi = quantile_sorted(col, 0.999);
        const double pad = 0.25 * (hi - lo);
        lo -= pad;
        hi += pad;
        if (p.family.truncate_positive || p.family.kind == FamilyKind::copula) lo = std::max(lo, 0.0);
      } catch (const std::exception&) {
      }
      if (!(hi > lo)) hi = lo + 1.0;
      grid = linear_grid(lo, hi, 201);
    }
    auto band = posterior_density_bands(thinned, p.family, j, grid);
    if (e.truth) {
      const std::span<const double> t(*e.truth);
      const auto f = p.family.build(t.first(p.layout.theta_dim));
      std::vector<double> tv;
      for (double g : band.grid) tv.push_back(density(marginal(f, j), g));
      band.truth = tv;
    }
    r.density_bands.emplace_back(comp, std::move(band));
  }

  const Json pj = settings.value("predictive", Json::object());
  std::string mode = get_or<std::string>(pj, "mode", "");
  if (mode.empty()) mode = p.observed.cols() == 1 ? "kde" : (p.summary ? "summaries" : "none");
  r.predictive_mode = mode;
  if (mode != "none") {
    PredictiveSettings ps;
    ps.draws = get_or<std::size_t>(pj, "draws", 200);
    ps.burn_in = 0.0;
    ps.summaries = mode == "summaries";
    if (mode != "kde" && mode != "summaries") throw ConfigError("predictive mode must be kde, summaries or none");
    ps.column = get_or<std::size_t>(pj, "column", 0);
    ps.seed = e.seed;
    ps.threads = e.threads;
    if (mode == "kde") {
      if (pj.contains("grid")) {
        ps.grid = grid_from(pj.at("grid"));
      } else {
        auto col = p.observed.column(ps.column);
        const double bw = silverman_bandwidth(col);
        const auto [mn, mx] = std::minmax_element(col.begin(), col.end());
        ps.grid = linear_grid(*mn - 3 * bw, *mx + 3 * bw, 201);
      }
      if (pj.contains("bandwidth")) ps.bandwidth = pj.at("bandwidth").get<double>();
    }
    r.predictive = posterior_predictive_check(pool, p, ps);
  }
}

inline Json run_log(const Experiment& e, const RunResult& r, double wall_seconds) {
  Json log = r.log;
  log["name"] = e.name;
  log["seed"] = e.seed;
  log["engine"] = e.config.at("engine").at("tag");
  log["observed_rows"] = e.problem.observed.rows();
  log["n_sim"] = e.problem.n_sim;
  std::vector<double> acc;
  for (const auto& c : r.chains) acc.push_back(c.acceptance_rate());
  log["acceptance_rates"] = acc;
  log["simulations"] = r.simulations();
  log["failed_simulations"] = r.failed_simulations();
  if (r.smc) {
    log["smc_epsilon_history"] = r.smc->epsilon_history;
    log["smc_acceptance_history"] = r.smc->acceptance_history;
    log["smc_moves_history"] = r.smc->moves_history;
  }
  if (r.epsilon_star) log["epsilon_star"] = *r.epsilon_star;
  if (r.predictive) log["predictive_failures"] = r.predictive->failures;
  log["wall_seconds"] = wall_seconds;
  return log;
}

/// Diagnostics table with the parameter name as first column (text).
inline void write_diagnostics(const std::string& path, const ChainDiagnostics& d) {
  std::ofstream out(path);
  out << "parameter,ess,rhat,zero_variance,mean,sd,q025,q50,q975\n";
  for (const auto& p : d.parameters)
    out << p.name << ',' << format_double(p.ess) << ',' << format_double(p.rhat) << ',' << (p.zero_variance ? 1 : 0)
        << ',' << format_double(p.mean) << ',' << format_double(p.sd) << ',' << format_double(p.q025) << ','
        << format_double(p.q50) << ',' << format_double(p.q975) << '\n';
}

inline void write_artifacts(const Experiment& e, const RunResult& r, double wall_seconds) {
  namespace fs = std::filesystem;
  const fs::path dir(e.output);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.json");
    cfg << e.config.dump(2) << '\n';
  }
  if (e.synthetic) write_csv((dir / "observed.csv").string(), e.problem.observed);
  for (std::size_t c = 0; c < r.chains.size(); ++c)
    write_csv((dir / ("chain_" + std::to_string(c + 1) + ".csv")).string(), chain_dataset(r.chains[c]));
  if (r.smc) {
    auto pc = run_detail::particles_as_chain(*r.smc, e.seed);
    write_csv((dir / "particles.csv").string(), chain_dataset(pc));
  }
  if (r.diagnostics) write_diagnostics((dir / "diagnostics.csv").string(), *r.diagnostics);
  for (const auto& [comp, band] : r.density_bands) {
    write_csv((dir / ("density_" + comp + ".csv")).string(), band.dataset());
    write_text((dir / ("density_" + comp + ".svg")).string(), band_plot_svg(band, "f(" + comp + ")", comp));
  }
  if (r.predictive) {
    write_csv((dir / "predictive.csv").string(), r.predictive->bands.dataset());
    const std::string label = r.predictive_mode == "kde" ? "y" : "summary index";
    write_text((dir / "predictive.svg").string(), band_plot_svg(r.predictive->bands, "posterior predictive", label));
  }
  const auto pool = run_detail::pooled(r.chains, r.bands_burn_in);
  std::optional<std::vector<double>> truth;
  if (e.truth) truth = e.truth_free();
  write_text((dir / "posteriors.svg").string(), posterior_panels_svg(pool.names, pool.post_burn_in(0.0), truth));
  std::ofstream log(dir / "run_log.json");
  log << run_log(e, r, wall_seconds).dump(2) << '\n';
}

/// Full pipeline: sample, summarise, write artifacts. Throws DiagnosticError
/// (after writing) when more than half of all simulations failed.
inline RunResult run_calibration(const Experiment& e, bool write = true) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r = run_sampler(e);
  const double failure = r.simulations() == 0 ? 0.0
                                              : static_cast<double>(r.failed_simulations()) /
                                                    static_cast<double>(r.simulations());
  std::optional<std::string> diagnostic_failure;
  if (failure > 0.5) diagnostic_failure = "more than half of the simulations failed";
  try {
    summarise_run(e, r);
  } catch (const DiagnosticError& err) {
    if (!diagnostic_failure) diagnostic_failure = err.what();
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (write) write_artifacts(e, r, wall);
  if (!e.quiet) {
    std::cerr << e.name << ": " << r.chains.size() << " chain(s), acceptance";
    for (const auto& c : r.chains) std::cerr << ' ' << c.acceptance_rate();
    std::cerr << ", " << r.simulations() << " simulations in " << wall << " s\n";
  }
  if (diagnostic_failure) throw DiagnosticError(*diagnostic_failure);
  return r;
}

}  // namespace popcal
