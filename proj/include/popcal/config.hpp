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
#include "popcal/dataset.hpp"
#include "popcal/diagnostics.hpp"
#include "popcal/distances.hpp"
#include "popcal/distributions.hpp"
#include "popcal/errors.hpp"
#include "popcal/external.hpp"
#include "popcal/inference.hpp"
#include "popcal/models.hpp"
#include "popcal/ode.hpp"
#include "popcal/summaries.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace popcal {

using Json = nlohmann::json;

/// Command-line overrides applied on top of a config document.
struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  unsigned threads = 1;
  bool quiet = false;
};

namespace config_detail {

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline const Json& require(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  return j.at(key);
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

inline OdeSolverSettings ode_settings(const Json& j) {
  OdeSolverSettings s;
  if (j.is_null()) return s;
  s.method = ode_method_from_tag(get_or<std::string>(j, "method", ode_method_tag(s.method)));
  s.abs_tol = get_or(j, "abs_tol", s.abs_tol);
  s.rel_tol = get_or(j, "rel_tol", s.rel_tol);
  s.step = get_or(j, "step", s.step);
  s.max_steps = get_or(j, "max_steps", s.max_steps);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

}  // namespace config_detail

inline std::shared_ptr<const SimulationModel> build_model(const Json& j, const std::filesystem::path& base) {
  using namespace config_detail;
  const std::string model_tag = require(j, "tag", "model").get<std::string>();
  if (model_tag == "mixture") return std::make_shared<MixtureDenoiseModel>(get_or(j, "noise_sd", 0.045));
  if (model_tag == "growth") {
    GrowthModel::Config c;
    const auto ligands = get_or<std::vector<double>>(j, "ligands", {c.ligand_a, c.ligand_b});
    if (ligands.size() != 2) throw ConfigError("growth model needs two ligand levels");
    c.ligand_a = ligands[0];
    c.ligand_b = ligands[1];
    c.observation_time = get_or(j, "time", c.observation_time);
    const auto& names = GrowthModel::coordinate_names();
    if (j.contains("free")) {
      const auto free = j.at("free").get<std::vector<std::string>>();
      for (std::size_t i = 0; i < 5; ++i) c.free[i] = std::find(free.begin(), free.end(), names[i]) != free.end();
      for (const auto& f : free)
        if (std::find(names.begin(), names.end(), f) == names.end()) throw ConfigError("unknown growth coordinate '" + f + "'");
    }
    if (j.contains("fixed"))
      for (auto& [k, v] : j.at("fixed").items()) {
        const auto it = std::find(names.begin(), names.end(), k);
        if (it == names.end()) throw ConfigError("unknown growth coordinate '" + k + "'");
        c.fixed[static_cast<std::size_t>(it - names.begin())] = v.get<double>();
      }
    const auto term = get_or<std::string>(j, "dp_term", "R");
    if (term != "R" && term != "P") throw ConfigError("dp_term must be \"R\" or \"P\"");
    c.solver.dp_term = term == "R" ? DegradationTerm::R : DegradationTerm::P;
    c.solver.ode = ode_settings(j.value("ode", Json()));
    if (j.contains("initial_state")) {
      const auto y0 = j.at("initial_state").get<std::vector<double>>();
      if (y0.size() != 2) throw ConfigError("growth initial_state needs (R0, P0)");
      c.solver.initial_state = std::array<double, 2>{y0[0], y0[1]};
    }
    return std::make_shared<GrowthModel>(c);
  }
  if (model_tag == "internalisation") {
    InternalisationModel::Config c;
    c.eta = get_or(j, "eta", c.eta);
    if (j.contains("design")) {
      c.design.clear();
      for (const auto& d : j.at("design"))
        c.design.push_back({require(d, "time", "design").get<double>(), get_or(d, "quenched", false)});
    }
    if (j.contains("autofluorescence") && !j.at("autofluorescence").is_null())
      c.autofluorescence = autofluorescence_from(read_csv(resolve(base, j.at("autofluorescence").get<std::string>())));
    c.ode = ode_settings(j.value("ode", Json()));
    return std::make_shared<InternalisationModel>(c);
  }
  if (model_tag == "external") {
    const auto command = require(j, "command", "external model").get<std::vector<std::string>>();
    auto columns = require(j, "columns", "external model").get<std::vector<std::string>>();
    const auto dim = require(j, "parameter_dim", "external model").get<std::size_t>();
    auto nuisance = get_or<std::vector<std::string>>(j, "nuisance", {});
    std::vector<std::string> argv;
    for (const auto& a : command) argv.push_back(a);
    return register_external_model(std::move(argv), std::move(columns), dim, std::move(nuisance));
  }
  throw ConfigError("unknown model '" + model_tag + "'");
}

inline PopulationFamily build_family(const Json& j) {
  using namespace config_detail;
  PopulationFamily f;
  f.kind = family_from_tag(require(j, "family", "population").get<std::string>());
  if (f.kind == FamilyKind::copula) return PopulationFamily::copula_family();
  f.components = get_or<std::vector<std::string>>(j, "components", {"x"});
  if (f.components.empty()) throw ConfigError("population needs at least one component");
  if (f.kind != FamilyKind::independent_product && f.components.size() != 1)
    throw ConfigError("only independent_product takes several components");
  f.truncate_positive = get_or(j, "truncate_positive", false);
  return f;
}

inline PriorTerm build_prior_term(const Json& j, const std::string& name) {
  using namespace config_detail;
  const auto kind = require(j, "prior", name).get<std::string>();
  if (kind == "uniform") return PriorTerm::uniform(require(j, "lower", name).get<double>(), require(j, "upper", name).get<double>());
  if (kind == "gaussian") return PriorTerm::gaussian(require(j, "mean", name).get<double>(), require(j, "sd", name).get<double>());
  if (kind == "exponential") return PriorTerm::exponential(require(j, "rate", name).get<double>());
  throw ConfigError(name + ": unknown prior '" + kind + "'");
}

/// Fixed values and priors from the "parameters" block; every free name needs a prior.
inline Prior build_prior(ParameterLayout& layout, const Json& parameters, const Json& constraints) {
  if (!parameters.is_object()) throw ConfigError("'parameters' must be an object keyed by hyperparameter name");
  for (auto& [name, spec] : parameters.items()) {
    layout.index_of(name);
    if (spec.contains("fixed")) layout.fix(name, spec.at("fixed").get<double>());
  }
  std::vector<PriorTerm> terms;
  for (const auto& name : layout.free_names()) {
    if (!parameters.contains(name)) throw ConfigError("no prior given for '" + name + "'");
    terms.push_back(build_prior_term(parameters.at(name), name));
  }
  const auto free = layout.free_names();
  auto free_index = [&](const std::string& n) {
    const auto it = std::find(free.begin(), free.end(), n);
    if (it == free.end()) throw ConfigError("constraint refers to '" + n + "', which is not a free hyperparameter");
    return static_cast<std::size_t>(it - free.begin());
  };
  std::vector<LinearConstraint> cs;
  if (constraints.is_array())
    for (const auto& c : constraints) {
      if (c.is_array() && c.size() == 2) {
        cs.push_back(LinearConstraint::less_than(free_index(c[0].get<std::string>()), free_index(c[1].get<std::string>())));
      } else if (c.is_object()) {
        LinearConstraint lc;
        for (auto& [n, coef] : c.at("coefficients").items()) {
          lc.index.push_back(free_index(n));
          lc.coefficients.push_back(coef.get<double>());
        }
        lc.upper = config_detail::get_or(c, "upper", 0.0);
        cs.push_back(lc);
      } else {
        throw ConfigError("constraints are [\"a\", \"b\"] pairs (a < b) or {coefficients, upper} objects");
      }
    }
  return Prior(std::move(terms), std::move(cs));
}

/// Everything needed to run one experiment, resolved from a config document.
struct Experiment {
  Json config;  // effective config (seed and output applied)
  std::filesystem::path base_dir;
  std::string name;
  std::uint64_t seed = 1;
  std::string output;
  unsigned threads = 1;
  bool quiet = false;

  CalibrationProblem problem;
  Prior prior;
  std::optional<std::vector<double>> truth;  // full (theta, phi) when synthetic
  bool synthetic = false;
  double burn_in = 0.2;

  std::vector<double> truth_free() const {
    std::vector<double> v;
    for (auto i : problem.layout.free_indices()) v.push_back((*truth)[i]);
    return v;
  }
};

inline std::vector<double> truth_vector(const ParameterLayout& layout, const Json& values) {
  std::vector<double> full(layout.full_dim());
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (values.contains(layout.names[i])) full[i] = values.at(layout.names[i]).get<double>();
    else if (layout.fixed[i]) full[i] = *layout.fixed[i];
    else throw ConfigError("synthetic truth is missing '" + layout.names[i] + "'");
  }
  return full;
}

/// Synthetic dataset of `n` rows (per condition for designed experiments).
inline Dataset simulate_synthetic(const CalibrationProblem& problem, std::span<const double> truth, std::size_t n,
                                  std::uint64_t seed) {
  CalibrationProblem p = problem;
  p.n_sim = n;
  auto s = substream(seed, StreamTag::synthetic_data);
  const auto theta = truth.first(problem.layout.theta_dim);
  const auto phi = truth.subspan(problem.layout.theta_dim);
  auto z = simulate_mock_population(p, theta, phi, s);
  if (!z) throw ConfigError("synthetic truth could not be simulated");
  return *z;
}

inline std::size_t rows_per_population(const SimulationModel& model, std::size_t rows) {
  if (const auto* m = dynamic_cast<const InternalisationModel*>(&model)) {
    const auto k = m->config().design.size();
    if (rows % k != 0) throw DataError("flow dataset size is not a multiple of the design size");
    return rows / k;
  }
  return rows;
}

inline Experiment load_experiment(Json config, const std::filesystem::path& base_dir, const RunOptions& options = {}) {
  using namespace config_detail;
  Experiment e;
  if (!config.is_object()) throw ConfigError("config must be a JSON object");
  if (options.seed) config["seed"] = *options.seed;
  if (options.output) config["output"] = *options.output;
  e.config = config;
  e.base_dir = base_dir;
  e.name = get_or<std::string>(config, "name", "run");
  e.seed = get_or<std::uint64_t>(config, "seed", 1);
  e.output = get_or<std::string>(config, "output", "out");
  e.threads = std::max(1u, options.threads);
  e.quiet = options.quiet;
  e.burn_in = get_or(config.value("output_settings", Json::object()), "burn_in", 0.2);
  if (!(e.burn_in >= 0.0 && e.burn_in < 1.0)) throw ConfigError("burn_in must lie in [0, 1)");

  auto& p = e.problem;
  p.model = build_model(require(config, "model", "config"), base_dir);
  p.family = build_family(require(config, "population", "config"));
  if (p.family.dimension() != p.model->parameter_dim())
    throw ConfigError("population dimension does not match the model's parameter dimension");
  p.layout = CalibrationProblem::default_layout(p.family, *p.model);
  e.prior = build_prior(p.layout, require(config, "parameters", "config"), config.value("constraints", Json::array()));

  const bool has_data = config.contains("data") && !config.at("data").is_null();
  const bool has_synth = config.contains("synthetic") && !config.at("synthetic").is_null();
  if (has_data == has_synth) throw ConfigError("exactly one of 'data' and 'synthetic' must be given");
  if (has_synth) {
    const auto& s = config.at("synthetic");
    e.truth = truth_vector(p.layout, require(s, "truth", "synthetic"));
    e.synthetic = true;
    const auto n = require(s, "n", "synthetic").get<std::size_t>();
    if (n < 1) throw ConfigError("synthetic n must be at least 1");
    p.observed = simulate_synthetic(p, *e.truth, n, e.seed);
  } else {
    p.observed = read_csv(resolve(base_dir, require(config.at("data"), "path", "data").get<std::string>()));
    if (p.observed.cols() != p.model->output_columns().size())
      throw DataError("observed data has " + std::to_string(p.observed.cols()) + " columns, model produces " +
                      std::to_string(p.model->output_columns().size()));
    if (config.at("data").contains("truth")) e.truth = truth_vector(p.layout, config.at("data").at("truth"));
  }
  if (p.observed.rows() == 0) throw DataError("observed dataset is empty");
  const auto& engine = require(config, "engine", "config");
  {
    const auto tag = require(engine, "tag", "engine").get<std::string>();
    if (tag != "bsl_mcmc" && tag != "abc_mcmc" && tag != "smc_abc" && tag != "hybrid")
      throw ConfigError("unknown engine '" + tag + "'");
  }
  p.n_sim = get_or<std::size_t>(engine, "n_sim", rows_per_population(*p.model, p.observed.rows()));

  if (config.contains("summary") && !config.at("summary").is_null()) {
    auto fit_stream = substream(e.seed, StreamTag::reference_fit);
    try {
      p.summary = SummaryFunction::for_observed(summary_from_tag(config.at("summary").get<std::string>()), p.observed,
                                                fit_stream());
    } catch (const std::runtime_error& err) {
      if (dynamic_cast<const ConfigError*>(&err)) throw;
      throw DataError(std::string("summary reference fit failed: ") + err.what());
    }
  }
  if (config.contains("discrepancy") && !config.at("discrepancy").is_null()) {
    const auto& d = config.at("discrepancy");
    const auto tag = d.is_string() ? d.get<std::string>() : require(d, "tag", "discrepancy").get<std::string>();
    Discrepancy::Options opt;
    if (d.is_object()) {
      if (d.contains("weights")) {
        const auto w = d.at("weights").get<std::vector<double>>();
        opt.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
      }
      if (d.contains("correlation_weight")) opt.flow.correlation = d.at("correlation_weight").get<double>();
      opt.flow.m1 = get_or(d, "m1_weight", 1.0);
      opt.flow.m2 = get_or(d, "m2_weight", 1.0);
    }
    try {
      p.discrepancy = std::make_shared<Discrepancy>(discrepancy_from_tag(tag), p.observed, p.summary, opt);
    } catch (const std::invalid_argument& err) {
      throw DataError(std::string("discrepancy setup failed: ") + err.what());
    }
  }
  p.validate();
  return e;
}

inline Experiment load_experiment_file(const std::string& path, const RunOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& err) {
    throw ConfigError("config " + path + " is not valid JSON: " + err.what());
  }
  return load_experiment(std::move(j), std::filesystem::path(path).parent_path(), options);
}

}  // namespace popcal
