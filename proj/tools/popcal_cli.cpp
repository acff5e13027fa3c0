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
#include "popcal/run.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace {

using namespace popcal;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  unsigned threads = 1;
  bool quiet = false;

  RunOptions options() const { return {seed, out, threads, quiet}; }
};

Experiment load(const Flags& f) {
  if (f.config.empty()) throw ConfigError("--config is required");
  return load_experiment_file(f.config, f.options());
}

int cmd_simulate(const Flags& f) {
  const auto e = load(f);
  if (!e.synthetic) throw ConfigError("simulate needs a 'synthetic' block in the config");
  std::filesystem::create_directories(e.output);
  const auto path = (std::filesystem::path(e.output) / "observed.csv").string();
  write_csv(path, e.problem.observed);
  if (!f.quiet) std::cerr << "wrote " << e.problem.observed.rows() << " rows to " << path << '\n';
  return 0;
}

int cmd_calibrate(const Flags& f) {
  run_calibration(load(f));
  return 0;
}

std::vector<PosteriorChain> read_chains(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("at least one --chain file is required");
  std::vector<PosteriorChain> chains;
  for (const auto& p : paths) chains.push_back(chain_from_dataset(read_csv(p)));
  return chains;
}

int cmd_bands(const Flags& f, const std::vector<std::string>& chain_paths) {
  const auto e = load(f);
  RunResult r;
  r.chains = read_chains(chain_paths);
  if (r.chains.front().names != e.problem.layout.free_names())
    throw DataError("chain columns do not match the config's free hyperparameters");
  r.bands_burn_in = e.burn_in;
  summarise_run(e, r);
  namespace fs = std::filesystem;
  const fs::path dir(e.output);
  fs::create_directories(dir);
  for (const auto& [comp, band] : r.density_bands) {
    write_csv((dir / ("density_" + comp + ".csv")).string(), band.dataset());
    write_text((dir / ("density_" + comp + ".svg")).string(), band_plot_svg(band, "f(" + comp + ")", comp));
  }
  if (r.predictive) {
    write_csv((dir / "predictive.csv").string(), r.predictive->bands.dataset());
    write_text((dir / "predictive.svg").string(),
               band_plot_svg(r.predictive->bands, "posterior predictive", r.predictive_mode == "kde" ? "y" : "summary index"));
  }
  return 0;
}

int cmd_diagnose(const Flags& f, const std::vector<std::string>& chain_paths, double burn_in) {
  const auto d = diagnose_chains(read_chains(chain_paths), burn_in);
  if (!f.quiet) {
    std::printf("%-20s %12s %10s %12s %12s\n", "parameter", "ess", "rhat", "mean", "sd");
    for (const auto& p : d.parameters)
      std::printf("%-20s %12.1f %10.4f %12.5g %12.5g%s\n", p.name.c_str(), p.ess, p.rhat, p.mean, p.sd,
                  p.zero_variance ? "  (zero variance)" : "");
    for (std::size_t c = 0; c < d.acceptance_rates.size(); ++c)
      std::printf("chain %zu acceptance %.4f\n", c + 1, d.acceptance_rates[c]);
  }
  if (f.out) {
    std::filesystem::create_directories(*f.out);
    write_diagnostics((std::filesystem::path(*f.out) / "diagnostics.csv").string(), d);
  }
  return 0;
}

int cmd_distance(const Flags& f, const std::string& kind, const std::string& observed, const std::string& simulated,
                 const std::string& summary) {
  const auto y = read_csv(observed);
  const auto z = read_csv(simulated);
  if (y.columns != z.columns) throw DataError("datasets have different columns");
  std::optional<SummaryFunction> s;
  const auto k = discrepancy_from_tag(kind);
  if (k == DiscrepancyKind::euclidean || k == DiscrepancyKind::mahalanobis) {
    const auto seed = substream(f.seed.value_or(1), StreamTag::reference_fit)();
    s = SummaryFunction::for_observed(summary_from_tag(summary), y, seed);
  }
  double value = 0.0;
  try {
    value = Discrepancy(k, y, s)(z);
  } catch (const std::invalid_argument& err) {
    throw DataError(err.what());
  }
  std::printf("%s\n", format_double(value).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"popcal: population calibration with likelihood-free samplers"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags flags;
  app.add_option("--config", flags.config, "experiment config (JSON)");
  app.add_option("--seed", flags.seed, "run seed (overrides the config)");
  app.add_option("--out", flags.out, "output directory (overrides the config)");
  app.add_option("--threads", flags.threads, "worker threads; affects speed only")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", flags.quiet, "suppress progress output");

  auto* simulate = app.add_subcommand("simulate", "write a synthetic dataset from the config's truth block");
  auto* calibrate = app.add_subcommand("calibrate", "run a full calibration and write its artifacts");
  auto* bands = app.add_subcommand("bands", "recompute density and predictive bands from chain files");
  auto* diagnose = app.add_subcommand("diagnose", "chain diagnostics (ESS, split R-hat)");
  auto* distance = app.add_subcommand("distance", "discrepancy between two CSV datasets");

  std::vector<std::string> chain_paths;
  double burn_in = 0.2;
  bands->add_option("--chain", chain_paths, "chain CSV (repeatable)")->required();
  diagnose->add_option("--chain", chain_paths, "chain CSV (repeatable)")->required();
  diagnose->add_option("--burn-in", burn_in, "fraction discarded from the start of each chain");

  std::string kind, observed, simulated, summary = "mean";
  distance->add_option("--kind", kind, "discrepancy tag")->required();
  distance->add_option("--observed", observed, "observed dataset CSV")->required();
  distance->add_option("--simulated", simulated, "simulated dataset CSV")->required();
  distance->add_option("--summary", summary, "summary tag for summary-space distances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(flags);
    if (calibrate->parsed()) return cmd_calibrate(flags);
    if (bands->parsed()) return cmd_bands(flags, chain_paths);
    if (diagnose->parsed()) return cmd_diagnose(flags, chain_paths, burn_in);
    if (distance->parsed()) return cmd_distance(flags, kind, observed, simulated, summary);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const SamplerError& e) {
    std::cerr << "sampler error: " << e.what() << '\n';
    return 4;
  } catch (const DiagnosticError& e) {
    std::cerr << "diagnostic failure: " << e.what() << '\n';
    return 5;
  } catch (const nlohmann::json::exception& e) {
    // Wrong value types in the config surface here.
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
