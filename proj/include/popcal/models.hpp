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
#include "popcal/ode.hpp"
#include "popcal/random.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace popcal {

/// Forward simulator g(y | x, phi) for a population.
///
/// Implementations are immutable after construction and pure given their
/// inputs and the stream, so they can be shared across worker threads.
class SimulationModel {
 public:
  virtual ~SimulationModel() = default;

  virtual std::string tag() const = 0;
  virtual std::vector<std::string> output_columns() const = 0;
  /// Number of coordinates of an individual's parameter vector x.
  virtual std::size_t parameter_dim() const = 0;
  virtual std::vector<std::string> nuisance_names() const { return {}; }

  /// Mock population of `n` rows (per condition, for designed experiments).
  /// Returns nullopt when the simulator fails.
  virtual std::optional<Dataset> simulate_population(const PopulationDistribution& f, std::span<const double> phi,
                                                     std::size_t n, Stream& stream) const {
    if (dimension(f) != parameter_dim())
      throw std::invalid_argument(tag() + ": population dimension does not match the model");
    Dataset out{output_columns(), Eigen::MatrixXd(static_cast<Eigen::Index>(n),
                                                  static_cast<Eigen::Index>(output_columns().size()))};
    std::vector<double> x(parameter_dim()), row(out.cols());
    try {
      for (std::size_t i = 0; i < n; ++i) {
        sample_into(f, stream, x);
        if (!simulate_row(x, phi, stream, row)) return std::nullopt;
        for (std::size_t j = 0; j < row.size(); ++j)
          out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
      }
    } catch (const TruncationError&) {
      return std::nullopt;
    }
    return out;
  }

  /// One observation for one individual; false signals simulator failure.
  virtual bool simulate_row(std::span<const double> x, std::span<const double> phi, Stream& stream,
                            std::span<double> out) const = 0;
};

// ---------------------------------------------------------------------------
// Mixture de-noising model: y = x + noise_sd * N(0, 1).

inline double simulate_mixture(double x, double noise_sd, Stream& stream) {
  if (noise_sd == 0.0) return x;
  return x + noise_sd * std::normal_distribution<double>(0.0, 1.0)(stream);
}

/// Closed-form output density of a two-component Gaussian mixture population
/// pushed through additive Gaussian noise.
inline double analytic_h_density(const GaussianMixture1D& f, double noise_sd, double y) {
  const double n2 = noise_sd * noise_sd;
  const double s1 = std::sqrt(f.sd1 * f.sd1 + n2), s2 = std::sqrt(f.sd2 * f.sd2 + n2);
  auto pdf = [](double v, double m, double s) {
    if (s == 0.0) return v == m ? kInf : 0.0;
    return std::exp(normal_log_pdf(v, m, s));
  };
  return f.weight * pdf(y, f.mu1, s1) + (1.0 - f.weight) * pdf(y, f.mu2, s2);
}

class MixtureDenoiseModel final : public SimulationModel {
 public:
  explicit MixtureDenoiseModel(double noise_sd = 0.045) : noise_sd_(noise_sd) {
    if (!(noise_sd_ >= 0.0)) throw ConfigError("mixture noise sd must be non-negative");
  }
  double noise_sd() const { return noise_sd_; }
  std::string tag() const override { return "mixture"; }
  std::vector<std::string> output_columns() const override { return {"y"}; }
  std::size_t parameter_dim() const override { return 1; }
  bool simulate_row(std::span<const double> x, std::span<const double>, Stream& s, std::span<double> out) const override {
    out[0] = simulate_mixture(x[0], noise_sd_, s);
    return true;
  }

 private:
  double noise_sd_;
};

// ---------------------------------------------------------------------------
// Growth-factor receptor model.
//
//   dR/dt = R_T k_deg - k1 L R + k_-1 P - k_deg R
//   dP/dt = k1 L R - k_-1 P - k_deg* D      with D = R (as written) or P

enum class DegradationTerm { R, P };

struct GrowthParameters {
  double receptors_total = 0.0;  // R_T
  double k_on = 0.0;             // k_1
  double k_off = 0.0;            // k_-1
  double k_deg = 0.0;
  double k_deg_star = 0.0;
};

struct GrowthSolverOptions {
  OdeSolverSettings ode;
  DegradationTerm dp_term = DegradationTerm::R;
  /// Overrides (R(0), P(0)); default is (R_T, 0).
  std::optional<std::array<double, 2>> initial_state;
};

namespace detail {

struct Linear2 {
  double a11, a12, a21, a22, b1, b2;
};

inline Linear2 growth_system(const GrowthParameters& x, double ligand, DegradationTerm term) {
  const double bind = x.k_on * ligand;
  Linear2 s{-(bind + x.k_deg), x.k_off, bind, -x.k_off, x.receptors_total * x.k_deg, 0.0};
  if (term == DegradationTerm::R) s.a21 -= x.k_deg_star;
  else s.a22 -= x.k_deg_star;
  return s;
}

/// exp(A t) for a real 2x2 matrix, by the Cayley-Hamilton form on the
/// eigenvalue mean s and half-gap q (real, repeated or complex).
inline std::array<double, 4> expm2(double a11, double a12, double a21, double a22, double t) {
  const double s = 0.5 * (a11 + a22);
  const double q2 = 0.25 * (a11 - a22) * (a11 - a22) + a12 * a21;
  double c, sinc;  // e^{At} = e^{st} [c I + sinc (A - sI)]
  double growth = std::exp(s * t);
  if (q2 > 0.0) {
    const double q = std::sqrt(q2);
    if (q * t > 1.0) {
      // Split into the two real exponentials to avoid overflow of cosh/sinh.
      const double l1 = s + q, l2 = s - q;
      const double e1 = std::exp(l1 * t), e2 = std::exp(l2 * t);
      c = 0.5 * (e1 + e2);
      sinc = (e1 - e2) / (2.0 * q);
      growth = 1.0;
    } else {
      c = std::cosh(q * t);
      sinc = q * t == 0.0 ? t : std::sinh(q * t) / q;
    }
  } else if (q2 < 0.0) {
    const double w = std::sqrt(-q2);
    c = std::cos(w * t);
    sinc = std::sin(w * t) / w;
  } else {
    c = 1.0;
    sinc = t;
  }
  return {growth * (c + sinc * (a11 - s)), growth * sinc * a12, growth * sinc * a21, growth * (c + sinc * (a22 - s))};
}

}  // namespace detail

/// (R(t), P(t)) from R(0) = R_T, P(0) = 0 unless overridden. nullopt on solver failure.
inline std::optional<std::array<double, 2>> solve_growth_ode(const GrowthParameters& x, double ligand, double t_end,
                                                             const GrowthSolverOptions& opt = {}) {
  if (!(t_end > 0.0)) throw std::invalid_argument("solve_growth_ode: t_end must be positive");
  const auto sys = detail::growth_system(x, ligand, opt.dp_term);
  const std::array<double, 2> y0 = opt.initial_state.value_or(std::array<double, 2>{x.receptors_total, 0.0});
  const double det = sys.a11 * sys.a22 - sys.a12 * sys.a21;
  if (opt.ode.method == OdeMethod::closed_form && det != 0.0) {
    // Steady state x* = -A^{-1} b, then x(t) = x* + e^{At} (x0 - x*).
    const double xs1 = -(sys.a22 * sys.b1 - sys.a12 * sys.b2) / det;
    const double xs2 = -(-sys.a21 * sys.b1 + sys.a11 * sys.b2) / det;
    const auto e = detail::expm2(sys.a11, sys.a12, sys.a21, sys.a22, t_end);
    const double d1 = y0[0] - xs1, d2 = y0[1] - xs2;
    std::array<double, 2> y{xs1 + e[0] * d1 + e[1] * d2, xs2 + e[2] * d1 + e[3] * d2};
    if (!std::isfinite(y[0]) || !std::isfinite(y[1])) return std::nullopt;
    return y;
  }
  auto rhs = [&sys](double, const OdeState<2>& y) {
    return OdeState<2>{sys.a11 * y[0] + sys.a12 * y[1] + sys.b1, sys.a21 * y[0] + sys.a22 * y[1] + sys.b2};
  };
  OdeSolverSettings ode = opt.ode;
  if (ode.method == OdeMethod::closed_form) ode.method = OdeMethod::dopri_adaptive;
  const double times[] = {t_end};
  auto sol = integrate<2>(rhs, y0, times, ode);
  if (!sol) return std::nullopt;
  return sol->back();
}

/// Growth model observed at two ligand levels on independent individuals:
/// each row is (P(t*; x, L_a), P(t*; x', L_b)) with x, x' independent draws.
class GrowthModel final : public SimulationModel {
 public:
  struct Config {
    double ligand_a = 2.0;
    double ligand_b = 10.0;
    double observation_time = 10.0;
    /// Which of (R_T, k1, k_-1, k_deg, k_deg*) come from the population.
    std::array<bool, 5> free{true, true, false, false, false};
    /// Values used for the fixed coordinates.
    std::array<double, 5> fixed{6.5e5, 1.7, 8.0, 0.015, 0.25};
    GrowthSolverOptions solver;
  };

  GrowthModel() : GrowthModel(Config{}) {}
  explicit GrowthModel(Config cfg) : cfg_(std::move(cfg)) {
    cfg_.solver.ode.validate();
    for (bool f : cfg_.free) dim_ += f ? 1 : 0;
  }

  static const std::array<std::string, 5>& coordinate_names() {
    static const std::array<std::string, 5> names{"R_T", "k_1", "k_m1", "k_deg", "k_deg_star"};
    return names;
  }

  const Config& config() const { return cfg_; }
  std::string tag() const override { return "growth"; }
  std::vector<std::string> output_columns() const override { return {"P_La", "P_Lb"}; }
  std::size_t parameter_dim() const override { return dim_; }

  GrowthParameters expand(std::span<const double> x) const {
    std::array<double, 5> full = cfg_.fixed;
    std::size_t k = 0;
    for (std::size_t i = 0; i < 5; ++i)
      if (cfg_.free[i]) full[i] = x[k++];
    return {full[0], full[1], full[2], full[3], full[4]};
  }

  std::optional<double> bound_receptors(std::span<const double> x, double ligand) const {
    const auto sol = solve_growth_ode(expand(x), ligand, cfg_.observation_time, cfg_.solver);
    if (!sol) return std::nullopt;
    return (*sol)[1];
  }

  std::optional<std::array<double, 2>> simulate_pair(std::span<const double> x, std::span<const double> x_prime) const {
    const auto a = bound_receptors(x, cfg_.ligand_a);
    const auto b = bound_receptors(x_prime, cfg_.ligand_b);
    if (!a || !b) return std::nullopt;
    return std::array<double, 2>{*a, *b};
  }

  std::optional<Dataset> simulate_population(const PopulationDistribution& f, std::span<const double>, std::size_t n,
                                             Stream& stream) const override {
    if (dimension(f) != dim_) throw std::invalid_argument("growth: population dimension does not match the model");
    Dataset out{output_columns(), Eigen::MatrixXd(static_cast<Eigen::Index>(n), 2)};
    std::vector<double> x(dim_), xp(dim_);
    try {
      for (std::size_t i = 0; i < n; ++i) {
        sample_into(f, stream, x);
        sample_into(f, stream, xp);
        const auto pair = simulate_pair(x, xp);
        if (!pair) return std::nullopt;
        out.values(static_cast<Eigen::Index>(i), 0) = (*pair)[0];
        out.values(static_cast<Eigen::Index>(i), 1) = (*pair)[1];
      }
    } catch (const TruncationError&) {
      return std::nullopt;
    }
    return out;
  }

  /// A single row needs two individuals; `x` holds x followed by x'.
  bool simulate_row(std::span<const double> x, std::span<const double>, Stream&, std::span<double> out) const override {
    const auto pair = simulate_pair(x.first(dim_), x.subspan(dim_, dim_));
    if (!pair) return false;
    out[0] = (*pair)[0];
    out[1] = (*pair)[1];
    return true;
  }

 private:
  Config cfg_;
  std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// Antibody internalisation model.
//
//   dT/dt = -beta T
//   dS/dt = beta T - lambda S + p beta E
//   dE/dt = lambda S - p beta E
//   dF/dt = p beta E
//
// starting from T(0) = lambda/(lambda+beta), S(0) = beta/(lambda+beta), E = F = 0.

struct InternalisationState {
  double T = 0.0, S = 0.0, E = 0.0, F = 0.0;
  double total() const { return S + E + F; }       // A(t)
  double internalised() const { return E + F; }    // I(t)
};

namespace detail {

/// (1 - e^{-a t}) / a, continuous at a = 0.
inline double one_minus_exp_over(double a, double t) {
  const double x = a * t;
  if (x == 0.0) return t;
  return -std::expm1(-x) / a;
}

/// x - 1 + e^{-x}, accurate for small x.
inline double exp_remainder2(double x) {
  if (std::abs(x) < 1e-2) return x * x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x / 120.0)));
  return x - 1.0 + std::exp(-x);
}

/// integral_0^t s^j e^{-a s} ds for a > 0.
inline double power_exp_integral(int j, double a, double t) {
  return std::tgamma(j + 1.0) / std::pow(a, j + 1) * boost::math::gamma_p(j + 1.0, a * t);
}

inline InternalisationState internalisation_closed_form(double lambda, double beta, double p, double t) {
  const double t0 = lambda / (lambda + beta);
  const double k = lambda + p * beta;
  const double delta = k - beta;
  const double decay = std::exp(-beta * t);
  InternalisationState s;
  s.T = t0 * decay;
  // (1 - e^{-delta t}) / delta, written as t * phi1(-delta t).
  const double gap = one_minus_exp_over(delta, t);
  s.E = (lambda / k) * (-std::expm1(-k * t)) - lambda * t0 * decay * gap;
  s.S = 1.0 - s.T - s.E;
  if (p == 0.0) return s;
  // H = int_0^t (e^{-beta s} - e^{-k s}) / delta ds, with a Taylor expansion in
  // delta when the direct divided difference would cancel.
  double h;
  if (std::abs(delta) * t > 1e-4) {
    h = (one_minus_exp_over(beta, t) - one_minus_exp_over(k, t)) / delta;
  } else {
    h = power_exp_integral(1, beta, t) - 0.5 * delta * power_exp_integral(2, beta, t) +
        delta * delta / 6.0 * power_exp_integral(3, beta, t);
  }
  s.F = p * beta * ((lambda / (k * k)) * exp_remainder2(k * t) - lambda * t0 * h);
  return s;
}

}  // namespace detail

/// States at each sorted time; nullopt on solver failure.
inline std::optional<std::vector<InternalisationState>> solve_internalisation(double lambda, double beta, double p,
                                                                             std::span<const double> times,
                                                                             const OdeSolverSettings& settings = {}) {
  if (!(lambda > 0.0) || !(beta > 0.0)) throw std::invalid_argument("solve_internalisation: rates must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("solve_internalisation: p must lie in [0, 1]");
  std::vector<InternalisationState> out;
  out.reserve(times.size());
  if (settings.method == OdeMethod::closed_form) {
    for (double t : times) {
      const auto s = detail::internalisation_closed_form(lambda, beta, p, t);
      if (!std::isfinite(s.S) || !std::isfinite(s.E) || !std::isfinite(s.F)) return std::nullopt;
      out.push_back(s);
    }
    return out;
  }
  auto rhs = [=](double, const OdeState<4>& y) {
    const double recycle = p * beta * y[2];
    return OdeState<4>{-beta * y[0], beta * y[0] - lambda * y[1] + recycle, lambda * y[1] - recycle, recycle};
  };
  const OdeState<4> y0{lambda / (lambda + beta), beta / (lambda + beta), 0.0, 0.0};
  const auto sol = integrate<4>(rhs, y0, times, settings);
  if (!sol) return std::nullopt;
  for (const auto& y : *sol) out.push_back({y[0], y[1], y[2], y[3]});
  return out;
}

/// Shared measurement parameters phi.
struct FlowNuisance {
  double alpha1 = 1.0, alpha2 = 1.0;
  double sigma1 = 0.0, sigma2 = 0.0;
  double p = 0.0;

  static FlowNuisance from(std::span<const double> phi) {
    if (phi.size() != 5) throw std::invalid_argument("flow nuisance vector must have 5 entries");
    return {phi[0], phi[1], phi[2], phi[3], phi[4]};
  }
};

inline const std::vector<std::string>& flow_nuisance_names() {
  static const std::vector<std::string> names{"alpha1", "alpha2", "sigma1", "sigma2", "p"};
  return names;
}

/// Cell properties xi = (R, lambda, beta).
struct CellParameters {
  double receptors = 1.0;
  double lambda = 0.0;
  double beta = 0.0;
};

namespace detail {

inline double channel(double alpha, double signal, double receptors, double sigma, double noise, double background) {
  double q = alpha * signal * receptors;
  if (q < 0.0) {
    if (q < -1e-12 * std::abs(alpha * receptors)) throw std::logic_error("flow measurement: negative signal");
    q = 0.0;
  }
  return q + std::sqrt(q) * sigma * noise + background;
}

}  // namespace detail

/// Two-channel measurement of one cell in a given state. Channel 1 sees A(t)
/// without quencher and I(t) + (1 - eta) S(t) with quencher; channel 2 always
/// sees A(t).
inline std::array<double, 2> measure_cell(const InternalisationState& state, double receptors, const FlowNuisance& phi,
                                          bool quenched, double eta, std::array<double, 2> background,
                                          std::array<double, 2> noise) {
  const double total = state.total();
  const double q1 = quenched ? state.internalised() + (1.0 - eta) * state.S : total;
  return {detail::channel(phi.alpha1, q1, receptors, phi.sigma1, noise[0], background[0]),
          detail::channel(phi.alpha2, total, receptors, phi.sigma2, noise[1], background[1])};
}

inline std::optional<std::array<double, 2>> simulate_flow_measurement(const CellParameters& xi, const FlowNuisance& phi,
                                                                      FlowCondition condition, double eta,
                                                                      std::array<double, 2> background, Stream& stream,
                                                                      const OdeSolverSettings& ode = {}) {
  const double times[] = {condition.time};
  const auto sol = solve_internalisation(xi.lambda, xi.beta, phi.p, times, ode);
  if (!sol) return std::nullopt;
  std::normal_distribution<double> normal(0.0, 1.0);
  const double n1 = normal(stream), n2 = normal(stream);
  return measure_cell(sol->front(), xi.receptors, phi, condition.quenched, eta, background, {n1, n2});
}

/// Default synthetic design: t in {10, 30, 60, 120} minutes, each unquenched and quenched.
inline std::vector<FlowCondition> default_flow_design() {
  std::vector<FlowCondition> d;
  for (double t : {10.0, 30.0, 60.0, 120.0}) {
    d.push_back({t, false});
    d.push_back({t, true});
  }
  return d;
}

/// Flow-cytometry model: for each design condition, n cells with xi drawn from
/// the population, solved to the condition time and measured with
/// autofluorescence resampled from an empirical (E1, E2) table.
class InternalisationModel final : public SimulationModel {
 public:
  struct Config {
    double eta = 0.94;
    std::vector<FlowCondition> design = default_flow_design();
    std::vector<std::array<double, 2>> autofluorescence{{0.0, 0.0}};
    OdeSolverSettings ode;
  };

  InternalisationModel() : InternalisationModel(Config{}) {}
  explicit InternalisationModel(Config cfg) : cfg_(std::move(cfg)) {
    if (!(cfg_.eta >= 0.0 && cfg_.eta <= 1.0)) throw ConfigError("quenching efficiency must lie in [0, 1]");
    if (cfg_.design.empty()) throw ConfigError("flow design must contain at least one condition");
    if (cfg_.autofluorescence.empty()) throw ConfigError("autofluorescence table is empty");
    cfg_.ode.validate();
  }

  const Config& config() const { return cfg_; }
  std::string tag() const override { return "internalisation"; }
  std::vector<std::string> output_columns() const override { return kFlowColumns; }
  std::size_t parameter_dim() const override { return 3; }
  std::vector<std::string> nuisance_names() const override { return flow_nuisance_names(); }

  std::optional<Dataset> simulate_population(const PopulationDistribution& f, std::span<const double> phi_raw,
                                             std::size_t n, Stream& stream) const override {
    if (dimension(f) != 3) throw std::invalid_argument("internalisation: population must be 3-dimensional");
    const auto phi = FlowNuisance::from(phi_raw);
    if (!(phi.p >= 0.0 && phi.p <= 1.0) || !(phi.alpha1 > 0.0) || !(phi.alpha2 > 0.0) || !(phi.sigma1 >= 0.0) ||
        !(phi.sigma2 >= 0.0))
      return std::nullopt;
    const auto conditions = cfg_.design.size();
    Dataset out{kFlowColumns, Eigen::MatrixXd(static_cast<Eigen::Index>(n * conditions), 4)};
    std::uniform_int_distribution<std::size_t> pick(0, cfg_.autofluorescence.size() - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::array<double, 3> xi{};
    Eigen::Index row = 0;
    try {
      for (const auto& cond : cfg_.design) {
        const double times[] = {cond.time};
        for (std::size_t i = 0; i < n; ++i, ++row) {
          sample_into(f, stream, xi);
          const auto sol = solve_internalisation(xi[1], xi[2], phi.p, times, cfg_.ode);
          if (!sol) return std::nullopt;
          const auto& bg = cfg_.autofluorescence[pick(stream)];
          const double n1 = normal(stream), n2 = normal(stream);
          const auto m = measure_cell(sol->front(), xi[0], phi, cond.quenched, cfg_.eta, bg, {n1, n2});
          out.values(row, 0) = cond.time;
          out.values(row, 1) = cond.quenched ? 1.0 : 0.0;
          out.values(row, 2) = m[0];
          out.values(row, 3) = m[1];
        }
      }
    } catch (const TruncationError&) {
      return std::nullopt;
    }
    return out;
  }

  /// x = (R, lambda, beta); phi followed by (time, quenched) selects the condition.
  bool simulate_row(std::span<const double> x, std::span<const double> phi, Stream& stream,
                    std::span<double> out) const override {
    const auto nuisance = FlowNuisance::from(phi.first(5));
    const FlowCondition cond{phi[5], phi[6] != 0.0};
    std::uniform_int_distribution<std::size_t> pick(0, cfg_.autofluorescence.size() - 1);
    const auto m = simulate_flow_measurement({x[0], x[1], x[2]}, nuisance, cond, cfg_.eta,
                                             cfg_.autofluorescence[pick(stream)], stream, cfg_.ode);
    if (!m) return false;
    out[0] = cond.time;
    out[1] = cond.quenched ? 1.0 : 0.0;
    out[2] = (*m)[0];
    out[3] = (*m)[1];
    return true;
  }

 private:
  Config cfg_;
};

/// Synthetic flow dataset from the copula population at hyperparameters theta.
inline std::optional<Dataset> simulate_flow_population(std::span<const double> theta, std::span<const double> phi,
                                                       const InternalisationModel& model, std::size_t n_per_condition,
                                                       Stream& stream) {
  const auto f = PopulationFamily::copula_family().build(theta);
  return model.simulate_population(f, phi, n_per_condition, stream);
}

inline std::vector<std::array<double, 2>> autofluorescence_from(const Dataset& table) {
  require_columns(table, {"E1", "E2"}, "autofluorescence table");
  std::vector<std::array<double, 2>> out;
  for (Eigen::Index i = 0; i < table.values.rows(); ++i) out.push_back({table.values(i, 0), table.values(i, 1)});
  return out;
}

// ---------------------------------------------------------------------------
// Plug-in models.

/// In-process hook: (x, phi, stream) -> observation row, or nullopt on failure.
using ModelHook =
    std::function<std::optional<std::vector<double>>(std::span<const double>, std::span<const double>, Stream&)>;

class HookModel final : public SimulationModel {
 public:
  HookModel(ModelHook hook, std::vector<std::string> columns, std::size_t parameter_dim,
            std::vector<std::string> nuisance = {}, std::string tag = "external")
      : hook_(std::move(hook)),
        columns_(std::move(columns)),
        dim_(parameter_dim),
        nuisance_(std::move(nuisance)),
        tag_(std::move(tag)) {}

  std::string tag() const override { return tag_; }
  std::vector<std::string> output_columns() const override { return columns_; }
  std::size_t parameter_dim() const override { return dim_; }
  std::vector<std::string> nuisance_names() const override { return nuisance_; }

  bool simulate_row(std::span<const double> x, std::span<const double> phi, Stream& stream,
                    std::span<double> out) const override {
    std::optional<std::vector<double>> row;
    try {
      row = hook_(x, phi, stream);
    } catch (...) {
      return false;
    }
    if (!row || row->size() != out.size()) return false;
    for (std::size_t j = 0; j < out.size(); ++j) {
      if (!std::isfinite((*row)[j])) return false;
      out[j] = (*row)[j];
    }
    return true;
  }

 private:
  ModelHook hook_;
  std::vector<std::string> columns_;
  std::size_t dim_;
  std::vector<std::string> nuisance_;
  std::string tag_;
};

inline std::shared_ptr<const SimulationModel> register_external_model(ModelHook hook, std::vector<std::string> columns,
                                                                      std::size_t parameter_dim,
                                                                      std::vector<std::string> nuisance = {}) {
  return std::make_shared<HookModel>(std::move(hook), std::move(columns), parameter_dim, std::move(nuisance));
}

}  // namespace popcal
