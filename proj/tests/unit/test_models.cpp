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
#include "popcal/external.hpp"
#include "popcal/models.hpp"

#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace popcal;

namespace {

const GrowthParameters kReferenceGrowth{6.5e5, 1.7, 8.0, 0.015, 0.25};

GrowthSolverOptions with_method(OdeMethod m, DegradationTerm term = DegradationTerm::R) {
  GrowthSolverOptions o;
  o.ode.method = m;
  o.dp_term = term;
  return o;
}

std::array<double, 2> growth_rk4(const GrowthParameters& x, double ligand, double t, DegradationTerm term,
                                 double h = 1e-4) {
  const double kl = x.k_on * ligand;
  std::function<std::array<double, 2>(const std::array<double, 2>&)> f = [&](const std::array<double, 2>& y) {
    const double d = term == DegradationTerm::R ? y[0] : y[1];
    return std::array<double, 2>{x.receptors_total * x.k_deg - kl * y[0] + x.k_off * y[1] - x.k_deg * y[0],
                                 kl * y[0] - x.k_off * y[1] - x.k_deg_star * d};
  };
  return oracle::rk4<2>(f, {x.receptors_total, 0.0}, t, h);
}

Eigen::Vector4d internalisation_expm(double lambda, double beta, double p, double t) {
  Eigen::Matrix4d a;
  a << -beta, 0, 0, 0,
       beta, -lambda, p * beta, 0,
       0, lambda, -p * beta, 0,
       0, 0, p * beta, 0;
  Eigen::Vector4d y0(lambda / (lambda + beta), beta / (lambda + beta), 0, 0);
  return oracle::affine_expm(a, Eigen::Vector4d::Zero(), y0, t);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

// --- mixture ---------------------------------------------------------------

TEST(Mixture, ZeroNoiseIsIdentity) {
  auto s = substream(1, StreamTag::misc);
  EXPECT_EQ(simulate_mixture(0.37, 0.0, s), 0.37);
  EXPECT_THROW(MixtureDenoiseModel(-1.0), ConfigError);
}

TEST(Mixture, NoiseSd) {
  auto s = substream(2, StreamTag::misc);
  const int n = 1000000;
  double m = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double y = simulate_mixture(0.3, 0.045, s);
    m += y;
    q += y * y;
  }
  m /= n;
  const double sd = std::sqrt(q / n - m * m);
  EXPECT_NEAR(sd, 0.045, 0.01 * 0.045);
}

TEST(Mixture, CompositeMoments) {
  const MixtureDenoiseModel model;
  const PopulationDistribution f = Marginal{GaussianMixture1D{0.3, 0.5, 0.015, 0.043, 1.0 / 3.0}};
  auto s = substream(3, StreamTag::misc);
  const std::size_t n = 200000;
  const auto y = model.simulate_population(f, {}, n, s)->column(0);
  const double w = 1.0 / 3.0, noise2 = 0.045 * 0.045;
  const double mean = 13.0 / 30.0;
  const double var = w * (noise2 + 0.015 * 0.015) + (1 - w) * (noise2 + 0.043 * 0.043) +
                     w * (1 - w) * (0.5 - 0.3) * (0.5 - 0.3);
  double m = 0, v = 0;
  for (double a : y) m += a;
  m /= n;
  for (double a : y) v += (a - m) * (a - m);
  v /= n - 1;
  EXPECT_NEAR(m, mean, 3 * std::sqrt(var / n));
  // SE of the sample variance from the fourth central moment, estimated.
  double m4 = 0;
  for (double a : y) m4 += std::pow(a - m, 4);
  m4 /= n;
  EXPECT_NEAR(v, var, 3 * std::sqrt((m4 - v * v) / n));
}

TEST(Mixture, AnalyticOutputDensity) {
  const GaussianMixture1D f{0.3, 0.5, 0.015, 0.043, 1.0 / 3.0};
  auto npdf = [](double y, double m, double var) {
    return std::exp(-0.5 * (y - m) * (y - m) / var) / std::sqrt(2 * std::numbers::pi * var);
  };
  const double direct = (1.0 / 3.0) * npdf(0.3, 0.3, 0.045 * 0.045 + 0.015 * 0.015) +
                        (2.0 / 3.0) * npdf(0.3, 0.5, 0.045 * 0.045 + 0.043 * 0.043);
  EXPECT_NEAR(analytic_h_density(f, 0.045, 0.3), direct, 1e-13);
  for (double y : {0.2, 0.41, 0.6}) EXPECT_NEAR(analytic_h_density(f, 0.0, y), std::exp(log_density(f, y)), 1e-12);
}

// --- growth ----------------------------------------------------------------

TEST(Growth, NoLigandKeepsSteadyState) {
  // With L = 0 the ligand-free state is stationary only when degradation acts
  // on the bound species; as written (-k_deg* R) P is driven negative.
  for (auto m : {OdeMethod::dopri_adaptive, OdeMethod::closed_form}) {
    const auto y = solve_growth_ode(kReferenceGrowth, 0.0, 10.0, with_method(m, DegradationTerm::P));
    ASSERT_TRUE(y);
    EXPECT_LT(rel_err((*y)[0], kReferenceGrowth.receptors_total), 1e-10);
    EXPECT_LT(std::abs((*y)[1]), 1e-10 * kReferenceGrowth.receptors_total);
  }
  const auto printed = solve_growth_ode(kReferenceGrowth, 0.0, 10.0, with_method(OdeMethod::closed_form));
  EXPECT_LT((*printed)[1], 0.0);
}

TEST(Growth, ReferencePointMatchesFineRk4) {
  for (auto term : {DegradationTerm::R, DegradationTerm::P}) {
    const auto oracle_y = growth_rk4(kReferenceGrowth, 2.0, 10.0, term);
    for (auto m : {OdeMethod::dopri_adaptive, OdeMethod::closed_form}) {
      const auto y = solve_growth_ode(kReferenceGrowth, 2.0, 10.0, with_method(m, term));
      ASSERT_TRUE(y);
      EXPECT_LT(rel_err((*y)[0], oracle_y[0]), 1e-6);
      EXPECT_LT(rel_err((*y)[1], oracle_y[1]), 1e-6);
    }
  }
}

TEST(Growth, RandomParametersMatchFineRk4) {
  auto s = substream(4, StreamTag::misc);
  auto u = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(s); };
  for (int i = 0; i < 100; ++i) {
    const GrowthParameters x{u(2.5e5, 8e5), u(0.25, 3), u(2, 20), u(0.005, 0.1), u(0.1, 0.5)};
    const double ligand = i % 2 ? 2.0 : 10.0;
    const auto o = growth_rk4(x, ligand, 10.0, DegradationTerm::R, 1e-3);
    const auto y = solve_growth_ode(x, ligand, 10.0, with_method(OdeMethod::dopri_adaptive));
    const auto c = solve_growth_ode(x, ligand, 10.0, with_method(OdeMethod::closed_form));
    ASSERT_TRUE(y && c);
    // Bound species can be large and of either sign; compare on the R_T scale.
    EXPECT_LT(std::abs((*y)[1] - o[1]) / std::abs(o[1]), 1e-6) << i;
    EXPECT_LT(std::abs((*c)[1] - o[1]) / std::abs(o[1]), 1e-6) << i;
    EXPECT_LT(rel_err((*c)[0], o[0]), 1e-6) << i;
  }
}

TEST(Growth, LongTimeSteadyState) {
  for (auto term : {DegradationTerm::R, DegradationTerm::P}) {
    const auto sys = detail::growth_system(kReferenceGrowth, 2.0, term);
    Eigen::Matrix2d a;
    a << sys.a11, sys.a12, sys.a21, sys.a22;
    const Eigen::Vector2d steady = a.fullPivLu().solve(-Eigen::Vector2d(sys.b1, sys.b2));
    const auto y = solve_growth_ode(kReferenceGrowth, 2.0, 5000.0, with_method(OdeMethod::dopri_adaptive, term));
    ASSERT_TRUE(y);
    EXPECT_LT(std::abs((*y)[0] - steady(0)) / kReferenceGrowth.receptors_total, 1e-7);
    EXPECT_LT(std::abs((*y)[1] - steady(1)) / kReferenceGrowth.receptors_total, 1e-7);
  }
}

TEST(Growth, ClosedFormMatchesMatrixExponential) {
  const auto sys = detail::growth_system(kReferenceGrowth, 10.0, DegradationTerm::R);
  Eigen::Matrix2d a;
  a << sys.a11, sys.a12, sys.a21, sys.a22;
  const auto o = oracle::affine_expm(a, Eigen::Vector2d(sys.b1, sys.b2), Eigen::Vector2d(kReferenceGrowth.receptors_total, 0), 10.0);
  const auto y = solve_growth_ode(kReferenceGrowth, 10.0, 10.0, with_method(OdeMethod::closed_form));
  EXPECT_LT(rel_err((*y)[0], o(0)), 1e-11);
  EXPECT_LT(rel_err((*y)[1], o(1)), 1e-11);
}

TEST(Growth, DeterministicPairsAndIndependence) {
  const GrowthModel model;
  EXPECT_EQ(model.parameter_dim(), 2u);
  const std::vector<double> x{6.5e5, 1.7};
  const auto a = model.simulate_pair(x, x), b = model.simulate_pair(x, x);
  ASSERT_TRUE(a);
  EXPECT_EQ(*a, *b);

  PopulationFamily fam{FamilyKind::independent_product, {"R_T", "k_1"}, true};
  const auto f = fam.build(std::vector<double>{6.5e5, 1.7, std::sqrt(6000.0), std::sqrt(0.05)});
  auto s = substream(5, StreamTag::misc);
  const auto ds = model.simulate_population(f, {}, 100000, s);
  ASSERT_TRUE(ds);
  EXPECT_NEAR(pearson(ds->column(0), ds->column(1)), 0.0, 0.01);
}

TEST(Growth, MarginalMeansStableAcrossSeeds) {
  const GrowthModel model;
  PopulationFamily fam{FamilyKind::independent_product, {"R_T", "k_1"}, true};
  const auto f = fam.build(std::vector<double>{6.5e5, 1.7, std::sqrt(6000.0), std::sqrt(0.05)});
  std::array<std::array<double, 2>, 2> means{}, ses{};
  for (int r = 0; r < 2; ++r) {
    auto s = substream(60 + static_cast<std::uint64_t>(r), StreamTag::misc);
    const auto ds = model.simulate_population(f, {}, 100000, s);
    for (int j = 0; j < 2; ++j) {
      const auto c = ds->column(static_cast<std::size_t>(j));
      means[r][j] = mean(c);
      ses[r][j] = sample_sd(c) / std::sqrt(static_cast<double>(c.size()));
    }
  }
  for (int j = 0; j < 2; ++j)
    EXPECT_LT(std::abs(means[0][j] - means[1][j]), 3 * std::hypot(ses[0][j], ses[1][j])) << j;
}

TEST(Growth, FiveParameterLayout) {
  GrowthModel::Config cfg;
  cfg.free = {true, true, true, true, true};
  const GrowthModel model(cfg);
  EXPECT_EQ(model.parameter_dim(), 5u);
  const std::vector<double> x{6.5e5, 1.7, 8.0, 0.015, 0.25};
  const GrowthModel two;
  EXPECT_EQ(*model.bound_receptors(x, 2.0), *two.bound_receptors(std::vector<double>{6.5e5, 1.7}, 2.0));
}

// --- internalisation -------------------------------------------------------

TEST(Internalisation, NoRecyclingMeansNoF) {
  const std::vector<double> times{1, 10, 100};
  for (auto m : {OdeMethod::closed_form, OdeMethod::dopri_adaptive}) {
    OdeSolverSettings o;
    o.method = m;
    const auto sol = solve_internalisation(0.1, 0.05, 0.0, times, o);
    for (const auto& st : *sol) EXPECT_EQ(st.F, 0.0);
  }
}

TEST(Internalisation, UnitRatesMatchMatrixExponential) {
  const double t[] = {1.0};
  const auto o = internalisation_expm(1.0, 1.0, 0.1, 1.0);
  for (auto m : {OdeMethod::closed_form, OdeMethod::dopri_adaptive, OdeMethod::rk4_fixed}) {
    OdeSolverSettings set;
    set.method = m;
    const auto s = solve_internalisation(1.0, 1.0, 0.1, t, set)->front();
    EXPECT_NEAR(s.T, o(0), 1e-8);
    EXPECT_NEAR(s.S, o(1), 1e-8);
    EXPECT_NEAR(s.E, o(2), 1e-8);
    EXPECT_NEAR(s.F, o(3), 1e-8);
  }
}

TEST(Internalisation, RandomRatesMatchMatrixExponential) {
  auto s = substream(6, StreamTag::misc);
  std::vector<double> times;
  for (int k = 1; k <= 20; ++k) times.push_back(6.0 * k);
  for (int i = 0; i < 200; ++i) {
    const double lambda = 0.005 + 0.4 * uniform01(s), beta = 0.005 + 0.2 * uniform01(s), p = 0.5 * uniform01(s);
    for (auto m : {OdeMethod::closed_form, OdeMethod::dopri_adaptive}) {
      OdeSolverSettings set;
      set.method = m;
      const auto sol = solve_internalisation(lambda, beta, p, times, set);
      ASSERT_TRUE(sol);
      for (std::size_t k = 0; k < times.size(); ++k) {
        const auto o = internalisation_expm(lambda, beta, p, times[k]);
        const auto& st = (*sol)[k];
        ASSERT_NEAR(st.E, o(2), 1e-8);
        ASSERT_NEAR(st.F, o(3), 1e-8);
        ASSERT_NEAR(st.S, o(1), 1e-8);
      }
    }
  }
}

TEST(Internalisation, NearlyDegenerateRatesStayAccurate) {
  // lambda + p beta == beta triggers the series branch of the closed form.
  const double beta = 0.1, p = 0.2, lambda = beta * (1 - p);
  for (double nudge : {0.0, 1e-9, 1e-6, 1e-3}) {
    for (double t : {1.0, 50.0, 500.0}) {
      const double l = lambda + nudge;
      const auto o = internalisation_expm(l, beta, p, t);
      OdeSolverSettings set;
      set.method = OdeMethod::closed_form;
      const double ts[] = {t};
      const auto st = solve_internalisation(l, beta, p, ts, set)->front();
      EXPECT_NEAR(st.E, o(2), 1e-10) << nudge << " " << t;
      EXPECT_NEAR(st.F, o(3), 1e-10) << nudge << " " << t;
    }
  }
}

TEST(Internalisation, ConservationAndPositivity) {
  auto s = substream(7, StreamTag::misc);
  std::vector<double> times;
  for (int k = 1; k <= 100; ++k) times.push_back(2.0 * k);
  for (int i = 0; i < 1000; ++i) {
    const double lambda = 0.001 + uniform01(s), beta = 0.001 + uniform01(s), p = uniform01(s);
    OdeSolverSettings set;
    set.method = i % 2 ? OdeMethod::closed_form : OdeMethod::dopri_adaptive;
    const auto sol = solve_internalisation(lambda, beta, p, times, set);
    ASSERT_TRUE(sol);
    double prev_f = 0.0;
    for (const auto& st : *sol) {
      ASSERT_LT(std::abs(st.T + st.S + st.E - 1.0), 1e-8);
      ASSERT_GE(st.T, -1e-12);
      ASSERT_GE(st.S, -1e-12);
      ASSERT_GE(st.E, -1e-12);
      ASSERT_GE(st.F, prev_f - 1e-12);
      prev_f = st.F;
    }
  }
}

TEST(Internalisation, DomainChecks) {
  const double t[] = {1.0};
  EXPECT_THROW(solve_internalisation(0.0, 0.1, 0.1, t), std::invalid_argument);
  EXPECT_THROW(solve_internalisation(0.1, 0.1, 1.5, t), std::invalid_argument);
}

// --- flow measurement ------------------------------------------------------

TEST(FlowMeasurement, NoiseFreeBranch) {
  const CellParameters xi{2.0, 0.1, 0.05};
  const FlowNuisance phi{1000, 500, 0, 0, 0.1};
  auto s = substream(8, StreamTag::misc);
  const double t[] = {30.0};
  OdeSolverSettings closed;
  closed.method = OdeMethod::closed_form;
  const auto st = solve_internalisation(0.1, 0.05, 0.1, t, closed)->front();
  for (bool q : {false, true}) {
    const auto m = simulate_flow_measurement(xi, phi, {30.0, q}, 0.94, {0, 0}, s, closed);
    const double q1 = q ? st.internalised() + 0.06 * st.S : st.total();
    EXPECT_DOUBLE_EQ((*m)[0], 1000 * q1 * 2.0);
    EXPECT_DOUBLE_EQ((*m)[1], 500 * st.total() * 2.0);
  }
}

TEST(FlowMeasurement, FullQuenchingSeesOnlyInternalised) {
  const InternalisationState st{0.2, 0.3, 0.4, 0.1};
  const FlowNuisance phi{1, 1, 0, 0, 0.1};
  const auto m = measure_cell(st, 1.0, phi, true, 1.0, {0, 0}, {0, 0});
  EXPECT_EQ(m[0], st.internalised());
}

TEST(FlowMeasurement, SignalProportionalVariance) {
  const FlowNuisance phi{1000, 500, 2, 2, 0.1};
  auto s = substream(9, StreamTag::misc);
  for (double receptors : {0.5, 1.0, 4.0}) {
    const InternalisationState st{0.2, 0.3, 0.4, 0.1};
    const double q1 = st.internalised() + 0.06 * st.S;
    const int n = 1000000;
    double m = 0, v = 0;
    std::normal_distribution<double> z(0, 1);
    std::vector<double> draws(n);
    for (auto& d : draws) d = measure_cell(st, receptors, phi, true, 0.94, {0, 0}, {z(s), z(s)})[0];
    for (double d : draws) m += d;
    m /= n;
    for (double d : draws) v += (d - m) * (d - m);
    v /= n - 1;
    EXPECT_NEAR(v, 1000 * q1 * receptors * 4, 0.01 * 1000 * q1 * receptors * 4) << receptors;
  }
}

TEST(FlowPopulation, DegenerateCellsAreIdentical) {
  InternalisationModel model;
  // Zero spread: every marginal collapses to its mean (Gaussian limit of the gamma law needs sd > 0,
  // so use a tiny sd and compare at the noise-free measurement level instead).
  const std::vector<double> theta{-0.5, 1e-12, 0.1, 1e-12, 0.0, 0.05, 1e-12, 0.0, 0.0, 0.0, 0.0};
  const std::vector<double> phi{1000, 500, 0, 0, 0.1};
  auto s = substream(10, StreamTag::misc);
  const auto ds = simulate_flow_population(theta, phi, model, 20, s);
  ASSERT_TRUE(ds);
  for (Eigen::Index r = 0; r < ds->values.rows(); r += 20)
    for (Eigen::Index i = 1; i < 20; ++i) {
      EXPECT_NEAR(ds->values(r + i, 2), ds->values(r, 2), 1e-6 * std::abs(ds->values(r, 2)));
      EXPECT_NEAR(ds->values(r + i, 3), ds->values(r, 3), 1e-6 * std::abs(ds->values(r, 3)));
    }
}

TEST(FlowPopulation, QuenchingLowersChannelOne) {
  InternalisationModel model;
  const std::vector<double> theta{-0.5, 0.5, 0.1, 0.03, 0.5, 0.05, 0.015, 0.5, 0.3, 0.2, 0.3};
  const std::vector<double> phi{1000, 500, 2, 2, 0.1};
  auto s = substream(11, StreamTag::misc);
  const auto ds = simulate_flow_population(theta, phi, model, 2000, s);
  ASSERT_TRUE(ds);
  EXPECT_EQ(ds->rows(), 2000u * 8);
  const auto g = group_flow(*ds);
  for (std::size_t k = 0; k + 1 < g.conditions.size(); k += 2) {
    ASSERT_EQ(g.conditions[k].time, g.conditions[k + 1].time);
    ASSERT_FALSE(g.conditions[k].quenched);
    EXPECT_GT(mean(g.m1[k]), mean(g.m1[k + 1])) << g.conditions[k].time;
  }
}

TEST(FlowPopulation, ReplicateNoiseFloor) {
  // Two independent replicates at the same theta sit near a common floor;
  // a visibly different theta is far above it.
  InternalisationModel model;
  const std::vector<double> theta{-0.5, 0.5, 0.1, 0.03, 0.5, 0.05, 0.015, 0.5, 0.3, 0.2, 0.3};
  auto shifted = theta;
  shifted[2] = 0.2;
  const std::vector<double> phi{1000, 500, 2, 2, 0.1};
  auto s = substream(12, StreamTag::misc);
  const auto y = *simulate_flow_population(theta, phi, model, 1000, s);
  const FlowComposite rho(y);
  std::vector<double> floor;
  for (int r = 0; r < 20; ++r) floor.push_back(rho(*simulate_flow_population(theta, phi, model, 1000, s)));
  const double far = rho(*simulate_flow_population(shifted, phi, model, 1000, s));
  EXPECT_GT(far, 3 * *std::max_element(floor.begin(), floor.end()));
}

TEST(FlowPopulation, InvalidNuisanceFails) {
  InternalisationModel model;
  const std::vector<double> theta{-0.5, 0.5, 0.1, 0.03, 0.5, 0.05, 0.015, 0.5, 0.3, 0.2, 0.3};
  auto s = substream(13, StreamTag::misc);
  EXPECT_FALSE(simulate_flow_population(theta, std::vector<double>{1000, 500, 2, 2, 1.5}, model, 5, s));
  InternalisationModel::Config bad;
  bad.eta = 1.2;
  EXPECT_THROW(InternalisationModel{bad}, ConfigError);
}

TEST(Autofluorescence, ResampledFromTable) {
  InternalisationModel::Config cfg;
  cfg.autofluorescence = {{5, 7}, {11, 13}};
  cfg.design = {{10.0, false}};
  InternalisationModel model(cfg);
  const std::vector<double> theta{-0.5, 1e-12, 0.1, 1e-12, 0.0, 0.05, 1e-12, 0.0, 0.0, 0.0, 0.0};
  auto s = substream(14, StreamTag::misc);
  const auto ds = *simulate_flow_population(theta, std::vector<double>{1000, 500, 0, 0, 0.1}, model, 400, s);
  std::set<long> offsets;
  const double base = ds.values.col(3).minCoeff() - 7;
  for (Eigen::Index i = 0; i < ds.values.rows(); ++i) offsets.insert(std::lround(ds.values(i, 3) - base));
  EXPECT_EQ(offsets, (std::set<long>{7, 13}));
  Dataset table{{"E1", "E2"}, (Eigen::MatrixXd(2, 2) << 1, 2, 3, 4).finished()};
  EXPECT_EQ(autofluorescence_from(table).size(), 2u);
  EXPECT_THROW(autofluorescence_from(Dataset{{"a", "b"}, table.values}), DataError);
}

// --- plug-in models --------------------------------------------------------

TEST(HookModel, IdentityReducesToPopulationSample) {
  const auto model = register_external_model(
      [](std::span<const double> x, std::span<const double>, Stream&) { return std::vector<double>(x.begin(), x.end()); },
      {"x"}, 1);
  const PopulationDistribution f = Marginal{Gaussian{0.4, 0.1}};
  auto a = substream(15, StreamTag::misc), b = substream(15, StreamTag::misc);
  const auto ds = model->simulate_population(f, {}, 50, a);
  const auto direct = sample_population(f, 50, b);
  for (Eigen::Index i = 0; i < 50; ++i) EXPECT_EQ(ds->values(i, 0), direct(i, 0));
}

TEST(HookModel, ReproducesBuiltInMixtureBitForBit) {
  const auto hook = register_external_model(
      [](std::span<const double> x, std::span<const double>, Stream& s) {
        return std::vector<double>{simulate_mixture(x[0], 0.045, s)};
      },
      {"y"}, 1);
  const MixtureDenoiseModel builtin;
  const PopulationDistribution f = Marginal{GaussianMixture1D{0.3, 0.5, 0.015, 0.043, 1.0 / 3.0}};
  auto a = substream(16, StreamTag::misc), b = substream(16, StreamTag::misc);
  EXPECT_EQ(hook->simulate_population(f, {}, 500, a)->values, builtin.simulate_population(f, {}, 500, b)->values);
}

TEST(HookModel, FailuresBecomeTokens) {
  const auto throwing = register_external_model(
      [](std::span<const double>, std::span<const double>, Stream&) -> std::optional<std::vector<double>> {
        throw std::runtime_error("boom");
      },
      {"y"}, 1);
  const auto nan = register_external_model(
      [](std::span<const double>, std::span<const double>, Stream&) { return std::vector<double>{std::nan("")}; },
      {"y"}, 1);
  const PopulationDistribution f = Marginal{Gaussian{0, 1}};
  auto s = substream(17, StreamTag::misc);
  EXPECT_FALSE(throwing->simulate_population(f, {}, 3, s));
  EXPECT_FALSE(nan->simulate_population(f, {}, 3, s));
}

TEST(ExternalProcess, LineProtocol) {
  const auto model = register_external_model(std::vector<std::string>{POPCAL_TEST_HELPER, "identity"}, {"a", "b"}, 1,
                                             {"phi"});
  std::vector<double> out(2);
  auto s = substream(18, StreamTag::misc);
  const std::vector<double> x{0.1234567890123456789}, phi{-2.5};
  ASSERT_TRUE(model->simulate_row(x, phi, s, out));
  EXPECT_EQ(out[0], x[0]);  // 17 significant digits round-trip
  EXPECT_EQ(out[1], -2.5);
}

TEST(ExternalProcess, FailTokenAndRestart) {
  const auto fail = register_external_model(std::vector<std::string>{POPCAL_TEST_HELPER, "fail"}, {"y"}, 1);
  const auto negative = register_external_model(std::vector<std::string>{POPCAL_TEST_HELPER, "negative"}, {"y"}, 1);
  const auto exits = register_external_model(std::vector<std::string>{POPCAL_TEST_HELPER, "exit"}, {"y"}, 1);
  const auto missing = register_external_model(std::vector<std::string>{"/nonexistent/simulator"}, {"y"}, 1);
  std::vector<double> out(1);
  auto s = substream(19, StreamTag::misc);
  const std::vector<double> pos{1.0}, neg{-1.0};
  EXPECT_FALSE(fail->simulate_row(pos, {}, s, out));
  EXPECT_TRUE(negative->simulate_row(pos, {}, s, out));
  EXPECT_FALSE(negative->simulate_row(neg, {}, s, out));
  EXPECT_TRUE(exits->simulate_row(pos, {}, s, out));
  EXPECT_FALSE(exits->simulate_row(pos, {}, s, out));  // child died mid-request
  EXPECT_TRUE(exits->simulate_row(pos, {}, s, out));   // restarted
  EXPECT_FALSE(missing->simulate_row(pos, {}, s, out));
}
