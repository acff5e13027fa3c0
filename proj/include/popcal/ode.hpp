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

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace popcal {

/// closed_form selects a model's exact solution of its linear system, where one exists.
enum class OdeMethod { dopri_adaptive, rk4_fixed, closed_form };

inline OdeMethod ode_method_from_tag(const std::string& tag) {
  if (tag == "dopri_adaptive") return OdeMethod::dopri_adaptive;
  if (tag == "rk4_fixed") return OdeMethod::rk4_fixed;
  if (tag == "closed_form") return OdeMethod::closed_form;
  throw ConfigError("unknown ODE method '" + tag + "'");
}

inline std::string ode_method_tag(OdeMethod m) {
  switch (m) {
    case OdeMethod::dopri_adaptive: return "dopri_adaptive";
    case OdeMethod::rk4_fixed: return "rk4_fixed";
    case OdeMethod::closed_form: return "closed_form";
  }
  return "";
}

struct OdeSolverSettings {
  OdeMethod method = OdeMethod::dopri_adaptive;
  double abs_tol = 1e-8;
  double rel_tol = 1e-8;
  double step = 1e-3;  // rk4_fixed
  std::size_t max_steps = 1'000'000;

  void validate() const {
    if (!(abs_tol > 0.0) || !(rel_tol > 0.0) || !(step > 0.0))
      throw ConfigError("ODE tolerances and step size must be positive");
  }
};

template <std::size_t N>
using OdeState = std::array<double, N>;

namespace detail {

template <std::size_t N>
bool all_finite(const OdeState<N>& y) {
  return std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); });
}

template <std::size_t N>
OdeState<N> axpy(const OdeState<N>& y, double h, std::initializer_list<std::pair<double, const OdeState<N>*>> terms) {
  OdeState<N> out = y;
  for (const auto& [c, k] : terms)
    if (c != 0.0)
      for (std::size_t i = 0; i < N; ++i) out[i] += h * c * (*k)[i];
  return out;
}

}  // namespace detail

/// Classical fixed-step RK4 from t = 0, reporting the state at each sorted time.
/// The last step before each output time is shortened to land on it exactly.
template <std::size_t N, class Rhs>
std::optional<std::vector<OdeState<N>>> integrate_rk4(Rhs&& rhs, OdeState<N> y, std::span<const double> times,
                                                      double step) {
  std::vector<OdeState<N>> out;
  out.reserve(times.size());
  double t = 0.0;
  for (double target : times) {
    while (t < target) {
      const double h = std::min(step, target - t);
      const auto k1 = rhs(t, y);
      const auto k2 = rhs(t + 0.5 * h, detail::axpy<N>(y, 0.5 * h, {{1.0, &k1}}));
      const auto k3 = rhs(t + 0.5 * h, detail::axpy<N>(y, 0.5 * h, {{1.0, &k2}}));
      const auto k4 = rhs(t + h, detail::axpy<N>(y, h, {{1.0, &k3}}));
      for (std::size_t i = 0; i < N; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      t = (target - t <= step) ? target : t + h;
      if (!detail::all_finite(y)) return std::nullopt;
    }
    out.push_back(y);
  }
  return out;
}

/// Adaptive Dormand-Prince 5(4) with FSAL and standard step-size control.
/// Returns nullopt on step-size underflow, step-count exhaustion or a
/// non-finite state.
template <std::size_t N, class Rhs>
std::optional<std::vector<OdeState<N>>> integrate_dopri5(Rhs&& rhs, OdeState<N> y, std::span<const double> times,
                                                         const OdeSolverSettings& settings) {
  constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // Error coefficients: 5th-order minus embedded 4th-order weights.
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                   e7 = -1.0 / 40;

  std::vector<OdeState<N>> out;
  out.reserve(times.size());
  double t = 0.0;
  auto k1 = rhs(t, y);

  // Initial step from the Hairer-Norsett-Wanner heuristic.
  auto scale_of = [&](const OdeState<N>& a, const OdeState<N>& b, std::size_t i) {
    return settings.abs_tol + settings.rel_tol * std::max(std::abs(a[i]), std::abs(b[i]));
  };
  double d0 = 0.0, d1 = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double sc = scale_of(y, y, i);
    d0 += (y[i] / sc) * (y[i] / sc);
    d1 += (k1[i] / sc) * (k1[i] / sc);
  }
  d0 = std::sqrt(d0 / N);
  d1 = std::sqrt(d1 / N);
  double h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;

  std::size_t steps = 0;
  for (double target : times) {
    if (target < t) throw std::invalid_argument("integrate_dopri5: output times must be sorted");
    while (t < target) {
      if (++steps > settings.max_steps) return std::nullopt;
      bool last = false;
      const double h_free = h;
      if (t + h >= target) {
        h = target - t;
        last = true;
      }
      if (h <= 1e-14 * std::max(1.0, std::abs(t))) return std::nullopt;
      const auto k2 = rhs(t + c2 * h, detail::axpy<N>(y, h, {{a21, &k1}}));
      const auto k3 = rhs(t + c3 * h, detail::axpy<N>(y, h, {{a31, &k1}, {a32, &k2}}));
      const auto k4 = rhs(t + c4 * h, detail::axpy<N>(y, h, {{a41, &k1}, {a42, &k2}, {a43, &k3}}));
      const auto k5 = rhs(t + c5 * h, detail::axpy<N>(y, h, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}));
      const auto k6 = rhs(t + h, detail::axpy<N>(y, h, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}));
      const auto y_new = detail::axpy<N>(y, h, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
      const auto k7 = rhs(t + h, y_new);
      double err = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double e = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
        const double r = e / scale_of(y, y_new, i);
        err += r * r;
      }
      err = std::sqrt(err / N);
      if (!std::isfinite(err)) {
        h *= 0.2;
        continue;
      }
      const double factor = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
      if (err <= 1.0) {
        t = last ? target : t + h;
        y = y_new;
        k1 = k7;
        if (!detail::all_finite(y)) return std::nullopt;
        h = last ? std::max(h_free, h * factor) : h * factor;
      } else {
        h *= std::min(1.0, factor);
      }
    }
    out.push_back(y);
  }
  return out;
}

/// Dispatches to the numerical integrators; closed_form is resolved by models.
template <std::size_t N, class Rhs>
std::optional<std::vector<OdeState<N>>> integrate(Rhs&& rhs, OdeState<N> y0, std::span<const double> times,
                                                  const OdeSolverSettings& settings) {
  switch (settings.method) {
    case OdeMethod::rk4_fixed: return integrate_rk4<N>(rhs, y0, times, settings.step);
    case OdeMethod::dopri_adaptive: return integrate_dopri5<N>(rhs, y0, times, settings);
    case OdeMethod::closed_form: break;
  }
  throw std::invalid_argument("integrate: closed_form has no generic integrator");
}

}  // namespace popcal
