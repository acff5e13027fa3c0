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
#include "popcal/random.hpp"
#include "popcal/stats.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace popcal {

/// |skew| below this is treated as the Gaussian limit of the shifted Gamma.
inline constexpr double kSkewDegeneracy = 1e-2;
/// Consecutive rejections allowed per positive-truncated draw.
inline constexpr int kTruncationCap = 10000;

struct Gaussian {
  double mean = 0.0;
  double sd = 1.0;
};

/// Two-component Gaussian mixture; `weight` belongs to component 1.
struct GaussianMixture1D {
  double mu1 = 0.0, mu2 = 0.0;
  double sd1 = 1.0, sd2 = 1.0;
  double weight = 0.5;
};

/// Internal representation of a Gamma law realised from its first three moments:
/// X = shift + orientation * G with G ~ Gamma(shape, scale).
struct GammaShape {
  double shape = 0.0;
  double scale = 0.0;
  double shift = 0.0;
  int orientation = 1;
  bool gaussian_limit = false;
};

inline GammaShape gamma_from_moments(double mean, double sd, double skew) {
  if (!(sd > 0.0)) throw std::domain_error("gamma_from_moments: sd must be positive");
  GammaShape g;
  if (std::abs(skew) < kSkewDegeneracy) {
    g.gaussian_limit = true;
    g.shift = mean;
    return g;
  }
  g.shape = 4.0 / (skew * skew);
  g.scale = sd / std::sqrt(g.shape);
  g.orientation = skew > 0.0 ? 1 : -1;
  g.shift = mean - g.orientation * g.shape * g.scale;
  return g;
}

/// Shifted Gamma parameterised by mean, standard deviation and signed skewness.
struct ShiftedGamma {
  double mean = 0.0;
  double sd = 1.0;
  double skew = 1.0;
  GammaShape gamma;

  static ShiftedGamma from_moments(double mean, double sd, double skew) {
    return ShiftedGamma{mean, sd, skew, gamma_from_moments(mean, sd, skew)};
  }
};

/// X = shift + exp(location + scale * Z).
struct ShiftedLogNormal {
  double location = 0.0;
  double scale = 1.0;
  double shift = 0.0;

  /// Shift chosen so that E(X) = 1 exactly for the untruncated law.
  static ShiftedLogNormal with_unit_mean(double location, double scale) {
    return ShiftedLogNormal{location, scale, 1.0 - std::exp(location + 0.5 * scale * scale)};
  }
};

using Univariate = std::variant<Gaussian, GaussianMixture1D, ShiftedGamma, ShiftedLogNormal>;

namespace detail {

inline double gaussian_sample(double mean, double sd, Stream& s) {
  if (sd == 0.0) return mean;
  return mean + sd * std::normal_distribution<double>(0.0, 1.0)(s);
}

inline double gaussian_log_pdf(double x, double mean, double sd) {
  if (sd == 0.0) return x == mean ? kInf : -kInf;
  return normal_log_pdf(x, mean, sd);
}

inline double gaussian_cdf(double x, double mean, double sd) {
  if (sd == 0.0) return x < mean ? 0.0 : 1.0;
  return normal_cdf((x - mean) / sd);
}

inline double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

inline double sample(const Univariate& law, Stream& s) {
  return std::visit(
      [&s](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          return detail::gaussian_sample(d.mean, d.sd, s);
        } else if constexpr (std::is_same_v<T, GaussianMixture1D>) {
          return uniform01(s) < d.weight ? detail::gaussian_sample(d.mu1, d.sd1, s)
                                         : detail::gaussian_sample(d.mu2, d.sd2, s);
        } else if constexpr (std::is_same_v<T, ShiftedGamma>) {
          const auto& g = d.gamma;
          if (g.gaussian_limit) return detail::gaussian_sample(d.mean, d.sd, s);
          return g.shift + g.orientation * std::gamma_distribution<double>(g.shape, g.scale)(s);
        } else {
          return d.shift + std::exp(d.location + d.scale * std::normal_distribution<double>(0.0, 1.0)(s));
        }
      },
      law);
}

/// Natural-log density; -inf outside the support.
inline double log_density(const Univariate& law, double x) {
  return std::visit(
      [x](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          return detail::gaussian_log_pdf(x, d.mean, d.sd);
        } else if constexpr (std::is_same_v<T, GaussianMixture1D>) {
          const double a = d.weight > 0.0 ? std::log(d.weight) + detail::gaussian_log_pdf(x, d.mu1, d.sd1) : -kInf;
          const double b = d.weight < 1.0 ? std::log1p(-d.weight) + detail::gaussian_log_pdf(x, d.mu2, d.sd2) : -kInf;
          return detail::log_sum_exp(a, b);
        } else if constexpr (std::is_same_v<T, ShiftedGamma>) {
          const auto& g = d.gamma;
          if (g.gaussian_limit) return detail::gaussian_log_pdf(x, d.mean, d.sd);
          const double u = g.orientation * (x - g.shift);
          if (!(u > 0.0)) return -kInf;
          return (g.shape - 1.0) * std::log(u) - u / g.scale - std::lgamma(g.shape) - g.shape * std::log(g.scale);
        } else {
          const double u = x - d.shift;
          if (!(u > 0.0)) return -kInf;
          const double lu = std::log(u);
          return normal_log_pdf(lu, d.location, d.scale) - lu;
        }
      },
      law);
}

inline double cdf(const Univariate& law, double x) {
  return std::visit(
      [x](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          return detail::gaussian_cdf(x, d.mean, d.sd);
        } else if constexpr (std::is_same_v<T, GaussianMixture1D>) {
          return d.weight * detail::gaussian_cdf(x, d.mu1, d.sd1) +
                 (1.0 - d.weight) * detail::gaussian_cdf(x, d.mu2, d.sd2);
        } else if constexpr (std::is_same_v<T, ShiftedGamma>) {
          const auto& g = d.gamma;
          if (g.gaussian_limit) return detail::gaussian_cdf(x, d.mean, d.sd);
          const double u = g.orientation * (x - g.shift);
          if (g.orientation > 0) return u <= 0.0 ? 0.0 : boost::math::gamma_p(g.shape, u / g.scale);
          return u <= 0.0 ? 1.0 : boost::math::gamma_q(g.shape, u / g.scale);
        } else {
          const double u = x - d.shift;
          return u <= 0.0 ? 0.0 : normal_cdf((std::log(u) - d.location) / d.scale);
        }
      },
      law);
}

/// Quantile at u = Phi(z), taking the normal score directly (copula transform).
inline double quantile_from_normal_score(const Univariate& law, double z) {
  return std::visit(
      [z, &law](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          return d.mean + d.sd * z;
        } else if constexpr (std::is_same_v<T, ShiftedLogNormal>) {
          return d.shift + std::exp(d.location + d.scale * z);
        } else if constexpr (std::is_same_v<T, ShiftedGamma>) {
          const auto& g = d.gamma;
          if (g.gaussian_limit) return d.mean + d.sd * z;
          // The smaller of Phi(z) and Phi(-z) is computed directly so both tails stay accurate.
          const double tail = z < 0 ? normal_cdf(z) : normal_cdf(-z);
          const bool use_p_inv = (g.orientation > 0) == (z < 0);
          double gq;
          if (tail <= 0.0) {
            gq = use_p_inv ? 0.0 : kInf;
          } else {
            gq = use_p_inv ? boost::math::gamma_p_inv(g.shape, tail) : boost::math::gamma_q_inv(g.shape, tail);
          }
          return g.shift + g.orientation * g.scale * gq;
        } else {
          // Mixture: bracketed root-finding on the CDF.
          const double u = normal_cdf(z);
          const double lo0 = std::min(d.mu1 - 40.0 * d.sd1, d.mu2 - 40.0 * d.sd2) - 1.0;
          const double hi0 = std::max(d.mu1 + 40.0 * d.sd1, d.mu2 + 40.0 * d.sd2) + 1.0;
          auto f = [&](double x) { return cdf(law, x) - u; };
          std::uintmax_t iters = 200;
          const auto r = boost::math::tools::toms748_solve(
              f, lo0, hi0, [](double a, double b) { return std::abs(b - a) < 1e-10; }, iters);
          return 0.5 * (r.first + r.second);
        }
      },
      law);
}

inline double quantile(const Univariate& law, double u) { return quantile_from_normal_score(law, normal_quantile(u)); }

/// Analytic first three moments (mean, variance, skewness) of the untruncated law.
struct Moments {
  double mean, variance, skewness;
};

inline Moments moments(const Univariate& law) {
  return std::visit(
      [](const auto& d) -> Moments {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          return {d.mean, d.sd * d.sd, 0.0};
        } else if constexpr (std::is_same_v<T, GaussianMixture1D>) {
          const double w = d.weight;
          const double m = w * d.mu1 + (1 - w) * d.mu2;
          const double v1 = d.sd1 * d.sd1, v2 = d.sd2 * d.sd2;
          const double a = d.mu1 - m, b = d.mu2 - m;
          const double var = w * (v1 + a * a) + (1 - w) * (v2 + b * b);
          const double third = w * (a * a * a + 3 * a * v1) + (1 - w) * (b * b * b + 3 * b * v2);
          return {m, var, var > 0 ? third / std::pow(var, 1.5) : 0.0};
        } else if constexpr (std::is_same_v<T, ShiftedGamma>) {
          return {d.mean, d.sd * d.sd, d.gamma.gaussian_limit ? 0.0 : d.skew};
        } else {
          const double s2 = d.scale * d.scale;
          const double var = std::expm1(s2) * std::exp(2 * d.location + s2);
          return {d.shift + std::exp(d.location + 0.5 * s2), var, (std::exp(s2) + 2) * std::sqrt(std::expm1(s2))};
        }
      },
      law);
}

/// A 1-D law, optionally truncated to (0, inf). Parameters always describe the
/// untruncated law; truncation is realised by rejecting non-positive draws.
struct Marginal {
  Univariate law;
  bool truncate_positive = false;
  std::string name = "x";
};

inline Marginal truncated_positive(Univariate law, std::string name = "x") {
  return Marginal{std::move(law), true, std::move(name)};
}

inline double sample(const Marginal& m, Stream& s) {
  if (!m.truncate_positive) return sample(m.law, s);
  for (int attempt = 0; attempt < kTruncationCap; ++attempt) {
    const double v = sample(m.law, s);
    if (v > 0.0) return v;
  }
  throw TruncationError("positive truncation of marginal '" + m.name + "' exceeded " +
                        std::to_string(kTruncationCap) + " consecutive rejections");
}

inline double log_density(const Marginal& m, double x) {
  if (!m.truncate_positive) return log_density(m.law, x);
  if (!(x > 0.0)) return -kInf;
  const double mass = 1.0 - cdf(m.law, 0.0);
  if (!(mass > 0.0)) return -kInf;
  return log_density(m.law, x) - std::log(mass);
}

inline double density(const Marginal& m, double x) { return std::exp(log_density(m, x)); }

struct IndependentProduct {
  std::vector<Marginal> marginals;
};

/// Completes the (R, beta) entry of a 3x3 correlation matrix from the two
/// adjacent correlations and a partial-correlation parameter in (-1, 1), which
/// keeps the matrix positive definite.
inline double complete_correlation(double rho_r_lambda, double rho_lambda_beta, double rho_tilde_r_beta) {
  auto open = [](double v) { return std::isfinite(v) && v > -1.0 && v < 1.0; };
  if (!open(rho_r_lambda) || !open(rho_lambda_beta) || !open(rho_tilde_r_beta))
    throw std::domain_error("complete_correlation: inputs must lie in (-1, 1)");
  return rho_r_lambda * rho_lambda_beta +
         rho_tilde_r_beta * std::sqrt((1.0 - rho_r_lambda * rho_r_lambda) * (1.0 - rho_lambda_beta * rho_lambda_beta));
}

inline Eigen::Matrix3d correlation_matrix(double rho_r_lambda, double rho_lambda_beta, double rho_tilde_r_beta) {
  const double rho_r_beta = complete_correlation(rho_r_lambda, rho_lambda_beta, rho_tilde_r_beta);
  Eigen::Matrix3d p;
  p << 1.0, rho_r_lambda, rho_r_beta,  //
      rho_r_lambda, 1.0, rho_lambda_beta,  //
      rho_r_beta, rho_lambda_beta, 1.0;
  return p;
}

/// Gaussian-copula joint law: standard normal scores with correlation P are
/// mapped through each marginal's quantile function. Truncated marginals
/// reject the whole joint draw.
class CopulaJoint {
 public:
  CopulaJoint(std::vector<Marginal> marginals, Eigen::MatrixXd correlation)
      : marginals_(std::move(marginals)), correlation_(std::move(correlation)) {
    const auto d = static_cast<Eigen::Index>(marginals_.size());
    if (correlation_.rows() != d || correlation_.cols() != d)
      throw std::invalid_argument("CopulaJoint: correlation size does not match marginals");
    if (!correlation_.isApprox(correlation_.transpose(), 1e-12) ||
        (correlation_.diagonal().array() - 1.0).abs().maxCoeff() > 1e-12)
      throw std::domain_error("CopulaJoint: correlation must be symmetric with unit diagonal");
    Eigen::LLT<Eigen::MatrixXd> llt(correlation_);
    if (llt.info() != Eigen::Success) throw std::domain_error("CopulaJoint: correlation is not positive definite");
    lower_ = llt.matrixL();
  }

  const std::vector<Marginal>& marginals() const { return marginals_; }
  const Eigen::MatrixXd& correlation() const { return correlation_; }
  std::size_t dimension() const { return marginals_.size(); }

  void sample_into(Stream& s, std::span<double> out) const {
    const auto d = static_cast<Eigen::Index>(marginals_.size());
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd n(d);
    for (int attempt = 0; attempt < kTruncationCap; ++attempt) {
      for (Eigen::Index i = 0; i < d; ++i) n(i) = normal(s);
      const Eigen::VectorXd z = lower_.triangularView<Eigen::Lower>() * n;
      bool ok = true;
      for (Eigen::Index i = 0; i < d; ++i) {
        const auto& m = marginals_[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(i)] = quantile_from_normal_score(m.law, z(i));
        if (m.truncate_positive && !(out[static_cast<std::size_t>(i)] > 0.0)) ok = false;
      }
      if (ok) return;
    }
    std::string names;
    for (const auto& m : marginals_)
      if (m.truncate_positive) names += (names.empty() ? "" : ", ") + m.name;
    throw TruncationError("positive truncation of copula marginals {" + names + "} exceeded " +
                          std::to_string(kTruncationCap) + " consecutive rejections");
  }

 private:
  std::vector<Marginal> marginals_;
  Eigen::MatrixXd correlation_;
  Eigen::MatrixXd lower_;
};

using PopulationDistribution = std::variant<Marginal, IndependentProduct, CopulaJoint>;

inline std::size_t dimension(const PopulationDistribution& dist) {
  return std::visit(
      [](const auto& d) -> std::size_t {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Marginal>) return 1;
        else if constexpr (std::is_same_v<T, IndependentProduct>) return d.marginals.size();
        else return d.dimension();
      },
      dist);
}

inline void sample_into(const PopulationDistribution& dist, Stream& s, std::span<double> out) {
  std::visit(
      [&](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Marginal>) {
          out[0] = sample(d, s);
        } else if constexpr (std::is_same_v<T, IndependentProduct>) {
          for (std::size_t i = 0; i < d.marginals.size(); ++i) out[i] = sample(d.marginals[i], s);
        } else {
          d.sample_into(s, out);
        }
      },
      dist);
}

/// n i.i.d. draws, one per row.
inline Eigen::MatrixXd sample_population(const PopulationDistribution& dist, std::size_t n, Stream& s) {
  if (n == 0) throw std::invalid_argument("sample_population: n must be at least 1");
  const auto d = dimension(dist);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<double> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    sample_into(dist, s, row);
    for (std::size_t j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return out;
}

inline const Marginal& marginal(const PopulationDistribution& dist, std::size_t j) {
  return std::visit(
      [j](const auto& d) -> const Marginal& {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Marginal>) return d;
        else if constexpr (std::is_same_v<T, IndependentProduct>) return d.marginals.at(j);
        else return d.marginals().at(j);
      },
      dist);
}

// ---------------------------------------------------------------------------
// Parametric families: hyperparameter vector theta -> population distribution.

enum class FamilyKind { gaussian, gaussian_mixture_2, shifted_gamma, shifted_lognormal, copula, independent_product };

inline FamilyKind family_from_tag(const std::string& tag) {
  if (tag == "gaussian") return FamilyKind::gaussian;
  if (tag == "gaussian_mixture_2") return FamilyKind::gaussian_mixture_2;
  if (tag == "shifted_gamma") return FamilyKind::shifted_gamma;
  if (tag == "shifted_lognormal") return FamilyKind::shifted_lognormal;
  if (tag == "copula") return FamilyKind::copula;
  if (tag == "independent_product") return FamilyKind::independent_product;
  throw ConfigError("unknown population family '" + tag + "'");
}

inline std::string family_tag(FamilyKind k) {
  switch (k) {
    case FamilyKind::gaussian: return "gaussian";
    case FamilyKind::gaussian_mixture_2: return "gaussian_mixture_2";
    case FamilyKind::shifted_gamma: return "shifted_gamma";
    case FamilyKind::shifted_lognormal: return "shifted_lognormal";
    case FamilyKind::copula: return "copula";
    case FamilyKind::independent_product: return "independent_product";
  }
  return "";
}

/// A parametric family f_theta(x) together with its hyperparameter layout.
///
/// Layouts (in order):
///  - gaussian:            mu_<x>, sigma_<x>
///  - gaussian_mixture_2:  mu1, mu2, var1, var2, omega   (component variances)
///  - shifted_gamma:       mu_<x>, sigma_<x>, omega_<x>  (mean, sd, skewness)
///  - shifted_lognormal:   mu_<x>, sigma_<x>             (unit-mean shift)
///  - independent_product: mu_<c> for each component, then sigma_<c> for each
///  - copula:              mu_R, sigma_R, mu_lambda, sigma_lambda, omega_lambda,
///                         mu_beta, sigma_beta, omega_beta, rho_R_lambda,
///                         rho_lambda_beta, rho_tilde_R_beta
struct PopulationFamily {
  FamilyKind kind = FamilyKind::gaussian;
  std::vector<std::string> components{"x"};
  bool truncate_positive = false;

  static PopulationFamily copula_family() {
    return PopulationFamily{FamilyKind::copula, {"R", "lambda", "beta"}, true};
  }

  std::size_t dimension() const {
    if (kind == FamilyKind::copula) return 3;
    if (kind == FamilyKind::independent_product) return components.size();
    return 1;
  }

  std::vector<std::string> hyper_names() const {
    const std::string& c = components.front();
    switch (kind) {
      case FamilyKind::gaussian: return {"mu_" + c, "sigma_" + c};
      case FamilyKind::gaussian_mixture_2: return {"mu1", "mu2", "var1", "var2", "omega"};
      case FamilyKind::shifted_gamma: return {"mu_" + c, "sigma_" + c, "omega_" + c};
      case FamilyKind::shifted_lognormal: return {"mu_" + c, "sigma_" + c};
      case FamilyKind::copula:
        return {"mu_R",    "sigma_R",    "mu_lambda",    "sigma_lambda",    "omega_lambda",    "mu_beta",
                "sigma_beta", "omega_beta", "rho_R_lambda", "rho_lambda_beta", "rho_tilde_R_beta"};
      case FamilyKind::independent_product: {
        std::vector<std::string> names;
        for (const auto& comp : components) names.push_back("mu_" + comp);
        for (const auto& comp : components) names.push_back("sigma_" + comp);
        return names;
      }
    }
    return {};
  }

  /// Throws std::domain_error for hyperparameters outside the family's domain.
  PopulationDistribution build(std::span<const double> theta) const {
    if (theta.size() != hyper_names().size()) throw std::invalid_argument("PopulationFamily: wrong theta length");
    auto nonneg = [](double v, const char* what) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::domain_error(std::string(what) + " must be non-negative");
      return v;
    };
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v)) throw std::domain_error(std::string(what) + " must be positive");
      return v;
    };
    const std::string& c = components.front();
    switch (kind) {
      case FamilyKind::gaussian:
        return Marginal{Gaussian{theta[0], nonneg(theta[1], "sd")}, truncate_positive, c};
      case FamilyKind::gaussian_mixture_2: {
        const double w = theta[4];
        if (!(w >= 0.0 && w <= 1.0)) throw std::domain_error("mixture weight must lie in [0,1]");
        return Marginal{GaussianMixture1D{theta[0], theta[1], std::sqrt(nonneg(theta[2], "variance")),
                                          std::sqrt(nonneg(theta[3], "variance")), w},
                        truncate_positive, c};
      }
      case FamilyKind::shifted_gamma:
        return Marginal{ShiftedGamma::from_moments(theta[0], positive(theta[1], "sd"), theta[2]), truncate_positive, c};
      case FamilyKind::shifted_lognormal:
        return Marginal{ShiftedLogNormal::with_unit_mean(theta[0], positive(theta[1], "scale")), truncate_positive, c};
      case FamilyKind::independent_product: {
        IndependentProduct prod;
        const std::size_t k = components.size();
        for (std::size_t i = 0; i < k; ++i)
          prod.marginals.push_back(
              Marginal{Gaussian{theta[i], nonneg(theta[k + i], "sd")}, truncate_positive, components[i]});
        return prod;
      }
      case FamilyKind::copula: {
        std::vector<Marginal> ms;
        ms.push_back(Marginal{ShiftedLogNormal::with_unit_mean(theta[0], positive(theta[1], "sigma_R")), true, "R"});
        ms.push_back(
            Marginal{ShiftedGamma::from_moments(theta[2], positive(theta[3], "sigma_lambda"), theta[4]), true, "lambda"});
        ms.push_back(
            Marginal{ShiftedGamma::from_moments(theta[5], positive(theta[6], "sigma_beta"), theta[7]), true, "beta"});
        return CopulaJoint(std::move(ms), correlation_matrix(theta[8], theta[9], theta[10]));
      }
    }
    throw std::logic_error("unreachable family kind");
  }
};

}  // namespace popcal
