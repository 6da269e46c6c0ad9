#pragma once

// log I_nu(x) for the modified Bessel function of the first kind, returned
// in exponentially scaled form log(I_nu(x)) - x so that vMF normalizers stay
// finite for concentrations up to 1e5 and beyond.
//
// Branches:
//   nu >= 25                    Debye uniform asymptotic expansion
//   x >= max(50, 4 nu^2)        Hankel large-argument expansion
//   otherwise                   power series summed outward from its peak term

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "zsr/error.hpp"

namespace zsr {

namespace bessel_detail {

inline constexpr int kDebyeTerms = 13;
inline constexpr double kDebyeMinOrder = 25.0;

// Coefficients of the Debye polynomials u_k(p), k < kDebyeTerms, in powers of
// p, from u_{k+1}(p) = p^2 (1 - p^2) u_k'(p) / 2 + (1/8) int_0^p (1 - 5t^2) u_k(t) dt.
inline const std::vector<std::vector<double>>& debye_polynomials() {
  static const std::vector<std::vector<double>> polys = [] {
    std::vector<std::vector<double>> u{{1.0}};
    for (int k = 0; k + 1 < kDebyeTerms; ++k) {
      const auto& a = u.back();
      std::vector<double> next(a.size() + 3, 0.0);
      for (std::size_t i = 1; i < a.size(); ++i) {
        const double d = 0.5 * static_cast<double>(i) * a[i];  // from p^2 (1-p^2) * i a_i p^{i-1} / 2
        next[i + 1] += d;
        next[i + 3] -= d;
      }
      for (std::size_t i = 0; i < a.size(); ++i) {
        next[i + 1] += a[i] / (8.0 * static_cast<double>(i + 1));
        next[i + 3] -= 5.0 * a[i] / (8.0 * static_cast<double>(i + 3));
      }
      u.push_back(std::move(next));
    }
    return u;
  }();
  return polys;
}

inline double horner(const std::vector<double>& c, double p) {
  double s = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) s = s * p + *it;
  return s;
}

inline double debye_scaled(double nu, double x) {
  const double root = std::hypot(nu, x);
  const double p = nu / root;  // 1 / sqrt(1 + z^2)
  // nu * eta - x, with sqrt(nu^2 + x^2) - x rewritten to avoid cancellation
  const double exponent = nu * nu / (root + x) + nu * std::log(x / (nu + root));
  const auto& u = debye_polynomials();
  double sum = 0.0;
  double scale = 1.0;
  for (const auto& poly : u) {
    sum += horner(poly, p) * scale;
    scale /= nu;
  }
  return exponent - 0.5 * std::log(2.0 * std::numbers::pi * nu) + 0.5 * std::log(p) + std::log(sum);
}

inline double hankel_scaled(double nu, double x) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (8.0 * k * x);
    const double mag = std::abs(term);
    if (mag == 0.0 || mag > prev) break;  // terminated exactly, or asymptotic tail
    sum += term;
    prev = mag;
    if (mag < 1e-17 * std::abs(sum)) break;
  }
  return std::log(sum) - 0.5 * std::log(2.0 * std::numbers::pi * x);
}

inline double series_scaled(double nu, double x) {
  const double q = 0.25 * x * x;
  // t_k = q^k / (k! (nu+1)_k); the largest term sits where k (k + nu) ~ q.
  const double peak = std::floor(0.5 * (-nu + std::sqrt(nu * nu + 4.0 * q)));
  const double kp = std::max(0.0, peak);
  double sum = 1.0;
  double t = 1.0;
  for (double k = kp + 1.0;; k += 1.0) {
    t *= q / (k * (k + nu));
    sum += t;
    if (t < 1e-17 * sum) break;
  }
  t = 1.0;
  for (double k = kp; k >= 1.0; k -= 1.0) {
    t *= k * (k + nu) / q;
    sum += t;
    if (t < 1e-17 * sum) break;
  }
  const double log_half_x = std::log(0.5 * x);
  const double log_peak = 2.0 * kp * log_half_x - std::lgamma(kp + 1.0) - std::lgamma(kp + nu + 1.0);
  return nu * log_half_x + log_peak + std::log(sum) - x;
}

}  // namespace bessel_detail

/// log(I_nu(x)) - x for nu >= 0, x >= 0.
inline double log_bessel_i_scaled(double nu, double x) {
  if (!(nu >= 0.0) || !(x >= 0.0) || !std::isfinite(nu) || !std::isfinite(x)) {
    throw Error("log_bessel_i: requires finite nu >= 0 and x >= 0");
  }
  if (x == 0.0) return nu == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (nu >= bessel_detail::kDebyeMinOrder) return bessel_detail::debye_scaled(nu, x);
  if (x >= std::max(50.0, 4.0 * nu * nu)) return bessel_detail::hankel_scaled(nu, x);
  return bessel_detail::series_scaled(nu, x);
}

inline double log_bessel_i(double nu, double x) { return log_bessel_i_scaled(nu, x) + x; }

/// I_{nu+1}(x) / I_nu(x).
inline double bessel_i_ratio(double nu, double x) {
  if (x == 0.0) return 0.0;
  return std::exp(log_bessel_i_scaled(nu + 1.0, x) - log_bessel_i_scaled(nu, x));
}

}  // namespace zsr
