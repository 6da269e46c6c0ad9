#pragma once

// Single von Mises-Fisher distribution on S^{d-1}: normalizer, concentration
// estimation and sampling.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "zsr/bessel.hpp"
#include "zsr/error.hpp"

namespace zsr {

inline constexpr double kKappaMin = 1e-3;
inline constexpr double kKappaMax = 1e5;

/// log c_d(kappa) with c_d = kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa)).
inline double vmf_log_normalizer(std::size_t d, double kappa) {
  const double nu = 0.5 * static_cast<double>(d) - 1.0;
  return nu * std::log(kappa) - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
         log_bessel_i(nu, kappa);
}

/// log density at a point with <mu, x> = cosine. Written as
/// log c_d(k) + k = nu log k - (d/2) log 2pi - (log I_nu(k) - k) so no
/// exp(kappa)-sized intermediate appears.
inline double vmf_log_density(std::size_t d, double kappa, double cosine) {
  const double nu = 0.5 * static_cast<double>(d) - 1.0;
  return nu * std::log(kappa) - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
         log_bessel_i_scaled(nu, kappa) + kappa * (cosine - 1.0);
}

/// log of the surface area of S^{d-1}: log(2 pi^{d/2} / Gamma(d/2)).
inline double log_sphere_area(std::size_t d) {
  const double h = 0.5 * static_cast<double>(d);
  return std::log(2.0) + h * std::log(std::numbers::pi) - std::lgamma(h);
}

/// Closed-form concentration estimate (r d - r^3) / (1 - r^2) from the mean
/// resultant length r, clamped to [kappa_min, kappa_max].
inline double kappa_estimate(double rbar, std::size_t d, double kappa_min = kKappaMin,
                             double kappa_max = kKappaMax) {
  if (!(rbar >= 0.0)) throw Error("kappa_estimate: negative resultant length");
  if (rbar >= 1.0) return kappa_max;
  const double dd = static_cast<double>(d);
  const double k = (rbar * dd - rbar * rbar * rbar) / (1.0 - rbar * rbar);
  if (!std::isfinite(k)) return kappa_max;
  return std::clamp(k, kappa_min, kappa_max);
}

/// A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), the expected cosine to the mean.
inline double mean_resultant(std::size_t d, double kappa) {
  return bessel_i_ratio(0.5 * static_cast<double>(d) - 1.0, kappa);
}

/// Maximum-likelihood concentration: the root of A_d(kappa) = rbar on
/// [kappa_min, kappa_max], by safeguarded Newton iteration started from the
/// closed-form estimate. The per-component objective
/// log c_d(kappa) + kappa * rbar is concave in kappa, so the root (or the
/// nearer bound) is its maximizer.
inline double kappa_mle(double rbar, std::size_t d, double kappa_min = kKappaMin,
                        double kappa_max = kKappaMax) {
  double lo = kappa_min, hi = kappa_max;
  if (mean_resultant(d, lo) >= rbar) return lo;
  if (mean_resultant(d, hi) <= rbar) return hi;
  double k = std::clamp(kappa_estimate(rbar, d, kappa_min, kappa_max), lo, hi);
  const double dd = static_cast<double>(d);
  for (int it = 0; it < 100; ++it) {
    const double a = mean_resultant(d, k);
    const double f = a - rbar;
    if (f > 0) hi = k; else lo = k;
    const double slope = 1.0 - a * a - (dd - 1.0) * a / k;
    double next = slope > 0 ? k - f / slope : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - k) <= 1e-14 * k) return next;
    k = next;
  }
  return k;
}

/// Uniform direction on S^{d-1}.
template <class Rng>
std::vector<double> sample_uniform_sphere(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(d);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = normal(rng);
      n += x * x;
    }
  } while (n < 1e-300);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

/// Draws from vMF(mu, kappa) with Wood's rejection sampler; mu must be unit.
template <class Rng>
std::vector<double> sample_vmf(std::span<const double> mu, double kappa, Rng& rng) {
  const std::size_t d = mu.size();
  if (d < 2) throw Error("sample_vmf requires d >= 2");
  if (!(kappa > 0.0)) return sample_uniform_sphere(d, rng);
  const double dm1 = static_cast<double>(d) - 1.0;
  const double b = dm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> gamma(0.5 * dm1, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double w = 0.0;
  for (;;) {
    const double g1 = gamma(rng), g2 = gamma(rng);
    const double z = g1 / (g1 + g2);
    w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    const double u = unif(rng);
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }
  // Tangent direction: a Gaussian vector with its mu component removed.
  std::vector<double> v;
  double vn = 0.0;
  do {
    v = sample_uniform_sphere(d, rng);
    double proj = 0.0;
    for (std::size_t i = 0; i < d; ++i) proj += v[i] * mu[i];
    vn = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      v[i] -= proj * mu[i];
      vn += v[i] * v[i];
    }
  } while (vn < 1e-20);
  vn = std::sqrt(vn);
  const double s = std::sqrt(std::max(0.0, 1.0 - w * w));
  std::vector<double> x(d);
  for (std::size_t i = 0; i < d; ++i) x[i] = w * mu[i] + s * v[i] / vn;
  return x;
}

}  // namespace zsr
