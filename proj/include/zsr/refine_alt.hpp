#pragma once

// Alternative refiners: nearest label text as the anchor, and k-means in the
// tangent space of the sphere at the mean target direction.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <spdlog/spdlog.h>

#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"
#include "zsr/movmf.hpp"

namespace zsr {

inline RefinementMask refine_text_anchor(const EmbeddingMatrix& retrieved, const EmbeddingMatrix& label_texts,
                                         double tau_r) {
  check_tau_r(tau_r);
  if (label_texts.rows == 0) throw Error("refine_text_anchor: empty label set");
  if (retrieved.dim != label_texts.dim) throw Error("refine_text_anchor: dim mismatch");
  require_unit_rows(retrieved, "refine_text_anchor retrieved");
  require_unit_rows(label_texts, "refine_text_anchor labels");
  RefinementMask mask;
  mask.tau_r = tau_r;
  mask.method = RefineMethod::text_anchor;
  for (std::size_t j = 0; j < retrieved.rows; ++j) {
    std::size_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < label_texts.rows; ++i) {
      const double c = dot(retrieved.row(j), label_texts.row(i));
      if (c > best_cos) {
        best_cos = c;
        best = i;
      }
    }
    const double dist = 1.0 - best_cos;
    mask.keep.push_back(dist < tau_r);
    mask.assigned_component.push_back(best);
    mask.distance.push_back(dist);
  }
  return mask;
}

/// Riemannian log map of the unit sphere at base point m:
/// theta (x - cos(theta) m) / |x - cos(theta) m| with theta = arccos <m, x>.
/// Returns false for the antipode, where the map is undefined.
inline bool sphere_log(std::span<const double> m, std::span<const double> x, std::span<double> out) {
  const std::size_t d = m.size();
  double c = 0.0;
  for (std::size_t i = 0; i < d; ++i) c += m[i] * x[i];
  c = std::clamp(c, -1.0, 1.0);
  double n = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = x[i] - c * m[i];
    n += out[i] * out[i];
  }
  n = std::sqrt(n);
  if (n < 1e-15) {
    std::fill(out.begin(), out.end(), 0.0);
    return c > 0.0;
  }
  // atan2 keeps theta accurate near 0 and pi, where acos loses digits.
  const double theta = std::atan2(n, c);
  for (double& v : out) v *= theta / n;
  return true;
}

/// Inverse of sphere_log: cos|v| m + sin|v| v / |v|.
inline std::vector<double> sphere_exp(std::span<const double> m, std::span<const double> v) {
  double n = 0.0;
  for (double t : v) n += t * t;
  n = std::sqrt(n);
  std::vector<double> out(m.begin(), m.end());
  if (n == 0.0) return out;
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = std::cos(n) * m[i] + std::sin(n) * v[i] / n;
  return out;
}

struct TangentKmeansModel {
  std::vector<double> base;                    // unit mean of the target rows
  std::vector<std::vector<double>> centroids;  // in tangent coordinates at base
};

namespace tangent_detail {

inline double sqdist(const std::vector<double>& a, const double* b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

inline std::size_t nearest(const std::vector<std::vector<double>>& centroids, const double* p) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const double dd = sqdist(centroids[i], p);
    if (dd < best_d) {
      best_d = dd;
      best = i;
    }
  }
  return best;
}

}  // namespace tangent_detail

/// Lloyd k-means with k-means++ seeding on the tangent images of the target rows.
inline TangentKmeansModel fit_tangent_kmeans(const EmbeddingMatrix& target, std::size_t k, std::uint64_t seed,
                                             std::size_t max_iter = 100) {
  using tangent_detail::nearest;
  using tangent_detail::sqdist;
  if (target.rows == 0) throw Error("refine_tangent_kmeans: empty target");
  if (k < 1 || k > target.rows) throw Error("refine_tangent_kmeans: K must be in [1, rows]");
  require_unit_rows(target, "refine_tangent_kmeans target");
  const std::size_t n = target.rows, d = target.dim;
  const auto x = movmf_detail::unit_rows(target);

  TangentKmeansModel model;
  model.base.assign(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < d; ++t) model.base[t] += x[j * d + t];
  }
  double bn = 0.0;
  for (double v : model.base) bn += v * v;
  bn = std::sqrt(bn);
  if (bn < 1e-12) throw Error("refine_tangent_kmeans: target rows have no mean direction");
  for (double& v : model.base) v /= bn;

  std::vector<double> tangent(n * d);
  std::vector<bool> usable(n, true);
  for (std::size_t j = 0; j < n; ++j) {
    usable[j] = sphere_log(model.base, {&x[j * d], d}, {&tangent[j * d], d});
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < n; ++j) {
    if (usable[j]) pool.push_back(j);
  }
  if (pool.size() < k) throw Error("refine_tangent_kmeans: fewer usable target rows than K");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  {
    const std::size_t first = pool[pick(rng)];
    model.centroids.emplace_back(&tangent[first * d], &tangent[first * d] + d);
  }
  std::vector<double> dist(pool.size(), std::numeric_limits<double>::infinity());
  while (model.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t p = 0; p < pool.size(); ++p) {
      dist[p] = std::min(dist[p], sqdist(model.centroids.back(), &tangent[pool[p] * d]));
      total += dist[p];
    }
    std::size_t chosen = pool[pick(rng)];
    if (total > 0.0) {
      const double target_mass = unif(rng) * total;
      double acc = 0.0;
      for (std::size_t p = 0; p < pool.size(); ++p) {
        acc += dist[p];
        if (acc > target_mass && dist[p] > 0.0) {
          chosen = pool[p];
          break;
        }
      }
    }
    model.centroids.emplace_back(&tangent[chosen * d], &tangent[chosen * d] + d);
  }

  std::vector<std::size_t> assign(n, 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    for (std::size_t j : pool) {
      const std::size_t a = nearest(model.centroids, &tangent[j * d]);
      if (a != assign[j]) changed = true;
      assign[j] = a;
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t j : pool) {
      ++counts[assign[j]];
      for (std::size_t t = 0; t < d; ++t) sums[assign[j]][t] += tangent[j * d + t];
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (counts[i] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t t = 0; t < d; ++t) model.centroids[i][t] = sums[i][t] / static_cast<double>(counts[i]);
    }
  }
  return model;
}

/// Assigns retrieved rows to their nearest tangent centroid and keeps those
/// within tangent distance tau_r (radians). Antipodes of the base point are
/// rejected.
inline RefinementMask refine_tangent_kmeans(const TangentKmeansModel& model, const EmbeddingMatrix& retrieved,
                                            double tau_r) {
  check_tau_r(tau_r);
  const std::size_t d = model.base.size();
  if (retrieved.dim != d) throw Error("refine_tangent_kmeans: dim mismatch");
  require_unit_rows(retrieved, "refine_tangent_kmeans retrieved");
  const auto x = movmf_detail::unit_rows(retrieved);
  RefinementMask mask;
  mask.tau_r = tau_r;
  mask.method = RefineMethod::tangent_kmeans;
  std::vector<double> v(d);
  for (std::size_t j = 0; j < retrieved.rows; ++j) {
    if (!sphere_log(model.base, {&x[j * d], d}, v)) {
      spdlog::warn("retrieved row {} is antipodal to the tangent base point; rejected", j);
      mask.keep.push_back(false);
      mask.assigned_component.push_back(0);
      mask.distance.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    const std::size_t a = tangent_detail::nearest(model.centroids, v.data());
    const double dist = std::sqrt(tangent_detail::sqdist(model.centroids[a], v.data()));
    mask.keep.push_back(dist < tau_r);
    mask.assigned_component.push_back(a);
    mask.distance.push_back(dist);
  }
  return mask;
}

inline RefinementMask refine_tangent_kmeans(const EmbeddingMatrix& target, const EmbeddingMatrix& retrieved,
                                            std::size_t k, std::uint64_t seed, double tau_r) {
  if (retrieved.dim != target.dim) throw Error("refine_tangent_kmeans: dim mismatch");
  return refine_tangent_kmeans(fit_tangent_kmeans(target, k, seed), retrieved, tau_r);
}

}  // namespace zsr
