#pragma once

// Mixture of von Mises-Fisher distributions fitted by EM, and the
// refinement filter that keeps retrieved embeddings close to the mean of
// their most likely component.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"
#include "zsr/vmf.hpp"

namespace zsr {

inline constexpr double kDefaultTauR = 0.45;

struct VmfComponent {
  std::vector<double> mu;
  double kappa = 1.0;
  double pi = 1.0;
};

enum class KappaUpdate {
  closed_form,  // (r d - r^3) / (1 - r^2)
  newton,       // closed form refined to the exact maximizer
};

struct MovmfOptions {
  std::size_t components = 1;
  std::uint64_t seed = 0;
  std::size_t max_iter = 200;
  double tol = 1e-6;
  double kappa_min = kKappaMin;
  double kappa_max = kKappaMax;
  KappaUpdate kappa_update = KappaUpdate::newton;
};

struct MovmfModel {
  std::vector<VmfComponent> components;
  std::size_t dim = 0;
  std::vector<double> log_likelihood_trace;
  std::uint64_t seed = 0;
  bool converged = false;
};

namespace movmf_detail {

/// Rows of `m` as doubles, renormalized to unit length in double precision.
inline std::vector<double> unit_rows(const EmbeddingMatrix& m) {
  std::vector<double> out(m.rows * m.dim);
  for (std::size_t j = 0; j < m.rows; ++j) {
    const auto r = m.row(j);
    const double n = row_norm(r);
    if (n < 1e-12) throw Error("zero-norm row " + std::to_string(j));
    for (std::size_t t = 0; t < m.dim; ++t) out[j * m.dim + t] = r[t] / n;
  }
  return out;
}

inline double dotd(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t t = 0; t < d; ++t) s += a[t] * b[t];
  return s;
}

/// Per-component additive constant: log pi + log c_d(kappa) scaled so that
/// log(pi * density(x)) = offset + kappa * <mu, x>.
inline std::vector<double> log_offsets(const MovmfModel& model, bool include_weights) {
  std::vector<double> c(model.components.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& comp = model.components[i];
    const double lw = include_weights ? (comp.pi > 0.0 ? std::log(comp.pi) : -std::numeric_limits<double>::infinity())
                                      : 0.0;
    c[i] = lw + vmf_log_density(model.dim, comp.kappa, 0.0);
  }
  return c;
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Seeds by greedy spherical k-means++: the first center uniformly; each
/// next one from 2 + floor(ln k) candidates drawn with probability
/// proportional to the squared cosine distance to the nearest chosen center,
/// keeping the candidate that most lowers the total squared distance.
inline std::vector<std::size_t> kmeanspp_sphere(const std::vector<double>& x, std::size_t n, std::size_t d,
                                                std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> centers;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  auto sq_dist = [&](std::size_t j, std::size_t c) {
    const double v = std::max(0.0, 1.0 - dotd(&x[j * d], &x[c * d], d));
    return v * v;
  };
  centers.push_back(pick(rng));
  std::vector<double> dist(n);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += dist[j] = sq_dist(j, centers[0]);
  while (centers.size() < k) {
    if (total <= 0.0) {
      centers.push_back(pick(rng));
      continue;
    }
    std::size_t best = n;
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<double> best_dist;
    for (std::size_t t = 0; t < trials; ++t) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      std::size_t cand = n - 1;
      for (std::size_t j = 0; j < n; ++j) {
        acc += dist[j];
        if (acc > target && dist[j] > 0.0) {
          cand = j;
          break;
        }
      }
      std::vector<double> next(n);
      double next_total = 0.0;
      for (std::size_t j = 0; j < n; ++j) next_total += next[j] = std::min(dist[j], sq_dist(j, cand));
      if (next_total < best_total) {
        best = cand;
        best_total = next_total;
        best_dist = std::move(next);
      }
    }
    centers.push_back(best);
    dist = std::move(best_dist);
    total = best_total;
  }
  return centers;
}

/// One M-step from responsibilities gamma (n x K, row-major).
inline void m_step(MovmfModel& model, const std::vector<double>& x, std::size_t n,
                   const std::vector<double>& gamma, const MovmfOptions& opt) {
  const std::size_t d = model.dim;
  const std::size_t k = model.components.size();
  for (std::size_t i = 0; i < k; ++i) {
    auto& comp = model.components[i];
    double mass = 0.0;
    std::vector<double> r(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double g = gamma[j * k + i];
      if (g == 0.0) continue;
      mass += g;
      const double* xj = &x[j * d];
      for (std::size_t t = 0; t < d; ++t) r[t] += g * xj[t];
    }
    comp.pi = mass / static_cast<double>(n);
    if (mass <= 0.0) continue;  // empty component keeps its direction
    double norm = 0.0;
    for (double v : r) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (std::size_t t = 0; t < d; ++t) comp.mu[t] = r[t] / norm;
    }
    const double rbar = std::min(1.0, norm / mass);
    comp.kappa = opt.kappa_update == KappaUpdate::newton
                     ? kappa_mle(rbar, d, opt.kappa_min, opt.kappa_max)
                     : kappa_estimate(rbar, d, opt.kappa_min, opt.kappa_max);
  }
}

/// E-step: fills gamma and returns the total log-likelihood.
inline double e_step(const MovmfModel& model, const std::vector<double>& x, std::size_t n,
                     std::vector<double>& gamma) {
  const std::size_t d = model.dim;
  const std::size_t k = model.components.size();
  const auto offsets = log_offsets(model, true);
  std::vector<double> l(k);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double* xj = &x[j * d];
    for (std::size_t i = 0; i < k; ++i) {
      const auto& c = model.components[i];
      l[i] = offsets[i] + c.kappa * dotd(c.mu.data(), xj, d);
    }
    const double lse = log_sum_exp(l);
    for (std::size_t i = 0; i < k; ++i) gamma[j * k + i] = std::exp(l[i] - lse);
    total += lse;
  }
  return total;
}

}  // namespace movmf_detail

inline MovmfModel fit_movmf(const EmbeddingMatrix& target, const MovmfOptions& opt) {
  using namespace movmf_detail;
  const std::size_t n = target.rows, d = target.dim, k = opt.components;
  if (k < 1) throw Error("fit_movmf: K must be >= 1");
  if (k > n) throw Error("fit_movmf: K = " + std::to_string(k) + " exceeds " + std::to_string(n) + " rows");
  if (d < 2) throw Error("fit_movmf: dim must be >= 2");
  require_unit_rows(target, "fit_movmf target");
  const auto x = unit_rows(target);

  MovmfModel model;
  model.dim = d;
  model.seed = opt.seed;
  std::mt19937_64 rng(opt.seed);
  const auto seeds = kmeanspp_sphere(x, n, d, k, rng);
  for (std::size_t s : seeds) model.components.push_back({std::vector<double>(&x[s * d], &x[s * d] + d), 1.0, 1.0 / k});

  // Initial parameters from the hard assignment to the nearest seed.
  std::vector<double> gamma(n * k, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      const double c = dotd(&x[j * d], model.components[i].mu.data(), d);
      if (c > best_cos) {
        best_cos = c;
        best = i;
      }
    }
    gamma[j * k + best] = 1.0;
  }
  m_step(model, x, n, gamma, opt);

  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    const double ll = e_step(model, x, n, gamma);
    if (!std::isfinite(ll)) {
      std::string trace;
      for (double v : model.log_likelihood_trace) trace += " " + std::to_string(v);
      throw Error("fit_movmf: non-finite log-likelihood at iteration " + std::to_string(it) + "; trace:" + trace);
    }
    model.log_likelihood_trace.push_back(ll);
    const auto& tr = model.log_likelihood_trace;
    if (tr.size() >= 2) {
      const double prev = tr[tr.size() - 2];
      if (std::abs(ll - prev) <= opt.tol * std::max(std::abs(prev), 1e-300)) {
        model.converged = true;
        break;
      }
    }
    m_step(model, x, n, gamma, opt);
  }
  return model;
}

/// Sum over points of log sum_i pi_i vMF(x | mu_i, kappa_i).
inline double movmf_log_likelihood(const MovmfModel& model, const EmbeddingMatrix& points) {
  if (points.dim != model.dim) throw Error("movmf_log_likelihood: dim mismatch");
  const auto x = movmf_detail::unit_rows(points);
  std::vector<double> gamma(points.rows * model.components.size());
  return movmf_detail::e_step(model, x, points.rows, gamma);
}

enum class RefineMethod { movmf, text_anchor, tangent_kmeans };

inline std::string to_string(RefineMethod m) {
  switch (m) {
    case RefineMethod::movmf: return "movmf";
    case RefineMethod::text_anchor: return "text_anchor";
    case RefineMethod::tangent_kmeans: return "tangent_kmeans";
  }
  return "?";
}

inline RefineMethod parse_refine_method(std::string_view s) {
  if (s == "movmf") return RefineMethod::movmf;
  if (s == "text_anchor") return RefineMethod::text_anchor;
  if (s == "tangent_kmeans") return RefineMethod::tangent_kmeans;
  throw Error("unknown refinement method \"" + std::string(s) + "\"");
}

struct RefinementMask {
  std::vector<bool> keep;
  std::vector<std::size_t> assigned_component;
  std::vector<double> distance;  // cosine distance, or tangent distance for tangent_kmeans
  double tau_r = kDefaultTauR;
  RefineMethod method = RefineMethod::movmf;

  std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }
};

inline void check_tau_r(double tau_r) {
  if (!(tau_r >= 0.0 && tau_r <= 2.0)) throw Error("tau_r must lie in [0, 2]");
}

/// Hard-assigns each retrieved row to its most likely component (weighted by
/// pi unless `weighted` is false) and keeps it iff 1 - <x, mu> < tau_r.
inline RefinementMask refine_movmf(const MovmfModel& model, const EmbeddingMatrix& retrieved, double tau_r,
                                   bool weighted = true) {
  check_tau_r(tau_r);
  if (retrieved.dim != model.dim) throw Error("refine_movmf: dim mismatch");
  if (model.components.empty()) throw Error("refine_movmf: empty model");
  require_unit_rows(retrieved, "refine_movmf retrieved");
  const std::size_t d = model.dim;
  const auto x = movmf_detail::unit_rows(retrieved);
  const auto offsets = movmf_detail::log_offsets(model, weighted);
  RefinementMask mask;
  mask.tau_r = tau_r;
  mask.method = RefineMethod::movmf;
  for (std::size_t j = 0; j < retrieved.rows; ++j) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    double best_cos = -1.0;
    for (std::size_t i = 0; i < model.components.size(); ++i) {
      const auto& c = model.components[i];
      const double cosine = movmf_detail::dotd(c.mu.data(), &x[j * d], d);
      const double score = offsets[i] + c.kappa * cosine;
      if (score > best_score) {
        best_score = score;
        best = i;
        best_cos = cosine;
      }
    }
    const double dist = 1.0 - best_cos;
    mask.keep.push_back(dist < tau_r);
    mask.assigned_component.push_back(best);
    mask.distance.push_back(dist);
  }
  return mask;
}

inline nlohmann::json to_json(const MovmfModel& m) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : m.components) comps.push_back({{"mu", c.mu}, {"kappa", c.kappa}, {"pi", c.pi}});
  return {{"dim", m.dim},
          {"seed", m.seed},
          {"converged", m.converged},
          {"components", comps},
          {"log_likelihood_trace", m.log_likelihood_trace}};
}

inline MovmfModel movmf_from_json(const nlohmann::json& j) {
  MovmfModel m;
  m.dim = j.at("dim").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.converged = j.at("converged").get<bool>();
  for (const auto& c : j.at("components")) {
    VmfComponent comp{c.at("mu").get<std::vector<double>>(), c.at("kappa").get<double>(), c.at("pi").get<double>()};
    if (comp.mu.size() != m.dim) throw Error("movmf component has wrong dimension");
    m.components.push_back(std::move(comp));
  }
  m.log_likelihood_trace = j.at("log_likelihood_trace").get<std::vector<double>>();
  return m;
}

/// One JSON object per retrieved row, aligned with `ids`.
inline std::string mask_to_jsonl(const RefinementMask& mask, const std::vector<std::string>& ids) {
  if (ids.size() != mask.keep.size()) throw Error("mask/id length mismatch");
  std::string out;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    out += nlohmann::json{{"id", ids[j]},
                          {"keep", static_cast<bool>(mask.keep[j])},
                          {"component", mask.assigned_component[j]},
                          {"distance", mask.distance[j]},
                          {"tau_r", mask.tau_r},
                          {"method", to_string(mask.method)}}
               .dump() +
           "\n";
  }
  return out;
}

}  // namespace zsr
