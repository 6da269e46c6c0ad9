#include <gtest/gtest.h>

#include "support.hpp"
#include "zsr/movmf.hpp"

using namespace zsr;
using zsr::testing::random_unit;

namespace {

struct Planted {
  EmbeddingMatrix points;
  std::vector<std::vector<double>> means;
  std::vector<int> labels;
};

Planted planted(std::size_t d, std::size_t k, std::size_t per, double kappa, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Planted p;
  std::vector<float> data;
  for (std::size_t c = 0; c < k; ++c) p.means.push_back(sample_uniform_sphere(d, rng));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < per; ++j) {
      const auto x = sample_vmf(std::span<const double>(p.means[c]), kappa, rng);
      data.insert(data.end(), x.begin(), x.end());
      p.labels.push_back(static_cast<int>(c));
    }
  }
  p.points = EmbeddingMatrix(k * per, d, std::move(data), true);
  return p;
}

EmbeddingMatrix rotate(const EmbeddingMatrix& m, const std::vector<double>& q) {
  const std::size_t d = m.dim;
  std::vector<float> out(m.rows * d);
  for (std::size_t j = 0; j < m.rows; ++j) {
    const auto r = m.row(j);
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += q[a * d + b] * r[b];
      out[j * d + a] = static_cast<float>(s);
    }
  }
  return EmbeddingMatrix(m.rows, d, std::move(out), true);
}

// Random orthogonal matrix by Gram-Schmidt.
std::vector<double> orthogonal(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> q(d * d);
  for (auto& v : q) v = normal(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double p = 0.0;
      for (std::size_t t = 0; t < d; ++t) p += q[i * d + t] * q[j * d + t];
      for (std::size_t t = 0; t < d; ++t) q[i * d + t] -= p * q[j * d + t];
    }
    double n = 0.0;
    for (std::size_t t = 0; t < d; ++t) n += q[i * d + t] * q[i * d + t];
    for (std::size_t t = 0; t < d; ++t) q[i * d + t] /= std::sqrt(n);
  }
  return q;
}

}  // namespace

TEST(FitMovmf, IdenticalPointsDegenerate) {
  std::vector<float> data;
  for (int i = 0; i < 10; ++i) data.insert(data.end(), {0.0f, 0.6f, 0.8f});
  const EmbeddingMatrix x(10, 3, data, true);
  MovmfOptions opt;
  const auto m = fit_movmf(x, opt);
  ASSERT_EQ(m.components.size(), 1u);
  EXPECT_NEAR(m.components[0].mu[1], 0.6, 1e-6);
  EXPECT_NEAR(m.components[0].mu[2], 0.8, 1e-6);
  EXPECT_EQ(m.components[0].kappa, kKappaMax);
  EXPECT_DOUBLE_EQ(m.components[0].pi, 1.0);
}

TEST(FitMovmf, Errors) {
  const auto x = random_unit(4, 5, 1);
  MovmfOptions opt;
  opt.components = 5;
  EXPECT_THROW(fit_movmf(x, opt), Error);
  opt.components = 0;
  EXPECT_THROW(fit_movmf(x, opt), Error);
}

TEST(FitMovmf, InvariantsHold) {
  const auto p = planted(8, 3, 120, 30.0, 11);
  MovmfOptions opt;
  opt.components = 3;
  opt.seed = 5;
  const auto m = fit_movmf(p.points, opt);
  double pis = 0.0;
  for (const auto& c : m.components) {
    double n = 0.0;
    for (double v : c.mu) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    EXPECT_GE(c.kappa, kKappaMin);
    EXPECT_LE(c.kappa, kKappaMax);
    pis += c.pi;
  }
  EXPECT_NEAR(pis, 1.0, 1e-9);
  for (std::size_t i = 1; i < m.log_likelihood_trace.size(); ++i) {
    EXPECT_GE(m.log_likelihood_trace[i] - m.log_likelihood_trace[i - 1], -1e-8);
  }
  EXPECT_TRUE(m.converged);
}

TEST(FitMovmf, DeterministicForSeed) {
  const auto p = planted(8, 3, 50, 20.0, 2);
  MovmfOptions opt;
  opt.components = 3;
  opt.seed = 9;
  EXPECT_EQ(to_json(fit_movmf(p.points, opt)), to_json(fit_movmf(p.points, opt)));
}

TEST(LogLikelihood, UniformLimit) {
  MovmfModel m;
  m.dim = 6;
  m.components.push_back({{1, 0, 0, 0, 0, 0}, kKappaMin, 1.0});
  const auto pts = random_unit(7, 6, 4);
  EXPECT_NEAR(movmf_log_likelihood(m, pts) / 7.0, -log_sphere_area(6), 1e-3);
}

TEST(LogLikelihood, MonotoneInCosineAndAdditive) {
  MovmfModel m;
  m.dim = 3;
  m.components.push_back({{0, 0, 1}, 4.0, 1.0});
  const auto up = zsr::testing::from_rows({{0, 0, 1}});
  const auto down = zsr::testing::from_rows({{0, 0, -1}});
  EXPECT_GT(movmf_log_likelihood(m, up), movmf_log_likelihood(m, down));

  const auto pts = random_unit(5, 3, 8);
  std::vector<float> twice(pts.data);
  twice.insert(twice.end(), pts.data.begin(), pts.data.end());
  const EmbeddingMatrix doubled(10, 3, twice, true);
  EXPECT_NEAR(movmf_log_likelihood(m, doubled), 2.0 * movmf_log_likelihood(m, pts), 1e-10);
  EXPECT_THROW(movmf_log_likelihood(m, random_unit(2, 4, 1)), Error);
}

TEST(RefineMovmf, MeansAlwaysKept) {
  MovmfModel m;
  m.dim = 3;
  m.components.push_back({{1, 0, 0}, 10.0, 0.5});
  m.components.push_back({{0, 1, 0}, 10.0, 0.5});
  const auto r = zsr::testing::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto mask = refine_movmf(m, r, 1e-6);
  EXPECT_TRUE(mask.keep[0]);
  EXPECT_TRUE(mask.keep[1]);
  EXPECT_FALSE(mask.keep[2]);
  EXPECT_EQ(mask.assigned_component[1], 1u);
  EXPECT_THROW(refine_movmf(m, r, 2.5), Error);
  EXPECT_THROW(refine_movmf(m, random_unit(2, 4, 1), 0.45), Error);
}

TEST(RefineMovmf, WeightedAssignmentUsesMixingWeights) {
  MovmfModel m;
  m.dim = 2;
  m.components.push_back({{1, 0}, 2.0, 0.99});
  m.components.push_back({{0, 1}, 2.0, 0.01});
  // Slightly closer to the second component, but the first dominates by weight.
  const double a = 0.9;
  const auto r = zsr::testing::from_rows({{std::cos(a), std::sin(a)}});
  EXPECT_EQ(refine_movmf(m, r, 0.45, true).assigned_component[0], 0u);
  EXPECT_EQ(refine_movmf(m, r, 0.45, false).assigned_component[0], 1u);
}

TEST(RefineMovmf, MonotoneInTauR) {
  const auto p = planted(16, 3, 60, 40.0, 21);
  MovmfOptions opt;
  opt.components = 3;
  const auto m = fit_movmf(p.points, opt);
  const auto r = random_unit(300, 16, 5);
  const auto mixed = planted(16, 3, 30, 15.0, 21).points;
  for (const auto* set : {&r, &mixed}) {
    std::vector<bool> prev(set->rows, false);
    for (double tau : {0.0, 0.1, 0.2, 0.45, 0.7, 1.0, 1.5, 2.0}) {
      const auto mask = refine_movmf(m, *set, tau);
      for (std::size_t j = 0; j < set->rows; ++j) {
        if (prev[j]) {
          EXPECT_TRUE(mask.keep[j]);
        }
      }
      prev = mask.keep;
    }
  }
}

TEST(RefineMovmf, RotationInvariant) {
  const auto p = planted(8, 2, 80, 25.0, 3);
  const auto retrieved = planted(8, 2, 40, 8.0, 3).points;
  MovmfOptions opt;
  opt.components = 2;
  const auto q = orthogonal(8, 17);
  const auto base = refine_movmf(fit_movmf(p.points, opt), retrieved, 0.45);
  const auto turned = refine_movmf(fit_movmf(rotate(p.points, q), opt), rotate(retrieved, q), 0.45);
  std::size_t disagreements = 0;
  for (std::size_t j = 0; j < retrieved.rows; ++j) {
    disagreements += base.keep[j] != turned.keep[j];
    EXPECT_NEAR(base.distance[j], turned.distance[j], 1e-4);
  }
  EXPECT_EQ(disagreements, 0u);
}

TEST(RefineMovmf, ShufflePermutesMask) {
  const auto p = planted(8, 2, 50, 25.0, 4);
  MovmfOptions opt;
  opt.components = 2;
  const auto m = fit_movmf(p.points, opt);
  const auto r = planted(8, 2, 30, 10.0, 8).points;
  std::vector<std::size_t> perm(r.rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto a = refine_movmf(m, r, 0.45);
  const auto b = refine_movmf(m, select_rows(r, perm), 0.45);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    EXPECT_EQ(b.keep[j], a.keep[perm[j]]);
    EXPECT_EQ(b.assigned_component[j], a.assigned_component[perm[j]]);
  }
}

TEST(MovmfJson, RoundTripAndMaskLines) {
  const auto p = planted(4, 2, 30, 20.0, 6);
  MovmfOptions opt;
  opt.components = 2;
  const auto m = fit_movmf(p.points, opt);
  const auto back = movmf_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(to_json(back), to_json(m));

  const auto mask = refine_movmf(m, p.points, 0.45);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < p.points.rows; ++i) ids.push_back("r" + std::to_string(i));
  const auto text = mask_to_jsonl(mask, ids);
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), ids.size());
  const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  EXPECT_EQ(first.at("id"), "r0");
  EXPECT_EQ(first.at("method"), "movmf");
  ids.pop_back();
  EXPECT_THROW(mask_to_jsonl(mask, ids), Error);
  EXPECT_THROW(parse_refine_method("kmeans"), Error);
}
