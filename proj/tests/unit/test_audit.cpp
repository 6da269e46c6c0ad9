#include <gtest/gtest.h>

#include "schema_check.hpp"
#include "support.hpp"
#include "zsr/audit.hpp"
#include "zsr/hungarian.hpp"

using namespace zsr;
using zsr::testing::from_rows;
using zsr::testing::random_unit;
using zsr::testing::TempDir;

namespace {

// Minimum mean distance over every permutation.
double brute_force_emd(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  std::vector<std::size_t> perm(a.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < a.dim; ++t) {
        const double diff = double(a.row(i)[t]) - double(b.row(perm[i])[t]);
        s += diff * diff;
      }
      total += std::sqrt(s);
    }
    best = std::min(best, total / double(a.rows));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

EmbeddingMatrix random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(normal(rng));
  return EmbeddingMatrix(n, d, v);
}

std::filesystem::path golden(const std::string& name) { return std::filesystem::path(ZSR_GOLDEN_DIR) / name; }

}  // namespace

TEST(Hungarian, SmallKnownAssignment) {
  const std::vector<double> cost = {4, 1, 3, 2, 0, 5, 3, 2, 2};
  const auto a = hungarian(cost, 3);
  double total = 0;
  for (std::size_t i = 0; i < 3; ++i) total += cost[i * 3 + a[i]];
  EXPECT_EQ(total, 5.0);
}

TEST(Emd, WorkedExamples) {
  EXPECT_NEAR(emd_exact(from_rows({{0, 0}, {2, 0}}), from_rows({{1, 0}, {3, 0}})), 1.0, 1e-12);
  EXPECT_NEAR(emd_exact(from_rows({{0, 0}}), from_rows({{3, 4}})), 5.0, 1e-12);
}

TEST(Emd, MatchesBruteForce) {
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto a = random_points(n, 3, seed * 100 + n);
      const auto b = random_points(n, 3, seed * 100 + n + 50);
      EXPECT_NEAR(emd_exact(a, b, 512, seed), brute_force_emd(a, b), 1e-9) << n << "/" << seed;
    }
  }
}

TEST(Emd, IdentitySymmetryTriangle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_points(6, 4, seed), b = random_points(6, 4, seed + 1000), c = random_points(6, 4, seed + 2000);
    EXPECT_EQ(emd_exact(a, a), 0.0);
    EXPECT_NEAR(emd_exact(a, b, 512, seed), emd_exact(b, a, 512, seed), 1e-12);
    EXPECT_LE(emd_exact(a, c), emd_exact(a, b) + emd_exact(b, c) + 1e-12);
  }
}

TEST(Emd, SubsampleAndPaddingDeterministic) {
  const auto a = random_unit(300, 8, 1), b = random_unit(120, 8, 2);
  const double x = emd_exact(a, b, 64, 7);
  EXPECT_EQ(x, emd_exact(a, b, 64, 7));
  EXPECT_NEAR(x, emd_exact(b, a, 64, 7), 1e-12);
  EXPECT_GT(x, 0.0);
  EXPECT_GT(emd_exact(a, b, 200, 3), 0.0);  // padding path
  EXPECT_THROW(emd_exact(a, random_unit(3, 4, 1)), Error);
  EXPECT_THROW(emd_exact(a, EmbeddingMatrix(0, 8, {})), Error);
}

TEST(LabelSpan, ExamplesAndSubsetMonotonicity) {
  EXPECT_NEAR(label_span(from_rows({{1, 0}, {0, 1}})), 0.0, 1e-12);
  EXPECT_NEAR(label_span(from_rows({{0.6, 0.8}, {0.6, 0.8}})), 1.0, 1e-6);
  EXPECT_THROW(label_span(from_rows({{1, 0}})), Error);
  const auto s = random_unit(10, 5, 3);
  const double full = label_span(s);
  for (std::size_t drop = 0; drop < s.rows; ++drop) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < s.rows; ++i) {
      if (i != drop) keep.push_back(i);
    }
    EXPECT_LE(full, label_span(select_rows(s, keep)));
  }
}

TEST(ModalitySimilarity, Examples) {
  const auto a = random_unit(20, 6, 4);
  EXPECT_NEAR(modality_similarity(a, a).overall, 1.0, 1e-12);
  const auto up = from_rows({{0, 0.6, 0.8}, {0, 0.8, 0.6}});
  const auto down = from_rows({{0, -0.6, -0.8}, {0, -0.8, -0.6}});
  EXPECT_NEAR(modality_similarity(up, down).overall, -1.0, 1e-12);

  const std::vector<int> la = {0, 1}, lb = {1, 1}, lc = {5, 6};
  const auto sim = modality_similarity(up, up, &la, &lb);
  ASSERT_EQ(sim.per_class.size(), 1u);
  EXPECT_TRUE(sim.class_mean.has_value());
  EXPECT_THROW(modality_similarity(up, up, &la, &lc), Error);
  EXPECT_THROW(modality_similarity(up, EmbeddingMatrix(0, 3, {})), Error);
}

TEST(Buckets, EachTransitionOnce) {
  const std::vector<std::string> ids = {"a", "b", "c", "d"};
  const std::vector<int> truth = {1, 1, 1, 1}, pre = {0, 0, 1, 1}, post = {1, 0, 0, 1};
  UncertainSet u;
  u.instance_ids = ids;
  const auto r = change_buckets(ids, pre, post, truth, u);
  for (auto v : {r.uncertain.solved, r.uncertain.unsolved, r.uncertain.reverted, r.uncertain.unchanged}) {
    EXPECT_EQ(v, 1u);
    EXPECT_DOUBLE_EQ(r.uncertain.percent(v), 25.0);
  }
  EXPECT_EQ(r.certain.total(), 0u);
  EXPECT_EQ(r.all.total(), 4u);
}

TEST(Buckets, NoChangeAndErrors) {
  const std::vector<std::string> ids = {"a", "b", "c"};
  const std::vector<int> truth = {0, 1, 2}, pre = {0, 2, 2};
  UncertainSet u;
  u.instance_ids = {"b"};
  const auto r = change_buckets(ids, pre, pre, truth, u);
  EXPECT_EQ(r.all.solved + r.all.reverted, 0u);
  EXPECT_DOUBLE_EQ(r.all.percent(r.all.unchanged) + r.all.percent(r.all.unsolved), 100.0);
  EXPECT_EQ(r.uncertain.unsolved, 1u);
  EXPECT_EQ(r.certain.unchanged, 2u);
  EXPECT_THROW(change_buckets(ids, pre, {0, 1}, truth, u), Error);
  u.instance_ids = {"zz"};
  EXPECT_THROW(change_buckets(ids, pre, pre, truth, u), Error);
}

TEST(Leak, IdenticalFileMatchesAndDisjointDoesNot) {
  TempDir tmp;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> byte(0, 255);
  auto noise = [&] {
    RgbImage img;
    img.width = img.height = 16;
    for (int i = 0; i < 16 * 16 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(byte(rng)));
    return encode_png(img);
  };
  std::filesystem::create_directories(tmp / "test");
  const std::string t0 = noise(), t1 = noise(), other = noise();
  write_file_atomic(tmp / "test" / "t0.png", t0);
  write_file_atomic(tmp / "test" / "t1.png", t1);
  write_file_atomic(tmp / "test" / "notes.txt", "not an image");
  const auto hashes = hash_directory(tmp / "test");
  ASSERT_EQ(hashes.size(), 2u);
  EXPECT_EQ(hashes[0].id, "t0.png");

  const auto key = MockDirectoryProvider::query_key("rose");
  write_file_atomic(tmp / "mock" / key / "a.png", other);
  write_file_atomic(tmp / "mock" / key / "b.png", t1);
  MockDirectoryProvider provider(tmp / "mock");
  QueryPlan plan;
  plan.n_per_query = 2;
  plan.entries.push_back({"rose", 0, Strategy::cls, ""});
  const auto manifest = execute_plan(plan, provider, tmp / "out");

  const auto report = leak_report(manifest, hashes, 0);
  ASSERT_EQ(report.matches.size(), 1u);
  EXPECT_EQ(report.matches[0].test_id, "t1.png");
  EXPECT_EQ(report.matches[0].hamming, 0);
  EXPECT_EQ(report.per_strategy.at("cls").retrieved, 2u);
  EXPECT_EQ(report.per_strategy.at("cls").leaked_test, 1u);
  EXPECT_DOUBLE_EQ(report.per_strategy.at("cls").leaked_percent, 50.0);
  for (const auto& m : report.matches) EXPECT_LE(m.hamming, report.threshold);

  const auto none = leak_report(manifest, {{"x", DHash64{~dhash(t1).bits}}}, 3);
  EXPECT_TRUE(none.matches.empty());
  EXPECT_TRUE(leak_report(RetrievalManifest{}, {}, 3).matches.empty());
  EXPECT_THROW(leak_report(manifest, hashes, 65), Error);
}

TEST(Schemas, ReportsCarryGoldenFields) {
  LeakReport leak;
  leak.test_set_size = 10;
  leak.matches.push_back({"r", "t", 1});
  leak.per_strategy["cls"] = {4, 1, 1, 10.0};
  EXPECT_TRUE(zsr::testing::missing_fields(to_json(leak), golden("leak_schema.json")).empty());

  const auto texts = random_unit(3, 4, 1), target = random_unit(12, 4, 2), retrieved = random_unit(9, 4, 3);
  const std::vector<int> tl = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, rl = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  const auto geo = geometry_report(texts, target, retrieved, &tl, rl, 8, 1);
  EXPECT_TRUE(zsr::testing::missing_fields(to_json(geo), golden("geometry_schema.json")).empty());
  EXPECT_GE(geo.emd, 0.0);

  UncertainSet u;
  EXPECT_TRUE(zsr::testing::missing_fields(to_json(change_buckets({}, {}, {}, {}, u)), golden("bucket_schema.json"))
                  .empty());
  EXPECT_FALSE(zsr::testing::missing_fields(nlohmann::json::object(), golden("bucket_schema.json")).empty());
}

TEST(ExportCsv, Layout) {
  IdManifest m;
  m.ids = {"a", "b,c"};
  m.labels = std::vector<int>{0, 1};
  m.class_names = std::vector<std::string>{"x", "y"};
  const auto csv = embeddings_to_csv(from_rows({{0.5, 0.25}, {1, 0}}), m);
  EXPECT_EQ(csv, "id,x0,x1,label\na,0.5,0.25,0\n\"b,c\",1,0,1\n");
}
