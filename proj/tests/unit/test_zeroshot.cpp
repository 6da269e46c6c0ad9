#include <cmath>
#include <gtest/gtest.h>

#include "support.hpp"
#include "zsr/uncertainty.hpp"
#include "zsr/zeroshot.hpp"

using namespace zsr;
using zsr::testing::from_rows;
using zsr::testing::random_unit;

TEST(SimilarityLogits, Examples) {
  const auto img = from_rows({{1.0, 0.0}});
  const auto texts = from_rows({{1.0, 0.0}, {0.0, 1.0}});
  auto l = similarity_logits(img, texts, 1.0);
  EXPECT_DOUBLE_EQ(l(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
  l = similarity_logits(img, texts, 100.0);
  EXPECT_DOUBLE_EQ(l(0, 0), 100.0);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
  const auto l2 = similarity_logits(from_rows({{0.6, 0.8}}), from_rows({{0.8, 0.6}}), 1.0);
  EXPECT_NEAR(l2(0, 0), 0.96, 1e-6);  // float storage of 0.6/0.8
}

TEST(SimilarityLogits, Errors) {
  const auto a = from_rows({{1.0, 0.0}});
  EXPECT_THROW(similarity_logits(a, from_rows({{1.0, 0.0, 0.0}}), 1.0), Error);
  EXPECT_THROW(similarity_logits(from_rows({{2.0, 0.0}}), a, 1.0), Error);
  EXPECT_THROW(similarity_logits(a, a, 0.0), Error);
}

TEST(Softmax, Examples) {
  for (double c : {-5.0, 0.0, 700.0}) {
    const std::vector<double> v{c, c, c};
    for (double p : softmax(v)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  }
  const std::vector<double> v{std::log(2.0), 0.0};
  const auto p = softmax(v);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
  const std::vector<double> big{1000.0, 0.0};
  const auto q = softmax(big);
  EXPECT_DOUBLE_EQ(q[0], 1.0);
  EXPECT_GE(q[1], 0.0);
  EXPECT_LT(q[1], 1e-300);
}

TEST(Softmax, RejectsNonFinite) {
  const std::vector<double> nan{0.0, std::nan("")};
  const std::vector<double> inf{0.0, INFINITY};
  EXPECT_THROW(softmax(nan), Error);
  EXPECT_THROW(softmax(inf), Error);
}

TEST(Entropy, Examples) {
  const std::vector<double> uniform(4, 0.25);
  auto e = entropy_row(uniform);
  EXPECT_NEAR(e.nats, std::log(4.0), 1e-15);
  EXPECT_NEAR(e.normalized, 1.0, 1e-15);

  const std::vector<double> certain{1.0, 0.0, 0.0};
  e = entropy_row(certain);
  EXPECT_EQ(e.nats, 0.0);
  EXPECT_EQ(e.normalized, 0.0);

  // Frozen from a long-double evaluation of -sum p ln p.
  const long double oracle = -(0.9L * std::log(0.9L) + 0.1L * std::log(0.1L));
  EXPECT_NEAR(static_cast<double>(oracle), 0.325083, 5e-7);
  const std::vector<double> two{0.9, 0.1};
  e = entropy_row(two);
  EXPECT_NEAR(e.nats, 0.325083, 5e-7);
  EXPECT_NEAR(e.nats, static_cast<double>(oracle), 1e-15);
  const long double oracle_norm = oracle / std::log(2.0L);
  EXPECT_NEAR(static_cast<double>(oracle_norm), 0.468996, 5e-7);
  EXPECT_NEAR(e.normalized, 0.468996, 5e-7);
}

TEST(Entropy, SingleClassAndErrors) {
  const std::vector<double> one{1.0};
  EXPECT_EQ(entropy_row(one).normalized, 0.0);
  const std::vector<double> neg{1.2, -0.2};
  EXPECT_THROW(entropy_row(neg), Error);
  const std::vector<double> off{0.5, 0.4};
  EXPECT_THROW(entropy_row(off), Error);
}

TEST(Entropy, ShiftInvarianceAndSymmetry) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(6), w(6);
    const double c = normal(rng) * 50;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = normal(rng);
      w[i] = v[i] + c;
    }
    EXPECT_NEAR(entropy_row(softmax(v)).nats, entropy_row(softmax(w)).nats, 1e-9);
  }
  for (double p : {0.01, 0.2, 0.37, 0.5}) {
    const std::vector<double> a{p, 1 - p}, b{1 - p, p};
    EXPECT_NEAR(entropy_row(a).normalized, entropy_row(b).normalized, 1e-15);
  }
}

TEST(PredictZeroshot, Examples) {
  const auto texts = from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto img = from_rows({{0, 0, 1}});
  auto t = predict_zeroshot(img, texts, 100.0, 3);
  EXPECT_EQ(t.rows[0].argmax, 2);
  EXPECT_EQ(t.rows[0].topk.front(), 2);
  auto sorted = t.rows[0].topk;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2}));

  const auto same = from_rows({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}});
  t = predict_zeroshot(from_rows({{0, 1, 0}}), same, 100.0, 2);
  EXPECT_EQ(t.rows[0].argmax, 0);
  EXPECT_EQ(t.rows[0].topk, (std::vector<int>{0, 1}));
  EXPECT_NEAR(t.rows[0].entropy_norm, 1.0, 1e-12);
}

TEST(PredictZeroshot, ArgmaxInvariantUnderTemperature) {
  const auto texts = random_unit(12, 16, 5);
  const auto imgs = random_unit(200, 16, 6);
  const auto a = predict_zeroshot(imgs, texts, 1.0, 5);
  for (double temp : {0.01, 7.0, 100.0, 1000.0}) {
    const auto b = predict_zeroshot(imgs, texts, temp, 5);
    for (std::size_t i = 0; i < imgs.rows; ++i) {
      EXPECT_EQ(a.rows[i].argmax, b.rows[i].argmax);
      EXPECT_EQ(a.rows[i].topk, b.rows[i].topk);
    }
  }
}

TEST(PredictZeroshot, KBounds) {
  const auto texts = random_unit(3, 4, 1);
  const auto imgs = random_unit(2, 4, 2);
  EXPECT_THROW(predict_zeroshot(imgs, texts, 100.0, 0), Error);
  EXPECT_THROW(predict_zeroshot(imgs, texts, 100.0, 4), Error);
}

TEST(PredictionTable, JsonRoundTrip) {
  const auto t = predict_zeroshot(random_unit(5, 8, 1), random_unit(4, 8, 2), 50.0, 3,
                                  std::vector<std::string>{"a", "b", "c", "d", "e"});
  const auto j = to_json(t);
  for (const char* key : {"temperature", "k", "rows"}) EXPECT_TRUE(j.contains(key)) << key;
  for (const char* key : {"id", "probs", "entropy_nats", "entropy_norm", "argmax", "topk"}) {
    EXPECT_TRUE(j["rows"][0].contains(key)) << key;
  }
  const auto back = prediction_table_from_json(j);
  ASSERT_EQ(back.rows.size(), 5u);
  EXPECT_EQ(back.rows[3].id, "d");
  EXPECT_EQ(back.rows[3].probs, t.rows[3].probs);
  EXPECT_EQ(back.rows[3].topk, t.rows[3].topk);
}

namespace {

PredictionTable table_of(const std::vector<std::vector<double>>& probs, std::size_t k) {
  Matrix m(probs.size(), probs.front().size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    for (std::size_t j = 0; j < probs[i].size(); ++j) m(i, j) = probs[i][j];
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < probs.size(); ++i) ids.push_back("r" + std::to_string(i));
  return table_from_probs(m, ids, k, 1.0);
}

}  // namespace

TEST(SelectUncertain, Bounds) {
  const auto t = table_of({{1, 0, 0}, {0.5, 0.3, 0.2}, {1.0 / 3, 1.0 / 3, 1.0 / 3}}, 2);
  EXPECT_EQ(select_uncertain(t, 0.0).rows.size(), 3u);
  const auto top = select_uncertain(t, 1.0);
  EXPECT_EQ(top.instance_ids, (std::vector<std::string>{"r2"}));
  EXPECT_THROW(select_uncertain(t, 1.01), Error);
  EXPECT_THROW(select_uncertain(t, -0.01), Error);
}

TEST(SelectUncertain, BoundaryIsInclusive) {
  const auto t = table_of({{0.9, 0.1}}, 1);
  EXPECT_EQ(select_uncertain(t, t.rows[0].entropy_norm).rows.size(), 1u);
}

TEST(SelectUncertain, MonotoneInThreshold) {
  const auto t = predict_zeroshot(random_unit(300, 8, 1), random_unit(10, 8, 2), 20.0, 5);
  std::size_t prev = t.rows.size() + 1;
  std::vector<std::string> prev_ids;
  for (int i = 0; i <= 100; ++i) {
    const auto u = select_uncertain(t, i / 100.0);
    EXPECT_LE(u.rows.size(), prev);
    for (const auto& id : u.instance_ids) {
      if (i > 0) {
        EXPECT_NE(std::find(prev_ids.begin(), prev_ids.end(), id), prev_ids.end());
      }
    }
    EXPECT_GE(u.fraction, 0.0);
    EXPECT_LE(u.fraction, 1.0);
    prev = u.rows.size();
    prev_ids = u.instance_ids;
  }
}

TEST(UncertainLabelSet, Union) {
  // top-3 of row 0 = {0,1,2}; of row 1 = {1,3,4}
  const auto t = table_of({{0.4, 0.3, 0.2, 0.05, 0.05}, {0.05, 0.4, 0.05, 0.3, 0.2}}, 3);
  const auto u = select_uncertain(t, 0.0);
  EXPECT_EQ(uncertain_label_set(t, u, 3).class_ids, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_THROW(uncertain_label_set(t, u, 4), Error);

  UncertainSet empty;
  EXPECT_TRUE(uncertain_label_set(t, empty, 3).class_ids.empty());
}

TEST(UncertainLabelSet, NestedInK) {
  const auto t = predict_zeroshot(random_unit(100, 8, 4), random_unit(12, 8, 5), 30.0, 12);
  const auto u = select_uncertain(t, 0.5);
  ASSERT_FALSE(u.rows.empty());
  for (std::size_t k = 1; k < 12; ++k) {
    const auto a = uncertain_label_set(t, u, k).class_ids;
    const auto b = uncertain_label_set(t, u, k + 1).class_ids;
    EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
  }
  EXPECT_EQ(uncertain_label_set(t, u, 12).class_ids.size(), 12u);
}

TEST(UncertainLabelSet, Json) {
  const auto t = table_of({{0.5, 0.5, 0.0, 0.0}}, 2);
  const auto u = select_uncertain(t, 0.1);
  const auto j = to_json(u, uncertain_label_set(t, u, 2), 4);
  for (const char* key : {"tau_h", "k", "instance_ids", "class_ids", "fraction", "class_fraction"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_DOUBLE_EQ(j["class_fraction"].get<double>(), 0.5);
}
