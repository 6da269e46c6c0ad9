#include <gtest/gtest.h>

#include "support.hpp"
#include "zsr/embedding_store.hpp"

using namespace zsr;
using zsr::testing::TempDir;

namespace {

IdManifest ids(std::vector<std::string> v) {
  IdManifest m;
  m.ids = std::move(v);
  return m;
}

}  // namespace

TEST(EmbeddingStore, RoundTripIsExact) {
  TempDir tmp;
  EmbeddingMatrix m(2, 3, {1.5f, -2.0f, 0.25f, 1e-30f, 3.4e38f, -0.0f});
  write_embeddings(m, ids({"a", "b"}), tmp / "x.emb");
  EXPECT_EQ(std::filesystem::file_size(tmp / "x.emb"), 16u + 24u);
  EXPECT_TRUE(std::filesystem::exists(tmp / "x.emb.manifest.json"));
  auto [back, manifest] = read_embeddings(tmp / "x.emb");
  EXPECT_EQ(back, m);
  EXPECT_EQ(manifest.ids, (std::vector<std::string>{"a", "b"}));

  // read -> write reproduces the file byte for byte
  const auto first = read_file(tmp / "x.emb");
  write_embeddings(back, manifest, tmp / "y.emb");
  EXPECT_EQ(read_file(tmp / "y.emb"), first);
  EXPECT_EQ(read_file(tmp / "y.emb.manifest.json"), read_file(tmp / "x.emb.manifest.json"));
}

TEST(EmbeddingStore, HeaderLayout) {
  EmbeddingMatrix m(1, 2, {1.0f, 0.0f}, true);
  const auto bytes = encode_emb1(m);
  ASSERT_EQ(bytes.size(), 24u);
  EXPECT_EQ(bytes.substr(0, 4), "EMB1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 1);
  EXPECT_EQ(bytes.substr(13, 3), std::string(3, '\0'));
  // 1.0f little-endian
  EXPECT_EQ(bytes.substr(16, 4), std::string("\x00\x00\x80\x3f", 4));
}

TEST(EmbeddingStore, EmptyMatrix) {
  TempDir tmp;
  write_embeddings(EmbeddingMatrix(0, 4, {}), ids({}), tmp / "e.emb");
  EXPECT_EQ(std::filesystem::file_size(tmp / "e.emb"), 16u);
  auto [back, manifest] = read_embeddings(tmp / "e.emb");
  EXPECT_EQ(back.rows, 0u);
  EXPECT_EQ(back.dim, 4u);
  EXPECT_TRUE(manifest.ids.empty());
}

TEST(EmbeddingStore, DuplicateIdRejected) {
  TempDir tmp;
  try {
    write_embeddings(EmbeddingMatrix(2, 1, {1.0f, 2.0f}), ids({"a", "a"}), tmp / "d.emb");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate id"), std::string::npos);
  }
}

TEST(EmbeddingStore, LengthMismatchRejected) {
  TempDir tmp;
  EXPECT_THROW(write_embeddings(EmbeddingMatrix(2, 1, {1.0f, 2.0f}), ids({"a"}), tmp / "m.emb"), Error);
  EXPECT_THROW(EmbeddingMatrix(2, 2, {1.0f}), Error);
  EXPECT_THROW(EmbeddingMatrix(0, 0, {}), Error);
}

TEST(EmbeddingStore, LabelsMustIndexClassNames) {
  IdManifest m = ids({"a", "b"});
  m.labels = std::vector<int>{0, 2};
  m.class_names = std::vector<std::string>{"x", "y"};
  EXPECT_THROW(validate_manifest(m, 2), Error);
  (*m.labels)[1] = 1;
  EXPECT_NO_THROW(validate_manifest(m, 2));
}

TEST(EmbeddingStore, BadMagic) {
  std::string bytes = encode_emb1(EmbeddingMatrix(1, 1, {1.0f}));
  bytes.replace(0, 4, "XXXX");
  try {
    decode_emb1(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unrecognized format"), std::string::npos);
  }
}

TEST(EmbeddingStore, TruncatedPayload) {
  EmbeddingMatrix m = EmbeddingMatrix::zeros(10, 3);
  std::string bytes = encode_emb1(m);
  bytes.resize(bytes.size() - 3 * sizeof(float));  // 9 rows of payload
  try {
    decode_emb1(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  EXPECT_THROW(decode_emb1(encode_emb1(m) + "x"), Error);
}

TEST(EmbeddingStore, ReservedBytesAndFlags) {
  std::string bytes = encode_emb1(EmbeddingMatrix(1, 1, {1.0f}));
  bytes[14] = 1;
  EXPECT_THROW(decode_emb1(bytes), Error);
  bytes[14] = 0;
  bytes[12] = 2;
  EXPECT_THROW(decode_emb1(bytes), Error);
}

TEST(EmbeddingStore, NormalizedFlagIsChecked) {
  TempDir tmp;
  write_embeddings(EmbeddingMatrix(1, 2, {1.0f, 1.0f}, true), ids({"a"}), tmp / "n.emb");
  EXPECT_THROW(read_embeddings(tmp / "n.emb"), Error);
}

TEST(EmbeddingStore, MissingManifest) {
  TempDir tmp;
  write_file_atomic(tmp / "lone.emb", encode_emb1(EmbeddingMatrix(1, 1, {1.0f})));
  EXPECT_THROW(read_embeddings(tmp / "lone.emb"), Error);
}

TEST(L2Normalize, Examples) {
  const auto out = l2_normalize(EmbeddingMatrix(2, 2, {3.0f, 4.0f, 1.0f, 0.0f}));
  EXPECT_TRUE(out.normalized);
  EXPECT_FLOAT_EQ(out.data[0], 0.6f);
  EXPECT_FLOAT_EQ(out.data[1], 0.8f);
  EXPECT_EQ(out.data[2], 1.0f);
  EXPECT_EQ(out.data[3], 0.0f);
}

TEST(L2Normalize, ZeroRowNamesIndex) {
  try {
    l2_normalize(EmbeddingMatrix(2, 2, {1.0f, 0.0f, 0.0f, 0.0f}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("zero-norm row 1"), std::string::npos);
  }
}

TEST(L2Normalize, IdempotentAndUnit) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> normal(0.0f, 5.0f);
  std::vector<float> data(50 * 17);
  for (auto& x : data) x = normal(rng);
  const auto once = l2_normalize(EmbeddingMatrix(50, 17, data));
  const auto twice = l2_normalize(once);
  for (std::size_t i = 0; i < once.data.size(); ++i) EXPECT_NEAR(once.data[i], twice.data[i], 1e-7);
  for (std::size_t r = 0; r < once.rows; ++r) EXPECT_LT(std::abs(row_norm(once.row(r)) - 1.0), 1e-6);
}
