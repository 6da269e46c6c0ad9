#pragma once

// Audit reports: near-duplicate leak detection against a test set, feature
// geometry (label span, modality/class similarity, EMD) and the
// before/after prediction change buckets.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "zsr/dhash.hpp"
#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"
#include "zsr/fs.hpp"
#include "zsr/hungarian.hpp"
#include "zsr/retrieval.hpp"
#include "zsr/uncertainty.hpp"

namespace zsr {

inline constexpr int kDefaultLeakThreshold = 3;
inline constexpr std::size_t kDefaultEmdSubsample = 512;

// ---------------------------------------------------------------- leaks

struct HashedImage {
  std::string id;
  DHash64 hash;
};

struct LeakMatch {
  std::string retrieved_id;
  std::string test_id;
  int hamming = 0;
};

struct LeakStrategyStats {
  std::size_t retrieved = 0;         // hashed retrieved images
  std::size_t matched_retrieved = 0; // retrieved images with any match
  std::size_t leaked_test = 0;       // distinct test images matched
  double leaked_percent = 0.0;       // leaked_test / test_set_size * 100
};

struct LeakReport {
  std::size_t test_set_size = 0;
  int threshold = kDefaultLeakThreshold;
  std::vector<LeakMatch> matches;
  std::map<std::string, LeakStrategyStats> per_strategy;
  std::optional<double> accuracy_drop;
};

/// dHash of every decodable image file directly inside `dir`, ids are file
/// names, sorted.
inline std::vector<HashedImage> hash_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<HashedImage> out;
  for (const auto& f : files) {
    try {
      out.push_back({f.filename().string(), dhash(read_file(f))});
    } catch (const Error& e) {
      spdlog::warn("skipping {}: {}", f.string(), e.what());
    }
  }
  return out;
}

inline LeakReport leak_report(const RetrievalManifest& retrieved, const std::vector<HashedImage>& test_hashes,
                              int threshold = kDefaultLeakThreshold) {
  if (threshold < 0 || threshold > 64) throw Error("leak threshold must be in [0, 64]");
  LeakReport report;
  report.test_set_size = test_hashes.size();
  report.threshold = threshold;
  std::map<std::string, std::set<std::string>> leaked_by_strategy;
  for (const auto& r : retrieved.records) {
    if (!r.usable()) continue;
    DHash64 h;
    try {
      h = dhash(read_file(retrieved.resolve(r)));
    } catch (const Error& e) {
      spdlog::warn("leak audit: skipping {}: {}", r.id, e.what());
      continue;
    }
    auto& stats = report.per_strategy[to_string(r.strategy)];
    auto& leaked = leaked_by_strategy[to_string(r.strategy)];
    ++stats.retrieved;
    bool any = false;
    for (const auto& t : test_hashes) {
      const int d = hamming_distance(h, t.hash);
      if (d <= threshold) {
        report.matches.push_back({r.id, t.id, d});
        leaked.insert(t.id);
        any = true;
      }
    }
    stats.matched_retrieved += any;
  }
  for (auto& [strategy, stats] : report.per_strategy) {
    stats.leaked_test = leaked_by_strategy[strategy].size();
    stats.leaked_percent = report.test_set_size == 0 ? 0.0
                                                     : 100.0 * static_cast<double>(stats.leaked_test) /
                                                           static_cast<double>(report.test_set_size);
  }
  return report;
}

inline nlohmann::json to_json(const LeakReport& r) {
  nlohmann::json matches = nlohmann::json::array();
  for (const auto& m : r.matches) {
    matches.push_back({{"retrieved_id", m.retrieved_id}, {"test_id", m.test_id}, {"hamming", m.hamming}});
  }
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [s, st] : r.per_strategy) {
    per[s] = {{"retrieved", st.retrieved},
              {"matched_retrieved", st.matched_retrieved},
              {"leaked_test_images", st.leaked_test},
              {"leaked_percent", st.leaked_percent}};
  }
  return {{"test_set_size", r.test_set_size},
          {"threshold", r.threshold},
          {"match_count", r.matches.size()},
          {"per_strategy", per},
          {"accuracy_drop", r.accuracy_drop ? nlohmann::json(*r.accuracy_drop) : nlohmann::json(nullptr)},
          {"matches", matches}};
}

// ---------------------------------------------------------------- EMD

/// Mean Euclidean cost of the optimal one-to-one matching of two equal-size
/// point sets (row-major, `dim` columns).
inline double matched_mean_distance(const std::vector<double>& a, const std::vector<double>& b, std::size_t dim) {
  const std::size_t n = a.size() / dim;
  if (n == 0 || b.size() != a.size()) throw Error("matched_mean_distance: sets must be nonempty and equal-size");
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = a[i * dim + t] - b[j * dim + t];
        s += diff * diff;
      }
      cost[i * n + j] = std::sqrt(s);
    }
  }
  const auto assignment = hungarian(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assignment[i]];
  return total / static_cast<double>(n);
}

namespace emd_detail {

/// Row indices of a seeded uniform subsample without replacement. The stream
/// depends only on (seed, rows), so swapping the two arguments of emd_exact
/// draws the same subsamples.
inline std::vector<std::size_t> subsample_rows(std::size_t rows, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  if (count >= rows) return idx;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rows - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::mt19937_64 side_rng(std::uint64_t seed, std::size_t rows) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(static_cast<std::uint64_t>(rows) >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace emd_detail

/// Earth mover's distance between two point clouds with uniform weights:
/// seeded subsample of up to `subsample` rows per side, the smaller side
/// padded by resampling with replacement, then the exact assignment.
inline double emd_exact(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                        std::size_t subsample = kDefaultEmdSubsample, std::uint64_t seed = 0) {
  if (a.dim != b.dim) throw Error("emd_exact: dim mismatch");
  if (a.rows == 0 || b.rows == 0) throw Error("emd_exact: empty point set");
  if (subsample == 0) throw Error("emd_exact: subsample must be >= 1");
  auto rng_a = emd_detail::side_rng(seed, a.rows);
  auto rng_b = emd_detail::side_rng(seed, b.rows);
  auto ia = emd_detail::subsample_rows(a.rows, std::min(subsample, a.rows), rng_a);
  auto ib = emd_detail::subsample_rows(b.rows, std::min(subsample, b.rows), rng_b);
  auto pad = [](std::vector<std::size_t>& idx, std::size_t target, std::mt19937_64& rng) {
    const std::size_t base = idx.size();
    std::uniform_int_distribution<std::size_t> pick(0, base - 1);
    while (idx.size() < target) idx.push_back(idx[pick(rng)]);
  };
  const std::size_t n = std::max(ia.size(), ib.size());
  pad(ia, n, rng_a);
  pad(ib, n, rng_b);
  auto gather = [](const EmbeddingMatrix& m, const std::vector<std::size_t>& idx) {
    std::vector<double> out;
    out.reserve(idx.size() * m.dim);
    for (std::size_t i : idx) {
      for (float v : m.row(i)) out.push_back(v);
    }
    return out;
  };
  return matched_mean_distance(gather(a, ia), gather(b, ib), a.dim);
}

// ---------------------------------------------------------------- geometry

/// Minimum pairwise cosine similarity among label embeddings.
inline double label_span(const EmbeddingMatrix& texts) {
  if (texts.rows < 2) throw Error("label_span needs at least 2 labels");
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < texts.rows; ++i) {
    for (std::size_t j = i + 1; j < texts.rows; ++j) {
      lo = std::min(lo, dot(texts.row(i), texts.row(j)) / (row_norm(texts.row(i)) * row_norm(texts.row(j))));
    }
  }
  return std::clamp(lo, -1.0, 1.0);
}

namespace geometry_detail {

inline std::vector<double> mean_of(const EmbeddingMatrix& m, const std::vector<std::size_t>& rows) {
  std::vector<double> mean(m.dim, 0.0);
  for (std::size_t r : rows) {
    const auto v = m.row(r);
    for (std::size_t t = 0; t < m.dim; ++t) mean[t] += v[t];
  }
  return mean;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    ab += a[t] * b[t];
    aa += a[t] * a[t];
    bb += b[t] * b[t];
  }
  if (aa <= 0.0 || bb <= 0.0) throw Error("cosine of a zero mean vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace geometry_detail

struct ModalitySimilarity {
  double overall = 0.0;
  std::map<int, double> per_class;
  std::optional<double> class_mean;
};

/// Cosine between mean vectors of the two sets and, when labels are given for
/// both, per shared class.
inline ModalitySimilarity modality_similarity(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                                              const std::vector<int>* labels_a = nullptr,
                                              const std::vector<int>* labels_b = nullptr) {
  using namespace geometry_detail;
  if (a.dim != b.dim) throw Error("modality_similarity: dim mismatch");
  if (a.rows == 0 || b.rows == 0) throw Error("modality_similarity: empty side");
  std::vector<std::size_t> all_a(a.rows), all_b(b.rows);
  std::iota(all_a.begin(), all_a.end(), 0);
  std::iota(all_b.begin(), all_b.end(), 0);
  ModalitySimilarity out;
  out.overall = cosine(mean_of(a, all_a), mean_of(b, all_b));
  if (labels_a && labels_b) {
    if (labels_a->size() != a.rows || labels_b->size() != b.rows) throw Error("modality_similarity: labels length");
    std::map<int, std::vector<std::size_t>> ca, cb;
    for (std::size_t i = 0; i < a.rows; ++i) ca[(*labels_a)[i]].push_back(i);
    for (std::size_t i = 0; i < b.rows; ++i) cb[(*labels_b)[i]].push_back(i);
    double sum = 0.0;
    for (const auto& [c, rows] : ca) {
      auto it = cb.find(c);
      if (it == cb.end()) continue;
      out.per_class[c] = cosine(mean_of(a, rows), mean_of(b, it->second));
      sum += out.per_class[c];
    }
    if (out.per_class.empty()) throw Error("modality_similarity: empty class intersection");
    out.class_mean = sum / static_cast<double>(out.per_class.size());
  }
  return out;
}

struct GeometryReport {
  double label_span = 0.0;
  double modality_similarity = 0.0;
  std::map<int, double> class_similarity;
  std::optional<double> class_similarity_mean;
  double emd = 0.0;
  std::size_t subsample = kDefaultEmdSubsample;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const GeometryReport& g) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, v] : g.class_similarity) per[std::to_string(c)] = v;
  return {{"label_span", g.label_span},
          {"modality_similarity", g.modality_similarity},
          {"class_similarity",
           {{"per_class", per},
            {"mean", g.class_similarity_mean ? nlohmann::json(*g.class_similarity_mean) : nlohmann::json(nullptr)}}},
          {"emd", g.emd},
          {"subsample", g.subsample},
          {"seed", g.seed}};
}

/// Target vs retrieved geometry. Class similarity is computed when target
/// labels are supplied.
inline GeometryReport geometry_report(const EmbeddingMatrix& label_texts, const EmbeddingMatrix& target,
                                      const EmbeddingMatrix& retrieved, const std::vector<int>* target_labels,
                                      const std::vector<int>& retrieved_labels, std::size_t subsample,
                                      std::uint64_t seed) {
  GeometryReport g;
  g.label_span = label_span(label_texts);
  const auto sim = modality_similarity(target, retrieved, target_labels,
                                       target_labels ? &retrieved_labels : nullptr);
  g.modality_similarity = sim.overall;
  g.class_similarity = sim.per_class;
  g.class_similarity_mean = sim.class_mean;
  g.emd = emd_exact(target, retrieved, subsample, seed);
  g.subsample = subsample;
  g.seed = seed;
  return g;
}

// ---------------------------------------------------------------- buckets

struct BucketCounts {
  std::size_t solved = 0;     // wrong -> right
  std::size_t unsolved = 0;   // wrong -> wrong
  std::size_t reverted = 0;   // right -> wrong
  std::size_t unchanged = 0;  // right -> right

  std::size_t total() const { return solved + unsolved + reverted + unchanged; }
  double percent(std::size_t v) const {
    return total() == 0 ? 0.0 : 100.0 * static_cast<double>(v) / static_cast<double>(total());
  }
};

struct BucketReport {
  BucketCounts certain;
  BucketCounts uncertain;
  BucketCounts all;
};

inline BucketReport change_buckets(const std::vector<std::string>& ids, const std::vector<int>& pre,
                                   const std::vector<int>& post, const std::vector<int>& ground_truth,
                                   const UncertainSet& uncertain) {
  if (pre.size() != ids.size() || post.size() != ids.size() || ground_truth.size() != ids.size()) {
    throw Error("change_buckets: misaligned ids");
  }
  std::set<std::string> unc(uncertain.instance_ids.begin(), uncertain.instance_ids.end());
  const std::set<std::string> known(ids.begin(), ids.end());
  for (const auto& id : unc) {
    if (!known.count(id)) throw Error("change_buckets: misaligned ids (unknown uncertain id " + id + ")");
  }
  BucketReport out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const bool was = pre[i] == ground_truth[i];
    const bool now = post[i] == ground_truth[i];
    for (BucketCounts* b : {unc.count(ids[i]) ? &out.uncertain : &out.certain, &out.all}) {
      if (!was && now) ++b->solved;
      else if (!was && !now) ++b->unsolved;
      else if (was && !now) ++b->reverted;
      else ++b->unchanged;
    }
  }
  return out;
}

inline nlohmann::json to_json(const BucketCounts& b) {
  return {{"solved", b.solved},
          {"unsolved", b.unsolved},
          {"reverted", b.reverted},
          {"unchanged", b.unchanged},
          {"total", b.total()},
          {"solved_percent", b.percent(b.solved)},
          {"unsolved_percent", b.percent(b.unsolved)},
          {"reverted_percent", b.percent(b.reverted)},
          {"unchanged_percent", b.percent(b.unchanged)}};
}

inline nlohmann::json to_json(const BucketReport& r) {
  return {{"certain", to_json(r.certain)}, {"uncertain", to_json(r.uncertain)}, {"all", to_json(r.all)}};
}

// ---------------------------------------------------------------- export

/// "id,x0,x1,..." rows for external plotting.
inline std::string embeddings_to_csv(const EmbeddingMatrix& m, const IdManifest& manifest) {
  validate_manifest(manifest, m.rows);
  std::string out = "id";
  for (std::size_t t = 0; t < m.dim; ++t) out += ",x" + std::to_string(t);
  if (manifest.labels) out += ",label";
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < m.rows; ++i) {
    std::string id = manifest.ids[i];
    if (id.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char c : id) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      id = q + "\"";
    }
    out += id;
    for (float v : m.row(i)) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
      out += buf;
    }
    if (manifest.labels) out += "," + std::to_string((*manifest.labels)[i]);
    out += "\n";
  }
  return out;
}

}  // namespace zsr
