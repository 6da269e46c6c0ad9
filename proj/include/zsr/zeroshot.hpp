#pragma once

// Zero-shot scoring over precomputed embeddings: scaled cosine logits,
// row softmax, Shannon entropy and top-k extraction.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"

namespace zsr {

inline constexpr double kDefaultTemperature = 100.0;

/// Dense row-major N x K matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct Entropy {
  double nats = 0.0;
  double normalized = 0.0;
};

struct PredictionRow {
  std::string id;
  std::vector<double> probs;
  double entropy_nats = 0.0;
  double entropy_norm = 0.0;
  int argmax = 0;
  std::vector<int> topk;
};

struct PredictionTable {
  double temperature = kDefaultTemperature;
  std::size_t k = 1;
  std::vector<PredictionRow> rows;

  std::size_t num_classes() const { return rows.empty() ? 0 : rows.front().probs.size(); }
};

inline Matrix similarity_logits(const EmbeddingMatrix& images, const EmbeddingMatrix& texts,
                                double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error("temperature must be > 0");
  if (images.dim != texts.dim) {
    throw Error("dim mismatch: images " + std::to_string(images.dim) + ", texts " +
                std::to_string(texts.dim));
  }
  require_unit_rows(images, "images");
  require_unit_rows(texts, "texts");
  Matrix logits(images.rows, texts.rows);
  for (std::size_t n = 0; n < images.rows; ++n) {
    for (std::size_t k = 0; k < texts.rows; ++k) {
      const double c = std::clamp(dot(images.row(n), texts.row(k)), -1.0, 1.0);
      logits(n, k) = temperature * c;
    }
  }
  return logits;
}

/// Max-subtracted softmax of one row.
inline std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw Error("softmax of empty row");
  for (double x : v) {
    if (!std::isfinite(x)) throw Error("softmax: non-finite input");
  }
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

/// Shannon entropy in nats with 0 ln 0 = 0, and the same divided by ln K.
inline Entropy entropy_row(std::span<const double> probs) {
  if (probs.empty()) throw Error("entropy of empty row");
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0 || !std::isfinite(p)) throw Error("negative or non-finite probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw Error("probability row does not sum to 1");
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  h = std::max(h, 0.0);
  const std::size_t k = probs.size();
  Entropy e;
  e.nats = h;
  e.normalized = k >= 2 ? h / std::log(static_cast<double>(k)) : 0.0;
  // Exactly uniform rows sit on the upper bound, so tau_h = 1 still selects them.
  if (k >= 2 && std::all_of(probs.begin(), probs.end(), [&](double p) { return p == probs[0]; })) {
    e.nats = std::log(static_cast<double>(k));
    e.normalized = 1.0;
  }
  return e;
}

/// Class indices by descending probability, ties by ascending index.
inline std::vector<int> ranked_classes(std::span<const double> probs, std::size_t k) {
  std::vector<int> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

inline PredictionRow make_prediction_row(std::string id, std::vector<double> probs, std::size_t k) {
  PredictionRow row;
  row.id = std::move(id);
  const auto e = entropy_row(probs);
  row.entropy_nats = e.nats;
  row.entropy_norm = e.normalized;
  row.topk = ranked_classes(probs, k);
  row.argmax = row.topk.front();
  row.probs = std::move(probs);
  return row;
}

/// Builds a table from a probability matrix; `ids` may be empty, in which case
/// rows are named by index.
inline PredictionTable table_from_probs(const Matrix& probs, std::span<const std::string> ids,
                                        std::size_t k, double temperature) {
  if (probs.cols == 0) throw Error("no classes");
  if (k < 1 || k > probs.cols) {
    throw Error("k must be in [1, " + std::to_string(probs.cols) + "], got " + std::to_string(k));
  }
  if (!ids.empty() && ids.size() != probs.rows) throw Error("ids/rows length mismatch");
  PredictionTable table;
  table.temperature = temperature;
  table.k = k;
  table.rows.reserve(probs.rows);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    auto r = probs.row(i);
    table.rows.push_back(make_prediction_row(ids.empty() ? std::to_string(i) : ids[i],
                                             std::vector<double>(r.begin(), r.end()), k));
  }
  return table;
}

inline PredictionTable predict_zeroshot(const EmbeddingMatrix& images, const EmbeddingMatrix& texts,
                                        double temperature, std::size_t k,
                                        std::span<const std::string> ids = {}) {
  if (texts.rows == 0) throw Error("no label texts");
  if (k < 1 || k > texts.rows) {
    throw Error("k must be in [1, " + std::to_string(texts.rows) + "], got " + std::to_string(k));
  }
  const Matrix probs = softmax_rows(similarity_logits(images, texts, temperature));
  return table_from_probs(probs, ids, k, temperature);
}

inline nlohmann::json to_json(const PredictionTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"id", r.id},
                    {"probs", r.probs},
                    {"entropy_nats", r.entropy_nats},
                    {"entropy_norm", r.entropy_norm},
                    {"argmax", r.argmax},
                    {"topk", r.topk}});
  }
  return {{"temperature", t.temperature}, {"k", t.k}, {"rows", std::move(rows)}};
}

inline PredictionTable prediction_table_from_json(const nlohmann::json& j) {
  PredictionTable t;
  t.temperature = j.at("temperature").get<double>();
  t.k = j.at("k").get<std::size_t>();
  for (const auto& r : j.at("rows")) {
    PredictionRow row;
    row.id = r.at("id").get<std::string>();
    row.probs = r.at("probs").get<std::vector<double>>();
    row.entropy_nats = r.at("entropy_nats").get<double>();
    row.entropy_norm = r.at("entropy_norm").get<double>();
    row.argmax = r.at("argmax").get<int>();
    row.topk = r.at("topk").get<std::vector<int>>();
    if (row.topk.empty() || row.topk.front() != row.argmax) {
      throw Error("prediction row " + row.id + ": argmax differs from topk[0]");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace zsr
