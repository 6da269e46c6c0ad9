#pragma once

// Linear probe over frozen embeddings and the entropy gate that decides,
// per uncertain instance, whether the probe or the zero-shot model answers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"
#include "zsr/fs.hpp"
#include "zsr/zeroshot.hpp"

namespace zsr {

struct ProbeTrainConfig {
  double lambda = 1e-4;
  double lr = 1.0;
  std::size_t epochs = 500;
  std::uint64_t seed = 0;  // recorded only; training is deterministic from zero init
};

struct ProbeModel {
  Matrix weights;  // C x d
  std::vector<double> bias;
  std::vector<int> class_ids;  // ascending, one per weight row
  ProbeTrainConfig train_config;
  double final_train_loss = 0.0;
  std::vector<double> loss_trace;

  std::size_t num_classes() const { return class_ids.size(); }
  std::size_t dim() const { return weights.cols; }
};

/// Training rows already mapped to probe class positions.
struct ProbeData {
  std::vector<double> x;  // n x d
  std::vector<std::size_t> y;
  std::size_t n = 0, d = 0;
};

struct ProbeGradient {
  Matrix w;
  std::vector<double> b;
};

/// Mean cross-entropy plus (lambda/2) |W|_F^2, and optionally its gradient.
inline double probe_objective(const Matrix& w, const std::vector<double>& b, const ProbeData& data, double lambda,
                              ProbeGradient* grad = nullptr) {
  const std::size_t c = w.rows, d = w.cols;
  if (grad) {
    grad->w = Matrix(c, d);
    grad->b.assign(c, 0.0);
  }
  std::vector<double> logits(c);
  double loss = 0.0;
  for (std::size_t j = 0; j < data.n; ++j) {
    const double* xj = &data.x[j * d];
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      const auto wk = w.row(k);
      for (std::size_t t = 0; t < d; ++t) s += wk[t] * xj[t];
      logits[k] = s;
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    const double lse = m + std::log(z);
    loss += lse - logits[data.y[j]];
    if (grad) {
      for (std::size_t k = 0; k < c; ++k) {
        const double r = std::exp(logits[k] - lse) - (k == data.y[j] ? 1.0 : 0.0);
        grad->b[k] += r;
        auto gk = grad->w.row(k);
        for (std::size_t t = 0; t < d; ++t) gk[t] += r * xj[t];
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(data.n);
  double reg = 0.0;
  for (double v : w.data) reg += v * v;
  if (grad) {
    for (std::size_t i = 0; i < grad->w.data.size(); ++i) grad->w.data[i] = grad->w.data[i] * inv_n + lambda * w.data[i];
    for (double& v : grad->b) v *= inv_n;
  }
  return loss * inv_n + 0.5 * lambda * reg;
}

/// Maps labels onto the sorted classes that actually occur. Classes in
/// `class_ids` without samples are dropped with a warning.
inline std::pair<ProbeData, std::vector<int>> make_probe_data(const EmbeddingMatrix& refined,
                                                              const std::vector<int>& labels,
                                                              const std::vector<int>& class_ids) {
  if (refined.rows == 0) throw Error("train_probe: empty training set");
  if (labels.size() != refined.rows) throw Error("train_probe: labels/rows length mismatch");
  require_unit_rows(refined, "train_probe input");
  const std::set<int> allowed(class_ids.begin(), class_ids.end());
  std::set<int> present;
  for (int l : labels) {
    if (!allowed.count(l)) throw Error("train_probe: label " + std::to_string(l) + " is outside the class list");
    present.insert(l);
  }
  for (int c : allowed) {
    if (!present.count(c)) spdlog::warn("class {} has no training samples; dropped from the probe", c);
  }
  std::vector<int> kept(present.begin(), present.end());
  std::map<int, std::size_t> position;
  for (std::size_t i = 0; i < kept.size(); ++i) position[kept[i]] = i;

  ProbeData data;
  data.n = refined.rows;
  data.d = refined.dim;
  data.x.resize(data.n * data.d);
  for (std::size_t j = 0; j < data.n; ++j) {
    const auto r = refined.row(j);
    std::copy(r.begin(), r.end(), data.x.begin() + static_cast<std::ptrdiff_t>(j * data.d));
    data.y.push_back(position[labels[j]]);
  }
  return {std::move(data), std::move(kept)};
}

/// Full-batch gradient descent from zero. A step that would raise the
/// objective is retried with half the step size, so the loss trace never
/// increases.
inline ProbeModel train_probe(const EmbeddingMatrix& refined, const std::vector<int>& labels,
                              const std::vector<int>& class_ids, const ProbeTrainConfig& cfg = {}) {
  if (!(cfg.lambda >= 0.0)) throw Error("train_probe: lambda must be >= 0");
  if (!(cfg.lr > 0.0)) throw Error("train_probe: lr must be > 0");
  auto [data, kept] = make_probe_data(refined, labels, class_ids);
  ProbeModel model;
  model.class_ids = kept;
  model.train_config = cfg;
  model.weights = Matrix(kept.size(), data.d);
  model.bias.assign(kept.size(), 0.0);

  ProbeGradient grad;
  double loss = probe_objective(model.weights, model.bias, data, cfg.lambda, &grad);
  model.loss_trace.push_back(loss);
  double lr = cfg.lr;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    bool accepted = false;
    for (int halvings = 0; halvings < 60 && !accepted; ++halvings) {
      Matrix w = model.weights;
      std::vector<double> b = model.bias;
      for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * grad.w.data[i];
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * grad.b[i];
      ProbeGradient g;
      const double trial = probe_objective(w, b, data, cfg.lambda, &g);
      if (trial <= loss) {
        model.weights = std::move(w);
        model.bias = std::move(b);
        grad = std::move(g);
        loss = trial;
        accepted = true;
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) break;  // no descent step exists at machine precision
    model.loss_trace.push_back(loss);
  }
  model.final_train_loss = loss;
  return model;
}

/// Probability rows over the probe's classes; topk/argmax are positions into
/// model.class_ids.
inline PredictionTable probe_predict(const ProbeModel& model, const EmbeddingMatrix& images,
                                     std::span<const std::string> ids = {}, std::size_t k = 1) {
  if (images.dim != model.dim()) throw Error("probe_predict: dim mismatch");
  if (model.num_classes() == 0) throw Error("probe_predict: probe has no classes");
  Matrix logits(images.rows, model.num_classes());
  for (std::size_t j = 0; j < images.rows; ++j) {
    const auto x = images.row(j);
    for (std::size_t c = 0; c < model.num_classes(); ++c) {
      double s = model.bias[c];
      const auto w = model.weights.row(c);
      for (std::size_t t = 0; t < x.size(); ++t) s += w[t] * x[t];
      logits(j, c) = s;
    }
  }
  return table_from_probs(softmax_rows(logits), ids, std::min(k, model.num_classes()), 1.0);
}

/// H(pre) - H(probe), in nats.
inline double information_gain(std::span<const double> pre_row, std::span<const double> probe_row) {
  return entropy_row(pre_row).nats - entropy_row(probe_row).nats;
}

enum class GateChoice { pretrained, probe };

struct GateDecision {
  std::string id;
  bool uncertain = false;
  double pre_entropy = 0.0;
  double probe_entropy = 0.0;
  double information_gain = 0.0;
  GateChoice chosen = GateChoice::pretrained;
  int final_class = 0;
};

struct GateOptions {
  // Compare against the zero-shot entropy restricted (and renormalized) to
  // the probe's classes instead of over all labels.
  bool restrict_pre_entropy = false;
};

struct GateResult {
  std::vector<int> predictions;
  std::vector<GateDecision> trace;
};

/// Confident rows (entropy_norm < tau_h) keep the zero-shot argmax. Uncertain
/// rows switch to the probe only when it strictly lowers the entropy.
inline GateResult gated_predict(const PredictionTable& pre, const ProbeModel& probe, const EmbeddingMatrix& images,
                                double tau_h, const GateOptions& options = {}) {
  if (!(tau_h >= 0.0 && tau_h <= 1.0)) throw Error("tau_h must lie in [0, 1]");
  if (images.rows != pre.rows.size()) throw Error("gated_predict: images/predictions length mismatch");
  const std::size_t n_classes = pre.num_classes();
  bool overlap = false;
  for (int c : probe.class_ids) overlap |= c >= 0 && static_cast<std::size_t>(c) < n_classes;
  if (!overlap) throw Error("gated_predict: probe classes are disjoint from the zero-shot classes");

  const PredictionTable post = probe_predict(probe, images);
  GateResult out;
  for (std::size_t i = 0; i < pre.rows.size(); ++i) {
    const auto& row = pre.rows[i];
    GateDecision g;
    g.id = row.id;
    g.uncertain = row.entropy_norm >= tau_h;
    if (options.restrict_pre_entropy) {
      std::vector<double> sub;
      double z = 0.0;
      for (int c : probe.class_ids) {
        const double p = static_cast<std::size_t>(c) < n_classes ? row.probs[static_cast<std::size_t>(c)] : 0.0;
        sub.push_back(p);
        z += p;
      }
      if (z > 0.0) {
        for (double& p : sub) p /= z;
        g.pre_entropy = entropy_row(sub).nats;
      } else {
        g.pre_entropy = 0.0;
      }
    } else {
      g.pre_entropy = row.entropy_nats;
    }
    g.probe_entropy = post.rows[i].entropy_nats;
    g.information_gain = g.pre_entropy - g.probe_entropy;
    if (g.uncertain && g.information_gain > 0.0) {
      g.chosen = GateChoice::probe;
      g.final_class = probe.class_ids[static_cast<std::size_t>(post.rows[i].argmax)];
    } else {
      g.chosen = GateChoice::pretrained;
      g.final_class = row.argmax;
    }
    out.predictions.push_back(g.final_class);
    out.trace.push_back(std::move(g));
  }
  return out;
}

inline std::string gate_trace_to_jsonl(const std::vector<GateDecision>& trace) {
  std::string out;
  for (const auto& g : trace) {
    out += nlohmann::json{{"id", g.id},
                          {"uncertain", g.uncertain},
                          {"pre_entropy", g.pre_entropy},
                          {"probe_entropy", g.probe_entropy},
                          {"information_gain", g.information_gain},
                          {"chosen", g.chosen == GateChoice::probe ? "probe" : "pretrained"},
                          {"final_class", g.final_class}}
               .dump() +
           "\n";
  }
  return out;
}

/// Writes `<base>.emb` (+ manifest) holding W and `<base>.json` holding the rest.
inline void save_probe(const ProbeModel& model, const std::filesystem::path& base) {
  std::vector<float> w(model.weights.data.begin(), model.weights.data.end());
  IdManifest manifest;
  for (int c : model.class_ids) manifest.ids.push_back(std::to_string(c));
  write_embeddings(EmbeddingMatrix(model.num_classes(), model.dim(), std::move(w)), manifest,
                   std::filesystem::path(base.string() + ".emb"));
  nlohmann::json meta = {{"class_ids", model.class_ids},
                         {"bias", model.bias},
                         {"dim", model.dim()},
                         {"train_config",
                          {{"lambda", model.train_config.lambda},
                           {"lr", model.train_config.lr},
                           {"epochs", model.train_config.epochs},
                           {"seed", model.train_config.seed}}},
                         {"final_train_loss", model.final_train_loss},
                         {"loss_trace", model.loss_trace}};
  write_file_atomic(base.string() + ".json", meta.dump(1) + "\n");
}

inline ProbeModel load_probe(const std::filesystem::path& base) {
  auto [w, manifest] = read_embeddings(base.string() + ".emb");
  const auto meta = nlohmann::json::parse(read_file(base.string() + ".json"));
  ProbeModel m;
  m.class_ids = meta.at("class_ids").get<std::vector<int>>();
  m.bias = meta.at("bias").get<std::vector<double>>();
  if (m.class_ids.size() != w.rows || m.bias.size() != w.rows) throw Error("probe metadata does not match weights");
  m.weights = Matrix(w.rows, w.dim);
  std::copy(w.data.begin(), w.data.end(), m.weights.data.begin());
  const auto& tc = meta.at("train_config");
  m.train_config = {tc.at("lambda").get<double>(), tc.at("lr").get<double>(), tc.at("epochs").get<std::size_t>(),
                    tc.at("seed").get<std::uint64_t>()};
  m.final_train_loss = meta.at("final_train_loss").get<double>();
  m.loss_trace = meta.at("loss_trace").get<std::vector<double>>();
  return m;
}

}  // namespace zsr
