#pragma once

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zsr/error.hpp"
#include "zsr/zeroshot.hpp"

namespace zsr {

inline constexpr std::size_t kDefaultTopK = 5;

struct UncertainSet {
  std::vector<std::string> instance_ids;
  std::vector<std::size_t> rows;  // positions in the source table
  double tau_h = 0.0;
  double fraction = 0.0;
};

struct UncertainLabelSet {
  std::vector<int> class_ids;  // ascending
  std::size_t k_used = 0;
};

/// Rows whose normalized entropy is >= tau_h, in table order.
inline UncertainSet select_uncertain(const PredictionTable& table, double tau_h) {
  if (!(tau_h >= 0.0 && tau_h <= 1.0)) throw Error("tau_h must lie in [0, 1]");
  UncertainSet out;
  out.tau_h = tau_h;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    if (table.rows[i].entropy_norm >= tau_h) {
      out.instance_ids.push_back(table.rows[i].id);
      out.rows.push_back(i);
    }
  }
  out.fraction = table.rows.empty() ? 0.0
                                    : static_cast<double>(out.rows.size()) / table.rows.size();
  return out;
}

inline UncertainLabelSet uncertain_label_set(const PredictionTable& table,
                                             const UncertainSet& uncertain, std::size_t k) {
  if (k < 1 || k > table.k) {
    throw Error("k = " + std::to_string(k) + " exceeds the table's stored top-k depth " +
                std::to_string(table.k));
  }
  std::set<int> classes;
  for (std::size_t r : uncertain.rows) {
    const auto& topk = table.rows.at(r).topk;
    classes.insert(topk.begin(), topk.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return {std::vector<int>(classes.begin(), classes.end()), k};
}

inline nlohmann::json to_json(const UncertainSet& u, const UncertainLabelSet& labels,
                              std::size_t num_classes) {
  return {{"tau_h", u.tau_h},
          {"k", labels.k_used},
          {"instance_ids", u.instance_ids},
          {"rows", u.rows},
          {"class_ids", labels.class_ids},
          {"fraction", u.fraction},
          {"class_fraction", num_classes == 0 ? 0.0
                                              : static_cast<double>(labels.class_ids.size()) /
                                                    static_cast<double>(num_classes)}};
}

}  // namespace zsr
