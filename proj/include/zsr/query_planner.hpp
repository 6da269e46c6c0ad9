#pragma once

// Search-query construction for the three retrieval strategies:
//   cls  -> "{class_name}"
//   desc -> "{class_name} which {description}"
//   cap  -> "{class_name} {caption}", one per uncertain instance caption,
//           labelled with that instance's zero-shot argmax.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "zsr/error.hpp"
#include "zsr/uncertainty.hpp"
#include "zsr/zeroshot.hpp"

namespace zsr {

inline constexpr std::size_t kDefaultQueriesPerTerm = 110;  // 100 used + 10 scraper padding

enum class Strategy { cls, desc, cap };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::cls: return "cls";
    case Strategy::desc: return "desc";
    case Strategy::cap: return "cap";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "cls") return Strategy::cls;
  if (s == "desc") return Strategy::desc;
  if (s == "cap") return Strategy::cap;
  throw Error("unknown strategy \"" + std::string(s) + "\" (expected cls, desc or cap)");
}

enum class SideTextKind { description, caption };

struct SideTextTable {
  SideTextKind kind = SideTextKind::description;
  // class-id (descriptions) or instance-id (captions), as a string key
  std::map<std::string, std::vector<std::string>> entries;
};

struct QueryEntry {
  std::string query;
  int class_id = 0;
  Strategy strategy = Strategy::cls;
  std::string source_instance_id;  // empty unless strategy == cap

  bool operator==(const QueryEntry&) const = default;
};

struct QueryPlan {
  std::vector<QueryEntry> entries;
  std::size_t n_per_query = kDefaultQueriesPerTerm;
  std::vector<int> skipped_classes;  // desc classes without descriptions
};

/// Trims and collapses whitespace runs to single spaces.
inline std::string normalize_query(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    }
  }
  return out;
}

inline SideTextTable side_text_from_json(const nlohmann::json& j) {
  SideTextTable t;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "description") {
    t.kind = SideTextKind::description;
  } else if (kind == "caption") {
    t.kind = SideTextKind::caption;
  } else {
    throw Error("side text kind must be \"description\" or \"caption\", got \"" + kind + "\"");
  }
  for (const auto& [key, value] : j.at("entries").items()) {
    t.entries[key] = value.is_string() ? std::vector<std::string>{value.get<std::string>()}
                                       : value.get<std::vector<std::string>>();
  }
  return t;
}

struct PlanInputs {
  Strategy strategy = Strategy::cls;
  const UncertainLabelSet* labels = nullptr;
  const std::vector<std::string>* class_names = nullptr;
  const SideTextTable* side = nullptr;
  const UncertainSet* uncertain = nullptr;
  const PredictionTable* predictions = nullptr;  // argmax source for cap
  std::size_t n = kDefaultQueriesPerTerm;
};

inline void sort_plan(QueryPlan& plan) {
  std::stable_sort(plan.entries.begin(), plan.entries.end(), [](const auto& a, const auto& b) {
    return std::tie(a.class_id, a.strategy, a.source_instance_id, a.query) <
           std::tie(b.class_id, b.strategy, b.source_instance_id, b.query);
  });
}

inline QueryPlan plan_queries(const PlanInputs& in) {
  if (!in.labels || !in.class_names) throw Error("plan_queries: labels and class names required");
  if (in.n == 0) throw Error("n_per_query must be >= 1");
  const auto& names = *in.class_names;
  auto name_of = [&](int c) -> const std::string& {
    if (c < 0 || static_cast<std::size_t>(c) >= names.size()) {
      throw Error("class id " + std::to_string(c) + " has no class name");
    }
    return names[static_cast<std::size_t>(c)];
  };
  const std::set<int> allowed(in.labels->class_ids.begin(), in.labels->class_ids.end());

  QueryPlan plan;
  plan.n_per_query = in.n;
  auto add = [&](std::string q, int c, std::string source) {
    q = normalize_query(q);
    if (q.empty()) return;
    plan.entries.push_back({std::move(q), c, in.strategy, std::move(source)});
  };

  switch (in.strategy) {
    case Strategy::cls:
      for (int c : in.labels->class_ids) add(name_of(c), c, "");
      break;
    case Strategy::desc: {
      if (!in.side || in.side->kind != SideTextKind::description) {
        throw Error("desc strategy requires a description table");
      }
      for (int c : in.labels->class_ids) {
        auto it = in.side->entries.find(std::to_string(c));
        if (it == in.side->entries.end() || it->second.empty()) {
          spdlog::warn("no description for class {} ({}); skipped", c, name_of(c));
          plan.skipped_classes.push_back(c);
          continue;
        }
        for (const auto& d : it->second) add(name_of(c) + " which " + d, c, "");
      }
      break;
    }
    case Strategy::cap: {
      if (!in.side || in.side->kind != SideTextKind::caption) {
        throw Error("cap strategy requires a caption table");
      }
      if (!in.uncertain || !in.predictions) {
        throw Error("cap strategy requires the uncertain set and its predictions");
      }
      for (std::size_t r : in.uncertain->rows) {
        const auto& row = in.predictions->rows.at(r);
        if (!allowed.count(row.argmax)) {
          throw Error("instance " + row.id + " argmax is outside the uncertain label set");
        }
        auto it = in.side->entries.find(row.id);
        if (it == in.side->entries.end()) continue;
        for (const auto& caption : it->second) add(name_of(row.argmax) + " " + caption, row.argmax, row.id);
      }
      break;
    }
  }
  sort_plan(plan);
  return plan;
}

/// Concatenates plans, dropping later entries whose (query, class_id) was
/// already seen.
inline QueryPlan merge_plans(const std::vector<QueryPlan>& plans) {
  QueryPlan out;
  if (plans.empty()) return out;
  out.n_per_query = plans.front().n_per_query;
  std::set<std::pair<std::string, int>> seen;
  std::set<int> skipped;
  for (const auto& p : plans) {
    if (p.n_per_query != out.n_per_query) throw Error("cannot merge plans with different n_per_query");
    for (const auto& e : p.entries) {
      if (seen.insert({e.query, e.class_id}).second) out.entries.push_back(e);
    }
    skipped.insert(p.skipped_classes.begin(), p.skipped_classes.end());
  }
  out.skipped_classes.assign(skipped.begin(), skipped.end());
  return out;
}

inline std::string plan_to_jsonl(const QueryPlan& plan) {
  std::string out;
  for (const auto& e : plan.entries) {
    nlohmann::json j = {{"query", e.query},
                        {"class_id", e.class_id},
                        {"strategy", to_string(e.strategy)},
                        {"source_instance_id", e.source_instance_id.empty()
                                                   ? nlohmann::json(nullptr)
                                                   : nlohmann::json(e.source_instance_id)},
                        {"n", plan.n_per_query}};
    out += j.dump() + "\n";
  }
  return out;
}

inline QueryPlan plan_from_jsonl(std::string_view text) {
  QueryPlan plan;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool have_n = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_query(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QueryEntry e;
      e.query = j.at("query").get<std::string>();
      e.class_id = j.at("class_id").get<int>();
      e.strategy = parse_strategy(j.at("strategy").get<std::string>());
      if (j.contains("source_instance_id") && !j["source_instance_id"].is_null()) {
        e.source_instance_id = j["source_instance_id"].get<std::string>();
      }
      const auto n = j.at("n").get<std::size_t>();
      if (have_n && n != plan.n_per_query) throw Error("mixed n values");
      plan.n_per_query = n;
      have_n = true;
      plan.entries.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw Error("plan line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return plan;
}

}  // namespace zsr
