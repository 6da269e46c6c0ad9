#pragma once

// Stage orchestration. Every stage writes into
//   <work_dir>/artifacts/<stage>/<key>/
// where key is a digest of the stage's config slice, the output digests of
// its upstream stages and the digests of any external inputs it reads. A
// stage whose directory already holds a stage.json marker is a cache hit.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "zsr/audit.hpp"
#include "zsr/digest.hpp"
#include "zsr/embedding_store.hpp"
#include "zsr/error.hpp"
#include "zsr/fs.hpp"
#include "zsr/http_provider.hpp"
#include "zsr/movmf.hpp"
#include "zsr/probe.hpp"
#include "zsr/query_planner.hpp"
#include "zsr/refine_alt.hpp"
#include "zsr/retrieval.hpp"
#include "zsr/uncertainty.hpp"
#include "zsr/zeroshot.hpp"

namespace zsr {

inline constexpr int kConfigVersion = 1;

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid config:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

enum class Stage { predict, select, plan, fetch, embed_check, refine, train, infer, audit };

inline constexpr Stage kAllStages[] = {Stage::predict, Stage::select, Stage::plan,  Stage::fetch, Stage::embed_check,
                                       Stage::refine,  Stage::train,  Stage::infer, Stage::audit};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::predict: return "predict";
    case Stage::select: return "select";
    case Stage::plan: return "plan";
    case Stage::fetch: return "fetch";
    case Stage::embed_check: return "embed-check";
    case Stage::refine: return "refine";
    case Stage::train: return "train";
    case Stage::infer: return "infer";
    case Stage::audit: return "audit";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  throw Error("unknown stage \"" + std::string(s) + "\"");
}

class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what)
      : Error("stage " + to_string(stage) + " failed: " + what), stage_(stage) {}
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

// ---------------------------------------------------------------- config

struct PipelineConfig {
  struct Paths {
    std::filesystem::path target_embeddings, label_embeddings, descriptions, captions, retrieved_embeddings,
        test_images, work_dir;
  } paths;
  double temperature = kDefaultTemperature;
  double tau_h = 0.9;
  std::size_t k = kDefaultTopK;
  std::vector<Strategy> strategies{Strategy::cls};
  std::size_t n_per_query = kDefaultQueriesPerTerm;
  std::size_t images_per_class_cap = 100;  // 0 = no cap

  struct Refine {
    RefineMethod method = RefineMethod::movmf;
    std::size_t K = 0;  // 0 = size of the uncertain label set
    double tau_r = kDefaultTauR;
    std::uint64_t seed = 0;
    std::size_t max_iter = 200;
    double tol = 1e-6;
    std::string fit_on = "all";
    bool weighted_assignment = true;
  } refine;

  struct Probe {
    double lambda = 1e-4;
    double lr = 1.0;
    std::size_t epochs = 500;
    std::uint64_t seed = 0;
    bool restrict_pre_entropy = false;
  } probe;

  struct Provider {
    std::string kind = "mock";
    std::filesystem::path mock_root;
    std::string endpoint_template;
    std::size_t max_parallel = kDefaultMaxParallel;
    int rate_ms = kDefaultRateMs;
  } provider;

  struct Audit {
    int leak_threshold = kDefaultLeakThreshold;
    std::size_t emd_subsample = kDefaultEmdSubsample;
    std::uint64_t seed = 0;
  } audit;
};

namespace config_detail {

class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  // Records unknown keys of `obj` (at `where`) as violations.
  void allow(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) {
      errors_.push_back(where + ": expected an object");
      return;
    }
    for (const auto& [key, _] : obj.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
        errors_.push_back(where + ": unknown key \"" + key + "\"");
      }
    }
  }

  template <class T>
  void get(const nlohmann::json& obj, const char* key, const std::string& where, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    try {
      out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(where + "." + key + ": wrong type");
    }
  }

  void check(bool ok, const std::string& msg) {
    if (!ok) errors_.push_back(msg);
  }

 private:
  std::vector<std::string>& errors_;
};

}  // namespace config_detail

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir`. Every violation is collected before throwing ConfigError.
inline PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                   bool check_paths = true) {
  namespace fs = std::filesystem;
  std::vector<std::string> errors;
  config_detail::Reader rd(errors);
  PipelineConfig c;
  rd.allow(j, "config",
           {"version", "paths", "temperature", "tau_h", "k", "strategies", "n_per_query", "images_per_class_cap",
            "refine", "probe", "provider", "audit"});
  if (!j.is_object()) throw ConfigError(errors);

  int version = 0;
  rd.get(j, "version", "config", version);
  rd.check(version == kConfigVersion, "config.version: expected " + std::to_string(kConfigVersion));

  auto resolve = [&](const std::string& p) -> fs::path {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  const nlohmann::json paths = j.value("paths", nlohmann::json::object());
  rd.allow(paths, "paths",
           {"target_embeddings", "label_embeddings", "descriptions", "captions", "retrieved_embeddings",
            "test_images", "work_dir"});
  std::map<std::string, std::string> raw;
  for (const char* key : {"target_embeddings", "label_embeddings", "descriptions", "captions",
                          "retrieved_embeddings", "test_images", "work_dir"}) {
    rd.get(paths, key, "paths", raw[key]);
  }
  c.paths.target_embeddings = resolve(raw["target_embeddings"]);
  c.paths.label_embeddings = resolve(raw["label_embeddings"]);
  c.paths.descriptions = resolve(raw["descriptions"]);
  c.paths.captions = resolve(raw["captions"]);
  c.paths.retrieved_embeddings = resolve(raw["retrieved_embeddings"]);
  c.paths.test_images = resolve(raw["test_images"]);
  c.paths.work_dir = resolve(raw["work_dir"]);

  rd.get(j, "temperature", "config", c.temperature);
  rd.get(j, "tau_h", "config", c.tau_h);
  rd.get(j, "k", "config", c.k);
  rd.get(j, "n_per_query", "config", c.n_per_query);
  rd.get(j, "images_per_class_cap", "config", c.images_per_class_cap);
  if (j.contains("strategies")) {
    std::vector<std::string> names;
    rd.get(j, "strategies", "config", names);
    c.strategies.clear();
    for (const auto& n : names) {
      try {
        const Strategy s = parse_strategy(n);
        if (std::find(c.strategies.begin(), c.strategies.end(), s) != c.strategies.end()) {
          errors.push_back("strategies: duplicate \"" + n + "\"");
        } else {
          c.strategies.push_back(s);
        }
      } catch (const Error& e) {
        errors.push_back(std::string("strategies: ") + e.what());
      }
    }
  }

  const nlohmann::json refine = j.value("refine", nlohmann::json::object());
  rd.allow(refine, "refine", {"method", "K", "tau_r", "seed", "max_iter", "tol", "fit_on", "weighted_assignment"});
  std::string method = to_string(c.refine.method);
  rd.get(refine, "method", "refine", method);
  try {
    c.refine.method = parse_refine_method(method);
  } catch (const Error& e) {
    errors.push_back(std::string("refine.method: ") + e.what());
  }
  rd.get(refine, "K", "refine", c.refine.K);
  rd.get(refine, "tau_r", "refine", c.refine.tau_r);
  rd.get(refine, "seed", "refine", c.refine.seed);
  rd.get(refine, "max_iter", "refine", c.refine.max_iter);
  rd.get(refine, "tol", "refine", c.refine.tol);
  rd.get(refine, "fit_on", "refine", c.refine.fit_on);
  rd.get(refine, "weighted_assignment", "refine", c.refine.weighted_assignment);

  const nlohmann::json probe = j.value("probe", nlohmann::json::object());
  rd.allow(probe, "probe", {"lambda", "lr", "epochs", "seed", "restrict_pre_entropy"});
  rd.get(probe, "lambda", "probe", c.probe.lambda);
  rd.get(probe, "lr", "probe", c.probe.lr);
  rd.get(probe, "epochs", "probe", c.probe.epochs);
  rd.get(probe, "seed", "probe", c.probe.seed);
  rd.get(probe, "restrict_pre_entropy", "probe", c.probe.restrict_pre_entropy);

  const nlohmann::json provider = j.value("provider", nlohmann::json::object());
  rd.allow(provider, "provider", {"kind", "mock_root", "endpoint_template", "max_parallel", "rate_ms"});
  rd.get(provider, "kind", "provider", c.provider.kind);
  std::string mock_root;
  rd.get(provider, "mock_root", "provider", mock_root);
  c.provider.mock_root = resolve(mock_root);
  rd.get(provider, "endpoint_template", "provider", c.provider.endpoint_template);
  rd.get(provider, "max_parallel", "provider", c.provider.max_parallel);
  rd.get(provider, "rate_ms", "provider", c.provider.rate_ms);

  const nlohmann::json audit = j.value("audit", nlohmann::json::object());
  rd.allow(audit, "audit", {"leak_threshold", "emd_subsample", "seed"});
  rd.get(audit, "leak_threshold", "audit", c.audit.leak_threshold);
  rd.get(audit, "emd_subsample", "audit", c.audit.emd_subsample);
  rd.get(audit, "seed", "audit", c.audit.seed);

  rd.check(c.temperature > 0.0, "temperature must be > 0");
  rd.check(c.tau_h >= 0.0 && c.tau_h <= 1.0, "tau_h must lie in [0, 1]");
  rd.check(c.k >= 1, "k must be >= 1");
  rd.check(!c.strategies.empty(), "strategies must not be empty");
  rd.check(c.n_per_query >= 1, "n_per_query must be >= 1");
  rd.check(c.refine.tau_r >= 0.0 && c.refine.tau_r <= 2.0, "refine.tau_r must lie in [0, 2]");
  rd.check(c.refine.max_iter >= 1, "refine.max_iter must be >= 1");
  rd.check(c.refine.tol > 0.0, "refine.tol must be > 0");
  rd.check(c.refine.fit_on == "all" || c.refine.fit_on == "uncertain", "refine.fit_on must be \"all\" or \"uncertain\"");
  rd.check(c.probe.lambda >= 0.0, "probe.lambda must be >= 0");
  rd.check(c.probe.lr > 0.0, "probe.lr must be > 0");
  rd.check(c.provider.kind == "mock" || c.provider.kind == "http", "provider.kind must be \"mock\" or \"http\"");
  rd.check(c.provider.kind != "mock" || !c.provider.mock_root.empty(), "provider.mock_root is required for mock");
  rd.check(c.provider.kind != "http" || !c.provider.endpoint_template.empty(),
           "provider.endpoint_template is required for http");
  rd.check(c.provider.max_parallel >= 1, "provider.max_parallel must be >= 1");
  rd.check(c.provider.rate_ms >= 0, "provider.rate_ms must be >= 0");
  rd.check(c.audit.leak_threshold >= 0 && c.audit.leak_threshold <= 64, "audit.leak_threshold must lie in [0, 64]");
  rd.check(c.audit.emd_subsample >= 1, "audit.emd_subsample must be >= 1");

  auto need = [&](const fs::path& p, const char* name, bool required) {
    if (p.empty()) {
      if (required) errors.push_back(std::string("paths.") + name + " is required");
      return;
    }
    if (check_paths && !fs::exists(p)) errors.push_back(std::string("paths.") + name + ": " + p.string() + " does not exist");
  };
  const auto uses = [&](Strategy s) { return std::find(c.strategies.begin(), c.strategies.end(), s) != c.strategies.end(); };
  need(c.paths.target_embeddings, "target_embeddings", true);
  need(c.paths.label_embeddings, "label_embeddings", true);
  need(c.paths.retrieved_embeddings, "retrieved_embeddings", true);
  need(c.paths.descriptions, "descriptions", uses(Strategy::desc));
  need(c.paths.captions, "captions", uses(Strategy::cap));
  need(c.paths.test_images, "test_images", false);
  if (c.paths.work_dir.empty()) errors.push_back("paths.work_dir is required");
  if (check_paths && c.provider.kind == "mock" && !c.provider.mock_root.empty() &&
      !fs::is_directory(c.provider.mock_root)) {
    errors.push_back("provider.mock_root: " + c.provider.mock_root.string() + " is not a directory");
  }

  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  } catch (const Error& e) {
    throw ConfigError({e.what()});
  }
  return parse_config(j, std::filesystem::absolute(path).parent_path());
}

// ---------------------------------------------------------------- pipeline

struct StageRecord {
  std::string key;
  std::filesystem::path dir;
  std::string output_digest;
  bool cache_hit = false;
  double ms = 0.0;
};

namespace pipeline_detail {

inline std::string file_digest(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

inline std::string embeddings_digest(const std::filesystem::path& p) {
  return sha256_hex(file_digest(p) + file_digest(manifest_path(p)));
}

inline std::string directory_digest(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) h.update(f.filename().string() + "\n" + file_digest(f) + "\n");
  return h.hex();
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                       const std::vector<std::size_t>* rows = nullptr) {
  std::size_t n = 0, ok = 0;
  auto visit = [&](std::size_t i) {
    ++n;
    ok += pred[i] == truth[i];
  };
  if (rows) {
    for (std::size_t i : *rows) visit(i);
  } else {
    for (std::size_t i = 0; i < pred.size(); ++i) visit(i);
  }
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(ok) / static_cast<double>(n);
}

inline nlohmann::json nullable(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace pipeline_detail

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {}

  const PipelineConfig& config() const { return cfg_; }
  const std::map<Stage, StageRecord>& records() const { return done_; }

  /// Runs every stage in order and writes <work_dir>/summary.json.
  nlohmann::json full_run(bool force = false) {
    for (Stage s : kAllStages) ensure(s, true, force);
    auto summary = build_summary();
    write_file_atomic(cfg_.paths.work_dir / "summary.json", summary.dump(2) + "\n");
    return summary;
  }

 private:
  // ------------------------------------------------------------ plumbing

  static std::vector<Stage> upstream(Stage s) {
    switch (s) {
      case Stage::predict: return {};
      case Stage::select: return {Stage::predict};
      case Stage::plan: return {Stage::predict, Stage::select};
      case Stage::fetch: return {Stage::plan};
      case Stage::embed_check: return {Stage::fetch};
      case Stage::refine: return {Stage::select, Stage::embed_check};
      case Stage::train: return {Stage::select, Stage::refine};
      case Stage::infer: return {Stage::predict, Stage::select, Stage::train};
      case Stage::audit:
        return {Stage::predict, Stage::select, Stage::fetch, Stage::embed_check, Stage::refine, Stage::infer};
    }
    return {};
  }

  std::string input_digest(const std::string& name, const std::function<std::string()>& compute) {
    auto it = input_digests_.find(name);
    if (it == input_digests_.end()) it = input_digests_.emplace(name, compute()).first;
    return it->second;
  }

  nlohmann::json slice(Stage s) {
    using pipeline_detail::embeddings_digest;
    using pipeline_detail::file_digest;
    const auto& c = cfg_;
    switch (s) {
      case Stage::predict:
        return {{"temperature", c.temperature},
                {"k", c.k},
                {"target", input_digest("target", [&] { return embeddings_digest(c.paths.target_embeddings); })},
                {"labels", input_digest("labels", [&] { return embeddings_digest(c.paths.label_embeddings); })}};
      case Stage::select: return {{"tau_h", c.tau_h}, {"k", c.k}};
      case Stage::plan: {
        nlohmann::json j = {{"n_per_query", c.n_per_query}, {"strategies", nlohmann::json::array()}};
        for (Strategy st : c.strategies) j["strategies"].push_back(to_string(st));
        j["labels"] = input_digest("labels", [&] { return embeddings_digest(c.paths.label_embeddings); });
        if (!c.paths.descriptions.empty()) {
          j["descriptions"] = input_digest("descriptions", [&] { return file_digest(c.paths.descriptions); });
        }
        if (!c.paths.captions.empty()) {
          j["captions"] = input_digest("captions", [&] { return file_digest(c.paths.captions); });
        }
        return j;
      }
      case Stage::fetch:
        return {{"kind", c.provider.kind},
                {"mock_root", c.provider.mock_root.string()},
                {"endpoint_template", c.provider.endpoint_template}};
      case Stage::embed_check:
        return {{"retrieved", input_digest("retrieved",
                                           [&] { return embeddings_digest(c.paths.retrieved_embeddings); })},
                {"target", input_digest("target", [&] { return embeddings_digest(c.paths.target_embeddings); })}};
      case Stage::refine:
        return {{"method", to_string(c.refine.method)},
                {"K", c.refine.K},
                {"tau_r", c.refine.tau_r},
                {"seed", c.refine.seed},
                {"max_iter", c.refine.max_iter},
                {"tol", c.refine.tol},
                {"fit_on", c.refine.fit_on},
                {"weighted_assignment", c.refine.weighted_assignment},
                {"images_per_class_cap", c.images_per_class_cap},
                {"target", input_digest("target", [&] { return embeddings_digest(c.paths.target_embeddings); })},
                {"labels", input_digest("labels", [&] { return embeddings_digest(c.paths.label_embeddings); })}};
      case Stage::train:
        return {{"lambda", c.probe.lambda}, {"lr", c.probe.lr}, {"epochs", c.probe.epochs}, {"seed", c.probe.seed}};
      case Stage::infer:
        return {{"tau_h", c.tau_h},
                {"restrict_pre_entropy", c.probe.restrict_pre_entropy},
                {"target", input_digest("target", [&] { return embeddings_digest(c.paths.target_embeddings); })}};
      case Stage::audit: {
        nlohmann::json j = {{"leak_threshold", c.audit.leak_threshold},
                            {"emd_subsample", c.audit.emd_subsample},
                            {"seed", c.audit.seed},
                            {"probe", slice(Stage::train)},
                            {"labels", input_digest("labels", [&] { return embeddings_digest(c.paths.label_embeddings); })}};
        if (!c.paths.test_images.empty()) {
          j["test_images"] = input_digest("test_images", [&] { return pipeline_detail::directory_digest(c.paths.test_images); });
        }
        return j;
      }
    }
    return {};
  }

  StageRecord& ensure(Stage s, bool run_upstream, bool force) {
    if (auto it = done_.find(s); it != done_.end()) return it->second;
    for (Stage u : upstream(s)) ensure(u, run_upstream, run_upstream && force);

    nlohmann::json key_doc = {{"stage", to_string(s)}, {"slice", slice(s)}, {"upstream", nlohmann::json::object()}};
    for (Stage u : upstream(s)) key_doc["upstream"][to_string(u)] = done_.at(u).output_digest;
    StageRecord rec;
    rec.key = sha256_hex(key_doc.dump()).substr(0, 16);
    rec.dir = cfg_.paths.work_dir / "artifacts" / to_string(s) / rec.key;
    const auto marker = rec.dir / "stage.json";
    const auto start = std::chrono::steady_clock::now();

    if (!force && std::filesystem::exists(marker)) {
      rec.output_digest = nlohmann::json::parse(read_file(marker)).at("output_digest").get<std::string>();
      rec.cache_hit = true;
      spdlog::info("{}: cache hit ({})", to_string(s), rec.key);
    } else {
      if (!run_upstream && s != current_target_) throw StageError(*current_target_, "requires: " + to_string(s));
      const auto tmp = rec.dir.parent_path() / (rec.key + ".tmp-" + std::to_string(::getpid()));
      std::filesystem::remove_all(tmp);
      std::filesystem::create_directories(tmp);
      std::string digest;
      try {
        digest = produce(s, tmp);
      } catch (const StageError&) {
        std::filesystem::remove_all(tmp);
        throw;
      } catch (const std::exception& e) {
        std::filesystem::remove_all(tmp);
        throw StageError(s, e.what());
      }
      write_file_atomic(tmp / "stage.json",
                        nlohmann::json{{"stage", to_string(s)}, {"key", rec.key}, {"output_digest", digest},
                                       {"inputs", key_doc}}
                                .dump(1) +
                            "\n");
      std::filesystem::remove_all(rec.dir);
      std::filesystem::rename(tmp, rec.dir);
      rec.output_digest = digest;
      spdlog::info("{}: wrote {}", to_string(s), rec.dir.string());
    }
    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    auto& stored = done_[s] = rec;
    update_index(s, stored);
    return stored;
  }

  void update_index(Stage s, const StageRecord& rec) {
    const auto path = cfg_.paths.work_dir / "cache.json";
    nlohmann::json index = nlohmann::json::object();
    if (std::filesystem::exists(path)) {
      try {
        index = nlohmann::json::parse(read_file(path));
      } catch (const std::exception&) {
        index = nlohmann::json::object();
      }
    }
    index[to_string(s)] = {{"key", rec.key},
                           {"artifact", std::filesystem::relative(rec.dir, cfg_.paths.work_dir).string()},
                           {"output_digest", rec.output_digest}};
    write_file_atomic(path, index.dump(1) + "\n");
  }

 public:
  /// Runs one stage. Upstream stages must already be cached; otherwise the
  /// error names the earliest missing one ("requires: <stage>").
  std::filesystem::path run_stage(Stage s, bool force = false) {
    current_target_ = s;
    struct Reset {
      std::optional<Stage>& t;
      ~Reset() { t.reset(); }
    } reset{current_target_};
    return ensure(s, false, force).dir;
  }

 private:
  // ------------------------------------------------------------ loaders

  const std::pair<EmbeddingMatrix, IdManifest>& target() {
    if (!target_) {
      target_ = read_embeddings(cfg_.paths.target_embeddings);
      require_unit_rows(target_->first, "target embeddings");
    }
    return *target_;
  }

  const std::pair<EmbeddingMatrix, IdManifest>& label_texts() {
    if (!labels_) {
      labels_ = read_embeddings(cfg_.paths.label_embeddings);
      require_unit_rows(labels_->first, "label embeddings");
    }
    return *labels_;
  }

  std::vector<std::string> class_names() {
    const auto& m = label_texts().second;
    return m.class_names ? *m.class_names : m.ids;
  }

  std::filesystem::path dir_of(Stage s) const { return done_.at(s).dir; }

  bool skipped(Stage s) const { return std::filesystem::exists(dir_of(s) / "skipped.json"); }

  std::string write_skipped(const std::filesystem::path& out) {
    const std::string doc = nlohmann::json{{"skipped", "empty uncertain set"}}.dump() + "\n";
    write_file_atomic(out / "skipped.json", doc);
    return sha256_hex(doc);
  }

  PredictionTable load_predictions() {
    return prediction_table_from_json(nlohmann::json::parse(read_file(dir_of(Stage::predict) / "predictions.json")));
  }

  std::pair<UncertainSet, UncertainLabelSet> load_uncertain() {
    const auto j = nlohmann::json::parse(read_file(dir_of(Stage::select) / "uncertain.json"));
    UncertainSet u;
    u.instance_ids = j.at("instance_ids").get<std::vector<std::string>>();
    u.rows = j.at("rows").get<std::vector<std::size_t>>();
    u.tau_h = j.at("tau_h").get<double>();
    u.fraction = j.at("fraction").get<double>();
    UncertainLabelSet l{j.at("class_ids").get<std::vector<int>>(), j.at("k").get<std::size_t>()};
    return {std::move(u), std::move(l)};
  }

  RetrievalManifest load_fetched() { return load_manifest(dir_of(Stage::fetch) / "manifest.jsonl", 1.0); }

  // ------------------------------------------------------------ stages

  std::string produce(Stage s, const std::filesystem::path& out) {
    switch (s) {
      case Stage::predict: return do_predict(out);
      case Stage::select: return do_select(out);
      case Stage::plan: return do_plan(out);
      case Stage::fetch: return do_fetch(out);
      case Stage::embed_check: return do_embed_check(out);
      case Stage::refine: return do_refine(out);
      case Stage::train: return do_train(out);
      case Stage::infer: return do_infer(out);
      case Stage::audit: return do_audit(out);
    }
    return {};
  }

  std::string do_predict(const std::filesystem::path& out) {
    const auto& [images, manifest] = target();
    const auto& texts = label_texts().first;
    if (cfg_.k > texts.rows) {
      throw Error("k = " + std::to_string(cfg_.k) + " exceeds the number of classes (" + std::to_string(texts.rows) + ")");
    }
    const auto table = predict_zeroshot(images, texts, cfg_.temperature, cfg_.k, manifest.ids);
    const std::string doc = to_json(table).dump() + "\n";
    write_file_atomic(out / "predictions.json", doc);
    return sha256_hex(doc);
  }

  std::string do_select(const std::filesystem::path& out) {
    const auto table = load_predictions();
    const auto u = select_uncertain(table, cfg_.tau_h);
    const auto labels = uncertain_label_set(table, u, cfg_.k);
    const std::string doc = to_json(u, labels, table.num_classes()).dump(1) + "\n";
    write_file_atomic(out / "uncertain.json", doc);
    spdlog::info("select: {} of {} instances uncertain, {} classes", u.rows.size(), table.rows.size(),
                 labels.class_ids.size());
    return sha256_hex(doc);
  }

  std::string do_plan(const std::filesystem::path& out) {
    const auto [u, labels] = load_uncertain();
    if (u.rows.empty()) return write_skipped(out);
    const auto table = load_predictions();
    const auto names = class_names();
    std::optional<SideTextTable> desc, caps;
    if (!cfg_.paths.descriptions.empty()) {
      desc = side_text_from_json(nlohmann::json::parse(read_file(cfg_.paths.descriptions)));
    }
    if (!cfg_.paths.captions.empty()) {
      caps = side_text_from_json(nlohmann::json::parse(read_file(cfg_.paths.captions)));
    }
    std::vector<QueryPlan> plans;
    for (Strategy st : cfg_.strategies) {
      PlanInputs in;
      in.strategy = st;
      in.labels = &labels;
      in.class_names = &names;
      in.side = st == Strategy::desc ? (desc ? &*desc : nullptr) : st == Strategy::cap ? (caps ? &*caps : nullptr) : nullptr;
      in.uncertain = &u;
      in.predictions = &table;
      in.n = cfg_.n_per_query;
      plans.push_back(plan_queries(in));
    }
    const std::string doc = plan_to_jsonl(merge_plans(plans));
    write_file_atomic(out / "plan.jsonl", doc);
    return sha256_hex(doc);
  }

  std::unique_ptr<RetrievalProvider> make_provider() const {
    if (cfg_.provider.kind == "mock") return std::make_unique<MockDirectoryProvider>(cfg_.provider.mock_root);
    HttpProviderOptions opt;
    opt.endpoint_template = cfg_.provider.endpoint_template;
    opt.rate_ms = cfg_.provider.rate_ms;
    return std::make_unique<HttpProvider>(opt);
  }

  std::string do_fetch(const std::filesystem::path& out) {
    if (skipped(Stage::plan)) return write_skipped(out);
    const auto plan = plan_from_jsonl(read_file(dir_of(Stage::plan) / "plan.jsonl"));
    auto provider = make_provider();
    const auto m = execute_plan(plan, *provider, out, cfg_.provider.max_parallel);
    const auto counts = count_status(m);
    spdlog::info("fetch: {} ok, {} failed, {} shortfalls", counts.ok + counts.skipped, counts.failed,
                 m.shortfalls.size());
    if (counts.ok + counts.skipped == 0) throw Error("no images were retrieved");
    return sha256_hex(manifest_records_jsonl(m));
  }

  std::string do_embed_check(const std::filesystem::path& out) {
    if (skipped(Stage::fetch)) return write_skipped(out);
    const auto m = load_fetched();
    const auto [pool, pool_manifest] = read_embeddings(cfg_.paths.retrieved_embeddings);
    if (pool.dim != target().first.dim) {
      throw Error("retrieved embedding dim " + std::to_string(pool.dim) + " != target dim " +
                  std::to_string(target().first.dim));
    }
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < pool_manifest.ids.size(); ++i) by_id[pool_manifest.ids[i]] = i;
    std::vector<std::size_t> rows;
    IdManifest manifest;
    manifest.labels.emplace();
    manifest.class_names = class_names();
    std::vector<std::string> missing;
    for (const auto& r : m.records) {
      if (!r.usable()) continue;
      auto it = by_id.find(r.id);
      if (it == by_id.end()) it = by_id.find("sha256:" + r.sha256);
      if (it == by_id.end()) {
        missing.push_back(r.id);
        continue;
      }
      rows.push_back(it->second);
      manifest.ids.push_back(r.id);
      manifest.labels->push_back(r.class_id);
    }
    if (!missing.empty()) {
      throw Error(std::to_string(missing.size()) + " retrieved records have no embedding (first: " + missing.front() +
                  ")");
    }
    EmbeddingMatrix aligned = select_rows(pool, rows);
    require_unit_rows(aligned, "retrieved embeddings");
    aligned.normalized = true;
    write_embeddings(aligned, manifest, out / "retrieved.emb");
    return pipeline_detail::embeddings_digest(out / "retrieved.emb");
  }

  std::string do_refine(const std::filesystem::path& out) {
    if (skipped(Stage::embed_check)) return write_skipped(out);
    const auto [u, labels] = load_uncertain();
    const auto [retrieved, manifest] = read_embeddings(dir_of(Stage::embed_check) / "retrieved.emb");
    const auto& tgt = target().first;
    const std::size_t K = cfg_.refine.K ? cfg_.refine.K : labels.class_ids.size();
    EmbeddingMatrix fit_set = cfg_.refine.fit_on == "uncertain" ? select_rows(tgt, u.rows) : tgt;

    RefinementMask mask;
    nlohmann::json model_doc;
    switch (cfg_.refine.method) {
      case RefineMethod::movmf: {
        MovmfOptions opt;
        opt.components = K;
        opt.seed = cfg_.refine.seed;
        opt.max_iter = cfg_.refine.max_iter;
        opt.tol = cfg_.refine.tol;
        const auto model = fit_movmf(fit_set, opt);
        mask = refine_movmf(model, retrieved, cfg_.refine.tau_r, cfg_.refine.weighted_assignment);
        model_doc = to_json(model);
        break;
      }
      case RefineMethod::text_anchor:
        mask = refine_text_anchor(retrieved, label_texts().first, cfg_.refine.tau_r);
        model_doc = {{"method", "text_anchor"}};
        break;
      case RefineMethod::tangent_kmeans: {
        const auto model = fit_tangent_kmeans(fit_set, K, cfg_.refine.seed, cfg_.refine.max_iter);
        mask = refine_tangent_kmeans(model, retrieved, cfg_.refine.tau_r);
        model_doc = {{"method", "tangent_kmeans"}, {"base", model.base}, {"centroids", model.centroids}};
        break;
      }
    }

    std::vector<std::size_t> kept;
    std::map<int, std::size_t> per_class;
    for (std::size_t j = 0; j < retrieved.rows; ++j) {
      if (!mask.keep[j]) continue;
      const int c = (*manifest.labels)[j];
      if (cfg_.images_per_class_cap && per_class[c] >= cfg_.images_per_class_cap) continue;
      ++per_class[c];
      kept.push_back(j);
    }
    IdManifest refined_manifest;
    refined_manifest.labels.emplace();
    refined_manifest.class_names = manifest.class_names;
    for (std::size_t j : kept) {
      refined_manifest.ids.push_back(manifest.ids[j]);
      refined_manifest.labels->push_back((*manifest.labels)[j]);
    }
    EmbeddingMatrix refined = select_rows(retrieved, kept);
    refined.normalized = true;
    write_embeddings(refined, refined_manifest, out / "refined.emb");
    write_file_atomic(out / "mask.jsonl", mask_to_jsonl(mask, manifest.ids));
    write_file_atomic(out / "model.json", model_doc.dump() + "\n");
    const nlohmann::json stats = {{"method", to_string(cfg_.refine.method)},
                                  {"K", K},
                                  {"tau_r", cfg_.refine.tau_r},
                                  {"retrieved", retrieved.rows},
                                  {"kept", mask.kept()},
                                  {"after_cap", kept.size()}};
    write_file_atomic(out / "refine.json", stats.dump(1) + "\n");
    spdlog::info("refine: kept {} of {} ({} after cap)", mask.kept(), retrieved.rows, kept.size());
    return sha256_hex(pipeline_detail::embeddings_digest(out / "refined.emb") + file_digest_of(out / "mask.jsonl"));
  }

  static std::string file_digest_of(const std::filesystem::path& p) { return pipeline_detail::file_digest(p); }

  ProbeModel train_on(const EmbeddingMatrix& refined, const std::vector<int>& labels,
                      const std::vector<int>& class_ids) const {
    ProbeTrainConfig tc;
    tc.lambda = cfg_.probe.lambda;
    tc.lr = cfg_.probe.lr;
    tc.epochs = cfg_.probe.epochs;
    tc.seed = cfg_.probe.seed;
    return train_probe(refined, labels, class_ids, tc);
  }

  std::string do_train(const std::filesystem::path& out) {
    if (skipped(Stage::refine)) return write_skipped(out);
    const auto [u, labels] = load_uncertain();
    const auto [refined, manifest] = read_embeddings(dir_of(Stage::refine) / "refined.emb");
    if (refined.rows == 0) throw Error("refinement kept no retrieved samples (raise refine.tau_r?)");
    const auto model = train_on(refined, *manifest.labels, labels.class_ids);
    save_probe(model, out / "probe");
    return sha256_hex(pipeline_detail::embeddings_digest(out / "probe.emb") +
                      pipeline_detail::file_digest(out / "probe.json"));
  }

  std::string do_infer(const std::filesystem::path& out) {
    const auto table = load_predictions();
    std::vector<int> zero_shot, final_pred;
    for (const auto& r : table.rows) zero_shot.push_back(r.argmax);
    std::string trace;
    if (skipped(Stage::train)) {
      final_pred = zero_shot;
    } else {
      const auto probe = load_probe(dir_of(Stage::train) / "probe");
      GateOptions opt;
      opt.restrict_pre_entropy = cfg_.probe.restrict_pre_entropy;
      const auto result = gated_predict(table, probe, target().first, cfg_.tau_h, opt);
      final_pred = result.predictions;
      trace = gate_trace_to_jsonl(result.trace);
    }
    std::vector<std::string> ids;
    for (const auto& r : table.rows) ids.push_back(r.id);
    const std::string doc =
        nlohmann::json{{"ids", ids}, {"zero_shot", zero_shot}, {"final", final_pred}}.dump() + "\n";
    write_file_atomic(out / "final.json", doc);
    write_file_atomic(out / "gate_trace.jsonl", trace);
    return sha256_hex(doc + trace);
  }

  std::string do_audit(const std::filesystem::path& out) {
    const auto [u, labels] = load_uncertain();
    const auto final_doc = nlohmann::json::parse(read_file(dir_of(Stage::infer) / "final.json"));
    const auto ids = final_doc.at("ids").get<std::vector<std::string>>();
    const auto zero_shot = final_doc.at("zero_shot").get<std::vector<int>>();
    const auto final_pred = final_doc.at("final").get<std::vector<int>>();
    const auto& tm = target().second;

    nlohmann::json report = {{"buckets", nullptr}, {"leak", nullptr}, {"geometry", nullptr}};
    if (tm.labels) report["buckets"] = to_json(change_buckets(ids, zero_shot, final_pred, *tm.labels, u));

    const bool have_retrieved = !skipped(Stage::embed_check);
    if (have_retrieved && !cfg_.paths.test_images.empty()) {
      const auto hashes = hash_directory(cfg_.paths.test_images);
      auto leak = leak_report(load_fetched(), hashes, cfg_.audit.leak_threshold);
      if (tm.labels) leak.accuracy_drop = accuracy_drop(leak, u, final_pred);
      report["leak"] = to_json(leak);
    }
    if (have_retrieved) {
      const auto [retrieved, rm] = read_embeddings(dir_of(Stage::embed_check) / "retrieved.emb");
      const auto geometry = geometry_report(label_texts().first, target().first, retrieved,
                                            tm.labels ? &*tm.labels : nullptr, *rm.labels, cfg_.audit.emd_subsample,
                                            cfg_.audit.seed);
      report["geometry"] = to_json(geometry);
    }
    const std::string doc = report.dump(1) + "\n";
    write_file_atomic(out / "audit.json", doc);
    return sha256_hex(doc);
  }

  // Gated accuracy with the probe as trained minus gated accuracy with a
  // probe retrained after dropping every retrieved image that matched a
  // test image.
  std::optional<double> accuracy_drop(const LeakReport& leak, const UncertainSet&, const std::vector<int>& final_pred) {
    const auto& truth = *target().second.labels;
    if (leak.matches.empty()) return 0.0;
    if (skipped(Stage::train)) return std::nullopt;
    std::set<std::string> leaked;
    for (const auto& m : leak.matches) leaked.insert(m.retrieved_id);
    const auto [refined, manifest] = read_embeddings(dir_of(Stage::refine) / "refined.emb");
    std::vector<std::size_t> keep;
    std::vector<int> keep_labels;
    for (std::size_t j = 0; j < refined.rows; ++j) {
      if (leaked.count(manifest.ids[j])) continue;
      keep.push_back(j);
      keep_labels.push_back((*manifest.labels)[j]);
    }
    if (keep.size() == refined.rows) return 0.0;
    if (keep.empty()) return std::nullopt;
    const auto [u, labels] = load_uncertain();
    const auto probe = train_on(select_rows(refined, keep), keep_labels, labels.class_ids);
    GateOptions opt;
    opt.restrict_pre_entropy = cfg_.probe.restrict_pre_entropy;
    const auto clean = gated_predict(load_predictions(), probe, target().first, cfg_.tau_h, opt);
    return pipeline_detail::accuracy(final_pred, truth) - pipeline_detail::accuracy(clean.predictions, truth);
  }

  // ------------------------------------------------------------ summary

  nlohmann::json build_summary() {
    using pipeline_detail::accuracy;
    const auto [u, labels] = load_uncertain();
    const auto final_doc = nlohmann::json::parse(read_file(dir_of(Stage::infer) / "final.json"));
    const auto zero_shot = final_doc.at("zero_shot").get<std::vector<int>>();
    const auto final_pred = final_doc.at("final").get<std::vector<int>>();
    const auto audit = nlohmann::json::parse(read_file(dir_of(Stage::audit) / "audit.json"));
    const auto& tm = target().second;

    std::vector<std::size_t> certain_rows;
    {
      std::set<std::size_t> unc(u.rows.begin(), u.rows.end());
      for (std::size_t i = 0; i < zero_shot.size(); ++i) {
        if (!unc.count(i)) certain_rows.push_back(i);
      }
    }
    auto acc = [&](const std::vector<int>& pred, const std::vector<std::size_t>* rows) -> nlohmann::json {
      if (!tm.labels) return nullptr;
      if (rows && rows->empty()) return nullptr;
      return accuracy(pred, *tm.labels, rows);
    };

    nlohmann::json refinement = nullptr;
    if (!skipped(Stage::refine)) refinement = nlohmann::json::parse(read_file(dir_of(Stage::refine) / "refine.json"));

    nlohmann::json stages = nlohmann::json::object();
    nlohmann::json timings = nlohmann::json::object();
    for (Stage s : kAllStages) {
      stages[to_string(s)] = done_.at(s).key;
      timings[to_string(s)] = done_.at(s).ms;
    }
    return {{"instances", zero_shot.size()},
            {"uncertain",
             {{"count", u.rows.size()},
              {"fraction", u.fraction},
              {"classes", labels.class_ids.size()},
              {"zero_shot_accuracy", acc(zero_shot, &u.rows)},
              {"gated_accuracy", acc(final_pred, &u.rows)}}},
            {"certain",
             {{"count", certain_rows.size()},
              {"zero_shot_accuracy", acc(zero_shot, &certain_rows)},
              {"gated_accuracy", acc(final_pred, &certain_rows)}}},
            {"zero_shot_accuracy", acc(zero_shot, nullptr)},
            {"gated_accuracy", acc(final_pred, nullptr)},
            {"short_circuit", u.rows.empty()},
            {"refinement", refinement},
            {"buckets", audit.at("buckets")},
            {"leak", audit.at("leak")},
            {"geometry", audit.at("geometry")},
            {"stages", stages},
            {"timings_ms", timings}};
  }

  PipelineConfig cfg_;
  std::map<Stage, StageRecord> done_;
  std::map<std::string, std::string> input_digests_;
  std::optional<std::pair<EmbeddingMatrix, IdManifest>> target_, labels_;
  std::optional<Stage> current_target_;
};

// ---------------------------------------------------------------- sweeps

inline const std::vector<std::string>& sweep_params() {
  static const std::vector<std::string> p = {"tau_r", "tau_h", "images_per_class_cap", "k", "temperature"};
  return p;
}

/// Runs the full pipeline once per value of `param`, sharing the work dir's
/// artifact cache. Each summary lands in <work_dir>/sweeps/<param>/<value>.json.
inline nlohmann::json run_sweep(const nlohmann::json& base_doc, const std::filesystem::path& base_dir,
                                const std::string& param, const std::vector<std::string>& values) {
  if (std::find(sweep_params().begin(), sweep_params().end(), param) == sweep_params().end()) {
    throw ConfigError({"sweep: unsupported parameter \"" + param + "\""});
  }
  if (values.empty()) throw ConfigError({"sweep: no values"});
  nlohmann::json results = nlohmann::json::array();
  std::filesystem::path work_dir;
  for (const auto& v : values) {
    nlohmann::json doc = base_doc;
    try {
      if (param == "tau_r") {
        doc["refine"]["tau_r"] = std::stod(v);
      } else if (param == "images_per_class_cap" || param == "k") {
        const long long n = std::stoll(v);
        if (n < 0) throw std::invalid_argument(v);
        doc[param] = n;
      } else {
        doc[param] = std::stod(v);
      }
    } catch (const std::logic_error&) {
      throw ConfigError({"sweep: \"" + v + "\" is not a valid value for " + param});
    }
    Pipeline p(parse_config(doc, base_dir));
    work_dir = p.config().paths.work_dir;
    auto summary = p.full_run();
    write_file_atomic(work_dir / "sweeps" / param / (v + ".json"), summary.dump(2) + "\n");
    results.push_back({{"param", param}, {"value", v}, {"summary", summary}});
  }
  write_file_atomic(work_dir / "sweeps" / (param + ".json"), results.dump(2) + "\n");
  return results;
}

}  // namespace zsr
