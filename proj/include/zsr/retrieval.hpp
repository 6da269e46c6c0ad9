#pragma once

// Executes a query plan against a retrieval provider and records every
// fetched image in a JSON Lines manifest (one record per line plus a trailing
// {"summary": ...} object).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "zsr/digest.hpp"
#include "zsr/error.hpp"
#include "zsr/fs.hpp"
#include "zsr/query_planner.hpp"

namespace zsr {

inline constexpr std::size_t kDefaultMaxParallel = 8;
inline constexpr int kDefaultRateMs = 500;

struct Candidate {
  std::size_t rank = 0;
  std::string source_url;
};

/// A search backend: ranked candidates for a query, and the bytes behind one.
class RetrievalProvider {
 public:
  virtual ~RetrievalProvider() = default;
  virtual std::string name() const = 0;
  /// At most `n` candidates, ranks 0, 1, 2, ... in result order.
  virtual std::vector<Candidate> search(const std::string& query, std::size_t n) = 0;
  virtual std::string fetch(const Candidate& candidate) = 0;
};

enum class FetchStatus { ok, failed, skipped };

inline std::string to_string(FetchStatus s) {
  switch (s) {
    case FetchStatus::ok: return "ok";
    case FetchStatus::failed: return "failed";
    case FetchStatus::skipped: return "skipped";
  }
  return "?";
}

inline FetchStatus parse_fetch_status(std::string_view s) {
  if (s == "ok") return FetchStatus::ok;
  if (s == "failed") return FetchStatus::failed;
  if (s == "skipped") return FetchStatus::skipped;
  throw Error("unknown fetch_status \"" + std::string(s) + "\"");
}

struct ImageRecord {
  std::string id;  // stable record key, equal to local_path
  std::string query;
  int class_id = 0;
  Strategy strategy = Strategy::cls;
  std::string source_instance_id;
  std::size_t rank = 0;
  std::string source_url;
  std::string local_path;  // relative to the manifest directory
  std::string sha256;
  FetchStatus fetch_status = FetchStatus::failed;
  std::string error;

  bool usable() const { return fetch_status != FetchStatus::failed; }
};

struct QueryShortfall {
  std::string query;
  int class_id = 0;
  std::size_t returned = 0;
  std::size_t requested = 0;
};

struct RetrievalManifest {
  std::vector<ImageRecord> records;
  std::string plan_digest;
  std::string provider_name;
  std::string timestamp;
  std::size_t n_per_query = 0;
  std::vector<QueryShortfall> shortfalls;
  std::vector<std::pair<std::string, std::string>> query_failures;  // (query, error)
  std::filesystem::path root;  // directory local paths resolve against

  std::filesystem::path resolve(const ImageRecord& r) const { return root / r.local_path; }
};

inline std::string plan_digest(const QueryPlan& plan) { return sha256_hex(plan_to_jsonl(plan)); }

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline nlohmann::json to_json(const ImageRecord& r) {
  return {{"id", r.id},
          {"query", r.query},
          {"class_id", r.class_id},
          {"strategy", to_string(r.strategy)},
          {"source_instance_id", r.source_instance_id.empty() ? nlohmann::json(nullptr)
                                                              : nlohmann::json(r.source_instance_id)},
          {"rank", r.rank},
          {"source_url", r.source_url},
          {"local_path", r.local_path},
          {"sha256", r.sha256},
          {"fetch_status", to_string(r.fetch_status)},
          {"error", r.error.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.error)}};
}

inline ImageRecord image_record_from_json(const nlohmann::json& j) {
  ImageRecord r;
  r.id = j.at("id").get<std::string>();
  r.query = j.at("query").get<std::string>();
  r.class_id = j.at("class_id").get<int>();
  r.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("source_instance_id") && !j["source_instance_id"].is_null()) {
    r.source_instance_id = j["source_instance_id"].get<std::string>();
  }
  r.rank = j.at("rank").get<std::size_t>();
  r.source_url = j.at("source_url").get<std::string>();
  r.local_path = j.at("local_path").get<std::string>();
  r.sha256 = j.at("sha256").get<std::string>();
  r.fetch_status = parse_fetch_status(j.at("fetch_status").get<std::string>());
  if (j.contains("error") && !j["error"].is_null()) r.error = j["error"].get<std::string>();
  return r;
}

struct ManifestCounts {
  std::size_t ok = 0, skipped = 0, failed = 0;
};

inline ManifestCounts count_status(const RetrievalManifest& m) {
  ManifestCounts c;
  for (const auto& r : m.records) {
    switch (r.fetch_status) {
      case FetchStatus::ok: ++c.ok; break;
      case FetchStatus::skipped: ++c.skipped; break;
      case FetchStatus::failed: ++c.failed; break;
    }
  }
  return c;
}

/// Only the record lines; this is what downstream content digests cover.
inline std::string manifest_records_jsonl(const RetrievalManifest& m) {
  std::string out;
  for (const auto& r : m.records) out += to_json(r).dump() + "\n";
  return out;
}

inline std::string manifest_to_jsonl(const RetrievalManifest& m) {
  nlohmann::json shortfalls = nlohmann::json::array();
  for (const auto& s : m.shortfalls) {
    shortfalls.push_back({{"query", s.query}, {"class_id", s.class_id}, {"returned", s.returned},
                          {"requested", s.requested}});
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& [q, e] : m.query_failures) failures.push_back({{"query", q}, {"error", e}});
  const auto c = count_status(m);
  nlohmann::json summary = {{"plan_digest", m.plan_digest},
                            {"provider_name", m.provider_name},
                            {"timestamp", m.timestamp},
                            {"n_per_query", m.n_per_query},
                            {"records", m.records.size()},
                            {"ok", c.ok},
                            {"skipped", c.skipped},
                            {"failed", c.failed},
                            {"shortfalls", shortfalls},
                            {"query_failures", failures}};
  return manifest_records_jsonl(m) + nlohmann::json{{"summary", summary}}.dump() + "\n";
}

/// Parses manifest text. Structure only; no filesystem checks.
inline RetrievalManifest parse_manifest(std::string_view text) {
  RetrievalManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_query(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("summary")) {
        const auto& s = j["summary"];
        m.plan_digest = s.at("plan_digest").get<std::string>();
        m.provider_name = s.at("provider_name").get<std::string>();
        m.timestamp = s.at("timestamp").get<std::string>();
        m.n_per_query = s.at("n_per_query").get<std::size_t>();
        for (const auto& sf : s.value("shortfalls", nlohmann::json::array())) {
          m.shortfalls.push_back({sf.at("query").get<std::string>(), sf.at("class_id").get<int>(),
                                  sf.at("returned").get<std::size_t>(),
                                  sf.at("requested").get<std::size_t>()});
        }
        for (const auto& f : s.value("query_failures", nlohmann::json::array())) {
          m.query_failures.emplace_back(f.at("query").get<std::string>(), f.at("error").get<std::string>());
        }
      } else {
        m.records.push_back(image_record_from_json(j));
      }
    } catch (const std::exception& ex) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

/// Reads a manifest, demoting records whose file is missing or whose digest
/// does not match. Existence is checked for every usable record; digests for
/// an evenly spaced `sample_rate` fraction of them.
inline RetrievalManifest load_manifest(const std::filesystem::path& path, double sample_rate = 0.01) {
  RetrievalManifest m = parse_manifest(read_file(path));
  m.root = path.parent_path();
  std::size_t usable_index = 0;
  for (auto& r : m.records) {
    if (!r.usable()) continue;
    const bool sampled = std::floor((usable_index + 1) * sample_rate) > std::floor(usable_index * sample_rate);
    ++usable_index;
    const auto file = m.resolve(r);
    if (!std::filesystem::exists(file)) {
      spdlog::warn("manifest record {}: file {} is missing; marked failed", r.id, file.string());
      r.fetch_status = FetchStatus::failed;
      r.error = "missing file";
      continue;
    }
    if (sampled && sha256_hex(read_file(file)) != r.sha256) {
      spdlog::warn("manifest record {}: digest mismatch; marked failed", r.id);
      r.fetch_status = FetchStatus::failed;
      r.error = "digest mismatch";
    }
  }
  return m;
}

namespace detail {

inline std::string image_extension(const std::string& url) {
  static const char* known[] = {".jpg", ".jpeg", ".png", ".gif", ".webp", ".bmp", ".ppm", ".pgm"};
  std::string path = url.substr(0, url.find_first_of("?#"));
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return ".img";
  std::string ext = path.substr(dot);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const char* k : known) {
    if (ext == k) return ext;
  }
  return ".img";
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
}

}  // namespace detail

/// Fetches every plan entry into `dest`/images and writes `dest`/manifest.jsonl.
/// Records already present from a previous run with a matching digest are kept
/// as `skipped` without refetching.
inline RetrievalManifest execute_plan(const QueryPlan& plan, RetrievalProvider& provider,
                                      const std::filesystem::path& dest,
                                      std::size_t max_parallel = kDefaultMaxParallel) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dest / "images", ec);
  if (ec) throw Error("destination " + dest.string() + " is not writable: " + ec.message());

  using Key = std::tuple<std::string, int, std::size_t, std::string>;
  std::map<Key, std::string> previous;
  if (fs::exists(dest / "manifest.jsonl")) {
    try {
      for (const auto& r : parse_manifest(read_file(dest / "manifest.jsonl")).records) {
        if (r.usable()) previous[{r.query, r.class_id, r.rank, r.source_url}] = r.sha256;
      }
    } catch (const Error& e) {
      spdlog::warn("ignoring unreadable previous manifest: {}", e.what());
    }
  }

  RetrievalManifest m;
  m.plan_digest = plan_digest(plan);
  m.provider_name = provider.name();
  m.n_per_query = plan.n_per_query;
  m.root = dest;

  // Search phase.
  std::vector<std::vector<Candidate>> results(plan.entries.size());
  std::vector<std::string> search_errors(plan.entries.size());
  detail::parallel_for(plan.entries.size(), max_parallel, [&](std::size_t i) {
    try {
      auto c = provider.search(plan.entries[i].query, plan.n_per_query);
      if (c.size() > plan.n_per_query) c.resize(plan.n_per_query);
      for (std::size_t r = 0; r < c.size(); ++r) c[r].rank = r;
      results[i] = std::move(c);
    } catch (const std::exception& e) {
      search_errors[i] = e.what();
    }
  });

  // Lay out records in plan order, then rank.
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    const auto& e = plan.entries[i];
    if (!search_errors[i].empty()) {
      spdlog::warn("query \"{}\" failed: {}", e.query, search_errors[i]);
      m.query_failures.emplace_back(e.query, search_errors[i]);
      continue;
    }
    if (results[i].size() < plan.n_per_query) {
      spdlog::info("query \"{}\": provider returned {} of {}", e.query, results[i].size(), plan.n_per_query);
    }
    for (const auto& c : results[i]) {
      ImageRecord r;
      std::ostringstream name;
      name << "images/" << std::setw(6) << std::setfill('0') << i << '_' << std::setw(4) << c.rank
           << detail::image_extension(c.source_url);
      r.id = r.local_path = name.str();
      r.query = e.query;
      r.class_id = e.class_id;
      r.strategy = e.strategy;
      r.source_instance_id = e.source_instance_id;
      r.rank = c.rank;
      r.source_url = c.source_url;
      m.records.push_back(std::move(r));
    }
  }

  // Fetch phase.
  detail::parallel_for(m.records.size(), max_parallel, [&](std::size_t i) {
    auto& r = m.records[i];
    const auto file = dest / r.local_path;
    auto prev = previous.find({r.query, r.class_id, r.rank, r.source_url});
    if (prev != previous.end() && fs::exists(file)) {
      try {
        if (sha256_hex(read_file(file)) == prev->second) {
          r.sha256 = prev->second;
          r.fetch_status = FetchStatus::skipped;
          return;
        }
      } catch (const Error&) {
      }
    }
    try {
      const std::string bytes = provider.fetch({r.rank, r.source_url});
      write_file_atomic(file, bytes);
      r.sha256 = sha256_hex(bytes);
      r.fetch_status = FetchStatus::ok;
    } catch (const std::exception& e) {
      r.fetch_status = FetchStatus::failed;
      r.error = e.what();
    }
  });

  // Shortfall = fewer usable images than requested.
  std::size_t start = 0;
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    if (!search_errors[i].empty()) continue;
    std::size_t usable = 0;
    for (std::size_t j = start; j < start + results[i].size(); ++j) usable += m.records[j].usable();
    start += results[i].size();
    if (usable < plan.n_per_query) {
      m.shortfalls.push_back({plan.entries[i].query, plan.entries[i].class_id, usable, plan.n_per_query});
    }
  }

  m.timestamp = utc_timestamp();
  write_file_atomic(dest / "manifest.jsonl", manifest_to_jsonl(m));
  return m;
}

/// Serves files from `root`/<first 16 hex digits of sha256(query)>/, ranked
/// by file name.
class MockDirectoryProvider : public RetrievalProvider {
 public:
  explicit MockDirectoryProvider(std::filesystem::path root) : root_(std::move(root)) {}

  static std::string query_key(const std::string& query) { return sha256_hex(query).substr(0, 16); }

  std::string name() const override { return "mock"; }

  std::vector<Candidate> search(const std::string& query, std::size_t n) override {
    const auto dir = root_ / query_key(query);
    std::vector<std::string> files;
    if (std::filesystem::is_directory(dir)) {
      for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path().filename().string());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.size() > n) files.resize(n);
    std::vector<Candidate> out;
    for (std::size_t i = 0; i < files.size(); ++i) {
      out.push_back({i, "mock://" + query_key(query) + "/" + files[i]});
    }
    return out;
  }

  std::string fetch(const Candidate& c) override {
    constexpr std::string_view scheme = "mock://";
    if (!c.source_url.starts_with(scheme)) throw Error("not a mock url: " + c.source_url);
    return read_file(root_ / c.source_url.substr(scheme.size()));
  }

 private:
  std::filesystem::path root_;
};

}  // namespace zsr
