#pragma once

// HTTP search provider. The endpoint template may contain {query} and {n};
// the response must be JSON: either an array of URL strings or an object
// with a "results" array of strings or {"url": ...} objects. Requests to the
// same host are spaced at least `rate_ms` apart across all worker threads.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <map>
#include <mutex>
#include <regex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "zsr/retrieval.hpp"

namespace zsr {

struct HttpProviderOptions {
  std::string endpoint_template;
  int rate_ms = kDefaultRateMs;
  int retries = 3;
  int timeout_s = 20;
  int backoff_ms = 250;
};

inline std::string url_encode(std::string_view s) {
  static constexpr char hex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    }
  }
  return out;
}

class HttpProvider : public RetrievalProvider {
 public:
  explicit HttpProvider(HttpProviderOptions options) : options_(std::move(options)) {
    if (options_.endpoint_template.empty()) throw Error("http provider requires an endpoint template");
  }

  std::string name() const override { return "http"; }

  std::string search_url(const std::string& query, std::size_t n) const {
    std::string url = options_.endpoint_template;
    replace_all(url, "{query}", url_encode(query));
    replace_all(url, "{n}", std::to_string(n));
    return url;
  }

  std::vector<Candidate> search(const std::string& query, std::size_t n) override {
    const auto body = get(search_url(query, n));
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("search response is not JSON: ") + e.what());
    }
    const nlohmann::json& list = j.is_object() ? j.at("results") : j;
    std::vector<Candidate> out;
    for (const auto& item : list) {
      if (out.size() >= n) break;
      std::string url = item.is_string() ? item.get<std::string>() : item.at("url").get<std::string>();
      out.push_back({out.size(), std::move(url)});
    }
    return out;
  }

  std::string fetch(const Candidate& c) override { return get(c.source_url); }

 private:
  static void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
      s.replace(pos, from.size(), to);
    }
  }

  void wait_turn(const std::string& host) {
    std::chrono::steady_clock::time_point slot;
    {
      std::lock_guard lock(mutex_);
      auto now = std::chrono::steady_clock::now();
      auto& next = next_slot_[host];
      slot = std::max(now, next);
      next = slot + std::chrono::milliseconds(options_.rate_ms);
    }
    std::this_thread::sleep_until(slot);
  }

  std::string get(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw Error("unsupported url: " + url);
    const std::string origin = m[1];
    const std::string path = m[2].matched ? std::string(m[2]) : "/";
    std::string last_error;
    for (int attempt = 0; attempt < std::max(1, options_.retries); ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(options_.backoff_ms << (attempt - 1)));
      wait_turn(origin);
      httplib::Client client(origin);
      client.set_follow_location(true);
      client.set_connection_timeout(options_.timeout_s);
      client.set_read_timeout(options_.timeout_s);
      auto res = client.Get(path);
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) return res->body;
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status >= 400 && res->status < 500 && res->status != 429) break;
    }
    throw Error("GET " + url + " failed: " + last_error);
  }

  HttpProviderOptions options_;
  std::mutex mutex_;
  std::map<std::string, std::chrono::steady_clock::time_point> next_slot_;
};

}  // namespace zsr
