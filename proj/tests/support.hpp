#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "zsr/embedding_store.hpp"
#include "zsr/vmf.hpp"

namespace zsr::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("zsr-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline EmbeddingMatrix random_unit(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<float> data;
  for (std::size_t i = 0; i < rows; ++i) {
    const auto v = sample_uniform_sphere(dim, rng);
    data.insert(data.end(), v.begin(), v.end());
  }
  EmbeddingMatrix m(rows, dim, std::move(data));
  m.normalized = true;
  return m;
}

inline EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<float> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return EmbeddingMatrix(rows.size(), rows.empty() ? 1 : rows.front().size(), std::move(data));
}

}  // namespace zsr::testing
