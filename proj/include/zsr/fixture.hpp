#pragma once

// Hermetic synthetic dataset for the pipeline: class means on the sphere,
// deliberately confusable label-text embeddings, a mock retrieval tree served
// by MockDirectoryProvider, and a digest-keyed pool of retrieved-image
// embeddings that stands in for an image encoder.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zsr/digest.hpp"
#include "zsr/embedding_store.hpp"
#include "zsr/fs.hpp"
#include "zsr/image.hpp"
#include "zsr/query_planner.hpp"
#include "zsr/retrieval.hpp"
#include "zsr/vmf.hpp"
#include "zsr/zeroshot.hpp"

namespace zsr {

struct FixtureOptions {
  std::size_t classes = 8;
  std::size_t dim = 32;
  std::size_t per_class = 40;
  double target_kappa = 60.0;
  double retrieved_kappa = 60.0;
  // Each label text leans toward a partner class by this much.
  double text_confusion = 0.85;
  double text_noise = 0.15;
  std::size_t images_per_query = 24;
  std::size_t images_per_caption = 3;
  std::size_t descriptions_per_class = 2;
  double noise_fraction = 0.2;
  std::size_t leaked_images = 3;
  std::uint64_t seed = 7;
};

struct FixtureSummary {
  std::filesystem::path config;
  std::size_t target_rows = 0;
  std::size_t pool_rows = 0;
  std::size_t query_dirs = 0;
};

namespace fixture_detail {

inline const std::vector<std::string>& base_names() {
  static const std::vector<std::string> names = {
      "daisy",     "tulip",   "orchid",   "lotus",     "poppy",     "iris",      "lily",    "aster",
      "marigold",  "peony",   "camellia", "magnolia",  "dahlia",    "zinnia",    "freesia", "gardenia"};
  return names;
}

inline std::string class_name(std::size_t c) {
  const auto& names = base_names();
  if (c < names.size()) return names[c];
  return names[c % names.size()] + " " + std::to_string(c / names.size());
}

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

inline std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline std::string noise_png(std::mt19937_64& rng, std::size_t side = 8) {
  RgbImage img;
  img.width = img.height = side;
  img.pixels.resize(side * side * 3);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(byte(rng));
  return encode_png(img);
}

}  // namespace fixture_detail

/// Writes the fixture into `dir` and returns the path of its pipeline config.
inline FixtureSummary write_fixture(const std::filesystem::path& dir, const FixtureOptions& opt = {}) {
  namespace fs = std::filesystem;
  using namespace fixture_detail;
  if (opt.classes < 2 || opt.dim < 3 || opt.per_class < 1) throw Error("fixture: degenerate options");
  fs::create_directories(dir);
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t C = opt.classes, d = opt.dim;

  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < C; ++c) means.push_back(sample_uniform_sphere(d, rng));

  std::vector<std::string> names;
  for (std::size_t c = 0; c < C; ++c) names.push_back(class_name(c));

  // Label texts: partner = next class, so every class has a confusable twin.
  std::vector<float> text_data;
  for (std::size_t c = 0; c < C; ++c) {
    const auto& partner = means[(c + 1) % C];
    std::vector<double> t(d);
    for (std::size_t i = 0; i < d; ++i) {
      t[i] = means[c][i] + opt.text_confusion * partner[i] + opt.text_noise * normal(rng) / std::sqrt(double(d));
    }
    const auto f = to_float(normalized(t));
    text_data.insert(text_data.end(), f.begin(), f.end());
  }
  EmbeddingMatrix texts(C, d, std::move(text_data));
  texts.normalized = true;
  IdManifest text_manifest;
  text_manifest.ids = names;
  text_manifest.class_names = names;
  write_embeddings(texts, text_manifest, dir / "labels.emb");

  // Target set, one PNG per instance for the leak audit.
  fs::create_directories(dir / "test_images");
  std::vector<float> target_data;
  IdManifest target_manifest;
  target_manifest.labels.emplace();
  target_manifest.class_names = names;
  std::vector<std::string> target_png;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j < opt.per_class; ++j) {
      const auto x = to_float(sample_vmf(std::span<const double>(means[c]), opt.target_kappa, rng));
      target_data.insert(target_data.end(), x.begin(), x.end());
      char id[32];
      std::snprintf(id, sizeof id, "img_%05zu", c * opt.per_class + j);
      target_manifest.ids.push_back(id);
      target_manifest.labels->push_back(static_cast<int>(c));
      target_png.push_back(noise_png(rng, 12));
      write_file_atomic(dir / "test_images" / (std::string(id) + ".png"), target_png.back());
    }
  }
  EmbeddingMatrix target(target_manifest.ids.size(), d, std::move(target_data));
  target.normalized = true;
  write_embeddings(target, target_manifest, dir / "target.emb");

  // Side texts.
  nlohmann::json desc_entries = nlohmann::json::object();
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::string> ds;
    for (std::size_t k = 0; k < opt.descriptions_per_class; ++k) {
      ds.push_back("has petal shape " + std::to_string(c) + "-" + std::to_string(k));
    }
    desc_entries[std::to_string(c)] = ds;
  }
  write_file_atomic(dir / "descriptions.json",
                    nlohmann::json{{"kind", "description"}, {"entries", desc_entries}}.dump(1) + "\n");

  const auto zeroshot = predict_zeroshot(target, texts, kDefaultTemperature, 1, target_manifest.ids);
  nlohmann::json cap_entries = nlohmann::json::object();
  for (const auto& id : target_manifest.ids) cap_entries[id] = {"a photo taken outdoors " + id};
  write_file_atomic(dir / "captions.json",
                    nlohmann::json{{"kind", "caption"}, {"entries", cap_entries}}.dump(1) + "\n");

  // Mock retrieval tree plus the embedding pool keyed by file digest.
  std::vector<float> pool_data;
  IdManifest pool_manifest;
  std::size_t query_dirs = 0;
  auto populate = [&](const std::string& query, std::size_t cls, std::size_t count) {
    const auto qdir = dir / "mock" / MockDirectoryProvider::query_key(normalize_query(query));
    if (fs::exists(qdir)) return;
    ++query_dirs;
    for (std::size_t r = 0; r < count; ++r) {
      const std::string bytes = noise_png(rng);
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.png", r);
      write_file_atomic(qdir / name, bytes);
      const bool noise = unif(rng) < opt.noise_fraction;
      const auto x = noise ? sample_uniform_sphere(d, rng)
                           : sample_vmf(std::span<const double>(means[cls]), opt.retrieved_kappa, rng);
      const auto f = to_float(x);
      pool_data.insert(pool_data.end(), f.begin(), f.end());
      pool_manifest.ids.push_back("sha256:" + sha256_hex(bytes));
    }
  };
  for (std::size_t c = 0; c < C; ++c) {
    populate(names[c], c, opt.images_per_query);
    for (const auto& desc : desc_entries[std::to_string(c)]) {
      populate(names[c] + " which " + desc.get<std::string>(), c, opt.images_per_query);
    }
  }
  for (std::size_t i = 0; i < zeroshot.rows.size(); ++i) {
    const auto& row = zeroshot.rows[i];
    const auto& caption = cap_entries[row.id][0].get<std::string>();
    populate(names[static_cast<std::size_t>(row.argmax)] + " " + caption, static_cast<std::size_t>(row.argmax),
             opt.images_per_caption);
  }

  // Copies of a few test images under class queries; their embeddings are the
  // target rows they duplicate.
  for (std::size_t l = 0; l < std::min(opt.leaked_images, target.rows); ++l) {
    const std::size_t src = (l * 7919) % target.rows;
    const auto qdir = dir / "mock" / MockDirectoryProvider::query_key(normalize_query(names[l % C]));
    write_file_atomic(qdir / ("leak_" + std::to_string(l) + ".png"), target_png[src]);
    const auto row = target.row(src);
    pool_data.insert(pool_data.end(), row.begin(), row.end());
    pool_manifest.ids.push_back("sha256:" + sha256_hex(target_png[src]));
  }
  EmbeddingMatrix pool(pool_manifest.ids.size(), d, std::move(pool_data));
  pool.normalized = true;
  write_embeddings(pool, pool_manifest, dir / "retrieved_pool.emb");

  nlohmann::json config = {
      {"version", 1},
      {"paths",
       {{"target_embeddings", "target.emb"},
        {"label_embeddings", "labels.emb"},
        {"descriptions", "descriptions.json"},
        {"captions", "captions.json"},
        {"retrieved_embeddings", "retrieved_pool.emb"},
        {"test_images", "test_images"},
        {"work_dir", "work"}}},
      {"temperature", kDefaultTemperature},
      {"tau_h", 0.2},
      {"k", 3},
      {"strategies", {"cls"}},
      {"n_per_query", opt.images_per_query + 2},
      {"images_per_class_cap", 0},
      {"refine", {{"method", "movmf"}, {"K", 0}, {"tau_r", 0.45}, {"seed", opt.seed}}},
      {"probe", {{"lambda", 1e-4}, {"lr", 1.0}, {"epochs", 500}, {"seed", opt.seed}}},
      {"provider", {{"kind", "mock"}, {"mock_root", "mock"}}},
      {"audit", {{"leak_threshold", 3}, {"emd_subsample", 256}, {"seed", opt.seed}}}};
  write_file_atomic(dir / "config.json", config.dump(2) + "\n");

  return {dir / "config.json", target.rows, pool.rows, query_dirs};
}

}  // namespace zsr
