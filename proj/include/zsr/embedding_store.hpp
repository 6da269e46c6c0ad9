#pragma once

// EMB1 embedding matrices and their JSON id manifests.
//
// Layout of an EMB1 file:
//   0..3   magic "EMB1"
//   4..7   row count, u32 little-endian
//   8..11  dim, u32 little-endian
//   12     flags (bit0 = rows are L2-normalized)
//   13..15 reserved, zero
//   16..   rows*dim f32 little-endian, row-major
// The manifest lives next to it as "<path>.manifest.json".

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "zsr/error.hpp"
#include "zsr/fs.hpp"

namespace zsr {

static_assert(std::endian::native == std::endian::little,
              "EMB1 I/O assumes a little-endian host");

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 1;
  std::vector<float> data;
  bool normalized = false;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t r, std::size_t d, std::vector<float> values, bool unit = false)
      : rows(r), dim(d), data(std::move(values)), normalized(unit) {
    if (dim == 0) throw Error("embedding dim must be >= 1");
    if (data.size() != rows * dim) {
      throw Error("embedding data length " + std::to_string(data.size()) +
                  " does not equal rows*dim " + std::to_string(rows * dim));
    }
  }

  static EmbeddingMatrix zeros(std::size_t r, std::size_t d) {
    return EmbeddingMatrix(r, d, std::vector<float>(r * d, 0.0f));
  }

  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }

  bool operator==(const EmbeddingMatrix&) const = default;
};

struct IdManifest {
  std::vector<std::string> ids;
  std::optional<std::vector<int>> labels;
  std::optional<std::vector<std::string>> class_names;

  bool operator==(const IdManifest&) const = default;
};

inline double row_norm(std::span<const float> r) {
  double s = 0.0;
  for (float v : r) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Throws unless every row has unit L2 norm within `tol`.
inline void require_unit_rows(const EmbeddingMatrix& m, const char* what, double tol = 1e-3) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    if (std::abs(row_norm(m.row(i)) - 1.0) > tol) {
      throw Error(std::string(what) + ": row " + std::to_string(i) + " is not unit-norm");
    }
  }
}

inline void validate_manifest(const IdManifest& manifest, std::size_t rows) {
  if (manifest.ids.size() != rows) {
    throw Error("manifest/matrix length mismatch: " + std::to_string(manifest.ids.size()) +
                " ids for " + std::to_string(rows) + " rows");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : manifest.ids) {
    if (!seen.insert(id).second) throw Error("duplicate id \"" + id + "\"");
  }
  if (manifest.labels) {
    if (manifest.labels->size() != rows) throw Error("manifest labels length mismatch");
    const std::size_t n_classes = manifest.class_names ? manifest.class_names->size() : 0;
    for (int label : *manifest.labels) {
      if (label < 0 || static_cast<std::size_t>(label) >= n_classes) {
        throw Error("label " + std::to_string(label) + " does not index class_names");
      }
    }
  }
}

inline std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest.json");
}

inline nlohmann::json manifest_to_json(const IdManifest& manifest) {
  nlohmann::json j;
  j["ids"] = manifest.ids;
  if (manifest.labels) j["labels"] = *manifest.labels;
  if (manifest.class_names) j["class_names"] = *manifest.class_names;
  return j;
}

inline IdManifest manifest_from_json(const nlohmann::json& j) {
  IdManifest m;
  if (!j.is_object() || !j.contains("ids")) throw Error("manifest: missing \"ids\"");
  m.ids = j.at("ids").get<std::vector<std::string>>();
  if (j.contains("labels")) m.labels = j.at("labels").get<std::vector<int>>();
  if (j.contains("class_names")) m.class_names = j.at("class_names").get<std::vector<std::string>>();
  return m;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Serializes a matrix into EMB1 bytes.
inline std::string encode_emb1(const EmbeddingMatrix& matrix) {
  if (matrix.rows > 0xffffffffu || matrix.dim > 0xffffffffu) throw Error("matrix too large for EMB1");
  std::string out = "EMB1";
  detail::put_u32(out, static_cast<std::uint32_t>(matrix.rows));
  detail::put_u32(out, static_cast<std::uint32_t>(matrix.dim));
  out.push_back(static_cast<char>(matrix.normalized ? 1 : 0));
  out.append(3, '\0');
  const std::size_t payload = matrix.data.size() * sizeof(float);
  const std::size_t header = out.size();
  out.resize(header + payload);
  if (payload > 0) std::memcpy(out.data() + header, matrix.data.data(), payload);
  return out;
}

inline EmbeddingMatrix decode_emb1(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "EMB1") throw Error("unrecognized format");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t rows = detail::get_u32(p + 4);
  const std::size_t dim = detail::get_u32(p + 8);
  const unsigned char flags = p[12];
  if (dim == 0) throw Error("invalid EMB1 header: dim is zero");
  if ((flags & ~1u) != 0 || p[13] != 0 || p[14] != 0 || p[15] != 0) {
    throw Error("invalid EMB1 header: unknown flags or nonzero reserved bytes");
  }
  const std::size_t expected = rows * dim * sizeof(float);
  const std::size_t payload = bytes.size() - 16;
  if (payload < expected) {
    throw Error("truncated payload: expected " + std::to_string(expected) + " bytes, found " +
                std::to_string(payload));
  }
  if (payload > expected) throw Error("trailing bytes after EMB1 payload");
  std::vector<float> data(rows * dim);
  if (expected > 0) std::memcpy(data.data(), bytes.data() + 16, expected);
  return EmbeddingMatrix(rows, dim, std::move(data), (flags & 1u) != 0);
}

/// Writes the EMB1 file and its sidecar manifest. Output bytes depend only on
/// the inputs.
inline void write_embeddings(const EmbeddingMatrix& matrix, const IdManifest& manifest,
                             const std::filesystem::path& path) {
  validate_manifest(manifest, matrix.rows);
  write_file_atomic(path, encode_emb1(matrix));
  write_file_atomic(manifest_path(path), manifest_to_json(manifest).dump(1) + "\n");
}

inline std::pair<EmbeddingMatrix, IdManifest> read_embeddings(const std::filesystem::path& path) {
  EmbeddingMatrix matrix = decode_emb1(read_file(path));
  const auto mpath = manifest_path(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest " + mpath.string() + ": " + e.what());
  }
  IdManifest manifest = manifest_from_json(j);
  validate_manifest(manifest, matrix.rows);
  if (matrix.normalized) {
    for (std::size_t i = 0; i < matrix.rows; ++i) {
      if (std::abs(row_norm(matrix.row(i)) - 1.0) > 1e-3) {
        throw Error(path.string() + ": normalized flag set but row " + std::to_string(i) +
                    " is not unit-norm");
      }
    }
  }
  return {std::move(matrix), std::move(manifest)};
}

inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& matrix) {
  EmbeddingMatrix out = matrix;
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    const double n = row_norm(r);
    if (n < 1e-12) throw Error("zero-norm row " + std::to_string(i));
    for (float& v : r) v = static_cast<float>(v / n);
  }
  out.normalized = true;
  return out;
}

/// Rows at `indices`, in that order.
inline EmbeddingMatrix select_rows(const EmbeddingMatrix& m, std::span<const std::size_t> indices) {
  std::vector<float> data;
  data.reserve(indices.size() * m.dim);
  for (std::size_t i : indices) {
    if (i >= m.rows) throw Error("row index " + std::to_string(i) + " out of range");
    auto r = m.row(i);
    data.insert(data.end(), r.begin(), r.end());
  }
  return EmbeddingMatrix(indices.size(), m.dim, std::move(data), m.normalized);
}

}  // namespace zsr
