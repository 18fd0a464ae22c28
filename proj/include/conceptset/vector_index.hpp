#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "conceptset/cui.hpp"
#include "conceptset/embedding.hpp"

namespace conceptset {

struct Neighbour {
  Cui cui;
  double distance;  // Euclidean, not squared

  bool operator==(const Neighbour&) const = default;
};

// Exact flat L2 index. Rows are float32; distances accumulate in float64.
// Immutable after construction, so concurrent queries are safe.
class VectorIndex {
 public:
  // Throws Error(kInvalidArgument) for dimension 0, a row/CUI count mismatch
  // or duplicate CUIs.
  VectorIndex(std::size_t dimension, std::vector<float> rows, std::vector<Cui> cuis);
  static VectorIndex from_matrix(EmbeddingMatrix matrix);

  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return cuis_.size(); }
  const std::vector<Cui>& cuis() const { return cuis_; }
  const std::vector<float>& rows() const { return rows_; }
  std::span<const float> row(std::size_t i) const;
  std::optional<std::size_t> find(Cui cui) const;

  double squared_distance(std::span<const float> query, std::size_t row) const;
  double distance(std::span<const float> query, std::size_t row) const;

  // The min(k, size) nearest rows ordered by distance, ties by ascending CUI.
  // Throws kInvalidArgument (k == 0 or wrong query dimension) and
  // kInvalidState (empty index).
  std::vector<Neighbour> knn(std::span<const float> query, std::size_t k) const;
  // As above, scanning only rows for which `admit(row)` holds.
  std::vector<Neighbour> knn(std::span<const float> query, std::size_t k,
                             const std::function<bool(std::size_t)>& admit) const;

 private:
  std::size_t dimension_;
  std::vector<float> rows_;
  std::vector<Cui> cuis_;
  std::unordered_map<Cui, std::size_t> by_cui_;
};

// File layout (little-endian): magic "CSVINDX1", u32 version, u32 dimension,
// u64 count, count*dimension float32 rows, count u32 CUI numbers, then a
// SHA-256 of everything before it.
inline constexpr std::size_t kIndexHeaderBytes = 8 + 4 + 4 + 8;
inline constexpr std::size_t kIndexChecksumBytes = 32;

std::string serialize_index(const VectorIndex& index);
// Throws Error(kCorruptIndex) on truncation, checksum or version mismatch.
VectorIndex deserialize_index(std::string_view bytes);
void save_index(const VectorIndex& index, const std::filesystem::path& path);
VectorIndex load_index(const std::filesystem::path& path);

}  // namespace conceptset
