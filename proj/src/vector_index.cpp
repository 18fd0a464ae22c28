#include "conceptset/vector_index.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "conceptset/binary_io.hpp"
#include "conceptset/error.hpp"
#include "conceptset/hash.hpp"

namespace conceptset {

namespace {

constexpr char kIndexMagic[8] = {'C', 'S', 'V', 'I', 'N', 'D', 'X', '1'};
constexpr std::uint32_t kIndexVersion = 1;

struct Scored {
  double squared;
  Cui cui;
  bool operator<(const Scored& other) const {
    return squared < other.squared || (squared == other.squared && cui < other.cui);
  }
};

}  // namespace

VectorIndex::VectorIndex(std::size_t dimension, std::vector<float> rows, std::vector<Cui> cuis)
    : dimension_(dimension), rows_(std::move(rows)), cuis_(std::move(cuis)) {
  if (dimension_ == 0) throw Error(ErrorCode::kInvalidArgument, "index dimension must be > 0");
  if (rows_.size() != cuis_.size() * dimension_) {
    throw Error(ErrorCode::kInvalidArgument, "row data does not match CUI table");
  }
  by_cui_.reserve(cuis_.size());
  for (std::size_t i = 0; i < cuis_.size(); ++i) {
    if (!by_cui_.emplace(cuis_[i], i).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate CUI in index: " + cuis_[i].str());
    }
  }
}

VectorIndex VectorIndex::from_matrix(EmbeddingMatrix matrix) {
  return VectorIndex(matrix.dimension, std::move(matrix.rows), std::move(matrix.cuis));
}

std::span<const float> VectorIndex::row(std::size_t i) const {
  return {rows_.data() + i * dimension_, dimension_};
}

std::optional<std::size_t> VectorIndex::find(Cui cui) const {
  auto it = by_cui_.find(cui);
  if (it == by_cui_.end()) return std::nullopt;
  return it->second;
}

double VectorIndex::squared_distance(std::span<const float> query, std::size_t row_index) const {
  const float* r = rows_.data() + row_index * dimension_;
  double sum = 0.0;
  for (std::size_t i = 0; i < dimension_; ++i) {
    const double d = static_cast<double>(query[i]) - static_cast<double>(r[i]);
    sum += d * d;
  }
  return sum;
}

double VectorIndex::distance(std::span<const float> query, std::size_t row_index) const {
  return std::sqrt(squared_distance(query, row_index));
}

std::vector<Neighbour> VectorIndex::knn(std::span<const float> query, std::size_t k) const {
  return knn(query, k, nullptr);
}

std::vector<Neighbour> VectorIndex::knn(std::span<const float> query, std::size_t k,
                                        const std::function<bool(std::size_t)>& admit) const {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  if (query.size() != dimension_) {
    throw Error(ErrorCode::kInvalidArgument,
                "query dimension " + std::to_string(query.size()) + " != index dimension " +
                    std::to_string(dimension_));
  }
  if (cuis_.empty()) throw Error(ErrorCode::kInvalidState, "knn on an empty index");

  // Max-heap of the best k so far; ranking on squared distance gives the
  // same order as on distance.
  std::priority_queue<Scored> best;
  for (std::size_t i = 0; i < cuis_.size(); ++i) {
    if (admit && !admit(i)) continue;
    Scored s{squared_distance(query, i), cuis_[i]};
    if (best.size() < k) {
      best.push(s);
    } else if (s < best.top()) {
      best.pop();
      best.push(s);
    }
  }
  std::vector<Neighbour> out(best.size());
  for (auto i = out.size(); i-- > 0;) {
    out[i] = {best.top().cui, std::sqrt(best.top().squared)};
    best.pop();
  }
  return out;
}

std::string serialize_index(const VectorIndex& index) {
  ByteWriter out;
  out.bytes(std::string_view(kIndexMagic, sizeof(kIndexMagic)));
  out.u32(kIndexVersion);
  out.u32(static_cast<std::uint32_t>(index.dimension()));
  out.u64(index.size());
  for (float x : index.rows()) out.f32(x);
  for (const auto& cui : index.cuis()) out.u32(cui.number());
  const auto digest = sha256(out.data());
  out.bytes(std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size()));
  return out.take();
}

VectorIndex deserialize_index(std::string_view bytes) {
  constexpr auto kCorrupt = ErrorCode::kCorruptIndex;
  if (bytes.size() < kIndexHeaderBytes + kIndexChecksumBytes) {
    throw Error(kCorrupt, "index file too short");
  }
  ByteReader header(bytes.substr(0, kIndexHeaderBytes), kCorrupt);
  if (header.bytes(sizeof(kIndexMagic)) != std::string_view(kIndexMagic, sizeof(kIndexMagic))) {
    header.fail("bad index magic");
  }
  if (const auto version = header.u32(); version != kIndexVersion) {
    header.fail("unsupported index version " + std::to_string(version));
  }
  const std::uint64_t dimension = header.u32();
  const std::uint64_t count = header.u64();
  const auto expected = kIndexHeaderBytes + 4 * dimension * count + 4 * count + kIndexChecksumBytes;
  if (bytes.size() != expected) {
    throw Error(kCorrupt, "index size " + std::to_string(bytes.size()) + " != expected " +
                              std::to_string(expected));
  }
  const auto body = bytes.substr(0, bytes.size() - kIndexChecksumBytes);
  const auto digest = sha256(body);
  if (bytes.substr(body.size()) !=
      std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size())) {
    throw Error(kCorrupt, "index checksum mismatch");
  }
  ByteReader in(body.substr(kIndexHeaderBytes), kCorrupt);
  std::vector<float> rows(dimension * count);
  for (auto& x : rows) x = in.f32();
  std::vector<Cui> cuis(count);
  for (auto& cui : cuis) {
    const auto number = in.u32();
    if (number > Cui::kMaxNumber) in.fail("CUI out of range in index");
    cui = Cui::from_number(number);
  }
  try {
    return VectorIndex(dimension, std::move(rows), std::move(cuis));
  } catch (const Error& e) {
    throw Error(kCorrupt, e.what());
  }
}

void save_index(const VectorIndex& index, const std::filesystem::path& path) {
  write_file_atomic(path.string(), serialize_index(index));
}

VectorIndex load_index(const std::filesystem::path& path) {
  return deserialize_index(read_file_bytes(path.string()));
}

}  // namespace conceptset
