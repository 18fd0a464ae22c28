#include "conceptset/embedding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <future>

#include "conceptset/binary_io.hpp"
#include "conceptset/error.hpp"
#include "conceptset/hash.hpp"

namespace conceptset {

namespace {

template <typename Range>
std::string join_or_none(const Range& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += "; ";
    out += item;
  }
  return out.empty() ? "none" : out;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

void check_vectors(const std::vector<std::vector<float>>& vectors, std::size_t expected_count,
                   std::size_t dimension, std::size_t batch_index) {
  if (vectors.size() != expected_count) {
    throw Error(ErrorCode::kContractViolation,
                "embedding batch " + std::to_string(batch_index) + " returned " +
                    std::to_string(vectors.size()) + " vectors for " +
                    std::to_string(expected_count) + " texts");
  }
  for (const auto& v : vectors) {
    if (v.size() != dimension) {
      throw Error(ErrorCode::kContractViolation,
                  "embedding batch " + std::to_string(batch_index) + " returned dimension " +
                      std::to_string(v.size()) + ", expected " + std::to_string(dimension));
    }
  }
}

std::string cache_key(const std::string& provider, std::string_view text) {
  Sha256 hasher;
  hasher.update(provider).update("\0", 1).update(text);
  return to_hex(hasher.finish());
}

}  // namespace

NodeText node_text(const ConceptNode& node) {
  std::vector<std::string> synonyms = node.synonyms;
  std::sort(synonyms.begin(), synonyms.end());
  std::string text;
  text += "Name: " + node.preferred_name + "\n";
  text += "Synonyms: " + join_or_none(synonyms) + "\n";
  text += "Definition: " + node.definition.value_or("none") + "\n";
  text += "Semantic types: " + join_or_none(node.semantic_types) + "\n";
  text += "Sources: " + join_or_none(node.source_vocabularies);
  return {node.cui, std::move(text)};
}

HashingEmbeddingProvider::HashingEmbeddingProvider(std::size_t dimension, std::uint64_t seed)
    : dimension_(dimension), seed_(seed) {
  if (dimension == 0) throw Error(ErrorCode::kInvalidArgument, "embedding dimension must be > 0");
}

std::string HashingEmbeddingProvider::name() const {
  return "local-hash-d" + std::to_string(dimension_) + "-s" + std::to_string(seed_);
}

std::vector<float> HashingEmbeddingProvider::embed_one(std::string_view text) const {
  std::vector<double> sum(dimension_, 0.0), token_vector(dimension_);
  std::size_t pos = 0;
  std::string token;
  while (pos < text.size()) {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    auto end = pos;
    while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    auto begin = pos;
    pos = end;
    while (begin < end && !is_word_char(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && !is_word_char(static_cast<unsigned char>(text[end - 1]))) --end;
    if (begin == end) continue;
    token.assign(text.substr(begin, end - begin));
    for (auto& c : token) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

    std::uint64_t state = fnv1a64(token) ^ (seed_ * 0x9e3779b97f4a7c15ull);
    double norm = 0;
    for (auto& x : token_vector) {
      x = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-52 - 1.0;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dimension_; ++i) sum[i] += token_vector[i] / norm;
  }
  double norm = 0;
  for (double x : sum) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<float> out(dimension_, 0.0f);
  if (norm > 0) {
    for (std::size_t i = 0; i < dimension_; ++i) out[i] = static_cast<float>(sum[i] / norm);
  }
  return out;
}

std::vector<std::vector<float>> HashingEmbeddingProvider::embed(
    std::span<const std::string> texts) {
  std::vector<std::vector<float>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed_one(t));
  return out;
}

RemoteEmbeddingProvider::RemoteEmbeddingProvider(RemoteEmbeddingConfig config)
    : config_(std::move(config)), client_(config_.endpoint) {}

std::string RemoteEmbeddingProvider::name() const {
  return "remote:" + config_.model + ":" + std::to_string(config_.dimension);
}

std::vector<std::vector<float>> RemoteEmbeddingProvider::embed(
    std::span<const std::string> texts) {
  nlohmann::json body = {{"model", config_.model},
                         {"input", std::vector<std::string>(texts.begin(), texts.end())}};
  if (config_.request_dimensions) body["dimensions"] = config_.dimension;
  const auto reply = client_.post("/embeddings", body);
  std::vector<std::vector<float>> out(texts.size());
  try {
    const auto& data = reply.at("data");
    if (data.size() != texts.size()) {
      throw Error(ErrorCode::kContractViolation,
                  "embeddings reply holds " + std::to_string(data.size()) + " items for " +
                      std::to_string(texts.size()) + " inputs");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto slot = data[i].contains("index") ? data[i]["index"].get<std::size_t>() : i;
      if (slot >= out.size()) throw Error(ErrorCode::kContractViolation, "embedding index out of range");
      out[slot] = data[i].at("embedding").get<std::vector<float>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw RemoteError(std::string("malformed embeddings reply: ") + e.what(), 200, false);
  }
  return out;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  const auto bytes = read_file_bytes(path_.string());
  ByteReader in(bytes, ErrorCode::kCorruptIndex);
  while (in.remaining() >= 64 + 4) {
    std::string key(in.bytes(64));
    const auto dimension = in.u32();
    if (in.remaining() < 4ull * dimension) break;  // torn tail
    std::vector<float> v(dimension);
    for (auto& x : v) x = in.f32();
    entries_[key] = std::move(v);
  }
}

std::optional<std::vector<float>> EmbeddingCache::get(const std::string& provider,
                                                      std::string_view text) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(cache_key(provider, text));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::put(const std::string& provider, std::string_view text,
                         std::span<const float> vector) {
  std::lock_guard lock(mutex_);
  auto key = cache_key(provider, text);
  if (entries_.contains(key)) return;
  ByteWriter record;
  record.bytes(key);
  record.u32(static_cast<std::uint32_t>(vector.size()));
  for (float x : vector) record.f32(x);
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::kIo, "cannot append to " + path_.string());
  out.write(record.data().data(), static_cast<std::streamsize>(record.data().size()));
  entries_.emplace(std::move(key), std::vector<float>(vector.begin(), vector.end()));
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

EmbeddingMatrix embed_all(std::span<const NodeText> texts, EmbeddingProvider& provider,
                          const EmbedOptions& options) {
  if (options.batch == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  const auto dimension = provider.dimension();
  const auto provider_name = provider.name();
  EmbeddingMatrix matrix;
  matrix.dimension = dimension;
  matrix.rows.assign(texts.size() * dimension, 0.0f);
  matrix.cuis.reserve(texts.size());
  for (const auto& t : texts) matrix.cuis.push_back(t.cui);

  auto store = [&](std::size_t row, std::span<const float> v) {
    std::copy(v.begin(), v.end(), matrix.rows.begin() + static_cast<std::ptrdiff_t>(row * dimension));
  };

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (options.cache != nullptr) {
      if (auto hit = options.cache->get(provider_name, texts[i].text); hit && hit->size() == dimension) {
        store(i, *hit);
        continue;
      }
    }
    pending.push_back(i);
  }

  struct Batch {
    std::size_t index;
    std::vector<std::size_t> rows;
    std::vector<std::string> inputs;
  };
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < pending.size(); start += options.batch) {
    Batch batch{batches.size(), {}, {}};
    for (std::size_t j = start; j < std::min(pending.size(), start + options.batch); ++j) {
      batch.rows.push_back(pending[j]);
      batch.inputs.push_back(texts[pending[j]].text);
    }
    batches.push_back(std::move(batch));
  }

  auto run_batch = [&](const Batch& batch) {
    try {
      auto vectors = with_backoff(options.retry, [&] { return provider.embed(batch.inputs); });
      check_vectors(vectors, batch.inputs.size(), dimension, batch.index);
      return vectors;
    } catch (const RemoteError& e) {
      throw Error(ErrorCode::kRemote, "embedding batch " + std::to_string(batch.index) +
                                          " failed after retries: " + e.what());
    }
  };
  auto commit = [&](const Batch& batch, const std::vector<std::vector<float>>& vectors) {
    for (std::size_t j = 0; j < batch.rows.size(); ++j) {
      store(batch.rows[j], vectors[j]);
      if (options.cache != nullptr) options.cache->put(provider_name, batch.inputs[j], vectors[j]);
    }
  };

  const auto in_flight = std::max<std::size_t>(1, options.max_in_flight);
  for (std::size_t wave = 0; wave < batches.size(); wave += in_flight) {
    const auto end = std::min(batches.size(), wave + in_flight);
    if (in_flight == 1) {
      commit(batches[wave], run_batch(batches[wave]));
      continue;
    }
    std::vector<std::future<std::vector<std::vector<float>>>> futures;
    for (auto b = wave; b < end; ++b) {
      futures.push_back(std::async(std::launch::async, run_batch, std::cref(batches[b])));
    }
    for (auto b = wave; b < end; ++b) commit(batches[b], futures[b - wave].get());
  }
  return matrix;
}

std::vector<float> embed_query(EmbeddingProvider& provider, const std::string& text,
                               const RetryPolicy& retry) {
  const std::vector<std::string> input{text};
  auto vectors = with_backoff(retry, [&] { return provider.embed(input); });
  check_vectors(vectors, 1, provider.dimension(), 0);
  return std::move(vectors.front());
}

}  // namespace conceptset
