#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "conceptset/cui.hpp"
#include "conceptset/graph.hpp"
#include "conceptset/http_client.hpp"

namespace conceptset {

struct NodeText {
  Cui cui;
  std::string text;
};

// Canonical embedding text for a node:
//   Name: <preferred>
//   Synonyms: <sorted, "; "-joined | none>
//   Definition: <definition | none>
//   Semantic types: <sorted | none>
//   Sources: <sorted | none>
NodeText node_text(const ConceptNode& node);

enum class ProviderKind { kRemoteApi, kDeterministicLocal };

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  // Identifies the vector space; used as part of the cache key.
  virtual std::string name() const = 0;
  virtual std::size_t dimension() const = 0;
  virtual ProviderKind kind() const = 0;
  // One vector per text, in input order.
  virtual std::vector<std::vector<float>> embed(std::span<const std::string> texts) = 0;
};

// Offline provider: each whitespace token (lower-cased, edge punctuation
// trimmed) hashes to a seeded pseudo-random unit vector; a text is the
// renormalised mean of its token vectors. Identical text gives identical bits.
class HashingEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HashingEmbeddingProvider(std::size_t dimension = 256, std::uint64_t seed = 0);

  std::string name() const override;
  std::size_t dimension() const override { return dimension_; }
  ProviderKind kind() const override { return ProviderKind::kDeterministicLocal; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

  std::vector<float> embed_one(std::string_view text) const;

 private:
  std::size_t dimension_;
  std::uint64_t seed_;
};

struct RemoteEmbeddingConfig {
  Endpoint endpoint;
  std::string model = "text-embedding-3-large";
  std::size_t dimension = 3072;
  // Send "dimensions" in the request (for models that support shortening).
  bool request_dimensions = false;
};

// OpenAI-compatible /embeddings client. Does not retry by itself; embed_all
// owns the retry loop so failures can name the batch.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit RemoteEmbeddingProvider(RemoteEmbeddingConfig config);

  std::string name() const override;
  std::size_t dimension() const override { return config_.dimension; }
  ProviderKind kind() const override { return ProviderKind::kRemoteApi; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  RemoteEmbeddingConfig config_;
  JsonHttpClient client_;
};

// Persistent vector cache keyed by SHA-256(provider name, text). Backed by
// an append-only file; a torn final record is ignored on load.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path path);

  std::optional<std::vector<float>> get(const std::string& provider,
                                        std::string_view text) const;
  void put(const std::string& provider, std::string_view text, std::span<const float> vector);
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::vector<float>> entries_;
};

struct EmbedOptions {
  std::size_t batch = 64;
  std::size_t max_in_flight = 1;
  RetryPolicy retry{};
  EmbeddingCache* cache = nullptr;
};

// Row-major float32 matrix; row i embeds cuis[i].
struct EmbeddingMatrix {
  std::size_t dimension = 0;
  std::vector<float> rows;
  std::vector<Cui> cuis;

  std::size_t count() const { return cuis.size(); }
};

// Embeds every text in batches. Output order follows input order whatever
// order batches complete in. A batch that still fails after retries raises
// Error(kRemote) naming the batch; a wrong vector count or dimension raises
// Error(kContractViolation).
EmbeddingMatrix embed_all(std::span<const NodeText> texts, EmbeddingProvider& provider,
                          const EmbedOptions& options = {});

std::vector<float> embed_query(EmbeddingProvider& provider, const std::string& text,
                               const RetryPolicy& retry = {});

}  // namespace conceptset
