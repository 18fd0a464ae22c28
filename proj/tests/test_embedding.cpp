#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "conceptset/embedding.hpp"
#include "conceptset/error.hpp"
#include "conceptset/http_client.hpp"
#include "support.hpp"

using namespace conceptset;
using testing_support::cui;
using testing_support::TempDir;

namespace {

// Counts calls and batch sizes; vector i is (len(text), 1, 0, ...).
class CountingProvider : public EmbeddingProvider {
 public:
  std::string name() const override { return "counting"; }
  std::size_t dimension() const override { return 4; }
  ProviderKind kind() const override { return ProviderKind::kDeterministicLocal; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override {
    ++calls;
    sizes.push_back(texts.size());
    std::vector<std::vector<float>> out;
    for (const auto& t : texts) out.push_back({static_cast<float>(t.size()), 1, 0, 0});
    if (short_reply) out.pop_back();
    return out;
  }
  int calls = 0;
  bool short_reply = false;
  std::vector<std::size_t> sizes;
};

std::vector<NodeText> texts(std::initializer_list<const char*> items) {
  std::vector<NodeText> out;
  std::uint32_t n = 1;
  for (const char* t : items) out.push_back({cui(n++), t});
  return out;
}

}  // namespace

TEST(NodeText, CanonicalTemplate) {
  ConceptNode node;
  node.cui = cui(5);
  node.preferred_name = "Heart failure";
  node.synonyms = {"Cardiac failure", "HF"};
  node.semantic_types = {"Disease or Syndrome"};
  node.source_vocabularies = {"SNOMEDCT_US", "MSH"};
  EXPECT_EQ(node_text(node).text,
            "Name: Heart failure\nSynonyms: Cardiac failure; HF\nDefinition: none\n"
            "Semantic types: Disease or Syndrome\nSources: MSH; SNOMEDCT_US");
  ConceptNode bare;
  bare.preferred_name = "x";
  bare.definition = "d";
  EXPECT_EQ(node_text(bare).text,
            "Name: x\nSynonyms: none\nDefinition: d\nSemantic types: none\nSources: none");
}

TEST(HashingProvider, DeterministicUnitVectors) {
  HashingEmbeddingProvider p(64, 3);
  auto a = p.embed_one("Chronic kidney disease");
  auto b = p.embed_one("chronic  kidney disease.");
  EXPECT_EQ(a, b);  // case, spacing and edge punctuation are ignored
  double norm = 0;
  for (float x : a) norm += double(x) * x;
  EXPECT_NEAR(norm, 1.0, 1e-5);
  EXPECT_NE(a, HashingEmbeddingProvider(64, 4).embed_one("Chronic kidney disease"));
  EXPECT_EQ(p.embed_one(""), std::vector<float>(64, 0.0f));
  EXPECT_THROW(HashingEmbeddingProvider(0), Error);
}

TEST(HashingProvider, SharedTokensAreCloser) {
  HashingEmbeddingProvider p(256, 0);
  auto q = p.embed_one("renal failure disorder");
  auto near = p.embed_one("renal failure");
  auto far = p.embed_one("fracture of femur");
  auto dist = [](const std::vector<float>& x, const std::vector<float>& y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
    return s;
  };
  EXPECT_LT(dist(q, near), dist(q, far));
}

TEST(EmbedAll, BatchesPreserveOrder) {
  CountingProvider p;
  auto in = texts({"a", "bb", "ccc"});
  EmbedOptions options;
  options.batch = 2;
  auto m = embed_all(in, p, options);
  EXPECT_EQ(p.calls, 2);
  EXPECT_EQ(p.sizes, (std::vector<std::size_t>{2, 1}));
  ASSERT_EQ(m.count(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.rows[i * 4], float(i + 1));
  options.batch = 0;
  EXPECT_THROW(embed_all(in, p, options), Error);
}

TEST(EmbedAll, ParallelBatchesKeepInputOrder) {
  HashingEmbeddingProvider p(16);
  std::vector<NodeText> in;
  for (std::uint32_t i = 1; i <= 50; ++i) in.push_back({cui(i), "text " + std::to_string(i)});
  EmbedOptions serial;
  serial.batch = 3;
  EmbedOptions parallel = serial;
  parallel.max_in_flight = 4;
  auto a = embed_all(in, p, serial);
  auto b = embed_all(in, p, parallel);
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(a.cuis, b.cuis);
}

TEST(EmbedAll, WrongVectorCountIsContractViolation) {
  CountingProvider p;
  p.short_reply = true;
  try {
    embed_all(texts({"a", "b"}), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContractViolation);
  }
}

TEST(EmbeddingCache, HitsSkipProviderAndTornTailIgnored) {
  TempDir dir;
  const auto path = dir / "cache.bin";
  CountingProvider p;
  {
    EmbeddingCache cache(path);
    EmbedOptions options;
    options.cache = &cache;
    embed_all(texts({"a", "bb"}), p, options);
    EXPECT_EQ(cache.size(), 2u);
    embed_all(texts({"a", "bb"}), p, options);
    EXPECT_EQ(p.calls, 1);
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << std::string(64, 'f') << "\x04";  // torn record
  }
  EmbeddingCache reloaded(path);
  EXPECT_EQ(reloaded.size(), 2u);
  auto hit = reloaded.get("counting", "bb");
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ((*hit)[0], 2.0f);
  EXPECT_FALSE(reloaded.get("other", "bb").has_value());
}

namespace {

// Local stand-in for an OpenAI-compatible embeddings endpoint.
class FakeEmbeddingServer {
 public:
  FakeEmbeddingServer() {
    server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      if (req.get_header_value("Authorization") != "Bearer sk-test") {
        res.status = 401;
        res.set_content(R"({"error":"bad key"})", "application/json");
        return;
      }
      if (failures_left > 0) {
        --failures_left;
        res.status = 503;
        return;
      }
      auto body = nlohmann::json::parse(req.body);
      nlohmann::json data = nlohmann::json::array();
      const auto& input = body.at("input");
      // Reply out of order; the client must place items by "index".
      for (std::size_t i = input.size(); i-- > 0;) {
        data.push_back({{"index", i},
                        {"embedding", {static_cast<double>(input[i].get<std::string>().size()), 0.5}}});
      }
      res.set_content(nlohmann::json{{"data", data}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEmbeddingServer() {
    server_.stop();
    thread_.join();
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  std::atomic<int> requests{0};
  std::atomic<int> failures_left{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

RemoteEmbeddingProvider remote(const std::string& url, const std::string& key) {
  RemoteEmbeddingConfig config;
  config.endpoint = {url, key, std::chrono::seconds(5)};
  config.dimension = 2;
  return RemoteEmbeddingProvider(config);
}

}  // namespace

TEST(RemoteEmbedding, RetriesTransientFailures) {
  FakeEmbeddingServer server;
  server.failures_left = 2;
  auto provider = remote(server.base_url(), "sk-test");
  EmbedOptions options;
  options.retry.base_delay = std::chrono::milliseconds(1);
  auto m = embed_all(texts({"abc", "de"}), provider, options);
  EXPECT_EQ(server.requests.load(), 3);
  EXPECT_EQ(m.rows, (std::vector<float>{3, 0.5, 2, 0.5}));
}

TEST(RemoteEmbedding, AuthenticationFailureIsNotRetried) {
  FakeEmbeddingServer server;
  auto provider = remote(server.base_url(), "wrong");
  EmbedOptions options;
  options.retry.base_delay = std::chrono::milliseconds(1);
  try {
    embed_all(texts({"abc"}), provider, options);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRemote);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
  EXPECT_EQ(server.requests.load(), 1);
}

TEST(RemoteEmbedding, ExhaustedRetriesNameTheBatch) {
  FakeEmbeddingServer server;
  server.failures_left = 100;
  auto provider = remote(server.base_url(), "sk-test");
  EmbedOptions options;
  options.retry.base_delay = std::chrono::milliseconds(1);
  options.retry.max_attempts = 3;
  EXPECT_THROW(embed_all(texts({"abc"}), provider, options), Error);
  EXPECT_EQ(server.requests.load(), 3);
}

TEST(ApiKey, MissingVariableIsInvalidState) {
  ::unsetenv("CONCEPTSET_TEST_ABSENT_KEY");
  try {
    api_key_from_env("CONCEPTSET_TEST_ABSENT_KEY");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidState);
  }
}
