#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptset/curation.hpp"
#include "conceptset/embedding.hpp"
#include "conceptset/retrieval.hpp"
#include "conceptset/review.hpp"
#include "conceptset/rrf.hpp"

namespace conceptset {

struct EmbeddingSettings {
  std::string provider = "local";  // "local" or "openai"
  std::size_t dimension = 256;
  std::uint64_t seed = 0;
  std::size_t batch = 64;
  std::size_t max_in_flight = 1;
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "text-embedding-3-large";
  std::string api_key_env = "OPENAI_API_KEY";
  bool request_dimensions = false;
};

struct ChatSettings {
  std::string provider = "mock-permissive";  // mock-permissive, mock-strict, openai
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-5-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  nlohmann::json options = nlohmann::json::object();
  std::optional<Pricing> pricing;
};

struct CurationSettings {
  std::size_t chunk_size = 50;
  std::size_t retries = 3;
  std::size_t runs = 5;
  std::size_t max_in_flight = 1;
  DropPolicy drop_policy = DropPolicy::kLenient;
};

// Relative paths are resolved against the directory of the config file.
struct PipelineConfig {
  std::filesystem::path rrf_dir;
  std::filesystem::path run_dir;
  std::filesystem::path targets;
  std::filesystem::path manual_dir;
  std::filesystem::path gold_dir;
  rrf::VocabularySet vocabularies = rrf::default_vocabularies();
  std::string language = "ENG";
  EmbeddingSettings embedding;
  ChatSettings chat;
  RetrievalConfig retrieval;
  CurationSettings curation;
  ReviewServerConfig review;

  // Throws kParse for malformed fields and kInvalidArgument for missing
  // required paths.
  static PipelineConfig from_json(const nlohmann::json& json, const std::filesystem::path& base);
  static PipelineConfig load(const std::filesystem::path& path);

  // Checks that the RRF directory and the targets file exist and that the
  // numeric settings are usable. Throws kInvalidArgument or kNotFound.
  void validate() const;
};

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const EmbeddingSettings& settings);
std::unique_ptr<ChatProvider> make_chat_provider(const ChatSettings& settings);

struct StageResult {
  std::string stage;
  bool skipped = false;  // inputs unchanged since the last successful run
  std::vector<std::filesystem::path> outputs;
  std::string summary;
};

// Stage runner over one run directory. Each stage checks its inputs (a
// missing one raises kStageDependency naming the file), keys itself on the
// content hashes of inputs plus the relevant settings, and is a no-op when
// that key and its outputs are unchanged. Stages hold an exclusive lock on
// <run_dir>/.lock while they run (kLocked when another process has it).
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  const PipelineConfig& config() const { return config_; }

  StageResult ingest();
  StageResult graph_build();
  StageResult graph_stats();
  StageResult embed();
  StageResult index_build();
  StageResult retrieve();
  StageResult sweep();
  StageResult curate();
  StageResult evaluate();

  // Artifact locations.
  std::filesystem::path ingest_path() const;
  std::filesystem::path graph_path() const;
  std::filesystem::path restricted_graph_path() const;
  std::filesystem::path stats_path() const;
  std::filesystem::path embeddings_path() const;
  std::filesystem::path index_path() const;
  std::filesystem::path candidates_dir() const;
  std::filesystem::path sweep_dir() const;
  std::filesystem::path curated_dir() const;
  std::filesystem::path report_path() const;
  std::filesystem::path report_text_path() const;
  std::filesystem::path review_dir() const;

 private:
  PipelineConfig config_;
};

// Parsed RRF content as stored by the ingest stage.
struct IngestData {
  std::vector<rrf::AtomRecord> atoms;
  std::vector<rrf::RelationRecord> relations;
  rrf::AttributeMap attributes;
};

std::string serialize_ingest(const IngestData& data);
// Throws kCorruptSnapshot on a damaged file.
IngestData deserialize_ingest(std::string_view bytes);

}  // namespace conceptset
