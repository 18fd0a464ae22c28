#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "conceptset/http_client.hpp"
#include "conceptset/retrieval.hpp"

namespace conceptset {

struct ChatMessage {
  std::string role;  // "system", "user" or "assistant"
  std::string content;
};

struct ChatUsage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
};

struct ChatReply {
  std::string content;
  ChatUsage usage;
};

enum class ChatProviderKind { kRemoteApi, kDeterministicMock };

// Implementations must tolerate concurrent complete() calls.
class ChatProvider {
 public:
  virtual ~ChatProvider() = default;

  virtual std::string name() const = 0;
  virtual std::string model() const = 0;
  virtual ChatProviderKind kind() const = 0;
  virtual ChatReply complete(const std::vector<ChatMessage>& messages) = 0;
};

enum class MockProfile { kPermissive, kStrict };

// Offline stand-in for a chat model. It reads the rendered prompt back:
// a candidate is selected when its name shares at least one (permissive) or
// two (strict) keywords with the target description, where keywords are
// lower-cased alphanumeric tokens of four or more characters outside a small
// stopword list. Classification marks a CUI definitive when the first token
// of its name occurs in the description's leading clause (text before the
// first comma or period). Token usage is ceil(characters / 4).
class MockChatProvider final : public ChatProvider {
 public:
  explicit MockChatProvider(MockProfile profile = MockProfile::kPermissive);

  std::string name() const override;
  std::string model() const override;
  ChatProviderKind kind() const override { return ChatProviderKind::kDeterministicMock; }
  ChatReply complete(const std::vector<ChatMessage>& messages) override;

  MockProfile profile() const { return profile_; }

 private:
  MockProfile profile_;
};

// Keyword tokens as used by MockChatProvider.
std::vector<std::string> mock_keywords(std::string_view text);

struct OpenAiChatConfig {
  Endpoint endpoint;
  std::string model = "gpt-5-mini";
  // Merged into every request body (temperature, seed, ...). Empty by default.
  nlohmann::json options = nlohmann::json::object();
  RetryPolicy retry{};
};

// OpenAI-compatible /chat/completions client with bounded backoff on
// transport errors, 408, 429 and 5xx.
class OpenAiChatProvider final : public ChatProvider {
 public:
  explicit OpenAiChatProvider(OpenAiChatConfig config);

  std::string name() const override { return "openai:" + config_.model; }
  std::string model() const override { return config_.model; }
  ChatProviderKind kind() const override { return ChatProviderKind::kRemoteApi; }
  ChatReply complete(const std::vector<ChatMessage>& messages) override;

 private:
  OpenAiChatConfig config_;
  JsonHttpClient client_;
};

struct Pricing {
  double input_per_token = 0;
  double output_per_token = 0;
};

// Order-preserving partition into chunks of `size` (last may be short).
// Throws kInvalidArgument for size 0.
std::vector<std::vector<CandidateMember>> chunk(std::span<const CandidateMember> candidates,
                                                std::size_t size);

// Throws kInvalidArgument for an empty chunk or a target without name or
// description. An empty special-instructions field renders as "none".
std::string render_filter_prompt(std::span<const CandidateMember> chunk,
                                 const TargetConcept& target, Cui target_cui);
std::string render_classify_prompt(std::span<const CandidateMember> selected,
                                   const TargetConcept& target, std::string_view fewshots);

// The JSON example embedded in the classification prompt.
std::string classify_example_block();

enum class ResponseSchema { kFilter, kClassify };
// Lenient drops CUIs outside the allowed universe and reports them; strict
// rejects the reply.
enum class DropPolicy { kLenient, kStrict };

struct ValidatedResponse {
  std::vector<Cui> selected;  // filter schema, ascending
  std::vector<Cui> definitive;
  std::vector<Cui> context_dependent;
  std::vector<Cui> dropped;  // outside the allowed universe (lenient only)
};

// Parses a reply as strict JSON with exactly the schema's keys, each an
// array of "C" + 7 digit strings. Throws kSchema for anything else (and for
// out-of-universe CUIs under the strict policy) and kClassConflict when a
// CUI is listed in both classes.
ValidatedResponse validate_response(std::string_view raw, const CuiSet& allowed,
                                    ResponseSchema schema,
                                    DropPolicy policy = DropPolicy::kLenient);

struct CurateConfig {
  std::size_t chunk_size = 50;
  std::size_t retries = 3;  // re-asks per chunk after a schema error
  std::size_t n_runs = 5;
  std::size_t max_in_flight = 1;
  DropPolicy drop_policy = DropPolicy::kLenient;
  std::optional<Pricing> pricing;
  // Raw prompts and replies go to <audit_dir>/<target id>/run-<n>.jsonl.
  std::filesystem::path audit_dir;
};

struct CurationUsage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::uint64_t calls = 0;
  double cost = 0;
  double wall_seconds = 0;
};

struct ChunkFailure {
  std::string stage;  // "filter" or "classify"
  std::size_t chunk = 0;
  std::string error;
};

enum class RunStatus { kComplete, kAborted };

struct CuratedSet {
  std::string target_id;
  std::string run_id;
  std::size_t run = 0;  // 1-based
  std::string provider;
  RunStatus status = RunStatus::kComplete;
  std::vector<Cui> selected;  // ascending
  CuiSet definitive;
  CuiSet context_dependent;
  // Selected CUIs the classifier never labelled; they are filed as
  // context_dependent.
  CuiSet unclassified;
  std::vector<Cui> dropped;
  std::vector<ChunkFailure> failures;
  std::string abort_reason;
  CurationUsage usage;

  std::map<Cui, ClassLabel> labels() const;
  // Reproducible content only: no run id and no wall time.
  nlohmann::json to_json() const;
  // Run id, run number, provider and wall time.
  nlohmann::json meta_json() const;
  // Accepts to_json output, optionally merged with meta_json fields.
  static CuratedSet from_json(const nlohmann::json& json);
};

// Filters every chunk, sorts the union of selections, re-chunks it and
// classifies. Runs execute one after another and do not share state. A
// provider error that is not a schema problem aborts only the current run;
// its partial result is returned with status kAborted.
std::vector<CuratedSet> curate(const CandidateSet& candidates, const TargetConcept& target,
                               ChatProvider& provider, const CurateConfig& config);

}  // namespace conceptset
