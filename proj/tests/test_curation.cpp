#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <mutex>
#include <thread>

#include "conceptset/curation.hpp"
#include "conceptset/error.hpp"
#include "support.hpp"

using namespace conceptset;
using testing_support::cui;
using testing_support::TempDir;

namespace {

std::vector<CandidateMember> members(std::size_t n, std::uint32_t first = 1) {
  std::vector<CandidateMember> out;
  for (std::uint32_t i = 0; i < n; ++i)
    out.push_back({cui(first + i), "concept " + std::to_string(first + i), double(i), Provenance::kSeed});
  return out;
}

TargetConcept heart_failure() {
  TargetConcept t;
  t.id = "hf";
  t.name = "Heart failure";
  t.description = "Heart failure, cardiac failure. Variants: congestive heart failure.";
  t.target_cui = cui(18801);
  t.fewshots = "definitive: heart failure context dependent: ejection fraction";
  t.special_instructions = "Exclude foetal forms.";
  return t;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIo;
}

CandidateSet candidate_set(std::vector<CandidateMember> m) {
  CandidateSet s;
  s.target_id = "hf";
  s.target_cui = cui(18801);
  s.members = std::move(m);
  s.collected = s.members.size();
  return s;
}

// Replays scripted replies (or throws when the script says "THROW") and
// records every message list it receives.
class ScriptedProvider : public ChatProvider {
 public:
  explicit ScriptedProvider(std::function<std::string(const std::vector<ChatMessage>&)> script)
      : script_(std::move(script)) {}
  std::string name() const override { return "scripted"; }
  std::string model() const override { return "scripted"; }
  ChatProviderKind kind() const override { return ChatProviderKind::kDeterministicMock; }
  ChatReply complete(const std::vector<ChatMessage>& messages) override {
    std::lock_guard lock(mutex_);
    calls.push_back(messages);
    auto text = script_(messages);
    if (text == "THROW") throw RemoteError("provider unavailable", 503, true);
    return {text, {100, 10}};
  }
  std::vector<std::vector<ChatMessage>> calls;

 private:
  std::function<std::string(const std::vector<ChatMessage>&)> script_;
  std::mutex mutex_;
};

bool is_filter(const std::vector<ChatMessage>& m) {
  return m.front().content.find("\"selected_cuis\"") != std::string::npos;
}

// CUIs listed in a prompt, in order.
std::vector<std::string> listed(const std::vector<ChatMessage>& m) {
  std::vector<std::string> out;
  const auto& text = m.front().content;
  std::size_t pos = 0;
  while ((pos = text.find("\nC", pos)) != std::string::npos) {
    if (text.compare(pos + 9, 2, ": ") == 0) out.push_back(text.substr(pos + 1, 8));
    ++pos;
  }
  return out;
}

std::string json_list(const std::vector<std::string>& cuis) {
  nlohmann::json arr = cuis;
  return arr.dump();
}

}  // namespace

TEST(Chunk, SizesAndOrder) {
  auto m = members(350);
  auto chunks = chunk(m, 50);
  EXPECT_EQ(chunks.size(), 7u);
  auto three = chunk(members(101), 50);
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(three[0].size(), 50u);
  EXPECT_EQ(three[1].size(), 50u);
  EXPECT_EQ(three[2].size(), 1u);
  EXPECT_EQ(three[2][0].cui, cui(101));
  EXPECT_TRUE(chunk({}, 50).empty());
  EXPECT_EQ(code_of([&] { chunk(m, 0); }), ErrorCode::kInvalidArgument);
}

TEST(Prompts, FilterTemplateVerbatim) {
  auto m = members(2);
  m[1].name = "multi\nline";
  const std::string expected =
      "You are a biomedical assistant working with a UMLS-based knowledge graph.\n\n"
      "Task: Filter the CUIs provided below that should reasonably be considered to indicate the "
      "target concept.\n\n"
      "Include if:\n"
      "1) It directly denotes the target concept or is a clinically equivalent synonym.\n"
      "2) It is a subtype/child that is commonly subsumed by the target concept without additional "
      "qualifiers.\n"
      "3) It is a closely bound variant naming (spelling variants, common aliases).\n"
      "4) It is a procedure, therapy, medication, lab/test, measurement, risk factor, aetiology, "
      "complication, manifestation, generic finding, or care event (e.g., specialty clinic "
      "attendance, disease-management programs, surgery admissions) that is widely recognised as a "
      "proxy or near-unique indicator of the target concept.\n\n"
      "Exclude if:\n"
      "1) It is a generic parent/container concept that is not commonly used as the disease name.\n"
      "2) It expresses only suspicion, family history, or negation of the target concept.\n"
      "3) It is clearly unrelated or ambiguous.\n\n"
      "Prefer inclusion to preserve recall for direct assertion concepts. For conditional categories "
      "in 4), include only when specificity is high; if uncertain about specificity, exclude.\n\n"
      "Target concept: Heart failure (CUI: C0018801)\n\n"
      "Target concept description/aliases: Heart failure, cardiac failure. Variants: congestive "
      "heart failure.\n\n"
      "Special include/exclude instructions: Exclude foetal forms.\n\n"
      "OUTPUT FORMAT (strict):\n"
      "- Return ONLY valid JSON with exactly one key: \"selected_cuis\".\n"
      "- \"selected_cuis\" MUST be an array of CUIs (strings matching ^C\\d{7}$).\n"
      "- You may ONLY output CUIs from the provided candidate list below.\n"
      "- No prose, no comments, no extra keys.\n"
      "- De-duplicate and sort CUIs ascending for stability.\n\n"
      "Candidates:\n"
      "C0000001: concept 1\n"
      "C0000002: multi line\n";
  EXPECT_EQ(render_filter_prompt(m, heart_failure(), cui(18801)), expected);

  auto t = heart_failure();
  t.special_instructions.clear();
  EXPECT_NE(render_filter_prompt(m, t, cui(18801)).find("Special include/exclude instructions: none\n"),
            std::string::npos);
  EXPECT_EQ(code_of([&] { render_filter_prompt({}, t, cui(1)); }), ErrorCode::kInvalidArgument);
  t.description.clear();
  EXPECT_EQ(code_of([&] { render_filter_prompt(m, t, cui(1)); }), ErrorCode::kInvalidArgument);
}

TEST(Prompts, ClassifyTemplateVerbatim) {
  auto m = members(1, 7);
  const std::string expected =
      "You are a biomedical assistant working with UMLS CUIs.\n\n"
      "Task: Classify every provided CUI listed below into exactly one of the categories as defined "
      "below.\n\n"
      "Rules:\n"
      "1) \"definitive\": direct, unambiguous assertion of the target concept (or strict synonyms).\n"
      "2) \"context_dependent\": modifiers, tests, measurements, risk factors, causes, complications, "
      "manifestations: include parents only if the term commonly used to refer to the target "
      "concept; subtypes that need qualifiers.\n"
      "3) Tie-breakers: when uncertain, prefer \"context_dependent\"; choose specific assertion over "
      "generic parent.\n"
      "4) No omissions, no duplicates.\n\n"
      "Target concept: Heart failure, cardiac failure. Variants: congestive heart failure.\n\n"
      "Few-shot examples: definitive: heart failure context dependent: ejection fraction\n\n"
      "Return ONLY valid JSON with exactly these keys: \"definitive\" and \"context_dependent\".\n"
      "Values MUST be arrays of CUIs (strings like \"C1234567\") drawn ONLY from the provided list.\n"
      "Do NOT include names, comments, or extra keys.\n\n"
      "Example:\n"
      "{\n"
      "  \"definitive\": [\"C0000001\", \"C0000002\"],\n"
      "  \"context_dependent\": [\"C0000003\"]\n"
      "}\n\n"
      "CUIs:\n"
      "C0000007: concept 7\n";
  const auto t = heart_failure();
  EXPECT_EQ(render_classify_prompt(m, t, t.fewshots), expected);
  EXPECT_NE(render_classify_prompt(m, t, "").find("Few-shot examples: none\n"), std::string::npos);
  // The embedded example must itself pass validation.
  auto v = validate_response(classify_example_block(), {cui(1), cui(2), cui(3)}, ResponseSchema::kClassify);
  EXPECT_EQ(v.definitive, (std::vector<Cui>{cui(1), cui(2)}));
}

TEST(ValidateResponse, AcceptsWellFormedReplies) {
  const CuiSet allowed{cui(1), cui(2), cui(3)};
  auto a = validate_response(R"({"selected_cuis":["C0000003","C0000001","C0000003"]})", allowed,
                             ResponseSchema::kFilter);
  EXPECT_EQ(a.selected, (std::vector<Cui>{cui(1), cui(3)}));
  auto b = validate_response(R"( {"selected_cuis": []} )", allowed, ResponseSchema::kFilter);
  EXPECT_TRUE(b.selected.empty());
  auto c = validate_response(R"({"context_dependent":["C0000002"],"definitive":[]})", allowed,
                             ResponseSchema::kClassify);
  EXPECT_EQ(c.context_dependent, (std::vector<Cui>{cui(2)}));
  auto d = validate_response(R"({"selected_cuis":["C0000001","C0000009"]})", allowed,
                             ResponseSchema::kFilter, DropPolicy::kLenient);
  EXPECT_EQ(d.selected, (std::vector<Cui>{cui(1)}));
  EXPECT_EQ(d.dropped, (std::vector<Cui>{cui(9)}));
}

TEST(ValidateResponse, RejectsMalformedReplies) {
  const CuiSet allowed{cui(1), cui(2)};
  for (const char* bad : {
           "",
           "Sure! {\"selected_cuis\":[\"C0000001\"]}",
           "```json\n{\"selected_cuis\":[\"C0000001\"]}\n```",
           "[\"C0000001\"]",
           R"({"selected_cuis":["C0000001"],"reason":"x"})",
           R"({"selected":["C0000001"]})",
           R"({"selected_cuis":"C0000001"})",
           R"({"selected_cuis":[1]})",
           R"({"selected_cuis":["C000001"]})",
           R"({"selected_cuis":["c0000001"]})",
           R"({"selected_cuis":["C0000001"],})",
       }) {
    EXPECT_EQ(code_of([&] { validate_response(bad, allowed, ResponseSchema::kFilter); }),
              ErrorCode::kSchema)
        << bad;
  }
  EXPECT_EQ(code_of([&] {
              validate_response(R"({"definitive":["C0000001"]})", allowed, ResponseSchema::kClassify);
            }),
            ErrorCode::kSchema);
  EXPECT_EQ(code_of([&] {
              validate_response(R"({"selected_cuis":["C0000009"]})", allowed, ResponseSchema::kFilter,
                                DropPolicy::kStrict);
            }),
            ErrorCode::kSchema);
  EXPECT_EQ(code_of([&] {
              validate_response(R"({"definitive":["C0000001"],"context_dependent":["C0000001"]})",
                                allowed, ResponseSchema::kClassify);
            }),
            ErrorCode::kClassConflict);
}

TEST(MockProvider, KeywordsAndFilterRuleMatchOracle) {
  EXPECT_EQ(mock_keywords("The Heart-failure, with CARDIAC heart disease and oedema"),
            (std::vector<std::string>{"heart", "failure", "cardiac", "disease", "oedema"}));
  MockChatProvider permissive(MockProfile::kPermissive), strict(MockProfile::kStrict);
  std::vector<CandidateMember> m{{cui(1), "Heart failure", 0, Provenance::kSeed},
                                 {cui(2), "Cardiac arrest", 0, Provenance::kSeed},
                                 {cui(3), "Fracture of femur", 0, Provenance::kSeed},
                                 {cui(4), "Congestive heart failure", 0, Provenance::kSeed}};
  auto prompt = render_filter_prompt(m, heart_failure(), cui(18801));
  auto p = permissive.complete({{"user", prompt}});
  auto s = strict.complete({{"user", prompt}});
  EXPECT_EQ(p.content, R"({"selected_cuis":["C0000001","C0000002","C0000004"]})");
  EXPECT_EQ(s.content, R"({"selected_cuis":["C0000001","C0000004"]})");
  EXPECT_EQ(p.usage.prompt_tokens, (prompt.size() + 3) / 4);
  EXPECT_EQ(p.usage.completion_tokens, (p.content.size() + 3) / 4);

  // Leading clause of the description is "Heart failure".
  auto c = permissive.complete({{"user", render_classify_prompt(m, heart_failure(), "")}});
  EXPECT_EQ(c.content, R"({"definitive":["C0000001"],"context_dependent":["C0000002","C0000003","C0000004"]})");
  EXPECT_EQ(code_of([&] { permissive.complete({{"system", "x"}}); }), ErrorCode::kInvalidArgument);
}

TEST(Curate, MockRunsAreIdenticalAndLabelEverySelection) {
  auto set = candidate_set(members(120));
  set.members[5].name = "Heart failure";
  set.members[77].name = "Chronic cardiac failure";
  set.members[119].name = "heart murmur";
  MockChatProvider provider;
  CurateConfig cfg;
  cfg.n_runs = 3;
  cfg.pricing = Pricing{1e-6, 4e-6};
  auto runs = curate(set, heart_failure(), provider, cfg);
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0].selected, (std::vector<Cui>{cui(6), cui(78), cui(120)}));
  EXPECT_EQ(runs[0].definitive, (CuiSet{cui(6), cui(120)}));
  EXPECT_EQ(runs[0].context_dependent, (CuiSet{cui(78)}));
  for (const auto& r : runs) {
    EXPECT_EQ(r.status, RunStatus::kComplete);
    EXPECT_EQ(r.to_json().dump(), runs[0].to_json().dump());
    EXPECT_EQ(r.usage.calls, 3u + 1u);  // three filter chunks, one classify chunk
    EXPECT_DOUBLE_EQ(r.usage.cost, r.usage.prompt_tokens * 1e-6 + r.usage.completion_tokens * 4e-6);
  }
  EXPECT_EQ(runs[1].run, 2u);
  EXPECT_NE(runs[1].meta_json()["run_id"].get<std::string>().find("hf-run2-"), std::string::npos);
  EXPECT_FALSE(runs[0].to_json().contains("run_id"));
  auto back = CuratedSet::from_json(runs[0].to_json());
  EXPECT_EQ(back.to_json(), runs[0].to_json());
}

TEST(Curate, UnionIsRechunkedBeforeClassification) {
  // Every filter chunk selects everything; classification sees the sorted
  // union in chunks of the configured size.
  ScriptedProvider provider([](const std::vector<ChatMessage>& m) {
    if (is_filter(m)) return std::string("{\"selected_cuis\":") + json_list(listed(m)) + "}";
    return std::string("{\"definitive\":") + json_list(listed(m)) + ",\"context_dependent\":[]}";
  });
  auto m = members(7);
  std::reverse(m.begin(), m.end());
  CurateConfig cfg;
  cfg.n_runs = 1;
  cfg.chunk_size = 3;
  auto run = curate(candidate_set(m), heart_failure(), provider, cfg).front();
  ASSERT_EQ(provider.calls.size(), 6u);
  EXPECT_EQ(listed(provider.calls[3]), (std::vector<std::string>{"C0000001", "C0000002", "C0000003"}));
  EXPECT_EQ(listed(provider.calls[5]), (std::vector<std::string>{"C0000007"}));
  EXPECT_EQ(run.definitive.size(), 7u);
}

TEST(Curate, SchemaErrorsAreReaskedWithCorrectiveNote) {
  int filter_calls = 0;
  ScriptedProvider provider([&](const std::vector<ChatMessage>& m) {
    if (is_filter(m)) {
      ++filter_calls;
      return filter_calls < 3 ? std::string("not json") : std::string(R"({"selected_cuis":["C0000001"]})");
    }
    return std::string(R"({"definitive":["C0000001"],"context_dependent":[]})");
  });
  CurateConfig cfg;
  cfg.n_runs = 1;
  auto run = curate(candidate_set(members(2)), heart_failure(), provider, cfg).front();
  EXPECT_EQ(run.status, RunStatus::kComplete);
  EXPECT_TRUE(run.failures.empty());
  const auto& third = provider.calls[2];
  ASSERT_EQ(third.size(), 5u);
  EXPECT_EQ(third[1].role, "assistant");
  EXPECT_EQ(third[1].content, "not json");
  EXPECT_EQ(third[2].role, "system");
  EXPECT_NE(third[2].content.find("rejected"), std::string::npos);
  EXPECT_EQ(run.usage.calls, 4u);
}

TEST(Curate, ExhaustedRetriesRecordFailureAndUnclassifiedFallBack) {
  ScriptedProvider provider([](const std::vector<ChatMessage>& m) {
    if (is_filter(m)) {
      // Chunk 0 always fails; chunk 1 selects its members.
      if (listed(m).front() == "C0000001") return std::string("{}");
      return std::string("{\"selected_cuis\":") + json_list(listed(m)) + "}";
    }
    return std::string(R"({"definitive":["C0000003"],"context_dependent":["C0000003"]})");
  });
  CurateConfig cfg;
  cfg.n_runs = 1;
  cfg.chunk_size = 2;
  cfg.retries = 2;
  auto run = curate(candidate_set(members(4)), heart_failure(), provider, cfg).front();
  EXPECT_EQ(run.status, RunStatus::kComplete);
  ASSERT_EQ(run.failures.size(), 2u);
  EXPECT_EQ(run.failures[0].stage, "filter");
  EXPECT_EQ(run.failures[0].chunk, 0u);
  EXPECT_EQ(run.failures[1].stage, "classify");
  EXPECT_EQ(run.selected, (std::vector<Cui>{cui(3), cui(4)}));
  EXPECT_EQ(run.unclassified, (CuiSet{cui(3), cui(4)}));
  EXPECT_EQ(run.context_dependent, (CuiSet{cui(3), cui(4)}));
  EXPECT_TRUE(run.definitive.empty());
  // 3 attempts for chunk 0, 1 for chunk 1, 3 for the classify chunk.
  EXPECT_EQ(provider.calls.size(), 7u);
}

TEST(Curate, OmittedCuisAreContextDependent) {
  ScriptedProvider provider([](const std::vector<ChatMessage>& m) {
    if (is_filter(m)) return std::string("{\"selected_cuis\":") + json_list(listed(m)) + "}";
    return std::string(R"({"definitive":["C0000001"],"context_dependent":[]})");
  });
  CurateConfig cfg;
  cfg.n_runs = 1;
  auto run = curate(candidate_set(members(2)), heart_failure(), provider, cfg).front();
  EXPECT_EQ(run.definitive, (CuiSet{cui(1)}));
  EXPECT_EQ(run.context_dependent, (CuiSet{cui(2)}));
  EXPECT_EQ(run.unclassified, (CuiSet{cui(2)}));
}

TEST(Curate, OutageAbortsRunButKeepsPartialResults) {
  ScriptedProvider provider([](const std::vector<ChatMessage>& m) {
    if (is_filter(m) && listed(m).front() == "C0000003") return std::string("THROW");
    if (is_filter(m)) return std::string("{\"selected_cuis\":") + json_list(listed(m)) + "}";
    return std::string(R"({"definitive":[],"context_dependent":[]})");
  });
  CurateConfig cfg;
  cfg.n_runs = 2;
  cfg.chunk_size = 2;
  auto runs = curate(candidate_set(members(6)), heart_failure(), provider, cfg);
  ASSERT_EQ(runs.size(), 2u);
  for (const auto& run : runs) {
    EXPECT_EQ(run.status, RunStatus::kAborted);
    EXPECT_NE(run.abort_reason.find("unavailable"), std::string::npos);
    EXPECT_EQ(run.selected, (std::vector<Cui>{cui(1), cui(2)}));
    EXPECT_EQ(run.to_json()["status"], "aborted");
  }
  // Two filter calls per run; the third chunk is never sent, nor is classify.
  EXPECT_EQ(provider.calls.size(), 4u);
}

TEST(Curate, ConcurrentChunksGiveSameResultAsSerial) {
  auto set = candidate_set(members(230));
  for (std::size_t i = 0; i < set.members.size(); i += 7) set.members[i].name = "heart failure " + std::to_string(i);
  MockChatProvider provider;
  CurateConfig serial;
  serial.n_runs = 1;
  CurateConfig parallel = serial;
  parallel.max_in_flight = 4;
  EXPECT_EQ(curate(set, heart_failure(), provider, serial)[0].to_json(),
            curate(set, heart_failure(), provider, parallel)[0].to_json());
}

TEST(Curate, AuditLogHoldsEveryExchange) {
  TempDir dir;
  MockChatProvider provider;
  CurateConfig cfg;
  cfg.n_runs = 2;
  cfg.audit_dir = dir.path();
  auto set = candidate_set(members(3));
  set.members[0].name = "Heart failure";
  curate(set, heart_failure(), provider, cfg);
  std::ifstream in(dir / "hf" / "run-2.jsonl");
  std::vector<nlohmann::json> records;
  for (std::string line; std::getline(in, line);) records.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0]["stage"], "filter");
  EXPECT_EQ(records[1]["stage"], "classify");
  EXPECT_EQ(records[0]["run"], 2);
  EXPECT_TRUE(records[0]["reply"].is_string());
}

TEST(Curate, RejectsBadConfig) {
  MockChatProvider provider;
  CurateConfig cfg;
  cfg.n_runs = 0;
  EXPECT_EQ(code_of([&] { curate(candidate_set(members(1)), heart_failure(), provider, cfg); }),
            ErrorCode::kInvalidArgument);
}

namespace {

class FakeChatServer {
 public:
  FakeChatServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      last_body = nlohmann::json::parse(req.body);
      if (failures_left > 0) {
        --failures_left;
        res.status = 429;
        return;
      }
      nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "{\"selected_cuis\":[]}"}}}}}},
                           {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 3}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeChatServer() {
    server_.stop();
    thread_.join();
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  std::atomic<int> requests{0};
  std::atomic<int> failures_left{0};
  nlohmann::json last_body;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(OpenAiChat, PostsMessagesWithOptionsAndRetries) {
  FakeChatServer server;
  server.failures_left = 1;
  OpenAiChatConfig cfg;
  cfg.endpoint = {server.base_url(), "sk", std::chrono::seconds(5)};
  cfg.options = {{"temperature", 1}, {"seed", 3}};
  cfg.retry.base_delay = std::chrono::milliseconds(1);
  OpenAiChatProvider provider(cfg);
  auto reply = provider.complete({{"user", "hello"}});
  EXPECT_EQ(reply.content, "{\"selected_cuis\":[]}");
  EXPECT_EQ(reply.usage.prompt_tokens, 12u);
  EXPECT_EQ(server.requests.load(), 2);
  EXPECT_EQ(server.last_body["model"], "gpt-5-mini");
  EXPECT_EQ(server.last_body["seed"], 3);
  EXPECT_EQ(server.last_body["messages"][0]["content"], "hello");
  cfg.options = nlohmann::json::array();
  EXPECT_THROW(OpenAiChatProvider{cfg}, Error);
}
