#include "conceptset/curation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <fstream>
#include <future>
#include <mutex>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "conceptset/error.hpp"

namespace conceptset {

namespace {

using nlohmann::json;

const char* const kFilterHead =
    "You are a biomedical assistant working with a UMLS-based knowledge graph.\n"
    "\n"
    "Task: Filter the CUIs provided below that should reasonably be considered to indicate "
    "the target concept.\n"
    "\n"
    "Include if:\n"
    "1) It directly denotes the target concept or is a clinically equivalent synonym.\n"
    "2) It is a subtype/child that is commonly subsumed by the target concept without "
    "additional qualifiers.\n"
    "3) It is a closely bound variant naming (spelling variants, common aliases).\n"
    "4) It is a procedure, therapy, medication, lab/test, measurement, risk factor, aetiology, "
    "complication, manifestation, generic finding, or care event (e.g., specialty clinic "
    "attendance, disease-management programs, surgery admissions) that is widely recognised as "
    "a proxy or near-unique indicator of the target concept.\n"
    "\n"
    "Exclude if:\n"
    "1) It is a generic parent/container concept that is not commonly used as the disease name.\n"
    "2) It expresses only suspicion, family history, or negation of the target concept.\n"
    "3) It is clearly unrelated or ambiguous.\n"
    "\n"
    "Prefer inclusion to preserve recall for direct assertion concepts. For conditional "
    "categories in 4), include only when specificity is high; if uncertain about specificity, "
    "exclude.\n"
    "\n";

const char* const kFilterFormat =
    "OUTPUT FORMAT (strict):\n"
    "- Return ONLY valid JSON with exactly one key: \"selected_cuis\".\n"
    "- \"selected_cuis\" MUST be an array of CUIs (strings matching ^C\\d{7}$).\n"
    "- You may ONLY output CUIs from the provided candidate list below.\n"
    "- No prose, no comments, no extra keys.\n"
    "- De-duplicate and sort CUIs ascending for stability.\n"
    "\n"
    "Candidates:\n";

const char* const kClassifyHead =
    "You are a biomedical assistant working with UMLS CUIs.\n"
    "\n"
    "Task: Classify every provided CUI listed below into exactly one of the categories as "
    "defined below.\n"
    "\n"
    "Rules:\n"
    "1) \"definitive\": direct, unambiguous assertion of the target concept (or strict "
    "synonyms).\n"
    "2) \"context_dependent\": modifiers, tests, measurements, risk factors, causes, "
    "complications, manifestations: include parents only if the term commonly used to refer to "
    "the target concept; subtypes that need qualifiers.\n"
    "3) Tie-breakers: when uncertain, prefer \"context_dependent\"; choose specific assertion "
    "over generic parent.\n"
    "4) No omissions, no duplicates.\n"
    "\n";

const char* const kClassifyFormat =
    "Return ONLY valid JSON with exactly these keys: \"definitive\" and \"context_dependent\".\n"
    "Values MUST be arrays of CUIs (strings like \"C1234567\") drawn ONLY from the provided "
    "list.\n"
    "Do NOT include names, comments, or extra keys.\n"
    "\n"
    "Example:\n";

const char* const kClassifyExample =
    "{\n"
    "  \"definitive\": [\"C0000001\", \"C0000002\"],\n"
    "  \"context_dependent\": [\"C0000003\"]\n"
    "}\n";

const char* const kFilterDescriptionPrefix = "Target concept description/aliases: ";
const char* const kClassifyTargetPrefix = "Target concept: ";

std::string one_line(std::string_view text) {
  std::string out(text);
  for (auto& c : out)
    if (c == '\n' || c == '\r') c = ' ';
  return out;
}

void append_lines(std::string& out, std::span<const CandidateMember> members) {
  for (const auto& m : members) out += m.cui.str() + ": " + one_line(m.name) + "\n";
}

void require_target(const TargetConcept& target) {
  if (target.name.empty())
    throw Error(ErrorCode::kInvalidArgument, "target " + target.id + " has no name");
  if (target.description.empty())
    throw Error(ErrorCode::kInvalidArgument, "target " + target.id + " has no description");
}

std::uint64_t approx_tokens(std::size_t chars) { return (chars + 3) / 4; }

std::vector<std::string> alnum_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

const std::set<std::string>& stopwords() {
  static const std::set<std::string> words = {
      "also",    "concept", "concepts", "exclude", "from",  "include", "into",
      "only",    "other",   "related",  "such",    "than",  "that",    "their",
      "there",   "these",   "this",     "those",   "when",  "where",   "which",
      "with",    "without"};
  return words;
}

struct ParsedPrompt {
  ResponseSchema schema = ResponseSchema::kFilter;
  std::string description;
  std::vector<std::pair<Cui, std::string>> items;
};

ParsedPrompt parse_prompt(const std::string& prompt) {
  ParsedPrompt parsed;
  const bool filter = prompt.find("\"selected_cuis\"") != std::string::npos;
  parsed.schema = filter ? ResponseSchema::kFilter : ResponseSchema::kClassify;
  const std::string list_header = filter ? "Candidates:" : "CUIs:";
  const std::string description_prefix = filter ? kFilterDescriptionPrefix : kClassifyTargetPrefix;
  std::istringstream in(prompt);
  std::string line;
  bool in_list = false;
  while (std::getline(in, line)) {
    if (in_list) {
      auto colon = line.find(": ");
      if (colon == std::string::npos) continue;
      if (auto cui = Cui::parse(std::string_view(line).substr(0, colon)))
        parsed.items.emplace_back(*cui, line.substr(colon + 2));
    } else if (line == list_header) {
      in_list = true;
    } else if (parsed.description.empty() && line.rfind(description_prefix, 0) == 0) {
      parsed.description = line.substr(description_prefix.size());
    }
  }
  return parsed;
}

std::string json_cui_list(const std::vector<Cui>& cuis) {
  json arr = json::array();
  for (const auto& c : cuis) arr.push_back(c.str());
  return arr.dump();
}

json cui_array(const std::vector<Cui>& cuis) {
  json arr = json::array();
  for (const auto& c : cuis) arr.push_back(c.str());
  return arr;
}

json cui_array(const CuiSet& cuis) { return cui_array(std::vector<Cui>(cuis.begin(), cuis.end())); }

std::vector<Cui> read_cuis(const json& arr) {
  std::vector<Cui> out;
  for (const auto& item : arr) out.push_back(Cui::from_string(item.get<std::string>()));
  return out;
}

const char* run_status_name(RunStatus s) {
  return s == RunStatus::kComplete ? "complete" : "aborted";
}

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buffer[32];
  std::strftime(buffer, sizeof(buffer), "%Y%m%dT%H%M%SZ", &tm);
  return buffer;
}

}  // namespace

std::vector<std::string> mock_keywords(std::string_view text) {
  std::vector<std::string> out;
  for (auto& t : alnum_tokens(text)) {
    if (t.size() < 4 || stopwords().contains(t)) continue;
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(std::move(t));
  }
  return out;
}

MockChatProvider::MockChatProvider(MockProfile profile) : profile_(profile) {}

std::string MockChatProvider::name() const {
  return profile_ == MockProfile::kPermissive ? "mock-permissive" : "mock-strict";
}

std::string MockChatProvider::model() const { return name() + "-v1"; }

ChatReply MockChatProvider::complete(const std::vector<ChatMessage>& messages) {
  const ChatMessage* prompt = nullptr;
  std::size_t chars = 0;
  for (const auto& m : messages) {
    chars += m.content.size();
    if (!prompt && m.role == "user") prompt = &m;
  }
  if (!prompt) throw Error(ErrorCode::kInvalidArgument, "mock chat needs a user message");
  const auto parsed = parse_prompt(prompt->content);

  const auto keywords = mock_keywords(parsed.description);
  const std::set<std::string> keyword_set(keywords.begin(), keywords.end());
  ChatReply reply;
  if (parsed.schema == ResponseSchema::kFilter) {
    const std::size_t needed = profile_ == MockProfile::kPermissive ? 1 : 2;
    std::vector<Cui> selected;
    for (const auto& [cui, name] : parsed.items) {
      std::size_t shared = 0;
      for (const auto& k : mock_keywords(name)) shared += keyword_set.contains(k);
      if (shared >= needed) selected.push_back(cui);
    }
    std::sort(selected.begin(), selected.end());
    selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    reply.content = "{\"selected_cuis\":" + json_cui_list(selected) + "}";
  } else {
    const auto end = parsed.description.find_first_of(",.");
    const auto leading = alnum_tokens(parsed.description.substr(0, end));
    const std::set<std::string> lead(leading.begin(), leading.end());
    std::vector<Cui> definitive, context;
    for (const auto& [cui, name] : parsed.items) {
      const auto tokens = alnum_tokens(name);
      (!tokens.empty() && lead.contains(tokens.front()) ? definitive : context).push_back(cui);
    }
    reply.content = "{\"definitive\":" + json_cui_list(definitive) +
                    ",\"context_dependent\":" + json_cui_list(context) + "}";
  }
  reply.usage.prompt_tokens = approx_tokens(chars);
  reply.usage.completion_tokens = approx_tokens(reply.content.size());
  return reply;
}

OpenAiChatProvider::OpenAiChatProvider(OpenAiChatConfig config)
    : config_(std::move(config)), client_(config_.endpoint) {
  if (!config_.options.is_object())
    throw Error(ErrorCode::kInvalidArgument, "chat options must be a JSON object");
}

ChatReply OpenAiChatProvider::complete(const std::vector<ChatMessage>& messages) {
  json body = config_.options;
  body["model"] = config_.model;
  body["messages"] = json::array();
  for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  const json response =
      with_backoff(config_.retry, [&] { return client_.post("/chat/completions", body); });
  try {
    ChatReply reply;
    const auto& message = response.at("choices").at(0).at("message");
    reply.content = message.at("content").is_null() ? "" : message.at("content").get<std::string>();
    if (auto it = response.find("usage"); it != response.end() && it->is_object()) {
      reply.usage.prompt_tokens = it->value("prompt_tokens", std::uint64_t{0});
      reply.usage.completion_tokens = it->value("completion_tokens", std::uint64_t{0});
    }
    return reply;
  } catch (const json::exception& e) {
    throw RemoteError(std::string("malformed chat completion response: ") + e.what(), 200, false);
  }
}

std::vector<std::vector<CandidateMember>> chunk(std::span<const CandidateMember> candidates,
                                                std::size_t size) {
  if (size == 0) throw Error(ErrorCode::kInvalidArgument, "chunk size must be at least 1");
  std::vector<std::vector<CandidateMember>> out;
  for (std::size_t i = 0; i < candidates.size(); i += size) {
    const auto n = std::min(size, candidates.size() - i);
    out.emplace_back(candidates.begin() + static_cast<std::ptrdiff_t>(i),
                     candidates.begin() + static_cast<std::ptrdiff_t>(i + n));
  }
  return out;
}

std::string render_filter_prompt(std::span<const CandidateMember> members,
                                 const TargetConcept& target, Cui target_cui) {
  if (members.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot render an empty chunk");
  require_target(target);
  std::string out = kFilterHead;
  out += "Target concept: " + one_line(target.name) + " (CUI: " + target_cui.str() + ")\n\n";
  out += kFilterDescriptionPrefix + one_line(target.description) + "\n\n";
  out += "Special include/exclude instructions: " +
         (target.special_instructions.empty() ? std::string("none")
                                              : one_line(target.special_instructions)) +
         "\n\n";
  out += kFilterFormat;
  append_lines(out, members);
  return out;
}

std::string render_classify_prompt(std::span<const CandidateMember> selected,
                                   const TargetConcept& target, std::string_view fewshots) {
  if (selected.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot render an empty chunk");
  require_target(target);
  std::string out = kClassifyHead;
  out += kClassifyTargetPrefix + one_line(target.description) + "\n\n";
  out += "Few-shot examples: " + (fewshots.empty() ? std::string("none") : one_line(fewshots)) +
         "\n\n";
  out += kClassifyFormat;
  out += kClassifyExample;
  out += "\nCUIs:\n";
  append_lines(out, selected);
  return out;
}

std::string classify_example_block() { return kClassifyExample; }

ValidatedResponse validate_response(std::string_view raw, const CuiSet& allowed,
                                    ResponseSchema schema, DropPolicy policy) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::exception&) {
    throw Error(ErrorCode::kSchema, "reply is not valid JSON");
  }
  if (!j.is_object()) throw Error(ErrorCode::kSchema, "reply must be a JSON object");
  const std::vector<std::string> keys = schema == ResponseSchema::kFilter
                                            ? std::vector<std::string>{"selected_cuis"}
                                            : std::vector<std::string>{"definitive", "context_dependent"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw Error(ErrorCode::kSchema, "unexpected key \"" + key + "\"");
  }
  ValidatedResponse out;
  CuiSet dropped;
  auto read = [&](const std::string& key) {
    auto it = j.find(key);
    if (it == j.end()) throw Error(ErrorCode::kSchema, "missing key \"" + key + "\"");
    if (!it->is_array()) throw Error(ErrorCode::kSchema, "\"" + key + "\" must be an array");
    CuiSet kept;
    for (const auto& item : *it) {
      if (!item.is_string()) throw Error(ErrorCode::kSchema, "\"" + key + "\" holds a non-string");
      const auto text = item.get<std::string>();
      auto cui = Cui::parse(text);
      if (!cui) throw Error(ErrorCode::kSchema, "malformed CUI \"" + text + "\"");
      if (!allowed.contains(*cui)) {
        if (policy == DropPolicy::kStrict)
          throw Error(ErrorCode::kSchema, cui->str() + " is not among the provided CUIs");
        dropped.insert(*cui);
        continue;
      }
      kept.insert(*cui);
    }
    return std::vector<Cui>(kept.begin(), kept.end());
  };
  if (schema == ResponseSchema::kFilter) {
    out.selected = read("selected_cuis");
  } else {
    out.definitive = read("definitive");
    out.context_dependent = read("context_dependent");
    std::vector<Cui> both;
    std::set_intersection(out.definitive.begin(), out.definitive.end(),
                          out.context_dependent.begin(), out.context_dependent.end(),
                          std::back_inserter(both));
    if (!both.empty())
      throw Error(ErrorCode::kClassConflict, both.front().str() + " is listed in both classes");
  }
  out.dropped.assign(dropped.begin(), dropped.end());
  return out;
}

std::map<Cui, ClassLabel> CuratedSet::labels() const {
  std::map<Cui, ClassLabel> out;
  for (const auto& c : definitive) out.emplace(c, ClassLabel::kDefinitive);
  for (const auto& c : context_dependent) out.emplace(c, ClassLabel::kContextDependent);
  return out;
}

json CuratedSet::to_json() const {
  json failures_json = json::array();
  for (const auto& f : failures)
    failures_json.push_back({{"stage", f.stage}, {"chunk", f.chunk}, {"error", f.error}});
  return json{{"target_id", target_id},
              {"status", run_status_name(status)},
              {"abort_reason", abort_reason},
              {"selected", cui_array(selected)},
              {"definitive", cui_array(definitive)},
              {"context_dependent", cui_array(context_dependent)},
              {"unclassified", cui_array(unclassified)},
              {"dropped", cui_array(dropped)},
              {"failures", std::move(failures_json)},
              {"usage",
               {{"prompt_tokens", usage.prompt_tokens},
                {"completion_tokens", usage.completion_tokens},
                {"calls", usage.calls},
                {"cost", usage.cost}}}};
}

json CuratedSet::meta_json() const {
  return json{{"run_id", run_id},
              {"run", run},
              {"provider", provider},
              {"wall_seconds", usage.wall_seconds}};
}

CuratedSet CuratedSet::from_json(const json& j) {
  try {
    CuratedSet s;
    s.target_id = j.at("target_id").get<std::string>();
    const auto status = j.at("status").get<std::string>();
    if (status != "complete" && status != "aborted")
      throw Error(ErrorCode::kParse, "unknown run status " + status);
    s.status = status == "complete" ? RunStatus::kComplete : RunStatus::kAborted;
    s.abort_reason = j.value("abort_reason", std::string());
    s.selected = read_cuis(j.at("selected"));
    for (const auto& c : read_cuis(j.at("definitive"))) s.definitive.insert(c);
    for (const auto& c : read_cuis(j.at("context_dependent"))) s.context_dependent.insert(c);
    for (const auto& c : read_cuis(j.value("unclassified", json::array()))) s.unclassified.insert(c);
    s.dropped = read_cuis(j.value("dropped", json::array()));
    for (const auto& f : j.value("failures", json::array()))
      s.failures.push_back({f.at("stage").get<std::string>(), f.at("chunk").get<std::size_t>(),
                            f.at("error").get<std::string>()});
    const auto& u = j.at("usage");
    s.usage.prompt_tokens = u.at("prompt_tokens").get<std::uint64_t>();
    s.usage.completion_tokens = u.at("completion_tokens").get<std::uint64_t>();
    s.usage.calls = u.value("calls", std::uint64_t{0});
    s.usage.cost = u.at("cost").get<double>();
    s.run_id = j.value("run_id", std::string());
    s.run = j.value("run", std::size_t{0});
    s.provider = j.value("provider", std::string());
    s.usage.wall_seconds = j.value("wall_seconds", 0.0);
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("curated set: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParse) throw;
    throw Error(ErrorCode::kParse, std::string("curated set: ") + e.what());
  }
}

namespace {

struct ChunkOutcome {
  std::optional<ValidatedResponse> response;
  std::string error;      // last schema error when response is empty
  std::string outage;     // non-schema failure; aborts the run
  ChatUsage usage;
  std::uint64_t calls = 0;
  std::vector<json> audit;
};

ChunkOutcome ask(ChatProvider& provider, const std::string& prompt, const CuiSet& allowed,
                 ResponseSchema schema, const CurateConfig& config, const char* stage,
                 std::size_t chunk_index) {
  ChunkOutcome outcome;
  std::vector<ChatMessage> messages{{"user", prompt}};
  for (std::size_t attempt = 0; attempt <= config.retries; ++attempt) {
    json record{{"stage", stage}, {"chunk", chunk_index}, {"attempt", attempt}};
    json sent = json::array();
    for (const auto& m : messages) sent.push_back({{"role", m.role}, {"content", m.content}});
    record["messages"] = std::move(sent);
    ChatReply reply;
    try {
      reply = provider.complete(messages);
    } catch (const std::exception& e) {
      outcome.outage = e.what();
      record["reply"] = nullptr;
      record["error"] = outcome.outage;
      outcome.audit.push_back(std::move(record));
      return outcome;
    }
    ++outcome.calls;
    outcome.usage.prompt_tokens += reply.usage.prompt_tokens;
    outcome.usage.completion_tokens += reply.usage.completion_tokens;
    record["reply"] = reply.content;
    record["usage"] = {{"prompt_tokens", reply.usage.prompt_tokens},
                       {"completion_tokens", reply.usage.completion_tokens}};
    try {
      outcome.response = validate_response(reply.content, allowed, schema, config.drop_policy);
      record["error"] = nullptr;
      outcome.audit.push_back(std::move(record));
      return outcome;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSchema && e.code() != ErrorCode::kClassConflict) throw;
      outcome.error = e.what();
      record["error"] = outcome.error;
      outcome.audit.push_back(std::move(record));
    }
    messages.push_back({"assistant", reply.content});
    messages.push_back({"system", "Your previous reply was rejected: " + outcome.error +
                                      ". Reply again with only the JSON object in the required "
                                      "format."});
  }
  return outcome;
}

// Runs ask() over every chunk with at most max_in_flight concurrent calls and
// returns outcomes in chunk order.
std::vector<ChunkOutcome> ask_all(ChatProvider& provider, const std::vector<std::string>& prompts,
                                  const std::vector<CuiSet>& allowed, ResponseSchema schema,
                                  const CurateConfig& config, const char* stage) {
  std::vector<ChunkOutcome> outcomes;
  const std::size_t width = std::max<std::size_t>(1, config.max_in_flight);
  for (std::size_t begin = 0; begin < prompts.size(); begin += width) {
    const auto end = std::min(prompts.size(), begin + width);
    if (end - begin == 1) {
      outcomes.push_back(ask(provider, prompts[begin], allowed[begin], schema, config, stage, begin));
    } else {
      std::vector<std::future<ChunkOutcome>> wave;
      for (auto i = begin; i < end; ++i) {
        wave.push_back(std::async(std::launch::async, [&, i] {
          return ask(provider, prompts[i], allowed[i], schema, config, stage, i);
        }));
      }
      for (auto& f : wave) outcomes.push_back(f.get());
    }
    // Stop issuing further waves once the provider is down.
    if (std::any_of(outcomes.begin() + static_cast<std::ptrdiff_t>(begin), outcomes.end(),
                    [](const ChunkOutcome& o) { return !o.outage.empty(); }))
      break;
  }
  return outcomes;
}

CuratedSet run_once(const CandidateSet& candidates, const TargetConcept& target,
                    ChatProvider& provider, const CurateConfig& config, std::size_t run,
                    std::ofstream* audit) {
  const auto started = std::chrono::steady_clock::now();
  CuratedSet out;
  out.target_id = target.id;
  out.run = run;
  out.provider = provider.name();
  out.run_id = fmt::format("{}-run{}-{}", target.id, run, utc_stamp());

  std::map<Cui, const CandidateMember*> by_cui;
  for (const auto& m : candidates.members) by_cui.emplace(m.cui, &m);

  auto account = [&](const std::vector<ChunkOutcome>& outcomes) {
    for (const auto& o : outcomes) {
      out.usage.prompt_tokens += o.usage.prompt_tokens;
      out.usage.completion_tokens += o.usage.completion_tokens;
      out.usage.calls += o.calls;
      if (audit) {
        for (auto record : o.audit) {
          record["run"] = run;
          *audit << record.dump() << '\n';
        }
      }
    }
  };
  auto first_outage = [](const std::vector<ChunkOutcome>& outcomes) -> std::string {
    for (const auto& o : outcomes)
      if (!o.outage.empty()) return o.outage;
    return {};
  };

  CuiSet dropped;
  const auto filter_chunks = chunk(candidates.members, config.chunk_size);
  std::vector<std::string> prompts;
  std::vector<CuiSet> allowed;
  for (const auto& c : filter_chunks) {
    prompts.push_back(render_filter_prompt(c, target, candidates.target_cui));
    CuiSet a;
    for (const auto& m : c) a.insert(m.cui);
    allowed.push_back(std::move(a));
  }
  const auto filtered = ask_all(provider, prompts, allowed, ResponseSchema::kFilter, config, "filter");
  account(filtered);
  CuiSet selected;
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    const auto& o = filtered[i];
    if (o.response) {
      selected.insert(o.response->selected.begin(), o.response->selected.end());
      dropped.insert(o.response->dropped.begin(), o.response->dropped.end());
    } else if (o.outage.empty()) {
      out.failures.push_back({"filter", i, o.error});
    }
  }
  out.selected.assign(selected.begin(), selected.end());
  std::string outage = first_outage(filtered);

  if (outage.empty() && !out.selected.empty()) {
    std::vector<CandidateMember> chosen;
    for (const auto& c : out.selected) chosen.push_back(*by_cui.at(c));
    const auto classify_chunks = chunk(chosen, config.chunk_size);
    prompts.clear();
    allowed.clear();
    for (const auto& c : classify_chunks) {
      prompts.push_back(render_classify_prompt(c, target, target.fewshots));
      CuiSet a;
      for (const auto& m : c) a.insert(m.cui);
      allowed.push_back(std::move(a));
    }
    const auto classified =
        ask_all(provider, prompts, allowed, ResponseSchema::kClassify, config, "classify");
    account(classified);
    for (std::size_t i = 0; i < classified.size(); ++i) {
      const auto& o = classified[i];
      if (o.response) {
        out.definitive.insert(o.response->definitive.begin(), o.response->definitive.end());
        out.context_dependent.insert(o.response->context_dependent.begin(),
                                     o.response->context_dependent.end());
        dropped.insert(o.response->dropped.begin(), o.response->dropped.end());
      } else if (o.outage.empty()) {
        out.failures.push_back({"classify", i, o.error});
      }
    }
    outage = first_outage(classified);
  }

  for (const auto& c : out.selected) {
    if (!out.definitive.contains(c) && !out.context_dependent.contains(c)) {
      out.unclassified.insert(c);
      out.context_dependent.insert(c);
    }
  }
  out.dropped.assign(dropped.begin(), dropped.end());
  if (!outage.empty()) {
    out.status = RunStatus::kAborted;
    out.abort_reason = outage;
  }
  if (config.pricing) {
    out.usage.cost = static_cast<double>(out.usage.prompt_tokens) * config.pricing->input_per_token +
                     static_cast<double>(out.usage.completion_tokens) *
                         config.pricing->output_per_token;
  }
  out.usage.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace

std::vector<CuratedSet> curate(const CandidateSet& candidates, const TargetConcept& target,
                               ChatProvider& provider, const CurateConfig& config) {
  if (config.n_runs == 0) throw Error(ErrorCode::kInvalidArgument, "n_runs must be at least 1");
  if (config.chunk_size == 0)
    throw Error(ErrorCode::kInvalidArgument, "chunk size must be at least 1");
  require_target(target);
  std::vector<CuratedSet> runs;
  for (std::size_t run = 1; run <= config.n_runs; ++run) {
    std::ofstream audit;
    if (!config.audit_dir.empty()) {
      const auto dir = config.audit_dir / target.id;
      std::filesystem::create_directories(dir);
      const auto path = dir / fmt::format("run-{}.jsonl", run);
      audit.open(path, std::ios::trunc);
      if (!audit) throw Error(ErrorCode::kIo, "cannot write " + path.string());
    }
    runs.push_back(run_once(candidates, target, provider, config, run,
                            audit.is_open() ? &audit : nullptr));
  }
  return runs;
}

}  // namespace conceptset
