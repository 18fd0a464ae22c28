#include "conceptset/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "conceptset/binary_io.hpp"
#include "conceptset/error.hpp"
#include "conceptset/graph.hpp"
#include "conceptset/hash.hpp"
#include "conceptset/metrics.hpp"
#include "conceptset/vector_index.hpp"

namespace conceptset {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kIngestMagic = "CSINGST1";
constexpr std::uint32_t kIngestVersion = 1;
// Bumped when a stage's output format or semantics change.
constexpr int kStageVersion = 1;

fs::path resolve(const fs::path& base, const json& j, const char* key, bool required) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    if (required) throw Error(ErrorCode::kInvalidArgument, std::string("config is missing \"") + key + "\"");
    return {};
  }
  if (!it->is_string()) throw Error(ErrorCode::kParse, std::string("\"") + key + "\" must be a string path");
  fs::path p = it->get<std::string>();
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("config field \"") + key + "\": " + e.what());
  }
}

class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) {
    fs::create_directories(run_dir);
    const auto path = run_dir / ".lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(ErrorCode::kIo, "cannot open " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error(ErrorCode::kLocked, "another stage is running in " + run_dir.string());
    }
  }
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw Error(ErrorCode::kStageDependency,
                "missing upstream artifact " + path.string() + " (run `" + producer + "` first)");
}

std::vector<fs::path> files_in(const fs::path& dir, const std::string& suffix) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().string().ends_with(suffix)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Content-hash bookkeeping for a stage.
class StageRecord {
 public:
  StageRecord(const fs::path& run_dir, std::string name, const std::vector<fs::path>& inputs,
              const json& params)
      : path_(run_dir / ".stages" / (name + ".json")), run_dir_(run_dir) {
    Sha256 h;
    h.update(name).update("\n").update(std::to_string(kStageVersion)).update("\n");
    h.update(params.dump()).update("\n");
    for (const auto& in : inputs) {
      h.update(in.filename().string()).update("=").update(sha256_file_hex(in)).update("\n");
    }
    key_ = to_hex(h.finish());
  }

  bool fresh() const {
    if (!fs::exists(path_)) return false;
    try {
      const auto j = json::parse(read_file_bytes(path_.string()));
      if (j.at("key").get<std::string>() != key_) return false;
      for (const auto& [rel, hash] : j.at("outputs").items()) {
        const auto p = run_dir_ / rel;
        if (!fs::exists(p) || sha256_file_hex(p) != hash.get<std::string>()) return false;
      }
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  std::vector<fs::path> outputs() const {
    std::vector<fs::path> out;
    try {
      const auto j = json::parse(read_file_bytes(path_.string()));
      for (const auto& [rel, hash] : j.at("outputs").items()) out.push_back(run_dir_ / rel);
    } catch (const std::exception&) {
    }
    return out;
  }

  void commit(const std::vector<fs::path>& outputs) const {
    json out = json::object();
    for (const auto& p : outputs) out[fs::relative(p, run_dir_).generic_string()] = sha256_file_hex(p);
    fs::create_directories(path_.parent_path());
    write_file_atomic(path_.string(), json{{"key", key_}, {"outputs", out}}.dump(2) + "\n");
  }

 private:
  fs::path path_;
  fs::path run_dir_;
  std::string key_;
};

void write_text(const fs::path& path, std::string_view text) {
  fs::create_directories(path.parent_path());
  write_file_atomic(path.string(), text);
}

json report_json(const rrf::ParseReport& r) {
  json errors = json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(r.errors.size(), 20); ++i)
    errors.push_back({{"line", r.errors[i].line}, {"message", r.errors[i].message}});
  return json{{"lines", r.lines},
              {"records", r.records},
              {"filtered", r.filtered},
              {"self_loops", r.self_loops},
              {"malformed", r.error_count},
              {"first_errors", std::move(errors)}};
}

json stats_json(const GraphStats& s) {
  return json{{"node_count", s.node_count},
              {"edge_count", s.edge_count},
              {"directed_edge_count", s.directed_edge_count},
              {"median_degree", s.median_degree},
              {"degree_q1", s.degree_q1},
              {"degree_q3", s.degree_q3},
              {"min_degree", s.min_degree},
              {"max_degree", s.max_degree},
              {"isolated_count", s.isolated_count},
              {"isolated_fraction", s.isolated_fraction}};
}

json embedding_params(const EmbeddingSettings& e) {
  json j{{"provider", e.provider}, {"dimension", e.dimension}};
  if (e.provider == "local") {
    j["seed"] = e.seed;
  } else {
    j["model"] = e.model;
    j["base_url"] = e.base_url;
    j["request_dimensions"] = e.request_dimensions;
  }
  return j;
}

json chat_params(const ChatSettings& c) {
  json j{{"provider", c.provider}};
  if (c.provider == "openai") {
    j["model"] = c.model;
    j["base_url"] = c.base_url;
    j["options"] = c.options;
  }
  if (c.pricing) j["pricing"] = {c.pricing->input_per_token, c.pricing->output_per_token};
  return j;
}

std::string query_bytes(std::span<const float> query) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(query.size()));
  for (float f : query) w.f32(f);
  return w.take();
}

std::vector<float> read_query(const fs::path& path) {
  const auto bytes = read_file_bytes(path.string());
  ByteReader r(bytes, ErrorCode::kCorruptIndex);
  std::vector<float> out(r.u32());
  for (auto& f : out) f = r.f32();
  if (!r.done()) r.fail("trailing bytes in " + path.string());
  return out;
}

std::optional<LabelledSet> optional_csv(const fs::path& dir, const std::string& id) {
  if (dir.empty()) return std::nullopt;
  const auto path = dir / (id + ".csv");
  if (!fs::exists(path)) return std::nullopt;
  return read_labelled_csv_file(path.string());
}


struct Aggregate {
  std::vector<double> values;
  std::size_t undefined = 0;

  void add(const std::optional<double>& v) {
    if (v) values.push_back(*v);
    else ++undefined;
  }
  json to_json() const {
    if (values.empty()) return json{{"mean", nullptr}, {"sd", nullptr}, {"n", 0}, {"undefined", undefined}};
    const auto ms = run_variability(values);
    return json{{"mean", ms.mean}, {"sd", ms.sd}, {"n", values.size()}, {"undefined", undefined}};
  }
};

std::string fmt_opt(const json& v) { return v.is_null() ? "NA" : fmt::format("{:.4f}", v.get<double>()); }

}  // namespace

std::string serialize_ingest(const IngestData& data) {
  ByteWriter w;
  w.bytes(kIngestMagic);
  w.u32(kIngestVersion);
  w.u64(data.atoms.size());
  for (const auto& a : data.atoms) {
    w.u32(a.cui.number());
    w.str(a.language);
    w.u8(static_cast<std::uint8_t>(a.term_status));
    w.str(a.string_type);
    w.u8(a.is_preferred ? 1 : 0);
    w.str(a.source_vocabulary);
    w.str(a.name);
    w.u8(static_cast<std::uint8_t>(a.suppress));
  }
  w.u64(data.relations.size());
  for (const auto& r : data.relations) {
    w.u32(r.cui1.number());
    w.u32(r.cui2.number());
    w.str(r.rel);
    w.str(r.rela);
    w.str(r.source_vocabulary);
  }
  w.u64(data.attributes.size());
  for (const auto& [cui, attr] : data.attributes) {
    w.u32(cui.number());
    w.u8(attr.definition ? 1 : 0);
    if (attr.definition) w.str(*attr.definition);
    w.u32(static_cast<std::uint32_t>(attr.semantic_types.size()));
    for (const auto& t : attr.semantic_types) w.str(t);
  }
  const auto digest = sha256(w.data());
  w.bytes(std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size()));
  return w.take();
}

IngestData deserialize_ingest(std::string_view bytes) {
  constexpr std::size_t kDigest = 32;
  if (bytes.size() < kIngestMagic.size() + 4 + kDigest)
    throw Error(ErrorCode::kCorruptSnapshot, "ingest bundle is truncated");
  const auto body = bytes.substr(0, bytes.size() - kDigest);
  const auto digest = sha256(body);
  if (bytes.substr(body.size()) != std::string_view(reinterpret_cast<const char*>(digest.data()), kDigest))
    throw Error(ErrorCode::kCorruptSnapshot, "ingest bundle checksum mismatch");
  ByteReader r(body, ErrorCode::kCorruptSnapshot);
  if (r.bytes(kIngestMagic.size()) != kIngestMagic) r.fail("bad ingest bundle magic");
  if (r.u32() != kIngestVersion) r.fail("unsupported ingest bundle version");
  IngestData data;
  auto cui = [&] {
    try {
      return Cui::from_number(r.u32());
    } catch (const Error&) {
      r.fail("CUI out of range in ingest bundle");
    }
  };
  const auto n_atoms = r.u64();
  for (std::uint64_t i = 0; i < n_atoms; ++i) {
    rrf::AtomRecord a;
    a.cui = cui();
    a.language = r.str();
    a.term_status = static_cast<char>(r.u8());
    a.string_type = r.str();
    a.is_preferred = r.u8() != 0;
    a.source_vocabulary = r.str();
    a.name = r.str();
    a.suppress = static_cast<char>(r.u8());
    data.atoms.push_back(std::move(a));
  }
  const auto n_rel = r.u64();
  for (std::uint64_t i = 0; i < n_rel; ++i) {
    rrf::RelationRecord rel;
    rel.cui1 = cui();
    rel.cui2 = cui();
    rel.rel = r.str();
    rel.rela = r.str();
    rel.source_vocabulary = r.str();
    data.relations.push_back(std::move(rel));
  }
  const auto n_attr = r.u64();
  for (std::uint64_t i = 0; i < n_attr; ++i) {
    rrf::ConceptAttributes attr;
    attr.cui = cui();
    if (r.u8()) attr.definition = r.str();
    const auto n_types = r.u32();
    for (std::uint32_t t = 0; t < n_types; ++t) attr.semantic_types.insert(r.str());
    data.attributes.emplace(attr.cui, std::move(attr));
  }
  if (!r.done()) r.fail("trailing bytes in ingest bundle");
  return data;
}

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, "config must be a JSON object");
  PipelineConfig c;
  c.rrf_dir = resolve(base, j, "rrf_dir", true);
  c.run_dir = resolve(base, j, "run_dir", true);
  c.targets = resolve(base, j, "targets", true);
  c.manual_dir = resolve(base, j, "manual_dir", false);
  c.gold_dir = resolve(base, j, "gold_dir", false);
  if (auto it = j.find("vocabularies"); it != j.end())
    c.vocabularies = get_or<rrf::VocabularySet>(j, "vocabularies", {});
  c.language = get_or<std::string>(j, "language", c.language);

  const json emb = j.value("embedding", json::object());
  auto& e = c.embedding;
  e.provider = get_or(emb, "provider", e.provider);
  e.dimension = get_or(emb, "dimension", e.dimension);
  e.seed = get_or(emb, "seed", e.seed);
  e.batch = get_or(emb, "batch", e.batch);
  e.max_in_flight = get_or(emb, "max_in_flight", e.max_in_flight);
  e.base_url = get_or(emb, "base_url", e.base_url);
  e.model = get_or(emb, "model", e.model);
  e.api_key_env = get_or(emb, "api_key_env", e.api_key_env);
  e.request_dimensions = get_or(emb, "request_dimensions", e.request_dimensions);

  const json chat = j.value("chat", json::object());
  auto& ch = c.chat;
  ch.provider = get_or(chat, "provider", ch.provider);
  ch.base_url = get_or(chat, "base_url", ch.base_url);
  ch.model = get_or(chat, "model", ch.model);
  ch.api_key_env = get_or(chat, "api_key_env", ch.api_key_env);
  ch.options = chat.value("options", json::object());
  if (auto it = chat.find("pricing"); it != chat.end() && it->is_object()) {
    ch.pricing = Pricing{get_or(*it, "input_per_token", 0.0), get_or(*it, "output_per_token", 0.0)};
  }

  if (auto it = j.find("retrieval"); it != j.end()) c.retrieval = RetrievalConfig::from_json(*it);

  const json cur = j.value("curation", json::object());
  auto& cu = c.curation;
  cu.chunk_size = get_or(cur, "chunk_size", cu.chunk_size);
  cu.retries = get_or(cur, "retries", cu.retries);
  cu.runs = get_or(cur, "runs", cu.runs);
  cu.max_in_flight = get_or(cur, "max_in_flight", cu.max_in_flight);
  const auto drop = get_or<std::string>(cur, "drop_policy", "lenient");
  if (drop != "lenient" && drop != "strict") throw Error(ErrorCode::kParse, "drop_policy must be lenient or strict");
  cu.drop_policy = drop == "strict" ? DropPolicy::kStrict : DropPolicy::kLenient;

  const json rev = j.value("review", json::object());
  c.review.host = get_or(rev, "host", c.review.host);
  c.review.port = get_or(rev, "port", c.review.port);
  c.review.static_dir = resolve(base, rev, "static_dir", false);
  if (auto it = rev.find("tokens"); it != rev.end()) {
    for (const auto& [token, who] : it->items()) {
      ReviewPrincipal p{get_or<std::string>(who, "id", ""), get_or<std::string>(who, "role", "annotator")};
      if (p.id.empty() || (p.role != "annotator" && p.role != "adjudicator"))
        throw Error(ErrorCode::kParse, "review token entries need an id and a valid role");
      c.review.tokens.emplace(token, p);
    }
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "config file " + path.string() + " not found");
  json j;
  try {
    j = json::parse(read_file_bytes(path.string()));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

void PipelineConfig::validate() const {
  if (!fs::is_directory(rrf_dir)) throw Error(ErrorCode::kNotFound, "RRF directory " + rrf_dir.string() + " not found");
  if (!fs::exists(targets)) throw Error(ErrorCode::kNotFound, "targets file " + targets.string() + " not found");
  if (vocabularies.empty()) throw Error(ErrorCode::kInvalidArgument, "at least one vocabulary is required");
  if (embedding.dimension == 0 || embedding.batch == 0)
    throw Error(ErrorCode::kInvalidArgument, "embedding dimension and batch must be positive");
  if (curation.chunk_size == 0 || curation.runs == 0)
    throw Error(ErrorCode::kInvalidArgument, "chunk_size and runs must be positive");
  retrieval.validate();
}

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const EmbeddingSettings& s) {
  if (s.provider == "local") return std::make_unique<HashingEmbeddingProvider>(s.dimension, s.seed);
  if (s.provider == "openai") {
    RemoteEmbeddingConfig rc;
    rc.endpoint = Endpoint{s.base_url, api_key_from_env(s.api_key_env)};
    rc.model = s.model;
    rc.dimension = s.dimension;
    rc.request_dimensions = s.request_dimensions;
    return std::make_unique<RemoteEmbeddingProvider>(std::move(rc));
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown embedding provider " + s.provider);
}

std::unique_ptr<ChatProvider> make_chat_provider(const ChatSettings& s) {
  if (s.provider == "mock-permissive") return std::make_unique<MockChatProvider>(MockProfile::kPermissive);
  if (s.provider == "mock-strict") return std::make_unique<MockChatProvider>(MockProfile::kStrict);
  if (s.provider == "openai") {
    OpenAiChatConfig oc;
    oc.endpoint = Endpoint{s.base_url, api_key_from_env(s.api_key_env)};
    oc.model = s.model;
    oc.options = s.options;
    return std::make_unique<OpenAiChatProvider>(std::move(oc));
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown chat provider " + s.provider);
}

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) { config_.validate(); }

fs::path Pipeline::ingest_path() const { return config_.run_dir / "ingest.bin"; }
fs::path Pipeline::graph_path() const { return config_.run_dir / "graph.snap"; }
fs::path Pipeline::restricted_graph_path() const { return config_.run_dir / "graph_restricted.snap"; }
fs::path Pipeline::stats_path() const { return config_.run_dir / "graph_stats.json"; }
fs::path Pipeline::embeddings_path() const { return config_.run_dir / "embeddings.bin"; }
fs::path Pipeline::index_path() const { return config_.run_dir / "index.bin"; }
fs::path Pipeline::candidates_dir() const { return config_.run_dir / "candidates"; }
fs::path Pipeline::sweep_dir() const { return config_.run_dir / "sweep"; }
fs::path Pipeline::curated_dir() const { return config_.run_dir / "curated"; }
fs::path Pipeline::report_path() const { return config_.run_dir / "report.json"; }
fs::path Pipeline::report_text_path() const { return config_.run_dir / "report.txt"; }
fs::path Pipeline::review_dir() const { return config_.run_dir / "review"; }

StageResult Pipeline::ingest() {
  RunLock lock(config_.run_dir);
  const auto dir = config_.rrf_dir;
  const std::vector<fs::path> inputs = {dir / "MRCONSO.RRF", dir / "MRREL.RRF", dir / "MRDEF.RRF",
                                        dir / "MRSTY.RRF"};
  for (const auto& p : inputs) require(p, "fixture generate");
  StageRecord record(config_.run_dir, "ingest", inputs,
                     json{{"vocabularies", config_.vocabularies}, {"language", config_.language}});
  StageResult result{"ingest", false, {ingest_path(), config_.run_dir / "ingest_report.json"}, ""};
  if (record.fresh()) {
    result.skipped = true;
    return result;
  }
  IngestData data;
  std::ifstream conso(inputs[0], std::ios::binary), rel(inputs[1], std::ios::binary),
      def(inputs[2], std::ios::binary), sty(inputs[3], std::ios::binary);
  const auto conso_report = rrf::parse_concepts(conso, config_.vocabularies, config_.language,
                                                [&](rrf::AtomRecord&& a) { data.atoms.push_back(std::move(a)); });
  const auto rel_report = rrf::parse_relations(
      rel, config_.vocabularies, [&](rrf::RelationRecord&& r) { data.relations.push_back(std::move(r)); });
  auto attrs = rrf::parse_attributes(def, sty);
  data.attributes = std::move(attrs.attributes);
  write_file_atomic(ingest_path().string(), serialize_ingest(data));
  const json report{{"MRCONSO", report_json(conso_report)},
                    {"MRREL", report_json(rel_report)},
                    {"MRDEF", report_json(attrs.definitions_report)},
                    {"MRSTY", report_json(attrs.semantic_types_report)},
                    {"attribute_cuis", data.attributes.size()}};
  write_text(result.outputs[1], report.dump(2) + "\n");
  record.commit(result.outputs);
  result.summary = fmt::format("{} atoms, {} relations, {} CUIs with attributes ({} malformed lines)",
                               data.atoms.size(), data.relations.size(), data.attributes.size(),
                               conso_report.error_count + rel_report.error_count +
                                   attrs.definitions_report.error_count +
                                   attrs.semantic_types_report.error_count);
  return result;
}

StageResult Pipeline::graph_build() {
  RunLock lock(config_.run_dir);
  require(ingest_path(), "ingest");
  StageRecord record(config_.run_dir, "graph-build", {ingest_path()},
                     json{{"semantic_types", config_.retrieval.semantic_types}});
  StageResult result{"graph build", false,
                     {graph_path(), restricted_graph_path(), config_.run_dir / "graph_build.json"}, ""};
  if (record.fresh()) {
    result.skipped = true;
    return result;
  }
  const auto data = deserialize_ingest(read_file_bytes(ingest_path().string()));
  auto built = build_graph(data.atoms, data.relations, data.attributes);
  const auto restricted = restrict_graph(built.graph, config_.retrieval.semantic_types);
  save_graph(built.graph, graph_path());
  save_graph(restricted, restricted_graph_path());
  const json report{{"nodes", built.graph.node_count()},
                    {"edges", built.graph.edge_count()},
                    {"restricted_nodes", restricted.node_count()},
                    {"restricted_edges", restricted.edge_count()},
                    {"dangling_relations", built.report.dangling_relations},
                    {"duplicate_relations", built.report.duplicate_relations},
                    {"hierarchical_edges", built.report.hierarchical_edges},
                    {"associative_edges", built.report.associative_edges}};
  write_text(result.outputs[2], report.dump(2) + "\n");
  record.commit(result.outputs);
  result.summary = fmt::format("{} nodes / {} edges; restricted {} nodes / {} edges",
                               built.graph.node_count(), built.graph.edge_count(),
                               restricted.node_count(), restricted.edge_count());
  return result;
}

StageResult Pipeline::graph_stats() {
  RunLock lock(config_.run_dir);
  require(graph_path(), "graph build");
  require(restricted_graph_path(), "graph build");
  StageRecord record(config_.run_dir, "graph-stats", {graph_path(), restricted_graph_path()}, json::object());
  StageResult result{"graph stats", false, {stats_path()}, ""};
  if (!record.fresh()) {
    const auto full = load_graph(graph_path());
    const auto restricted = load_graph(restricted_graph_path());
    const json stats{{"graph", stats_json(conceptset::graph_stats(full))},
                     {"restricted", stats_json(conceptset::graph_stats(restricted))}};
    write_text(stats_path(), stats.dump(2) + "\n");
    record.commit(result.outputs);
  } else {
    result.skipped = true;
  }
  result.summary = read_file_bytes(stats_path().string());
  return result;
}

StageResult Pipeline::embed() {
  RunLock lock(config_.run_dir);
  require(restricted_graph_path(), "graph build");
  StageRecord record(config_.run_dir, "embed", {restricted_graph_path()},
                     embedding_params(config_.embedding));
  StageResult result{"embed", false, {embeddings_path()}, ""};
  if (record.fresh()) {
    result.skipped = true;
    return result;
  }
  const auto graph = load_graph(restricted_graph_path());
  std::vector<NodeText> texts;
  texts.reserve(graph.node_count());
  for (const auto& n : graph.nodes()) texts.push_back(node_text(n));
  auto provider = make_embedding_provider(config_.embedding);
  fs::create_directories(config_.run_dir / "cache");
  EmbeddingCache cache(config_.run_dir / "cache" / "embeddings.cache");
  EmbedOptions options;
  options.batch = config_.embedding.batch;
  options.max_in_flight = config_.embedding.max_in_flight;
  options.cache = &cache;
  auto matrix = embed_all(texts, *provider, options);
  const auto count = matrix.count();
  write_file_atomic(embeddings_path().string(), serialize_index(VectorIndex::from_matrix(std::move(matrix))));
  record.commit(result.outputs);
  result.summary = fmt::format("{} vectors of dimension {} ({})", count, provider->dimension(), provider->name());
  return result;
}

StageResult Pipeline::index_build() {
  RunLock lock(config_.run_dir);
  require(embeddings_path(), "embed");
  require(restricted_graph_path(), "graph build");
  StageRecord record(config_.run_dir, "index-build", {embeddings_path(), restricted_graph_path()}, json::object());
  StageResult result{"index build", false, {index_path()}, ""};
  if (record.fresh()) {
    result.skipped = true;
    return result;
  }
  auto index = deserialize_index(read_file_bytes(embeddings_path().string()));
  const auto graph = load_graph(restricted_graph_path());
  for (const auto& n : graph.nodes()) {
    if (!index.find(n.cui))
      throw Error(ErrorCode::kStageDependency,
                  "embeddings lack " + n.cui.str() + "; rerun `embed` after `graph build`");
  }
  save_index(index, index_path());
  record.commit(result.outputs);
  result.summary = fmt::format("{} rows, dimension {}", index.size(), index.dimension());
  return result;
}

StageResult Pipeline::retrieve() {
  RunLock lock(config_.run_dir);
  require(restricted_graph_path(), "graph build");
  require(index_path(), "index build");
  StageRecord record(config_.run_dir, "retrieve", {restricted_graph_path(), index_path(), config_.targets},
                     json{{"retrieval", config_.retrieval.to_json()},
                          {"embedding", embedding_params(config_.embedding)}});
  StageResult result{"retrieve", false, {}, ""};
  if (record.fresh()) {
    result.skipped = true;
    result.outputs = record.outputs();
    return result;
  }
  const auto graph = load_graph(restricted_graph_path());
  const auto index = load_index(index_path());
  const auto targets = load_targets(config_.targets);
  auto provider = make_embedding_provider(config_.embedding);
  fs::create_directories(candidates_dir());
  for (const auto& t : targets) {
    const auto query = embed_query(*provider, t.description);
    const auto set = retrieve_for_query(graph, index, t, config_.retrieval, query);
    const auto base = candidates_dir() / t.id;
    write_text(fs::path(base.string() + ".json"), to_json(set, &graph).dump(2) + "\n");
    std::ostringstream tsv;
    write_candidates_tsv(set, tsv);
    write_text(fs::path(base.string() + ".tsv"), tsv.str());
    write_text(fs::path(base.string() + ".query.bin"), query_bytes(query));
    for (const char* ext : {".json", ".tsv", ".query.bin"}) result.outputs.push_back(base.string() + ext);
    result.summary += fmt::format("{}: {} candidates (collected {}), target {}\n", t.id, set.members.size(),
                                  set.collected, set.target_cui.str());
  }
  record.commit(result.outputs);
  return result;
}

StageResult Pipeline::sweep() {
  RunLock lock(config_.run_dir);
  require(restricted_graph_path(), "graph build");
  require(index_path(), "index build");
  if (config_.manual_dir.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep needs manual_dir in the config");
  auto inputs = std::vector<fs::path>{restricted_graph_path(), index_path(), config_.targets};
  for (const auto& f : files_in(config_.manual_dir, ".csv")) inputs.push_back(f);
  StageRecord record(config_.run_dir, "sweep", inputs,
                     json{{"retrieval", config_.retrieval.to_json()},
                          {"embedding", embedding_params(config_.embedding)}});
  StageResult result{"sweep", false, {}, ""};
  if (record.fresh()) {
    result.skipped = true;
    result.outputs = record.outputs();
    for (const auto& p : result.outputs)
      if (p.extension() == ".txt") result.summary += read_file_bytes(p.string());
    return result;
  }
  const auto graph = load_graph(restricted_graph_path());
  const auto index = load_index(index_path());
  auto provider = make_embedding_provider(config_.embedding);
  const auto grid = default_sweep_grid(config_.retrieval);
  for (const auto& t : load_targets(config_.targets)) {
    const auto manual = optional_csv(config_.manual_dir, t.id);
    if (!manual) {
      result.summary += t.id + ": no manual set, skipped\n";
      continue;
    }
    const auto query = embed_query(*provider, t.description);
    const auto table = sweep_configs_for_query(graph, index, t, grid, manual->members, query);
    const auto base = sweep_dir() / t.id;
    write_text(fs::path(base.string() + ".json"), table.to_json().dump(2) + "\n");
    write_text(fs::path(base.string() + ".txt"), table.to_text());
    result.outputs.push_back(base.string() + ".json");
    result.outputs.push_back(base.string() + ".txt");
    result.summary += table.to_text();
  }
  record.commit(result.outputs);
  return result;
}

StageResult Pipeline::curate() {
  RunLock lock(config_.run_dir);
  const auto targets = load_targets(config_.targets);
  std::vector<fs::path> inputs{config_.targets};
  for (const auto& t : targets) {
    const auto p = candidates_dir() / (t.id + ".json");
    require(p, "retrieve");
    inputs.push_back(p);
  }
  const auto& cu = config_.curation;
  StageRecord record(config_.run_dir, "curate", inputs,
                     json{{"chat", chat_params(config_.chat)},
                          {"chunk_size", cu.chunk_size},
                          {"retries", cu.retries},
                          {"runs", cu.runs},
                          {"drop_policy", cu.drop_policy == DropPolicy::kStrict ? "strict" : "lenient"}});
  StageResult result{"curate", false, {}, ""};
  if (record.fresh()) {
    result.skipped = true;
    result.outputs = record.outputs();
    return result;
  }
  auto provider = make_chat_provider(config_.chat);
  CurateConfig cc;
  cc.chunk_size = cu.chunk_size;
  cc.retries = cu.retries;
  cc.n_runs = cu.runs;
  cc.max_in_flight = cu.max_in_flight;
  cc.drop_policy = cu.drop_policy;
  cc.pricing = config_.chat.pricing;
  cc.audit_dir = config_.run_dir / "audit";
  // Stale runs from an earlier, larger --runs must not leak into evaluate.
  fs::remove_all(curated_dir());
  for (const auto& t : targets) {
    const auto set = candidate_set_from_json(
        json::parse(read_file_bytes((candidates_dir() / (t.id + ".json")).string())));
    const auto runs = conceptset::curate(set, t, *provider, cc);
    for (const auto& r : runs) {
      const auto dir = curated_dir() / t.id / fmt::format("run-{}", r.run);
      write_text(dir / "curated.json", r.to_json().dump(2) + "\n");
      write_text(dir / "run_meta.json", r.meta_json().dump(2) + "\n");
      result.outputs.push_back(dir / "curated.json");
      result.summary += fmt::format("{} run {}: {} selected ({} definitive, {} context-dependent), {} failed chunks{}\n",
                                    t.id, r.run, r.selected.size(), r.definitive.size(),
                                    r.context_dependent.size(), r.failures.size(),
                                    r.status == RunStatus::kAborted ? ", ABORTED: " + r.abort_reason : "");
    }
  }
  record.commit(result.outputs);
  return result;
}

StageResult Pipeline::evaluate() {
  RunLock lock(config_.run_dir);
  const auto targets = load_targets(config_.targets);
  std::vector<fs::path> inputs{config_.targets};
  require(restricted_graph_path(), "graph build");
  require(index_path(), "index build");
  inputs.push_back(restricted_graph_path());
  for (const auto& t : targets) {
    const auto p = candidates_dir() / (t.id + ".json");
    require(p, "retrieve");
    inputs.push_back(p);
    const auto run1 = curated_dir() / t.id / "run-1" / "curated.json";
    require(run1, "curate");
  }
  for (const auto& f : files_in(curated_dir(), "curated.json")) inputs.push_back(f);
  for (const auto& f : files_in(config_.manual_dir, ".csv")) inputs.push_back(f);
  for (const auto& f : files_in(config_.gold_dir, ".csv")) inputs.push_back(f);
  StageRecord record(config_.run_dir, "evaluate", inputs, json::object());
  StageResult result{"evaluate", false, {report_path(), report_text_path()}, ""};
  if (record.fresh()) {
    result.skipped = true;
    result.outputs = record.outputs();
    result.summary = read_file_bytes(report_text_path().string());
    return result;
  }
  const auto graph = load_graph(restricted_graph_path());
  const auto index = load_index(index_path());

  json report_targets = json::array();
  std::string table = fmt::format("{:<28} {:<32} {:>8} {:>8} {:>5}\n", "target", "metric", "mean", "sd", "runs");
  auto row = [&](const std::string& target, const std::string& metric, const json& agg) {
    table += fmt::format("{:<28} {:<32} {:>8} {:>8} {:>5}\n", target, metric, fmt_opt(agg.at("mean")),
                         fmt_opt(agg.at("sd")), agg.at("n").get<std::size_t>());
  };
  for (const auto& t : targets) {
    const auto set = candidate_set_from_json(
        json::parse(read_file_bytes((candidates_dir() / (t.id + ".json")).string())));
    const auto retrieved = set.cuis();
    const auto manual = optional_csv(config_.manual_dir, t.id);
    const auto gold = optional_csv(config_.gold_dir, t.id);
    json entry{{"id", t.id}, {"retrieved", retrieved.size()}};

    if (manual && !manual->members.empty()) {
      entry["manual_size"] = manual->members.size();
      entry["retrieval"] = to_json(retrieval_recall(manual->members, retrieved));
    }
    if (gold && !gold->members.empty()) {
      entry["gold_size"] = gold->members.size();
      if (manual) {
        entry["manual_recall"] = to_json(manual_recall(manual->members, gold->members));
        if (!manual->members.empty()) {
          const auto sa = set_agreement(manual->members, gold->members);
          entry["manual_gold_agreement"] = {{"jaccard", sa.jaccard},
                                            {"overlap", sa.overlap},
                                            {"union", sa.union_size},
                                            {"intersection", sa.intersection_size}};
        }
      }
      CuiSet indexed_gold;
      for (const auto& c : gold->members)
        if (index.find(c)) indexed_gold.insert(c);
      if (!indexed_gold.empty() && index.find(set.target_cui))
        entry["gold_structure"] = analyze_set_structure(graph, indexed_gold, set.target_cui, index).to_json();
      CuiSet missed;
      for (const auto& c : gold->members)
        if (!retrieved.contains(c)) missed.insert(c);
      std::ostringstream plot;
      const auto query_path = candidates_dir() / (t.id + ".query.bin");
      const auto query = fs::exists(query_path) ? read_query(query_path) : std::vector<float>{};
      export_plot_data(set, graph, gold->members, missed, plot, &index, query);
      const auto plot_path = config_.run_dir / "plots" / (t.id + ".csv");
      write_text(plot_path, plot.str());
      result.outputs.push_back(plot_path);
    }

    Aggregate f_recall, f_precision, f_f1, macro_r, macro_p, macro_f1, n_selected;
    json runs = json::array();
    for (std::size_t run = 1;; ++run) {
      const auto path = curated_dir() / t.id / fmt::format("run-{}", run) / "curated.json";
      if (!fs::exists(path)) break;
      const auto curated = CuratedSet::from_json(json::parse(read_file_bytes(path.string())));
      const CuiSet predicted(curated.selected.begin(), curated.selected.end());
      json r{{"run", run}, {"status", curated.status == RunStatus::kComplete ? "complete" : "aborted"},
             {"selected", predicted.size()}};
      n_selected.add(static_cast<double>(predicted.size()));
      if (gold) {
        const auto m = llm_filter_metrics(predicted, gold->members, retrieved);
        r["filter"] = to_json(m);
        f_recall.add(m.recall);
        f_precision.add(m.precision);
        f_f1.add(m.f1);
        std::map<Cui, ClassLabel> gold_labels;
        for (const auto& [cui, label] : gold->class_of)
          if (gold->members.contains(cui)) gold_labels.emplace(cui, label);
        const auto labels = curated.labels();
        const bool overlap = std::any_of(labels.begin(), labels.end(),
                                         [&](const auto& kv) { return gold_labels.contains(kv.first); });
        if (overlap) {
          const auto cr = classification_report(labels, gold_labels);
          r["classification"] = to_json(cr);
          macro_r.add(cr.macro_recall);
          macro_p.add(cr.macro_precision);
          macro_f1.add(cr.macro_f1);
        } else {
          r["classification"] = nullptr;
          macro_r.add(std::nullopt);
          macro_p.add(std::nullopt);
          macro_f1.add(std::nullopt);
        }
      }
      runs.push_back(std::move(r));
    }
    entry["runs"] = std::move(runs);
    json summary{{"selected", n_selected.to_json()}};
    if (gold) {
      summary["filter_recall"] = f_recall.to_json();
      summary["filter_precision"] = f_precision.to_json();
      summary["filter_f1"] = f_f1.to_json();
      summary["macro_recall"] = macro_r.to_json();
      summary["macro_precision"] = macro_p.to_json();
      summary["macro_f1"] = macro_f1.to_json();
    }
    entry["summary"] = summary;

    if (entry.contains("retrieval")) {
      const auto& rr = entry["retrieval"];
      for (const char* k : {"recall", "precision", "f1"})
        row(t.id, std::string("retrieval_") + k, json{{"mean", rr.at(k)}, {"sd", rr.at(k).is_null() ? json(nullptr) : json(0.0)}, {"n", 1}});
    }
    if (entry.contains("manual_recall")) {
      const auto& mr = entry["manual_recall"].at("recall");
      row(t.id, "manual_recall", json{{"mean", mr}, {"sd", mr.is_null() ? json(nullptr) : json(0.0)}, {"n", 1}});
    }
    for (const auto& [metric, agg] : summary.items()) row(t.id, metric, agg);
    report_targets.push_back(std::move(entry));
  }
  write_text(report_path(), json{{"targets", std::move(report_targets)}}.dump(2) + "\n");
  write_text(report_text_path(), table);
  record.commit(result.outputs);
  result.summary = table;
  return result;
}

}  // namespace conceptset
