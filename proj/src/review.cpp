#include "conceptset/review.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>

#include <fmt/format.h>

#include "conceptset/binary_io.hpp"
#include "conceptset/error.hpp"
#include "conceptset/hash.hpp"

namespace conceptset {

namespace {

using nlohmann::json;

std::string now_utc() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buffer[32];
  std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%S", &tm);
  return fmt::format("{}.{:03d}Z", buffer, static_cast<int>(ms));
}

json label_json(const std::optional<ClassLabel>& label) {
  return label ? json(class_label_name(*label)) : json(nullptr);
}

std::optional<ClassLabel> label_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  auto label = parse_class_label(j.get<std::string>());
  if (!label) throw Error(ErrorCode::kParse, "unknown class " + j.get<std::string>());
  return label;
}

ReviewItem item_from_json(const json& j) {
  ReviewItem item;
  item.cui = Cui::from_string(j.at("cui").get<std::string>());
  item.name = j.at("name").get<std::string>();
  if (auto it = j.find("definition"); it != j.end() && !it->is_null())
    item.definition = it->get<std::string>();
  if (auto it = j.find("semantic_types"); it != j.end())
    item.semantic_types = it->get<std::vector<std::string>>();
  item.distance = j.at("distance").get<double>();
  auto prov = parse_provenance(j.at("provenance").get<std::string>());
  if (!prov) throw Error(ErrorCode::kParse, "unknown provenance");
  item.provenance = *prov;
  return item;
}

Decision decision_from_json(const json& j) {
  Decision d;
  d.include = j.at("include").get<bool>();
  d.label = label_from(j.at("class"));
  d.timestamp = j.at("timestamp").get<std::string>();
  d.sequence = j.at("sequence").get<std::uint64_t>();
  return d;
}

ReviewSession session_from_json(const json& j) {
  ReviewSession s;
  s.id = j.at("id").get<std::string>();
  s.concept_id = j.at("concept_id").get<std::string>();
  s.annotator_id = j.at("annotator_id").get<std::string>();
  for (const auto& item : j.at("queue")) s.queue.push_back(item_from_json(item));
  for (const auto& [cui, d] : j.at("decisions").items())
    s.decisions.emplace(Cui::from_string(cui), decision_from_json(d));
  return s;
}

Resolution resolution_from_json(const json& j) {
  Resolution r;
  r.cui = Cui::from_string(j.at("cui").get<std::string>());
  r.include = j.at("include").get<bool>();
  r.label = label_from(j.value("class", json(nullptr)));
  return r;
}

json resolution_json(const Resolution& r) {
  return json{{"cui", r.cui.str()}, {"include", r.include}, {"class", label_json(r.label)}};
}

AdjudicationRecord adjudication_from_json(const json& j) {
  AdjudicationRecord r;
  r.concept_id = j.at("concept_id").get<std::string>();
  r.resolver_id = j.at("resolver_id").get<std::string>();
  r.source_sessions = j.at("source_sessions").get<std::vector<std::string>>();
  for (const auto& item : j.at("final")) {
    auto res = resolution_from_json(item);
    r.final.emplace(res.cui, res);
  }
  for (const auto& c : j.at("resolved")) r.resolved.push_back(Cui::from_string(c.get<std::string>()));
  r.timestamp = j.at("timestamp").get<std::string>();
  return r;
}

void check_label(bool include, const std::optional<ClassLabel>& label, Cui cui) {
  if (include && !label)
    throw Error(ErrorCode::kInvalidArgument, cui.str() + ": an included CUI needs a class");
  if (!include && label)
    throw Error(ErrorCode::kInvalidArgument, cui.str() + ": an excluded CUI takes no class");
}

bool valid_concept_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

void write_all(int fd, std::string_view bytes) {
  while (!bytes.empty()) {
    const auto n = ::write(fd, bytes.data(), bytes.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIo, std::string("decision log write failed: ") + std::strerror(errno));
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
}

}  // namespace

json to_json(const ReviewItem& item) {
  return json{{"cui", item.cui.str()},
              {"name", item.name},
              {"definition", item.definition ? json(*item.definition) : json(nullptr)},
              {"semantic_types", item.semantic_types},
              {"distance", item.distance},
              {"provenance", provenance_name(item.provenance)}};
}

json to_json(const Decision& d) {
  return json{{"include", d.include},
              {"class", label_json(d.label)},
              {"timestamp", d.timestamp},
              {"sequence", d.sequence}};
}

json to_json(const ReviewSession& s, bool with_queue) {
  json j{{"id", s.id},
         {"concept_id", s.concept_id},
         {"annotator_id", s.annotator_id},
         {"queue_length", s.queue.size()},
         {"decided", s.decisions.size()}};
  if (with_queue) {
    json queue = json::array();
    for (const auto& item : s.queue) queue.push_back(to_json(item));
    json decisions = json::object();
    for (const auto& [cui, d] : s.decisions) decisions[cui.str()] = to_json(d);
    j["queue"] = std::move(queue);
    j["decisions"] = std::move(decisions);
  }
  return j;
}

json to_json(const AdjudicationRecord& r) {
  json final = json::array();
  for (const auto& [cui, res] : r.final) final.push_back(resolution_json(res));
  json resolved = json::array();
  for (const auto& c : r.resolved) resolved.push_back(c.str());
  return json{{"concept_id", r.concept_id},
              {"resolver_id", r.resolver_id},
              {"source_sessions", r.source_sessions},
              {"final", std::move(final)},
              {"resolved", std::move(resolved)},
              {"timestamp", r.timestamp}};
}

json to_json(const LiveAgreement& a, bool with_disagreements) {
  json j{{"first_session", a.first_session},
         {"second_session", a.second_session},
         {"jointly_decided", a.jointly_decided},
         {"inclusion", to_json(a.inclusion)},
         {"class", a.label ? to_json(*a.label) : json(nullptr)},
         {"disagreement_count", a.disagreements.size()}};
  if (with_disagreements) {
    json list = json::array();
    for (const auto& c : a.disagreements) list.push_back(c.str());
    j["disagreements"] = std::move(list);
  }
  return j;
}

QueueLoader queue_loader_from_dir(std::filesystem::path dir) {
  return [dir = std::move(dir)](const std::string& concept_id)
             -> std::optional<std::vector<ReviewItem>> {
    if (!valid_concept_id(concept_id)) return std::nullopt;
    const auto path = dir / (concept_id + ".json");
    std::ifstream in(path);
    if (!in) return std::nullopt;
    json j;
    try {
      j = json::parse(in);
      std::vector<ReviewItem> items;
      for (const auto& m : j.at("members")) items.push_back(item_from_json(m));
      return items;
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
    }
  };
}

std::string ReviewStore::session_id_for(const std::string& concept_id,
                                        const std::string& annotator_id) {
  return "s-" + sha256_hex(concept_id + '\n' + annotator_id).substr(0, 16);
}

ReviewStore::ReviewStore(std::filesystem::path dir, QueueLoader loader, ReviewStoreOptions options)
    : dir_(std::move(dir)), loader_(std::move(loader)), options_(options) {
  if (options_.snapshot_every == 0) options_.snapshot_every = 1;
  std::filesystem::create_directories(dir_);
  load();
}

ReviewStore::~ReviewStore() {
  if (fd_ >= 0) ::close(fd_);
}

void ReviewStore::apply(State& state, const json& record) const {
  const auto type = record.at("type").get<std::string>();
  if (type == "session") {
    auto s = session_from_json(record.at("session"));
    if (!state.sessions.contains(s.id)) {
      state.by_concept[s.concept_id].push_back(s.id);
      state.sessions.emplace(s.id, std::move(s));
    }
  } else if (type == "decision") {
    auto& s = state.sessions.at(record.at("session").get<std::string>());
    s.decisions[Cui::from_string(record.at("cui").get<std::string>())] =
        decision_from_json(record.at("decision"));
  } else if (type == "adjudication") {
    auto r = adjudication_from_json(record.at("record"));
    state.adjudications[r.concept_id] = std::move(r);
  } else {
    throw Error(ErrorCode::kParse, "unknown log record type " + type);
  }
  ++state.records;
}

json ReviewStore::state_json(const State& state) {
  json sessions = json::array();
  for (const auto& [id, s] : state.sessions) sessions.push_back(to_json(s, true));
  json adjudications = json::array();
  for (const auto& [id, r] : state.adjudications) adjudications.push_back(to_json(r));
  return json{{"sessions", std::move(sessions)},
              {"concepts", state.by_concept},
              {"adjudications", std::move(adjudications)},
              {"records", state.records}};
}

ReviewStore::State ReviewStore::state_from_json(const json& j) {
  State state;
  for (const auto& s : j.at("sessions")) {
    auto session = session_from_json(s);
    state.sessions.emplace(session.id, std::move(session));
  }
  state.by_concept = j.at("concepts").get<std::map<std::string, std::vector<std::string>>>();
  for (const auto& r : j.at("adjudications")) {
    auto record = adjudication_from_json(r);
    state.adjudications.emplace(record.concept_id, std::move(record));
  }
  state.records = j.at("records").get<std::uint64_t>();
  return state;
}

void ReviewStore::load() {
  const auto log_path = dir_ / "decisions.log";
  const auto snapshot_path = dir_ / "snapshot.json";
  std::uint64_t log_size = std::filesystem::exists(log_path) ? std::filesystem::file_size(log_path) : 0;

  State state;
  std::uint64_t start = 0;
  if (std::filesystem::exists(snapshot_path)) {
    try {
      const auto j = json::parse(read_file_bytes(snapshot_path.string()));
      const auto offset = j.at("log_offset").get<std::uint64_t>();
      if (offset <= log_size) {
        state = state_from_json(j.at("state"));
        start = offset;
      }
    } catch (const std::exception&) {
      // A damaged snapshot is only an optimisation; replay the whole log.
      state = State{};
      start = 0;
    }
  }

  std::uint64_t good_end = start;
  if (log_size > start) {
    std::ifstream in(log_path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(start));
    std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos < rest.size()) {
      const auto nl = rest.find('\n', pos);
      if (nl == std::string::npos) break;  // torn tail
      const std::string_view line(rest.data() + pos, nl - pos);
      json record;
      try {
        record = json::parse(line);
      } catch (const json::exception&) {
        if (rest.find('\n', nl + 1) != std::string::npos)
          throw Error(ErrorCode::kCorruptSnapshot,
                      fmt::format("decision log damaged at byte {}", start + pos));
        break;
      }
      try {
        apply(state, record);
      } catch (const std::exception& e) {
        throw Error(ErrorCode::kCorruptSnapshot,
                    fmt::format("decision log record at byte {}: {}", start + pos, e.what()));
      }
      pos = nl + 1;
      good_end = start + pos;
    }
  }

  fd_ = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(ErrorCode::kIo, "cannot open " + log_path.string());
  if (good_end < log_size && ::ftruncate(fd_, static_cast<off_t>(good_end)) != 0)
    throw Error(ErrorCode::kIo, "cannot truncate torn decision log tail");
  if (::lseek(fd_, static_cast<off_t>(good_end), SEEK_SET) < 0)
    throw Error(ErrorCode::kIo, "cannot seek decision log");
  offset_ = good_end;
  state_ = std::move(state);
}

void ReviewStore::append(const json& record) {
  const std::string line = record.dump() + "\n";
  write_all(fd_, line);
  if (options_.fsync && ::fdatasync(fd_) != 0)
    throw Error(ErrorCode::kIo, std::string("decision log sync failed: ") + std::strerror(errno));
  offset_ += line.size();
  apply(state_, record);
}

void ReviewStore::write_snapshot() {
  const json snapshot{{"log_offset", offset_}, {"state", state_json(state_)}};
  write_file_atomic((dir_ / "snapshot.json").string(), snapshot.dump());
  since_snapshot_ = 0;
}

ReviewSession ReviewStore::create_session(const std::string& concept_id,
                                          const std::string& annotator_id) {
  if (concept_id.empty() || annotator_id.empty())
    throw Error(ErrorCode::kInvalidArgument, "concept and annotator ids are required");
  std::lock_guard lock(mutex_);
  const auto id = session_id_for(concept_id, annotator_id);
  if (auto it = state_.sessions.find(id); it != state_.sessions.end()) return it->second;
  auto queue = loader_(concept_id);
  if (!queue) throw Error(ErrorCode::kNotFound, "no candidate set for concept " + concept_id);
  ReviewSession s;
  s.id = id;
  s.concept_id = concept_id;
  s.annotator_id = annotator_id;
  s.queue = std::move(*queue);
  append(json{{"type", "session"}, {"session", to_json(s, true)}});
  return state_.sessions.at(id);
}

ReviewSession ReviewStore::session(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  auto it = state_.sessions.find(session_id);
  if (it == state_.sessions.end()) throw Error(ErrorCode::kNotFound, "no session " + session_id);
  return it->second;
}

std::vector<ReviewSession> ReviewStore::sessions() const {
  std::lock_guard lock(mutex_);
  std::vector<ReviewSession> out;
  for (const auto& [id, s] : state_.sessions) out.push_back(s);
  return out;
}

std::vector<std::string> ReviewStore::sessions_for(const std::string& concept_id) const {
  std::lock_guard lock(mutex_);
  auto it = state_.by_concept.find(concept_id);
  return it == state_.by_concept.end() ? std::vector<std::string>{} : it->second;
}

Decision ReviewStore::record_decision(const std::string& session_id, Cui cui, bool include,
                                      std::optional<ClassLabel> label) {
  std::lock_guard lock(mutex_);
  auto it = state_.sessions.find(session_id);
  if (it == state_.sessions.end()) throw Error(ErrorCode::kNotFound, "no session " + session_id);
  const auto& queue = it->second.queue;
  if (std::none_of(queue.begin(), queue.end(), [&](const ReviewItem& i) { return i.cui == cui; }))
    throw Error(ErrorCode::kInvalidArgument, cui.str() + " is not in the session queue");
  check_label(include, label, cui);
  Decision d{include, label, now_utc(), state_.records};
  append(json{{"type", "decision"}, {"session", session_id}, {"cui", cui.str()}, {"decision", to_json(d)}});
  if (++since_snapshot_ >= options_.snapshot_every) write_snapshot();
  return d;
}

LiveAgreement ReviewStore::live_agreement(const std::string& concept_id) const {
  std::lock_guard lock(mutex_);
  auto it = state_.by_concept.find(concept_id);
  if (it == state_.by_concept.end() || it->second.size() < 2)
    throw Error(ErrorCode::kInvalidState, "agreement needs two review sessions for " + concept_id);
  const auto& a = state_.sessions.at(it->second[0]);
  const auto& b = state_.sessions.at(it->second[1]);
  LiveAgreement out;
  out.first_session = a.id;
  out.second_session = b.id;
  std::map<std::string, std::string> inc_a, inc_b, cls_a, cls_b;
  for (const auto& [cui, da] : a.decisions) {
    auto db = b.decisions.find(cui);
    if (db == b.decisions.end()) continue;
    inc_a[cui.str()] = da.include ? "include" : "exclude";
    inc_b[cui.str()] = db->second.include ? "include" : "exclude";
    if (da.include && db->second.include) {
      cls_a[cui.str()] = class_label_name(*da.label);
      cls_b[cui.str()] = class_label_name(*db->second.label);
    }
    if (da.include != db->second.include || da.label != db->second.label)
      out.disagreements.push_back(cui);
  }
  if (inc_a.empty())
    throw Error(ErrorCode::kInvalidState, "no item of " + concept_id + " is decided by both annotators");
  out.jointly_decided = inc_a.size();
  out.inclusion = annotator_agreement(inc_a, inc_b);
  if (!cls_a.empty()) out.label = annotator_agreement(cls_a, cls_b);
  return out;
}

AdjudicationRecord ReviewStore::adjudicate(const std::string& concept_id,
                                           const std::string& resolver_id,
                                           const std::vector<Resolution>& resolutions) {
  std::lock_guard lock(mutex_);
  auto it = state_.by_concept.find(concept_id);
  if (it == state_.by_concept.end() || it->second.size() < 2)
    throw Error(ErrorCode::kInvalidState, "adjudication needs two review sessions for " + concept_id);
  const auto& a = state_.sessions.at(it->second[0]);
  const auto& b = state_.sessions.at(it->second[1]);

  std::map<Cui, Resolution> given;
  for (const auto& r : resolutions) {
    check_label(r.include, r.label, r.cui);
    if (std::none_of(a.queue.begin(), a.queue.end(), [&](const ReviewItem& i) { return i.cui == r.cui; }))
      throw Error(ErrorCode::kInvalidArgument, r.cui.str() + " is not in the review queue");
    given[r.cui] = r;
  }

  AdjudicationRecord record;
  record.concept_id = concept_id;
  record.resolver_id = resolver_id;
  record.source_sessions = {a.id, b.id};
  std::vector<Cui> missing;
  for (const auto& item : a.queue) {
    if (auto g = given.find(item.cui); g != given.end()) {
      record.final.emplace(item.cui, g->second);
      record.resolved.push_back(item.cui);
      continue;
    }
    auto da = a.decisions.find(item.cui);
    auto db = b.decisions.find(item.cui);
    if (da != a.decisions.end() && db != b.decisions.end() &&
        da->second.include == db->second.include && da->second.label == db->second.label) {
      record.final.emplace(item.cui, Resolution{item.cui, da->second.include, da->second.label});
    } else {
      missing.push_back(item.cui);
    }
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string list;
    for (const auto& c : missing) list += (list.empty() ? "" : ",") + c.str();
    throw Error(ErrorCode::kIncompleteAdjudication, "unresolved items: " + list);
  }
  record.timestamp = now_utc();
  append(json{{"type", "adjudication"}, {"record", to_json(record)}});
  return state_.adjudications.at(concept_id);
}

std::optional<AdjudicationRecord> ReviewStore::adjudication(const std::string& concept_id) const {
  std::lock_guard lock(mutex_);
  auto it = state_.adjudications.find(concept_id);
  if (it == state_.adjudications.end()) return std::nullopt;
  return it->second;
}

std::string ReviewStore::gold_csv(const std::string& concept_id) const {
  std::lock_guard lock(mutex_);
  auto it = state_.adjudications.find(concept_id);
  if (it == state_.adjudications.end())
    throw Error(ErrorCode::kNotFound, "concept " + concept_id + " has not been adjudicated");
  const auto& record = it->second;
  const auto& queue = state_.sessions.at(record.source_sessions.front()).queue;
  std::map<Cui, std::string> names;
  for (const auto& item : queue) names[item.cui] = item.name;
  std::string out = "cui,name,include,class\n";
  for (const auto& [cui, r] : record.final) {
    out += cui.str() + "," + csv_field(names[cui]) + "," + (r.include ? "1" : "0") + "," +
           (r.label ? class_label_name(*r.label) : "") + "\n";
  }
  return out;
}

std::uint64_t ReviewStore::log_records() const {
  std::lock_guard lock(mutex_);
  return state_.records;
}

std::string ReviewStore::state_dump() const {
  std::lock_guard lock(mutex_);
  return state_json(state_).dump();
}

}  // namespace conceptset
