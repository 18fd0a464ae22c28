#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptset/metrics.hpp"
#include "conceptset/retrieval.hpp"

namespace conceptset {

struct ReviewItem {
  Cui cui;
  std::string name;
  std::optional<std::string> definition;
  std::vector<std::string> semantic_types;
  double distance = 0;
  Provenance provenance = Provenance::kSeed;

  bool operator==(const ReviewItem&) const = default;
};

struct Decision {
  bool include = false;
  std::optional<ClassLabel> label;  // present iff include
  std::string timestamp;
  std::uint64_t sequence = 0;  // position in the decision log

  bool operator==(const Decision&) const = default;
};

struct ReviewSession {
  std::string id;
  std::string concept_id;
  std::string annotator_id;
  std::vector<ReviewItem> queue;  // ascending distance
  std::map<Cui, Decision> decisions;

  bool operator==(const ReviewSession&) const = default;
};

struct Resolution {
  Cui cui;
  bool include = false;
  std::optional<ClassLabel> label;
};

struct AdjudicationRecord {
  std::string concept_id;
  std::string resolver_id;
  std::vector<std::string> source_sessions;
  std::map<Cui, Resolution> final;  // every queue item
  std::vector<Cui> resolved;        // items settled by the resolver
  std::string timestamp;
};

struct LiveAgreement {
  std::string first_session;
  std::string second_session;
  std::size_t jointly_decided = 0;
  AgreementReport inclusion;                // labels "include" / "exclude"
  std::optional<AgreementReport> label;     // on jointly included items
  std::vector<Cui> disagreements;           // inclusion or class differs
};

nlohmann::json to_json(const ReviewItem& item);
nlohmann::json to_json(const Decision& decision);
nlohmann::json to_json(const ReviewSession& session, bool with_queue = true);
nlohmann::json to_json(const AdjudicationRecord& record);
nlohmann::json to_json(const LiveAgreement& agreement, bool with_disagreements);

// Looks up the candidate queue for a concept id; nullopt when unknown.
using QueueLoader = std::function<std::optional<std::vector<ReviewItem>>(const std::string&)>;

// Reads <dir>/<concept>.json candidate sets (as written by the retrieve
// stage). Concept ids outside [A-Za-z0-9._-] are reported unknown.
QueueLoader queue_loader_from_dir(std::filesystem::path dir);

struct ReviewStoreOptions {
  std::size_t snapshot_every = 100;  // decisions between snapshots
  bool fsync = true;
};

// Durable review state. Every mutation is appended to <dir>/decisions.log
// (one JSON record per line) and flushed to disk before the call returns.
// <dir>/snapshot.json holds the state plus the log offset it covers; opening
// the store loads the snapshot and replays the log tail, discarding a torn
// final line. Thread-safe.
class ReviewStore {
 public:
  ReviewStore(std::filesystem::path dir, QueueLoader loader, ReviewStoreOptions options = {});
  ~ReviewStore();
  ReviewStore(const ReviewStore&) = delete;
  ReviewStore& operator=(const ReviewStore&) = delete;

  // Idempotent per (concept, annotator). Throws kNotFound for an unknown
  // concept and kInvalidArgument for empty ids.
  ReviewSession create_session(const std::string& concept_id, const std::string& annotator_id);
  // Throws kNotFound.
  ReviewSession session(const std::string& session_id) const;
  std::vector<ReviewSession> sessions() const;
  // Session ids for a concept in creation order.
  std::vector<std::string> sessions_for(const std::string& concept_id) const;

  // Upsert. Throws kNotFound (session), kInvalidArgument (CUI not queued,
  // include without class, class without include).
  Decision record_decision(const std::string& session_id, Cui cui, bool include,
                           std::optional<ClassLabel> label);

  // Over the first two sessions of a concept, on items both have decided.
  // Throws kInvalidState with fewer than two sessions or no joint items.
  LiveAgreement live_agreement(const std::string& concept_id) const;

  // Items both annotators agree on are taken as decided; every other queue
  // item needs a resolution. Throws kIncompleteAdjudication listing the
  // uncovered CUIs.
  AdjudicationRecord adjudicate(const std::string& concept_id, const std::string& resolver_id,
                                const std::vector<Resolution>& resolutions);
  std::optional<AdjudicationRecord> adjudication(const std::string& concept_id) const;
  // Columns cui,name,include,class. Throws kNotFound before adjudication.
  std::string gold_csv(const std::string& concept_id) const;

  std::uint64_t log_records() const;
  // Canonical JSON of all sessions and adjudications; equal state gives
  // equal bytes.
  std::string state_dump() const;

  static std::string session_id_for(const std::string& concept_id, const std::string& annotator_id);

 private:
  struct State {
    std::map<std::string, ReviewSession> sessions;
    std::map<std::string, std::vector<std::string>> by_concept;
    std::map<std::string, AdjudicationRecord> adjudications;
    std::uint64_t records = 0;
  };

  void apply(State& state, const nlohmann::json& record) const;
  void append(const nlohmann::json& record);
  void write_snapshot();
  void load();
  static nlohmann::json state_json(const State& state);
  static State state_from_json(const nlohmann::json& json);

  std::filesystem::path dir_;
  QueueLoader loader_;
  ReviewStoreOptions options_;
  mutable std::mutex mutex_;
  State state_;
  int fd_ = -1;
  std::uint64_t offset_ = 0;
  std::size_t since_snapshot_ = 0;
};

struct ReviewPrincipal {
  std::string id;
  std::string role;  // "annotator" or "adjudicator"
};

struct ReviewServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::map<std::string, ReviewPrincipal> tokens;  // bearer token -> principal
  std::filesystem::path static_dir;               // optional UI bundle
};

// JSON HTTP front end for a ReviewStore:
//   POST /sessions                      {concept_id}
//   GET  /sessions/{id}/queue
//   POST /sessions/{id}/decisions       {cui, include, class?}
//   GET  /concepts/{id}/agreement
//   POST /concepts/{id}/adjudication    {resolutions: [{cui, include, class?}]}
//   GET  /concepts/{id}/gold.csv
// Annotators see only their own sessions; the disagreement list and
// adjudication are adjudicator-only. Bearer tokens are a desk-deployment
// convenience, not production authentication.
class ReviewServer {
 public:
  ReviewServer(ReviewStore& store, ReviewServerConfig config);
  ~ReviewServer();

  // Binds and returns the port actually in use.
  int bind();
  // Blocks until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace conceptset
