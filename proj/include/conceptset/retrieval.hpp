#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptset/embedding.hpp"
#include "conceptset/graph.hpp"
#include "conceptset/metrics.hpp"
#include "conceptset/vector_index.hpp"

namespace conceptset {

struct TargetConcept {
  std::string id;
  std::string name;
  // Recall-oriented query text; embedded verbatim and reused in prompts.
  std::string description;
  std::optional<Cui> target_cui;
  std::string fewshots;
  std::string special_instructions;
};

nlohmann::json to_json(const TargetConcept& target);
// Accepts an array of target objects or {"targets": [...]}. Throws kParse.
std::vector<TargetConcept> parse_targets(const nlohmann::json& json);
std::vector<TargetConcept> load_targets(const std::filesystem::path& path);

struct RetrievalConfig {
  std::size_t k = 500;
  std::size_t hops = 0;
  std::size_t max_neighbours = 350;
  std::size_t child_depth = 1;  // 0 disables child expansion
  SemanticTypeSet semantic_types = default_semantic_types();

  // Throws kInvalidArgument unless k >= 1, max_neighbours >= 1 and at least
  // one semantic type is given.
  void validate() const;
  nlohmann::json to_json() const;
  static RetrievalConfig from_json(const nlohmann::json& json);
  bool operator==(const RetrievalConfig&) const = default;
};

enum class Provenance { kSeed, kChild, kHop };

const char* provenance_name(Provenance provenance);
std::optional<Provenance> parse_provenance(std::string_view text);

struct CandidateMember {
  Cui cui;
  std::string name;
  double distance = 0;
  Provenance provenance = Provenance::kSeed;

  bool operator==(const CandidateMember&) const = default;
};

// Retrieved CUIs for one target, ascending by distance to the query (ties by
// CUI), at most config.max_neighbours long, no duplicates.
struct CandidateSet {
  std::string target_id;
  Cui target_cui;
  RetrievalConfig config;
  std::vector<CandidateMember> members;
  std::size_t collected = 0;  // size before the max_neighbours cap

  CuiSet cuis() const;
};

// When `graph` is given, members also carry definition and semantic types.
nlohmann::json to_json(const CandidateSet& set, const ConceptGraph* graph = nullptr);
CandidateSet candidate_set_from_json(const nlohmann::json& json);
// Tab-separated: cui, name, distance, provenance.
void write_candidates_tsv(const CandidateSet& set, std::ostream& out);

// Graph retrieval: k nearest admitted seeds, their descendants to
// child_depth, nodes within `hops` traversals of the seeds, then the
// max_neighbours nearest of everything collected. Provenance on overlap
// prefers seed > child > hop. Throws kInvalidState for an empty index and
// kEmptyResult when no graph node carries an admitted semantic type.
CandidateSet retrieve(const ConceptGraph& graph, const VectorIndex& index,
                      const TargetConcept& target, const RetrievalConfig& config,
                      EmbeddingProvider& provider);
CandidateSet retrieve_for_query(const ConceptGraph& graph, const VectorIndex& index,
                                const TargetConcept& target, const RetrievalConfig& config,
                                std::span<const float> query);

struct SweepRow {
  RetrievalConfig config;
  std::size_t retrieved_count = 0;
  MetricReport recall;
};

struct SweepTable {
  std::string target_id;
  std::vector<SweepRow> rows;
  std::size_t chosen = 0;  // highest recall, ties to fewest retrieved

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// K in {150, 500, 1000} paired with max_neighbours {200, 350, 500}, each at
// hops 0 and 1; other settings copied from `base`.
std::vector<RetrievalConfig> default_sweep_grid(const RetrievalConfig& base = {});

// Throws kInvalidArgument for an empty grid and kUndefinedMetric for an
// empty manual set.
SweepTable sweep_configs(const ConceptGraph& graph, const VectorIndex& index,
                         const TargetConcept& target, std::span<const RetrievalConfig> grid,
                         const CuiSet& manual, EmbeddingProvider& provider);
SweepTable sweep_configs_for_query(const ConceptGraph& graph, const VectorIndex& index,
                                   const TargetConcept& target,
                                   std::span<const RetrievalConfig> grid, const CuiSet& manual,
                                   std::span<const float> query);

struct SetStructureReport {
  std::size_t member_count = 0;
  double mean_connections = 0;
  double sd_connections = 0;
  double fraction_at_most_one = 0;
  double mean_l2_to_target = 0;
  double sd_l2_to_target = 0;
  std::map<Cui, std::size_t> connections;

  nlohmann::json to_json() const;
};

// Within-set connections count edges whose both endpoints are members; SDs
// are sample SDs. Throws kInvalidArgument for an empty set or for members
// (or target) missing from the index.
SetStructureReport analyze_set_structure(const ConceptGraph& graph, const CuiSet& members,
                                         Cui target_cui, const VectorIndex& index);

enum class PlotStatus { kRetrieved, kGoldRetrieved, kGoldMissed };
const char* plot_status_name(PlotStatus status);

// CSV for external network plotting. Header:
//   row_type,cui,name,distance,status,source,target,rel
// One "node" row per CUI in candidates ∪ missed and one "edge" row per graph
// edge between exported nodes. Missed nodes get a distance only when an
// index and query vector are supplied.
void export_plot_data(const CandidateSet& candidates, const ConceptGraph& graph,
                      const CuiSet& gold, const CuiSet& missed, std::ostream& out,
                      const VectorIndex* index = nullptr, std::span<const float> query = {});

}  // namespace conceptset
