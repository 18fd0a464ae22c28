#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "conceptset/cui.hpp"
#include "conceptset/rrf.hpp"

namespace conceptset {

using SemanticTypeSet = std::set<std::string>;

struct ConceptNode {
  Cui cui;
  std::string preferred_name;
  std::vector<std::string> synonyms;
  std::optional<std::string> definition;
  std::set<std::string> semantic_types;
  std::set<std::string> source_vocabularies;

  bool operator==(const ConceptNode&) const = default;
};

enum class EdgeKind : std::uint8_t {
  kHierarchical = 0,  // from = parent, to = child
  kAssociative = 1,   // undirected; from < to by node index
};

struct RelationEdge {
  std::uint32_t from = 0;
  std::uint32_t to = 0;
  EdgeKind kind = EdgeKind::kAssociative;
  std::string rel;
  std::string rela;

  bool operator==(const RelationEdge&) const = default;
};

// Direction in which an incident edge is seen from a node.
enum class EdgeDirection : std::uint8_t { kParentToChild, kChildToParent, kUndirected };

struct Incidence {
  std::uint32_t edge;
  std::uint32_t neighbour;
  EdgeDirection direction;
};

// Immutable concept graph. Nodes are ordered by CUI; each conceptual relation
// is one edge and is reachable from both endpoints, which is how the graph is
// bi-directed. Safe for any number of concurrent readers.
class ConceptGraph {
 public:
  ConceptGraph() = default;

  // Validates endpoint closure and CUI uniqueness, then builds adjacency.
  // Nodes must be sorted by CUI; edges are canonicalised (sorted, deduplicated).
  static ConceptGraph from_parts(std::vector<ConceptNode> nodes,
                                 std::vector<RelationEdge> edges,
                                 std::optional<SemanticTypeSet> restriction);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<ConceptNode>& nodes() const { return nodes_; }
  const std::vector<RelationEdge>& edges() const { return edges_; }
  const ConceptNode& node(std::uint32_t index) const { return nodes_.at(index); }
  const std::optional<SemanticTypeSet>& restriction() const { return restriction_; }

  std::optional<std::uint32_t> find(Cui cui) const;
  bool contains(Cui cui) const { return find(cui).has_value(); }

  std::span<const std::uint32_t> children(std::uint32_t index) const;
  std::span<const std::uint32_t> parents(std::uint32_t index) const;
  std::span<const Incidence> incident(std::uint32_t index) const;
  std::uint32_t degree(std::uint32_t index) const {
    return static_cast<std::uint32_t>(incident(index).size());
  }

 private:
  std::vector<ConceptNode> nodes_;
  std::vector<RelationEdge> edges_;
  std::optional<SemanticTypeSet> restriction_;
  std::unordered_map<Cui, std::uint32_t> by_cui_;
  std::vector<std::uint32_t> child_offsets_, child_list_;
  std::vector<std::uint32_t> parent_offsets_, parent_list_;
  std::vector<std::uint32_t> incident_offsets_;
  std::vector<Incidence> incident_list_;
};

struct GraphBuildOptions {
  // Treat rela=isa / inverse_isa rows as hierarchical regardless of REL.
  bool isa_is_hierarchical = true;
  std::size_t max_synonyms = 10;
};

struct GraphBuildReport {
  std::uint64_t dangling_relations = 0;
  std::uint64_t duplicate_relations = 0;
  std::uint64_t hierarchical_edges = 0;
  std::uint64_t associative_edges = 0;
};

struct BuiltGraph {
  ConceptGraph graph;
  GraphBuildReport report;
};

// One node per distinct CUI among `atoms`. Relations with an endpoint outside
// that set are dropped and counted.
BuiltGraph build_graph(const std::vector<rrf::AtomRecord>& atoms,
                       const std::vector<rrf::RelationRecord>& relations,
                       const rrf::AttributeMap& attributes,
                       const GraphBuildOptions& options = {});

const SemanticTypeSet& default_semantic_types();

// Induced subgraph on nodes holding at least one allowed semantic type.
// Throws Error(kInvalidArgument) when `allowed` is empty.
ConceptGraph restrict_graph(const ConceptGraph& graph, const SemanticTypeSet& allowed);

struct GraphStats {
  std::size_t node_count = 0;
  std::size_t edge_count = 0;           // each conceptual relation once
  std::size_t directed_edge_count = 0;  // both stored directions
  double median_degree = 0;
  double degree_q1 = 0;
  double degree_q3 = 0;
  std::uint32_t min_degree = 0;
  std::uint32_t max_degree = 0;
  std::size_t isolated_count = 0;
  double isolated_fraction = 0;
};

// Throws Error(kInvalidArgument) on an empty graph.
GraphStats graph_stats(const ConceptGraph& graph);

// Linear-interpolation quantile of sorted data, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);

// Node indices reachable from `root` through parent->child edges within
// `depth` hops, root excluded, ascending. Throws kInvalidArgument for depth 0.
std::vector<std::uint32_t> descendant_indices(const ConceptGraph& graph,
                                              std::uint32_t root, std::size_t depth);
// Throws Error(kNotFound) for an unknown root.
CuiSet descendants(const ConceptGraph& graph, Cui root, std::size_t depth);

// Nodes within `hops` traversals of any seed over every edge kind, seeds
// excluded, ascending.
std::vector<std::uint32_t> within_hops(const ConceptGraph& graph,
                                       std::span<const std::uint32_t> seeds,
                                       std::size_t hops);

// Versioned little-endian snapshot: header (magic, version, counts), node
// table, string pool, edge list, restriction, SHA-256 trailer.
std::string serialize_graph(const ConceptGraph& graph);
ConceptGraph deserialize_graph(std::string_view bytes);
void save_graph(const ConceptGraph& graph, const std::filesystem::path& path);
ConceptGraph load_graph(const std::filesystem::path& path);

}  // namespace conceptset
