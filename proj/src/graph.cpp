#include "conceptset/graph.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <tuple>
#include <unordered_set>

#include "conceptset/binary_io.hpp"
#include "conceptset/error.hpp"
#include "conceptset/hash.hpp"

namespace conceptset {

namespace {

constexpr char kSnapshotMagic[8] = {'C', 'S', 'G', 'R', 'A', 'P', 'H', '1'};
constexpr std::uint32_t kSnapshotVersion = 1;
constexpr std::uint32_t kNoString = 0xffffffffu;

std::string lower_ascii(std::string_view text) {
  std::string out(text);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Compressed adjacency: offsets[i]..offsets[i+1] index into list.
template <typename T>
void build_csr(std::size_t n, const std::vector<std::pair<std::uint32_t, T>>& pairs,
               std::vector<std::uint32_t>& offsets, std::vector<T>& list) {
  offsets.assign(n + 1, 0);
  for (const auto& [owner, _] : pairs) ++offsets[owner + 1];
  for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];
  list.resize(pairs.size());
  std::vector<std::uint32_t> cursor(offsets.begin(), offsets.end() - 1);
  for (const auto& [owner, value] : pairs) list[cursor[owner]++] = value;
}

}  // namespace

ConceptGraph ConceptGraph::from_parts(std::vector<ConceptNode> nodes,
                                      std::vector<RelationEdge> edges,
                                      std::optional<SemanticTypeSet> restriction) {
  ConceptGraph g;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    if (!(nodes[i - 1].cui < nodes[i].cui)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "nodes must be strictly ordered by CUI (duplicate or unsorted " +
                      nodes[i].cui.str() + ")");
    }
  }
  for (const auto& node : nodes) {
    if (node.preferred_name.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "node " + node.cui.str() + " has an empty preferred name");
    }
  }
  const auto n = static_cast<std::uint32_t>(nodes.size());
  for (auto& e : edges) {
    if (e.from >= n || e.to >= n || e.from == e.to) {
      throw Error(ErrorCode::kInvalidArgument, "edge endpoint outside node set");
    }
    if (e.kind == EdgeKind::kAssociative && e.from > e.to) std::swap(e.from, e.to);
  }
  std::stable_sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
    return std::tie(a.from, a.to, a.kind) < std::tie(b.from, b.to, b.kind);
  });
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](const auto& a, const auto& b) {
                            return a.from == b.from && a.to == b.to && a.kind == b.kind;
                          }),
              edges.end());

  g.nodes_ = std::move(nodes);
  g.edges_ = std::move(edges);
  g.restriction_ = std::move(restriction);
  g.by_cui_.reserve(g.nodes_.size());
  for (std::uint32_t i = 0; i < n; ++i) g.by_cui_.emplace(g.nodes_[i].cui, i);

  std::vector<std::pair<std::uint32_t, std::uint32_t>> child_pairs, parent_pairs;
  std::vector<std::pair<std::uint32_t, Incidence>> incidences;
  incidences.reserve(g.edges_.size() * 2);
  for (std::uint32_t id = 0; id < g.edges_.size(); ++id) {
    const auto& e = g.edges_[id];
    if (e.kind == EdgeKind::kHierarchical) {
      child_pairs.emplace_back(e.from, e.to);
      parent_pairs.emplace_back(e.to, e.from);
      incidences.emplace_back(e.from, Incidence{id, e.to, EdgeDirection::kParentToChild});
      incidences.emplace_back(e.to, Incidence{id, e.from, EdgeDirection::kChildToParent});
    } else {
      incidences.emplace_back(e.from, Incidence{id, e.to, EdgeDirection::kUndirected});
      incidences.emplace_back(e.to, Incidence{id, e.from, EdgeDirection::kUndirected});
    }
  }
  build_csr(n, child_pairs, g.child_offsets_, g.child_list_);
  build_csr(n, parent_pairs, g.parent_offsets_, g.parent_list_);
  build_csr(n, incidences, g.incident_offsets_, g.incident_list_);
  return g;
}

std::optional<std::uint32_t> ConceptGraph::find(Cui cui) const {
  auto it = by_cui_.find(cui);
  if (it == by_cui_.end()) return std::nullopt;
  return it->second;
}

std::span<const std::uint32_t> ConceptGraph::children(std::uint32_t index) const {
  return {child_list_.data() + child_offsets_.at(index),
          child_list_.data() + child_offsets_.at(index + 1)};
}

std::span<const std::uint32_t> ConceptGraph::parents(std::uint32_t index) const {
  return {parent_list_.data() + parent_offsets_.at(index),
          parent_list_.data() + parent_offsets_.at(index + 1)};
}

std::span<const Incidence> ConceptGraph::incident(std::uint32_t index) const {
  return {incident_list_.data() + incident_offsets_.at(index),
          incident_list_.data() + incident_offsets_.at(index + 1)};
}

BuiltGraph build_graph(const std::vector<rrf::AtomRecord>& atoms,
                       const std::vector<rrf::RelationRecord>& relations,
                       const rrf::AttributeMap& attributes,
                       const GraphBuildOptions& options) {
  std::map<Cui, std::vector<const rrf::AtomRecord*>> by_cui;
  for (const auto& atom : atoms) by_cui[atom.cui].push_back(&atom);

  std::vector<ConceptNode> nodes;
  nodes.reserve(by_cui.size());
  for (const auto& [cui, group] : by_cui) {
    ConceptNode node;
    node.cui = cui;
    const rrf::AtomRecord* preferred = nullptr;
    for (const auto* atom : group) {
      if (atom->term_status == 'P' && atom->is_preferred) {
        preferred = atom;
        break;
      }
    }
    if (preferred == nullptr) {
      preferred = *std::min_element(group.begin(), group.end(),
                                    [](const auto* a, const auto* b) { return a->name < b->name; });
    }
    node.preferred_name = preferred->name;
    std::unordered_set<std::string> seen{lower_ascii(node.preferred_name)};
    for (const auto* atom : group) {
      node.source_vocabularies.insert(atom->source_vocabulary);
      if (node.synonyms.size() < options.max_synonyms &&
          seen.insert(lower_ascii(atom->name)).second) {
        node.synonyms.push_back(atom->name);
      }
    }
    if (auto it = attributes.find(cui); it != attributes.end()) {
      node.definition = it->second.definition;
      node.semantic_types = it->second.semantic_types;
    }
    nodes.push_back(std::move(node));
  }

  std::unordered_map<Cui, std::uint32_t> index;
  for (std::uint32_t i = 0; i < nodes.size(); ++i) index.emplace(nodes[i].cui, i);

  GraphBuildReport report;
  std::map<std::pair<std::uint32_t, std::uint32_t>, const rrf::RelationRecord*> hierarchical;
  std::map<std::pair<std::uint32_t, std::uint32_t>, const rrf::RelationRecord*> associative;
  for (const auto& r : relations) {
    auto a = index.find(r.cui1);
    auto b = index.find(r.cui2);
    if (a == index.end() || b == index.end()) {
      ++report.dangling_relations;
      continue;
    }
    const auto i1 = a->second;
    const auto i2 = b->second;
    // MRREL reads "CUI2 <REL> CUI1": CHD means CUI2 is a child of CUI1.
    std::optional<std::pair<std::uint32_t, std::uint32_t>> parent_child;
    if (r.rel == "CHD") {
      parent_child.emplace(i1, i2);
    } else if (r.rel == "PAR") {
      parent_child.emplace(i2, i1);
    } else if (options.isa_is_hierarchical && r.rela == "isa") {
      parent_child.emplace(i1, i2);
    } else if (options.isa_is_hierarchical && r.rela == "inverse_isa") {
      parent_child.emplace(i2, i1);
    }
    bool inserted;
    if (parent_child) {
      inserted = hierarchical.emplace(*parent_child, &r).second;
    } else {
      inserted = associative.emplace(std::minmax(i1, i2), &r).second;
    }
    if (!inserted) ++report.duplicate_relations;
  }

  std::vector<RelationEdge> edges;
  edges.reserve(hierarchical.size() + associative.size());
  for (const auto& [pc, r] : hierarchical) {
    edges.push_back({pc.first, pc.second, EdgeKind::kHierarchical, r->rel, r->rela});
  }
  report.hierarchical_edges = hierarchical.size();
  for (const auto& [pair, r] : associative) {
    // A hierarchical link already connects this pair.
    if (hierarchical.contains(pair) ||
        hierarchical.contains({pair.second, pair.first})) {
      ++report.duplicate_relations;
      continue;
    }
    edges.push_back({pair.first, pair.second, EdgeKind::kAssociative, r->rel, r->rela});
    ++report.associative_edges;
  }
  return {ConceptGraph::from_parts(std::move(nodes), std::move(edges), std::nullopt), report};
}

const SemanticTypeSet& default_semantic_types() {
  static const SemanticTypeSet kDefault{
      "Disease or Syndrome", "Pathologic Function",    "Diagnostic Procedure",
      "Health Care Activity", "Finding", "Laboratory or Test Result"};
  return kDefault;
}

ConceptGraph restrict_graph(const ConceptGraph& graph, const SemanticTypeSet& allowed) {
  if (allowed.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "restriction needs at least one semantic type");
  }
  std::vector<std::uint32_t> remap(graph.node_count(), kNoString);
  std::vector<ConceptNode> nodes;
  for (std::uint32_t i = 0; i < graph.node_count(); ++i) {
    const auto& types = graph.node(i).semantic_types;
    const bool keep = std::any_of(types.begin(), types.end(),
                                  [&](const auto& t) { return allowed.contains(t); });
    if (keep) {
      remap[i] = static_cast<std::uint32_t>(nodes.size());
      nodes.push_back(graph.node(i));
    }
  }
  std::vector<RelationEdge> edges;
  for (const auto& e : graph.edges()) {
    if (remap[e.from] != kNoString && remap[e.to] != kNoString) {
      edges.push_back({remap[e.from], remap[e.to], e.kind, e.rel, e.rela});
    }
  }
  return ConceptGraph::from_parts(std::move(nodes), std::move(edges), allowed);
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorCode::kInvalidArgument, "quantile of empty data");
  const double position = q * static_cast<double>(sorted.size() - 1);
  const auto lower = static_cast<std::size_t>(position);
  const auto upper = std::min(lower + 1, sorted.size() - 1);
  const double fraction = position - static_cast<double>(lower);
  return sorted[lower] + (sorted[upper] - sorted[lower]) * fraction;
}

GraphStats graph_stats(const ConceptGraph& graph) {
  if (graph.node_count() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "statistics of an empty graph");
  }
  std::vector<double> degrees(graph.node_count());
  GraphStats stats;
  for (std::uint32_t i = 0; i < graph.node_count(); ++i) {
    const auto d = graph.degree(i);
    degrees[i] = d;
    if (d == 0) ++stats.isolated_count;
  }
  std::sort(degrees.begin(), degrees.end());
  stats.node_count = graph.node_count();
  stats.edge_count = graph.edge_count();
  stats.directed_edge_count = 2 * graph.edge_count();
  stats.median_degree = quantile_sorted(degrees, 0.5);
  stats.degree_q1 = quantile_sorted(degrees, 0.25);
  stats.degree_q3 = quantile_sorted(degrees, 0.75);
  stats.min_degree = static_cast<std::uint32_t>(degrees.front());
  stats.max_degree = static_cast<std::uint32_t>(degrees.back());
  stats.isolated_fraction =
      static_cast<double>(stats.isolated_count) / static_cast<double>(stats.node_count);
  return stats;
}

std::vector<std::uint32_t> descendant_indices(const ConceptGraph& graph,
                                              std::uint32_t root, std::size_t depth) {
  if (depth == 0) throw Error(ErrorCode::kInvalidArgument, "descendant depth must be >= 1");
  std::unordered_set<std::uint32_t> visited{root};
  std::vector<std::uint32_t> frontier{root}, next, found;
  for (std::size_t level = 0; level < depth && !frontier.empty(); ++level) {
    next.clear();
    for (auto node : frontier) {
      for (auto child : graph.children(node)) {
        if (visited.insert(child).second) {
          next.push_back(child);
          found.push_back(child);
        }
      }
    }
    frontier.swap(next);
  }
  std::sort(found.begin(), found.end());
  return found;
}

CuiSet descendants(const ConceptGraph& graph, Cui root, std::size_t depth) {
  auto index = graph.find(root);
  if (!index) throw Error(ErrorCode::kNotFound, "unknown concept " + root.str());
  CuiSet out;
  for (auto i : descendant_indices(graph, *index, depth)) out.insert(graph.node(i).cui);
  return out;
}

std::vector<std::uint32_t> within_hops(const ConceptGraph& graph,
                                       std::span<const std::uint32_t> seeds,
                                       std::size_t hops) {
  std::unordered_set<std::uint32_t> visited(seeds.begin(), seeds.end());
  std::vector<std::uint32_t> frontier(seeds.begin(), seeds.end()), next, found;
  for (std::size_t level = 0; level < hops && !frontier.empty(); ++level) {
    next.clear();
    for (auto node : frontier) {
      for (const auto& inc : graph.incident(node)) {
        if (visited.insert(inc.neighbour).second) {
          next.push_back(inc.neighbour);
          found.push_back(inc.neighbour);
        }
      }
    }
    frontier.swap(next);
  }
  std::sort(found.begin(), found.end());
  return found;
}

std::string serialize_graph(const ConceptGraph& graph) {
  std::vector<std::string_view> pool;
  std::unordered_map<std::string_view, std::uint32_t> ids;
  auto intern = [&](std::string_view s) {
    auto [it, inserted] = ids.emplace(s, static_cast<std::uint32_t>(pool.size()));
    if (inserted) pool.push_back(s);
    return it->second;
  };

  ByteWriter table;
  for (const auto& node : graph.nodes()) {
    table.u32(node.cui.number());
    table.u32(intern(node.preferred_name));
    table.u32(node.definition ? intern(*node.definition) : kNoString);
    for (const auto* list : {&node.synonyms}) {
      table.u32(static_cast<std::uint32_t>(list->size()));
      for (const auto& s : *list) table.u32(intern(s));
    }
    for (const auto* set : {&node.semantic_types, &node.source_vocabularies}) {
      table.u32(static_cast<std::uint32_t>(set->size()));
      for (const auto& s : *set) table.u32(intern(s));
    }
  }
  ByteWriter edge_list;
  for (const auto& e : graph.edges()) {
    edge_list.u32(e.from);
    edge_list.u32(e.to);
    edge_list.u8(static_cast<std::uint8_t>(e.kind));
    edge_list.u32(intern(e.rel));
    edge_list.u32(intern(e.rela));
  }
  ByteWriter restriction;
  restriction.u8(graph.restriction() ? 1 : 0);
  if (graph.restriction()) {
    restriction.u32(static_cast<std::uint32_t>(graph.restriction()->size()));
    for (const auto& t : *graph.restriction()) restriction.u32(intern(t));
  }

  ByteWriter out;
  out.bytes(std::string_view(kSnapshotMagic, sizeof(kSnapshotMagic)));
  out.u32(kSnapshotVersion);
  out.u64(graph.node_count());
  out.u64(graph.edge_count());
  out.u64(pool.size());
  out.bytes(table.data());
  for (auto s : pool) out.str(s);
  out.bytes(edge_list.data());
  out.bytes(restriction.data());
  const auto digest = sha256(out.data());
  out.bytes(std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size()));
  return out.take();
}

ConceptGraph deserialize_graph(std::string_view bytes) {
  constexpr auto kCorrupt = ErrorCode::kCorruptSnapshot;
  if (bytes.size() < sizeof(kSnapshotMagic) + 4 + 24 + 32) {
    throw Error(kCorrupt, "graph snapshot too short");
  }
  const auto body = bytes.substr(0, bytes.size() - 32);
  const auto digest = sha256(body);
  if (bytes.substr(body.size()) !=
      std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size())) {
    throw Error(kCorrupt, "graph snapshot checksum mismatch");
  }
  ByteReader in(body, kCorrupt);
  if (in.bytes(sizeof(kSnapshotMagic)) != std::string_view(kSnapshotMagic, sizeof(kSnapshotMagic))) {
    in.fail("bad graph snapshot magic");
  }
  if (const auto version = in.u32(); version != kSnapshotVersion) {
    in.fail("unsupported graph snapshot version " + std::to_string(version));
  }
  const auto node_count = in.u64();
  const auto edge_count = in.u64();
  const auto string_count = in.u64();

  struct RawNode {
    std::uint32_t cui, name, definition;
    std::vector<std::uint32_t> synonyms, types, sources;
  };
  auto read_ids = [&in]() {
    std::vector<std::uint32_t> ids(in.u32());
    for (auto& id : ids) id = in.u32();
    return ids;
  };
  std::vector<RawNode> raw(node_count);
  for (auto& r : raw) {
    r.cui = in.u32();
    r.name = in.u32();
    r.definition = in.u32();
    r.synonyms = read_ids();
    r.types = read_ids();
    r.sources = read_ids();
  }
  std::vector<std::string> pool(string_count);
  for (auto& s : pool) s = in.str();
  auto lookup = [&](std::uint32_t id) -> const std::string& {
    if (id >= pool.size()) in.fail("string id out of range");
    return pool[id];
  };

  std::vector<ConceptNode> nodes;
  nodes.reserve(node_count);
  for (const auto& r : raw) {
    ConceptNode node;
    node.cui = Cui::from_number(r.cui);
    node.preferred_name = lookup(r.name);
    if (r.definition != kNoString) node.definition = lookup(r.definition);
    for (auto id : r.synonyms) node.synonyms.push_back(lookup(id));
    for (auto id : r.types) node.semantic_types.insert(lookup(id));
    for (auto id : r.sources) node.source_vocabularies.insert(lookup(id));
    nodes.push_back(std::move(node));
  }
  std::vector<RelationEdge> edges(edge_count);
  for (auto& e : edges) {
    e.from = in.u32();
    e.to = in.u32();
    const auto kind = in.u8();
    if (kind > 1) in.fail("bad edge kind");
    e.kind = static_cast<EdgeKind>(kind);
    e.rel = lookup(in.u32());
    e.rela = lookup(in.u32());
  }
  std::optional<SemanticTypeSet> restriction;
  if (in.u8() != 0) {
    restriction.emplace();
    for (auto id : read_ids()) restriction->insert(lookup(id));
  }
  if (!in.done()) in.fail("trailing bytes in graph snapshot");
  try {
    return ConceptGraph::from_parts(std::move(nodes), std::move(edges), std::move(restriction));
  } catch (const Error& e) {
    throw Error(kCorrupt, e.what());
  }
}

void save_graph(const ConceptGraph& graph, const std::filesystem::path& path) {
  write_file_atomic(path.string(), serialize_graph(graph));
}

ConceptGraph load_graph(const std::filesystem::path& path) {
  return deserialize_graph(read_file_bytes(path.string()));
}

}  // namespace conceptset
