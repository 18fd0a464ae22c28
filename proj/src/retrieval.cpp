#include "conceptset/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <fmt/format.h>

#include "conceptset/error.hpp"

namespace conceptset {

namespace {

using nlohmann::json;

std::string string_field(const json& obj, const char* key, bool required) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    if (required) throw Error(ErrorCode::kParse, std::string("target is missing \"") + key + "\"");
    return {};
  }
  if (!it->is_string()) throw Error(ErrorCode::kParse, std::string("\"") + key + "\" must be a string");
  return it->get<std::string>();
}

std::size_t size_field(const json& obj, const char* key, std::size_t fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  if (!it->is_number_integer() || it->get<long long>() < 0)
    throw Error(ErrorCode::kParse, std::string("\"") + key + "\" must be a non-negative integer");
  return it->get<std::size_t>();
}

bool admitted(const ConceptNode& node, const SemanticTypeSet& types) {
  for (const auto& t : node.semantic_types)
    if (types.contains(t)) return true;
  return false;
}

double sample_sd(std::span<const double> values, double mean) {
  if (values.size() < 2) return 0;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double mean_of(std::span<const double> values) {
  double sum = 0;
  for (double v : values) sum += v;
  return values.empty() ? 0 : sum / static_cast<double>(values.size());
}

}  // namespace

json to_json(const TargetConcept& target) {
  json j{{"id", target.id},
         {"name", target.name},
         {"description", target.description},
         {"fewshots", target.fewshots},
         {"special_instructions", target.special_instructions}};
  j["target_cui"] = target.target_cui ? json(target.target_cui->str()) : json(nullptr);
  return j;
}

std::vector<TargetConcept> parse_targets(const json& input) {
  const json* list = &input;
  if (input.is_object()) {
    auto it = input.find("targets");
    if (it == input.end()) throw Error(ErrorCode::kParse, "targets file has no \"targets\" array");
    list = &*it;
  }
  if (!list->is_array()) throw Error(ErrorCode::kParse, "targets must be an array");
  std::vector<TargetConcept> out;
  std::set<std::string> ids;
  for (const auto& item : *list) {
    if (!item.is_object()) throw Error(ErrorCode::kParse, "target entries must be objects");
    TargetConcept t;
    t.id = string_field(item, "id", true);
    t.name = string_field(item, "name", true);
    t.description = string_field(item, "description", true);
    t.fewshots = string_field(item, "fewshots", false);
    t.special_instructions = string_field(item, "special_instructions", false);
    auto cui = string_field(item, "target_cui", false);
    if (!cui.empty()) {
      auto parsed = Cui::parse(cui);
      if (!parsed) throw Error(ErrorCode::kParse, "invalid target_cui " + cui);
      t.target_cui = *parsed;
    }
    if (t.id.empty()) throw Error(ErrorCode::kParse, "target id must not be empty");
    if (!ids.insert(t.id).second) throw Error(ErrorCode::kParse, "duplicate target id " + t.id);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TargetConcept> load_targets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return parse_targets(j);
}

void RetrievalConfig::validate() const {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be at least 1");
  if (max_neighbours == 0)
    throw Error(ErrorCode::kInvalidArgument, "max_neighbours must be at least 1");
  if (semantic_types.empty())
    throw Error(ErrorCode::kInvalidArgument, "at least one semantic type is required");
}

json RetrievalConfig::to_json() const {
  return json{{"k", k},
              {"hops", hops},
              {"max_neighbours", max_neighbours},
              {"child_depth", child_depth},
              {"semantic_types", semantic_types}};
}

RetrievalConfig RetrievalConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, "retrieval config must be an object");
  RetrievalConfig c;
  c.k = size_field(j, "k", c.k);
  c.hops = size_field(j, "hops", c.hops);
  c.max_neighbours = size_field(j, "max_neighbours", c.max_neighbours);
  c.child_depth = size_field(j, "child_depth", c.child_depth);
  if (auto it = j.find("semantic_types"); it != j.end()) {
    if (!it->is_array()) throw Error(ErrorCode::kParse, "semantic_types must be an array");
    c.semantic_types.clear();
    for (const auto& t : *it) {
      if (!t.is_string()) throw Error(ErrorCode::kParse, "semantic types must be strings");
      c.semantic_types.insert(t.get<std::string>());
    }
  }
  return c;
}

const char* provenance_name(Provenance provenance) {
  switch (provenance) {
    case Provenance::kSeed: return "seed";
    case Provenance::kChild: return "child";
    case Provenance::kHop: return "hop";
  }
  return "unknown";
}

std::optional<Provenance> parse_provenance(std::string_view text) {
  if (text == "seed") return Provenance::kSeed;
  if (text == "child") return Provenance::kChild;
  if (text == "hop") return Provenance::kHop;
  return std::nullopt;
}

CuiSet CandidateSet::cuis() const {
  CuiSet out;
  for (const auto& m : members) out.insert(m.cui);
  return out;
}

json to_json(const CandidateSet& set, const ConceptGraph* graph) {
  json members = json::array();
  for (const auto& m : set.members) {
    json item{{"cui", m.cui.str()},
              {"name", m.name},
              {"distance", m.distance},
              {"provenance", provenance_name(m.provenance)}};
    if (graph) {
      if (auto idx = graph->find(m.cui)) {
        const auto& node = graph->node(*idx);
        item["definition"] = node.definition ? json(*node.definition) : json(nullptr);
        item["semantic_types"] = node.semantic_types;
      }
    }
    members.push_back(std::move(item));
  }
  return json{{"target_id", set.target_id},
              {"target_cui", set.target_cui.str()},
              {"config", set.config.to_json()},
              {"collected", set.collected},
              {"members", std::move(members)}};
}

CandidateSet candidate_set_from_json(const json& j) {
  try {
    CandidateSet set;
    set.target_id = j.at("target_id").get<std::string>();
    set.target_cui = Cui::from_string(j.at("target_cui").get<std::string>());
    set.config = RetrievalConfig::from_json(j.at("config"));
    set.collected = j.at("collected").get<std::size_t>();
    CuiSet seen;
    for (const auto& item : j.at("members")) {
      CandidateMember m;
      m.cui = Cui::from_string(item.at("cui").get<std::string>());
      m.name = item.at("name").get<std::string>();
      m.distance = item.at("distance").get<double>();
      auto prov = parse_provenance(item.at("provenance").get<std::string>());
      if (!prov) throw Error(ErrorCode::kParse, "unknown provenance for " + m.cui.str());
      m.provenance = *prov;
      if (!seen.insert(m.cui).second)
        throw Error(ErrorCode::kParse, "duplicate candidate " + m.cui.str());
      set.members.push_back(std::move(m));
    }
    return set;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("candidate set: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParse) throw;
    throw Error(ErrorCode::kParse, e.what());
  }
}

void write_candidates_tsv(const CandidateSet& set, std::ostream& out) {
  out << "cui\tname\tdistance\tprovenance\n";
  for (const auto& m : set.members) {
    std::string name = m.name;
    std::replace(name.begin(), name.end(), '\t', ' ');
    std::replace(name.begin(), name.end(), '\n', ' ');
    out << m.cui.str() << '\t' << name << '\t' << fmt::format("{:.6f}", m.distance) << '\t'
        << provenance_name(m.provenance) << '\n';
  }
}

CandidateSet retrieve_for_query(const ConceptGraph& graph, const VectorIndex& index,
                                const TargetConcept& target, const RetrievalConfig& config,
                                std::span<const float> query) {
  config.validate();
  if (index.size() == 0) throw Error(ErrorCode::kInvalidState, "vector index is empty");
  if (query.size() != index.dimension())
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("query dimension {} does not match index dimension {}", query.size(),
                            index.dimension()));

  std::vector<bool> ok(graph.node_count());
  bool any = false;
  for (std::uint32_t i = 0; i < graph.node_count(); ++i) {
    ok[i] = admitted(graph.node(i), config.semantic_types);
    any = any || ok[i];
  }
  if (!any)
    throw Error(ErrorCode::kEmptyResult,
                "no graph node carries any of the requested semantic types");

  // Map index rows to graph nodes once; rows for unknown CUIs are never admitted.
  std::vector<std::int64_t> node_of_row(index.size(), -1);
  for (std::size_t r = 0; r < index.size(); ++r)
    if (auto n = graph.find(index.cuis()[r])) node_of_row[r] = *n;

  auto seeds = index.knn(query, config.k, [&](std::size_t row) {
    return node_of_row[row] >= 0 && ok[static_cast<std::size_t>(node_of_row[row])];
  });

  CandidateSet set;
  set.target_id = target.id;
  set.config = config;
  set.target_cui = target.target_cui ? *target.target_cui : index.knn(query, 1).front().cui;

  std::map<std::uint32_t, Provenance> collected;
  std::vector<std::uint32_t> seed_nodes;
  for (const auto& s : seeds) {
    auto n = *graph.find(s.cui);
    seed_nodes.push_back(n);
    collected.emplace(n, Provenance::kSeed);
  }
  if (config.child_depth > 0) {
    for (auto s : seed_nodes)
      for (auto d : descendant_indices(graph, s, config.child_depth))
        if (ok[d]) collected.emplace(d, Provenance::kChild);
  }
  if (config.hops > 0) {
    for (auto h : within_hops(graph, seed_nodes, config.hops))
      if (ok[h]) collected.emplace(h, Provenance::kHop);
  }

  struct Ranked {
    double squared;
    Cui cui;
    std::uint32_t node;
    Provenance provenance;
  };
  std::vector<Ranked> ranked;
  ranked.reserve(collected.size());
  for (const auto& [n, prov] : collected) {
    const auto& node = graph.node(n);
    auto row = index.find(node.cui);
    if (!row)
      throw Error(ErrorCode::kContractViolation,
                  "graph node " + node.cui.str() + " has no vector in the index");
    ranked.push_back({index.squared_distance(query, *row), node.cui, n, prov});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.squared != b.squared) return a.squared < b.squared;
    return a.cui < b.cui;
  });
  set.collected = ranked.size();
  if (ranked.size() > config.max_neighbours) ranked.resize(config.max_neighbours);
  set.members.reserve(ranked.size());
  for (const auto& r : ranked)
    set.members.push_back(
        {r.cui, graph.node(r.node).preferred_name, std::sqrt(r.squared), r.provenance});
  return set;
}

CandidateSet retrieve(const ConceptGraph& graph, const VectorIndex& index,
                      const TargetConcept& target, const RetrievalConfig& config,
                      EmbeddingProvider& provider) {
  config.validate();
  if (index.size() == 0) throw Error(ErrorCode::kInvalidState, "vector index is empty");
  auto query = embed_query(provider, target.description);
  return retrieve_for_query(graph, index, target, config, query);
}

std::vector<RetrievalConfig> default_sweep_grid(const RetrievalConfig& base) {
  const std::pair<std::size_t, std::size_t> pairs[] = {{150, 200}, {500, 350}, {1000, 500}};
  std::vector<RetrievalConfig> grid;
  for (const auto& [k, cap] : pairs) {
    for (std::size_t hops : {0, 1}) {
      RetrievalConfig c = base;
      c.k = k;
      c.max_neighbours = cap;
      c.hops = hops;
      grid.push_back(c);
    }
  }
  return grid;
}

SweepTable sweep_configs_for_query(const ConceptGraph& graph, const VectorIndex& index,
                                   const TargetConcept& target,
                                   std::span<const RetrievalConfig> grid, const CuiSet& manual,
                                   std::span<const float> query) {
  if (grid.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep grid is empty");
  if (manual.empty())
    throw Error(ErrorCode::kUndefinedMetric, "manual set for " + target.id + " is empty");
  SweepTable table;
  table.target_id = target.id;
  for (const auto& config : grid) {
    auto set = retrieve_for_query(graph, index, target, config, query);
    SweepRow row;
    row.config = config;
    row.retrieved_count = set.members.size();
    row.recall = retrieval_recall(manual, set.cuis());
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    const auto& best = table.rows[table.chosen];
    const auto& cand = table.rows[i];
    if (*cand.recall.recall > *best.recall.recall ||
        (*cand.recall.recall == *best.recall.recall &&
         cand.retrieved_count < best.retrieved_count))
      table.chosen = i;
  }
  return table;
}

SweepTable sweep_configs(const ConceptGraph& graph, const VectorIndex& index,
                         const TargetConcept& target, std::span<const RetrievalConfig> grid,
                         const CuiSet& manual, EmbeddingProvider& provider) {
  if (grid.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep grid is empty");
  auto query = embed_query(provider, target.description);
  return sweep_configs_for_query(graph, index, target, grid, manual, query);
}

json SweepTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back(json{{"config", r.config.to_json()},
                             {"retrieved", r.retrieved_count},
                             {"recall", conceptset::to_json(r.recall)}});
  }
  return json{{"target_id", target_id}, {"chosen", chosen}, {"rows", std::move(rows_json)}};
}

std::string SweepTable::to_text() const {
  std::string out = fmt::format("{}\n{:>6} {:>5} {:>6} {:>10} {:>7}\n", target_id, "K", "hops",
                                "cap", "retrieved", "recall");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out += fmt::format("{:>6} {:>5} {:>6} {:>10} {:>7}{}\n", r.config.k, r.config.hops,
                       r.config.max_neighbours, r.retrieved_count, format_ratio(r.recall.recall),
                       i == chosen ? "  *" : "");
  }
  return out;
}

json SetStructureReport::to_json() const {
  json per = json::object();
  for (const auto& [cui, n] : connections) per[cui.str()] = n;
  return json{{"members", member_count},
              {"mean_connections", mean_connections},
              {"sd_connections", sd_connections},
              {"fraction_at_most_one", fraction_at_most_one},
              {"mean_l2_to_target", mean_l2_to_target},
              {"sd_l2_to_target", sd_l2_to_target},
              {"connections", std::move(per)}};
}

SetStructureReport analyze_set_structure(const ConceptGraph& graph, const CuiSet& members,
                                         Cui target_cui, const VectorIndex& index) {
  if (members.empty()) throw Error(ErrorCode::kInvalidArgument, "concept set is empty");
  auto target_row = index.find(target_cui);
  if (!target_row)
    throw Error(ErrorCode::kInvalidArgument, "target " + target_cui.str() + " is not indexed");
  auto target_vec = index.row(*target_row);

  SetStructureReport report;
  report.member_count = members.size();
  std::vector<double> connections, distances;
  std::size_t low = 0;
  for (const auto& cui : members) {
    auto row = index.find(cui);
    if (!row) throw Error(ErrorCode::kInvalidArgument, "member " + cui.str() + " is not indexed");
    distances.push_back(index.distance(target_vec, *row));
    std::size_t count = 0;
    if (auto n = graph.find(cui)) {
      for (const auto& inc : graph.incident(*n))
        if (members.contains(graph.node(inc.neighbour).cui)) ++count;
    }
    report.connections[cui] = count;
    connections.push_back(static_cast<double>(count));
    if (count <= 1) ++low;
  }
  report.mean_connections = mean_of(connections);
  report.sd_connections = sample_sd(connections, report.mean_connections);
  report.fraction_at_most_one = static_cast<double>(low) / static_cast<double>(members.size());
  report.mean_l2_to_target = mean_of(distances);
  report.sd_l2_to_target = sample_sd(distances, report.mean_l2_to_target);
  return report;
}

const char* plot_status_name(PlotStatus status) {
  switch (status) {
    case PlotStatus::kRetrieved: return "retrieved";
    case PlotStatus::kGoldRetrieved: return "gold-retrieved";
    case PlotStatus::kGoldMissed: return "gold-missed";
  }
  return "unknown";
}

void export_plot_data(const CandidateSet& candidates, const ConceptGraph& graph,
                      const CuiSet& gold, const CuiSet& missed, std::ostream& out,
                      const VectorIndex* index, std::span<const float> query) {
  out << "row_type,cui,name,distance,status,source,target,rel\n";
  std::set<std::uint32_t> exported;
  CuiSet written;
  auto node_row = [&](Cui cui, const std::string& name, std::optional<double> distance,
                      PlotStatus status) {
    out << "node," << cui.str() << ',' << csv_field(name) << ','
        << (distance ? fmt::format("{:.6f}", *distance) : std::string()) << ','
        << plot_status_name(status) << ",,,\n";
    if (auto n = graph.find(cui)) exported.insert(*n);
    written.insert(cui);
  };
  for (const auto& m : candidates.members) {
    node_row(m.cui, m.name, m.distance,
             gold.contains(m.cui) ? PlotStatus::kGoldRetrieved : PlotStatus::kRetrieved);
  }
  for (const auto& cui : missed) {
    if (written.contains(cui)) continue;
    std::string name;
    if (auto n = graph.find(cui)) name = graph.node(*n).preferred_name;
    std::optional<double> distance;
    if (index && query.size() == index->dimension()) {
      if (auto row = index->find(cui)) distance = index->distance(query, *row);
    }
    node_row(cui, name, distance, PlotStatus::kGoldMissed);
  }
  for (const auto& e : graph.edges()) {
    if (!exported.contains(e.from) || !exported.contains(e.to)) continue;
    out << "edge,,,,," << graph.node(e.from).cui.str() << ',' << graph.node(e.to).cui.str() << ','
        << csv_field(e.rela.empty() ? e.rel : e.rela) << '\n';
  }
}

}  // namespace conceptset
