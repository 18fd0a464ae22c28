#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "conceptset/error.hpp"
#include "conceptset/metrics.hpp"
#include "conceptset/retrieval.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "world.hpp"

using namespace conceptset;
using testing_support::cui;

namespace {

struct Hand {
  ConceptGraph graph;
  VectorIndex index{1, {}, {}};
};

// Node n gets type types[n-1] and the 2-D vector points[n-1]. Every node is
// indexed so the type filter, not the index, decides admission.
Hand hand_graph(const std::vector<std::string>& types, const std::vector<std::pair<float, float>>& points,
                const std::vector<rrf::RelationRecord>& rels) {
  std::vector<rrf::AtomRecord> atoms;
  rrf::AttributeMap attrs;
  std::vector<float> rows;
  std::vector<Cui> cuis;
  for (std::uint32_t i = 1; i <= types.size(); ++i) {
    rrf::AtomRecord a;
    a.cui = cui(i);
    a.is_preferred = true;
    a.name = "n" + std::to_string(i);
    a.source_vocabulary = "NCI";
    atoms.push_back(a);
    attrs[cui(i)] = {cui(i), std::nullopt, {types[i - 1]}};
    rows.push_back(points[i - 1].first);
    rows.push_back(points[i - 1].second);
    cuis.push_back(cui(i));
  }
  Hand h;
  h.graph = build_graph(atoms, rels, attrs).graph;
  h.index = VectorIndex(2, rows, cuis);
  return h;
}

rrf::RelationRecord rel(std::uint32_t a, const std::string& r, std::uint32_t b) {
  return {cui(a), cui(b), r, "", "NCI"};
}

// 1 is the parent of 2, 3, 4 (Finding) and 5 (Gene); 6 is associated with
// 1, 2 with 6.
Hand star() {
  return hand_graph({"Finding", "Finding", "Finding", "Finding", "Gene", "Finding", "Finding"},
                    {{0, 0}, {5, 0}, {6, 0}, {7, 0}, {0.1f, 0}, {1, 0}, {0.5f, 0}},
                    {rel(1, "CHD", 2), rel(1, "CHD", 3), rel(1, "CHD", 4), rel(1, "CHD", 5),
                     rel(1, "RO", 6), rel(2, "RO", 6)});
}

TargetConcept target(std::optional<Cui> c = std::nullopt) {
  TargetConcept t;
  t.id = "t";
  t.name = "T";
  t.description = "d";
  t.target_cui = c;
  return t;
}

std::vector<std::pair<Cui, Provenance>> members(const CandidateSet& s) {
  std::vector<std::pair<Cui, Provenance>> out;
  for (const auto& m : s.members) out.emplace_back(m.cui, m.provenance);
  return out;
}

const std::vector<float> kOrigin{0, 0};

}  // namespace

TEST(Retrieve, SeedThenChildrenSkippingInadmissibleTypes) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 1;
  auto set = retrieve_for_query(h.graph, h.index, target(cui(1)), cfg, kOrigin);
  EXPECT_EQ(members(set), (std::vector<std::pair<Cui, Provenance>>{{cui(1), Provenance::kSeed},
                                                                   {cui(2), Provenance::kChild},
                                                                   {cui(3), Provenance::kChild},
                                                                   {cui(4), Provenance::kChild}}));
  EXPECT_EQ(set.collected, 4u);
  EXPECT_DOUBLE_EQ(set.members[1].distance, 5.0);
}

TEST(Retrieve, HopsAddNeighboursAndChildWinsOverHop) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 1;
  cfg.hops = 1;
  auto set = retrieve_for_query(h.graph, h.index, target(), cfg, kOrigin);
  auto got = members(set);
  ASSERT_EQ(got.size(), 5u);
  EXPECT_EQ(got[1], (std::pair<Cui, Provenance>{cui(6), Provenance::kHop}));
  EXPECT_EQ(got[2], (std::pair<Cui, Provenance>{cui(2), Provenance::kChild}));
  // No explicit target: the nearest indexed concept, even an inadmissible one.
  EXPECT_EQ(set.target_cui, cui(1));
}

TEST(Retrieve, SeedWinsOverChild) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 3;  // seeds 1, 7, 6 (5 is a Gene)
  auto got = members(retrieve_for_query(h.graph, h.index, target(), cfg, kOrigin));
  EXPECT_EQ(got[0].second, Provenance::kSeed);
  EXPECT_EQ(got[1], (std::pair<Cui, Provenance>{cui(7), Provenance::kSeed}));
  EXPECT_EQ(got[2], (std::pair<Cui, Provenance>{cui(6), Provenance::kSeed}));
}

TEST(Retrieve, CapKeepsNearestAndChildDepthZeroDisablesExpansion) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 1;
  cfg.max_neighbours = 1;
  auto set = retrieve_for_query(h.graph, h.index, target(), cfg, kOrigin);
  EXPECT_EQ(set.members.size(), 1u);
  EXPECT_EQ(set.collected, 4u);
  cfg.max_neighbours = 350;
  cfg.child_depth = 0;
  EXPECT_EQ(retrieve_for_query(h.graph, h.index, target(), cfg, kOrigin).members.size(), 1u);
}

TEST(Retrieve, Errors) {
  auto h = star();
  RetrievalConfig cfg;
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  const std::vector<float> three{0, 0, 0};
  EXPECT_EQ(code_of([&] { retrieve_for_query(h.graph, h.index, target(), cfg, three); }),
            ErrorCode::kInvalidArgument);
  VectorIndex empty(2, {}, {});
  EXPECT_EQ(code_of([&] { retrieve_for_query(h.graph, empty, target(), cfg, kOrigin); }),
            ErrorCode::kInvalidState);
  auto none = cfg;
  none.semantic_types = {"Organism"};
  EXPECT_EQ(code_of([&] { retrieve_for_query(h.graph, h.index, target(), none, kOrigin); }),
            ErrorCode::kEmptyResult);
  // Child 4 exists in the graph but not in the index.
  VectorIndex partial(2, {0, 0, 1, 0}, {cui(1), cui(6)});
  auto one = cfg;
  one.k = 1;
  EXPECT_EQ(code_of([&] { retrieve_for_query(h.graph, partial, target(), one, kOrigin); }),
            ErrorCode::kContractViolation);
  auto zero = cfg;
  zero.k = 0;
  EXPECT_EQ(code_of([&] { zero.validate(); }), ErrorCode::kInvalidArgument);
}

TEST(Retrieve, MatchesComposedOracleOnFixture) {
  auto w = testing_support::make_world(7, 2000);
  for (const auto& t : w.targets) {
    const auto query = w.provider.embed_one(t.description);
    for (auto [k, cap, hops] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
             {150, 200, 0}, {150, 200, 1}, {500, 350, 0}, {500, 350, 1}, {1000, 500, 0}, {1000, 500, 1}}) {
      RetrievalConfig cfg;
      cfg.k = k;
      cfg.max_neighbours = cap;
      cfg.hops = hops;
      auto got = retrieve_for_query(w.restricted, w.index, t, cfg, query);
      auto expected = oracle::retrieve(w.restricted, w.index, cfg, query);
      ASSERT_EQ(got.members.size(), expected.size()) << t.id << " k=" << k << " hops=" << hops;
      for (std::size_t i = 0; i < expected.size(); ++i) {
        EXPECT_EQ(got.members[i].cui, expected[i].cui);
        EXPECT_EQ(got.members[i].provenance, expected[i].provenance);
        EXPECT_NEAR(got.members[i].distance, expected[i].distance, 1e-9);
      }
    }
  }
}

TEST(Retrieve, LargerCapExtendsSmallerCapAsPrefix) {
  auto w = testing_support::make_world(7, 2000);
  const auto& t = w.targets.front();
  const auto query = w.provider.embed_one(t.description);
  RetrievalConfig cfg;
  cfg.k = 500;
  cfg.hops = 1;
  std::vector<std::vector<Cui>> runs;
  for (std::size_t cap : {200, 350, 500}) {
    cfg.max_neighbours = cap;
    std::vector<Cui> cuis;
    for (const auto& m : retrieve_for_query(w.restricted, w.index, t, cfg, query).members)
      cuis.push_back(m.cui);
    runs.push_back(cuis);
  }
  ASSERT_EQ(runs[0].size(), 200u);
  for (std::size_t i = 1; i < runs.size(); ++i) {
    ASSERT_GE(runs[i].size(), runs[i - 1].size());
    EXPECT_TRUE(std::equal(runs[i - 1].begin(), runs[i - 1].end(), runs[i].begin()));
  }
}

TEST(Retrieve, HopsOnlyGrowTheCollectedSet) {
  auto w = testing_support::make_world(3, 800);
  for (const auto& t : w.targets) {
    const auto query = w.provider.embed_one(t.description);
    RetrievalConfig cfg;
    cfg.k = 40;
    cfg.max_neighbours = 100000;
    auto base = retrieve_for_query(w.restricted, w.index, t, cfg, query).cuis();
    cfg.hops = 1;
    auto wider = retrieve_for_query(w.restricted, w.index, t, cfg, query).cuis();
    EXPECT_TRUE(std::includes(wider.begin(), wider.end(), base.begin(), base.end()));
    EXPECT_GE(wider.size(), base.size());
  }
}

TEST(Retrieve, EmbeddingProviderOverloadMatchesQueryOverload) {
  auto w = testing_support::make_world(5, 500);
  const auto& t = w.targets.front();
  RetrievalConfig cfg;
  auto a = retrieve(w.restricted, w.index, t, cfg, w.provider);
  auto b = retrieve_for_query(w.restricted, w.index, t, cfg, w.provider.embed_one(t.description));
  EXPECT_EQ(a.members, b.members);
}

TEST(CandidateSet, JsonAndTsvRoundTrip) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 2;
  cfg.hops = 1;
  auto set = retrieve_for_query(h.graph, h.index, target(cui(1)), cfg, kOrigin);
  auto back = candidate_set_from_json(to_json(set));
  EXPECT_EQ(back.members, set.members);
  EXPECT_EQ(back.config, set.config);
  EXPECT_EQ(back.target_cui, set.target_cui);
  EXPECT_EQ(back.collected, set.collected);
  auto rich = to_json(set, &h.graph);
  EXPECT_TRUE(rich["members"][0].contains("semantic_types"));
  std::ostringstream tsv;
  write_candidates_tsv(set, tsv);
  std::istringstream lines(tsv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "cui\tname\tdistance\tprovenance");
  EXPECT_EQ(first, "C0000001\tn1\t0.000000\tseed");
}

TEST(Targets, ParseFormsAndRejectDuplicates) {
  auto a = parse_targets(nlohmann::json::parse(
      R"([{"id":"x","name":"X","description":"dx","target_cui":"C0000001"}])"));
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].target_cui, cui(1));
  auto b = parse_targets(nlohmann::json::parse(R"({"targets":[{"id":"y","name":"Y","description":"d"}]})"));
  EXPECT_FALSE(b[0].target_cui.has_value());
  for (const char* bad : {R"([{"id":"x","name":"X","description":"d"},{"id":"x","name":"X","description":"d"}])",
                          R"([{"id":"x","name":"X","description":"d","target_cui":"C1"}])", R"({"t":[]})",
                          R"([1])"}) {
    try {
      parse_targets(nlohmann::json::parse(bad));
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kParse) << bad;
    }
  }
  EXPECT_EQ(parse_targets(nlohmann::json::array({to_json(a[0])}))[0].target_cui, cui(1));
}

TEST(Sweep, RowsMatchRecallOracleAndChoiceRule) {
  auto w = testing_support::make_world(7, 1500);
  for (const auto& t : w.targets) {
    const auto& planted = *std::find_if(w.files.manifest.targets.begin(), w.files.manifest.targets.end(),
                                        [&](const auto& p) { return p.id == t.id; });
    const auto query = w.provider.embed_one(t.description);
    auto grid = default_sweep_grid();
    ASSERT_EQ(grid.size(), 6u);
    auto table = sweep_configs_for_query(w.restricted, w.index, t, grid, planted.manual, query);
    ASSERT_EQ(table.rows.size(), 6u);
    double best = -1;
    std::size_t best_count = 0, best_i = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      auto got = retrieve_for_query(w.restricted, w.index, t, grid[i], query).cuis();
      std::size_t hit = 0;
      for (const auto& c : planted.manual) hit += got.count(c);
      const double recall = double(hit) / planted.manual.size();
      EXPECT_DOUBLE_EQ(*table.rows[i].recall.recall, recall);
      EXPECT_EQ(table.rows[i].retrieved_count, got.size());
      if (recall > best || (recall == best && got.size() < best_count)) {
        best = recall;
        best_count = got.size();
        best_i = i;
      }
    }
    EXPECT_EQ(table.chosen, best_i);
    EXPECT_NE(table.to_text().find("recall"), std::string::npos);
  }
  auto& t = w.targets.front();
  std::vector<float> q(256, 0);
  EXPECT_THROW(sweep_configs_for_query(w.restricted, w.index, t, {}, {cui(1)}, q), Error);
  try {
    auto grid = default_sweep_grid();
    sweep_configs_for_query(w.restricted, w.index, t, grid, {}, q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUndefinedMetric);
  }
}

TEST(SetStructure, ConnectionsAndDistancesMatchHandComputation) {
  auto h = star();
  // Members 1, 2, 6: edges 1-2, 1-6, 2-6 are all internal; 3 is isolated.
  auto report = analyze_set_structure(h.graph, {cui(1), cui(2), cui(3), cui(6)}, cui(1), h.index);
  EXPECT_EQ(report.member_count, 4u);
  EXPECT_EQ(report.connections.at(cui(1)), 3u);
  EXPECT_EQ(report.connections.at(cui(2)), 2u);
  EXPECT_EQ(report.connections.at(cui(3)), 1u);
  EXPECT_EQ(report.connections.at(cui(6)), 2u);
  EXPECT_DOUBLE_EQ(report.mean_connections, 2.0);
  EXPECT_NEAR(report.sd_connections, std::sqrt(2.0 / 3.0), 1e-12);
  EXPECT_DOUBLE_EQ(report.fraction_at_most_one, 0.25);
  // Distances 0, 5, 6, 1 from the target at the origin.
  EXPECT_DOUBLE_EQ(report.mean_l2_to_target, 3.0);
  EXPECT_NEAR(report.sd_l2_to_target, std::sqrt(26.0 / 3.0), 1e-12);
  EXPECT_THROW(analyze_set_structure(h.graph, {}, cui(1), h.index), Error);
  EXPECT_THROW(analyze_set_structure(h.graph, {cui(99)}, cui(1), h.index), Error);
}

TEST(PlotExport, NodesThenInternalEdges) {
  auto h = star();
  RetrievalConfig cfg;
  cfg.k = 2;
  cfg.child_depth = 0;
  auto set = retrieve_for_query(h.graph, h.index, target(cui(1)), cfg, kOrigin);  // 1, 7
  std::ostringstream out;
  export_plot_data(set, h.graph, {cui(7), cui(3)}, {cui(3)}, out, &h.index, kOrigin);
  std::istringstream in(out.str());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  EXPECT_EQ(lines, (std::vector<std::string>{
                       "row_type,cui,name,distance,status,source,target,rel",
                       "node,C0000001,n1,0.000000,retrieved,,,",
                       "node,C0000007,n7,0.500000,gold-retrieved,,,",
                       "node,C0000003,n3,6.000000,gold-missed,,,",
                       "edge,,,,,C0000001,C0000003,CHD",
                   }));
}
