#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptset/cui.hpp"

namespace conceptset::fixture {

// Shape of the synthetic terminology. Topology is a random tree (each node
// gets min..max children) plus associative cross-links, with one planted
// cluster per target concept.
struct FixtureParams {
  std::uint64_t seed = 7;
  std::size_t n_concepts = 500;
  std::size_t n_targets = 3;
  std::size_t min_children = 1;
  std::size_t max_children = 4;
  double cross_link_rate = 0.15;
  double definition_rate = 0.6;
};

struct PlantedTarget {
  std::string id;
  std::string name;
  std::string keyword;  // every gold concept name carries this token
  Cui target_cui;
  std::map<Cui, bool> gold;  // CUI -> definitive?
  CuiSet manual;
};

// Counts the generator knows by construction; downstream tests compare the
// parsers and graph builder against these.
struct FixtureManifest {
  std::uint64_t seed = 0;
  std::size_t n_concepts = 0;
  std::size_t mrconso_lines = 0;
  std::size_t admitted_atoms = 0;
  std::size_t mrrel_lines = 0;
  std::size_t admitted_relations = 0;
  std::size_t attribute_cuis = 0;
  std::size_t graph_nodes = 0;
  std::size_t graph_edges = 0;
  std::size_t restricted_nodes = 0;
  std::size_t restricted_edges = 0;
  std::vector<PlantedTarget> targets;

  nlohmann::json to_json() const;
};

struct FixtureFiles {
  std::string mrconso;
  std::string mrrel;
  std::string mrdef;
  std::string mrsty;
  std::string targets_json;
  FixtureManifest manifest;
};

// Deterministic for a fixed parameter set. Throws Error(kInvalidArgument)
// when n_concepts is 0 or too large for the CUI range.
FixtureFiles generate_fixture(const FixtureParams& params);

// Writes MRCONSO.RRF, MRREL.RRF, MRDEF.RRF, MRSTY.RRF, manifest.json,
// targets.json, manual/<id>.csv, gold/<id>.csv and a pipeline config.json.
void write_fixture(const FixtureFiles& files, const std::filesystem::path& dir);

}  // namespace conceptset::fixture
