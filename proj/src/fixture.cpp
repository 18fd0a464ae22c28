#include "conceptset/fixture.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "conceptset/error.hpp"
#include "conceptset/graph.hpp"

namespace conceptset::fixture {

namespace {

const std::vector<std::string> kAllowedVocabularies{"MSH", "NCI", "SNOMEDCT_US"};
constexpr const char* kForeignVocabulary = "LNC";

struct SemanticType {
  const char* tui;
  const char* name;
};
const std::vector<SemanticType> kAllowedTypes{
    {"T047", "Disease or Syndrome"},  {"T046", "Pathologic Function"},
    {"T060", "Diagnostic Procedure"}, {"T058", "Health Care Activity"},
    {"T033", "Finding"},              {"T034", "Laboratory or Test Result"}};
const std::vector<SemanticType> kOtherTypes{
    {"T023", "Body Part, Organ, or Organ Component"},
    {"T121", "Pharmacologic Substance"},
    {"T001", "Organism"},
    {"T028", "Gene or Genome"},
    {"T098", "Population Group"}};

const char* const kSyllables[] = {"ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "ma",
                                  "ne", "pi", "ro", "su", "ta", "vo", "xe", "zu", "tri",
                                  "pla", "dro", "mel", "cor", "sten", "phy"};
const char* const kSuffixes[] = {"disorder", "finding", "procedure", "syndrome",
                                 "assessment", "lesion"};

// Thin wrapper so every draw is a raw engine output: std distributions are
// not bit-reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  std::size_t between(std::size_t lo, std::size_t hi) { return lo + below(hi - lo + 1); }
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }

 private:
  std::mt19937_64 engine_;
};

std::string make_word(Rng& rng, std::size_t syllables) {
  std::string word;
  for (std::size_t i = 0; i < syllables; ++i) {
    word += kSyllables[rng.below(std::size(kSyllables))];
  }
  return word;
}

std::string capitalise(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

enum class Role { kBackground, kClusterGold, kClusterDistractor, kOrphanGold };

struct Concept {
  Cui cui;
  Role role = Role::kBackground;
  int cluster = -1;
  bool foreign_only = false;  // atoms only in a non-admitted vocabulary
  std::string name;
  std::vector<std::string> synonyms;
  std::vector<const SemanticType*> types;
  std::vector<std::pair<std::string, std::string>> definitions;  // (SAB, text)
  std::string preferred_vocabulary;
};

struct Link {
  std::size_t a, b;
  std::string rel, inverse_rel, rela, inverse_rela;
  std::string vocabulary;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

}  // namespace

nlohmann::json FixtureManifest::to_json() const {
  nlohmann::json targets_json = nlohmann::json::array();
  for (const auto& t : targets) {
    nlohmann::json gold = nlohmann::json::object();
    std::size_t definitive = 0;
    for (const auto& [cui, is_definitive] : t.gold) {
      gold[cui.str()] = is_definitive ? "definitive" : "context_dependent";
      definitive += is_definitive ? 1 : 0;
    }
    nlohmann::json manual = nlohmann::json::array();
    for (const auto& cui : t.manual) manual.push_back(cui.str());
    targets_json.push_back({{"id", t.id},
                            {"name", t.name},
                            {"keyword", t.keyword},
                            {"target_cui", t.target_cui.str()},
                            {"gold_size", t.gold.size()},
                            {"gold_definitive", definitive},
                            {"manual_size", t.manual.size()},
                            {"gold", gold},
                            {"manual", manual}});
  }
  return {{"seed", seed},
          {"n_concepts", n_concepts},
          {"mrconso_lines", mrconso_lines},
          {"admitted_atoms", admitted_atoms},
          {"mrrel_lines", mrrel_lines},
          {"admitted_relations", admitted_relations},
          {"attribute_cuis", attribute_cuis},
          {"graph_nodes", graph_nodes},
          {"graph_edges", graph_edges},
          {"restricted_nodes", restricted_nodes},
          {"restricted_edges", restricted_edges},
          {"targets", targets_json}};
}

FixtureFiles generate_fixture(const FixtureParams& params) {
  const std::size_t n = params.n_concepts;
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "fixture needs at least one concept");
  if (n > (Cui::kMaxNumber - 1'000'003) / 7) {
    throw Error(ErrorCode::kInvalidArgument, "fixture too large for the CUI range");
  }
  if (params.min_children == 0 || params.max_children < params.min_children) {
    throw Error(ErrorCode::kInvalidArgument, "invalid branching parameters");
  }
  Rng rng(params.seed);

  std::vector<Concept> concepts(n);
  for (std::size_t i = 0; i < n; ++i) {
    concepts[i].cui = Cui::from_number(static_cast<std::uint32_t>(1'000'003 + 7 * i));
  }

  std::vector<std::string> vocabulary(std::max<std::size_t>(64, n / 2));
  for (auto& w : vocabulary) w = make_word(rng, 2 + rng.below(2));
  auto word = [&] { return vocabulary[rng.below(vocabulary.size())]; };

  // Layout: background tree over [0, background), then one subtree per target.
  const std::size_t n_targets = std::min(params.n_targets, n / 40);
  const std::size_t cluster_size = n_targets ? std::max<std::size_t>(8, n / 12) : 0;
  const std::size_t background = n - n_targets * cluster_size;

  std::vector<std::pair<std::size_t, std::size_t>> tree;  // (parent, child)
  auto grow_tree = [&](std::size_t begin, std::size_t end) {
    std::size_t next = begin + 1;
    for (std::size_t parent = begin; parent < end && next < end; ++parent) {
      const auto count = rng.between(params.min_children, params.max_children);
      for (std::size_t c = 0; c < count && next < end; ++c) tree.emplace_back(parent, next++);
    }
  };
  grow_tree(0, background);

  std::vector<std::string> keywords;
  for (std::size_t t = 0; t < n_targets; ++t) {
    const auto begin = background + t * cluster_size;
    grow_tree(begin, begin + cluster_size);
    tree.emplace_back(rng.below(background), begin);
    std::string keyword;
    do {
      keyword = make_word(rng, 4);
    } while (std::find(keywords.begin(), keywords.end(), keyword) != keywords.end() ||
             std::find(vocabulary.begin(), vocabulary.end(), keyword) != vocabulary.end());
    keywords.push_back(keyword);
    for (std::size_t i = begin; i < begin + cluster_size; ++i) {
      concepts[i].cluster = static_cast<int>(t);
      concepts[i].role = (i == begin || !rng.chance(0.25)) ? Role::kClusterGold
                                                            : Role::kClusterDistractor;
    }
    // Relevant concepts planted away from the cluster, reachable only by
    // similarity or general hops.
    for (int k = 0; k < 3 && background > 1; ++k) {
      auto& c = concepts[1 + rng.below(background - 1)];
      if (c.role == Role::kBackground) {
        c.role = Role::kOrphanGold;
        c.cluster = static_cast<int>(t);
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto& c = concepts[i];
    const bool gold = c.role == Role::kClusterGold || c.role == Role::kOrphanGold;
    const std::string keyword = c.cluster >= 0 ? keywords[c.cluster] : "";
    const std::size_t cluster_root =
        c.cluster >= 0 ? background + static_cast<std::size_t>(c.cluster) * cluster_size : n;
    if (i == cluster_root) {
      c.name = keyword + " syndrome";
    } else if (gold) {
      // Names starting with the keyword are the definitive ones.
      c.name = rng.chance(0.5) ? keyword + " " + word() : word() + " " + keyword + " " +
                                                              kSuffixes[rng.below(std::size(kSuffixes))];
    } else {
      c.name = word() + " " + word() + " " + kSuffixes[rng.below(std::size(kSuffixes))];
    }
    const auto n_synonyms = rng.below(3);
    for (std::size_t s = 0; s < n_synonyms; ++s) {
      c.synonyms.push_back(s == 0 ? c.name + ", NOS" : c.name + " (" + word() + ")");
    }
    if (gold) {
      c.types.push_back(&kAllowedTypes[rng.chance(0.7) ? 0 : 4]);
      if (rng.chance(0.3)) c.types.push_back(&kAllowedTypes[1 + rng.below(kAllowedTypes.size() - 1)]);
    } else {
      c.types.push_back(rng.chance(0.5) ? &kAllowedTypes[rng.below(kAllowedTypes.size())]
                                        : &kOtherTypes[rng.below(kOtherTypes.size())]);
      if (rng.chance(0.2)) c.types.push_back(&kOtherTypes[rng.below(kOtherTypes.size())]);
    }
    std::sort(c.types.begin(), c.types.end());
    c.types.erase(std::unique(c.types.begin(), c.types.end()), c.types.end());
    c.foreign_only = c.role == Role::kBackground && i != 0 && rng.chance(0.05);
    c.preferred_vocabulary = c.foreign_only ? kForeignVocabulary
                                            : kAllowedVocabularies[rng.below(kAllowedVocabularies.size())];
    if (rng.chance(params.definition_rate)) {
      const std::string subject = gold ? keyword : word();
      c.definitions.emplace_back(kAllowedVocabularies[rng.below(kAllowedVocabularies.size())],
                                 "A " + subject + " condition characterised by " + word() + " " +
                                     word() + ".");
      if (rng.chance(0.25)) {
        c.definitions.emplace_back(kAllowedVocabularies[rng.below(kAllowedVocabularies.size())],
                                   "An extended account of " + subject + " involving " + word() +
                                       ", " + word() + " and " + word() + " changes.");
      }
    }
  }

  // Relations: every tree edge plus associative cross-links between distinct,
  // not yet adjacent pairs.
  std::set<std::pair<std::size_t, std::size_t>> adjacent;
  std::vector<Link> links;
  auto pick_vocabulary = [&] {
    return rng.chance(0.9) ? kAllowedVocabularies[rng.below(kAllowedVocabularies.size())]
                           : std::string(kForeignVocabulary);
  };
  for (const auto& [p, c] : tree) {
    adjacent.insert(std::minmax(p, c));
    links.push_back({p, c, "CHD", "PAR", "isa", "inverse_isa", pick_vocabulary()});
  }
  if (n > 2) {
    const auto cross = static_cast<std::size_t>(params.cross_link_rate * static_cast<double>(n));
    for (std::size_t k = 0; k < cross; ++k) {
      const auto a = rng.below(n);
      const auto b = rng.below(n);
      if (a == b || !adjacent.insert(std::minmax(a, b)).second) continue;
      if (rng.chance(0.5)) {
        links.push_back({a, b, "RO", "RO", "associated_with", "associated_with", pick_vocabulary()});
      } else {
        links.push_back({a, b, "RN", "RB", "", "", pick_vocabulary()});
      }
    }
  }

  FixtureFiles files;
  auto& manifest = files.manifest;
  manifest.seed = params.seed;
  manifest.n_concepts = n;

  std::ostringstream conso, rel, def, sty;
  std::size_t atom_id = 0, string_id = 0;
  auto emit_atom = [&](const Concept& c, const std::string& lat, char ts, const char* stt,
                       bool ispref, const std::string& sab, const std::string& tty,
                       const std::string& str, char suppress) {
    ++atom_id;
    ++string_id;
    char aui[16], lui[16], sui[16];
    std::snprintf(aui, sizeof(aui), "A%07zu", atom_id);
    std::snprintf(lui, sizeof(lui), "L%07zu", string_id);
    std::snprintf(sui, sizeof(sui), "S%07zu", string_id);
    conso << c.cui.str() << '|' << lat << '|' << ts << '|' << lui << '|' << stt << '|' << sui
          << '|' << (ispref ? 'Y' : 'N') << '|' << aui << "||" << c.cui.number() << "||" << sab
          << '|' << tty << '|' << c.cui.number() << '|' << str << "|0|" << suppress << "||\n";
    ++manifest.mrconso_lines;
    const bool admitted = lat == "ENG" && suppress == 'N' &&
                          std::find(kAllowedVocabularies.begin(), kAllowedVocabularies.end(), sab) !=
                              kAllowedVocabularies.end();
    if (admitted) ++manifest.admitted_atoms;
  };
  for (const auto& c : concepts) {
    const auto& sab = c.preferred_vocabulary;
    emit_atom(c, "ENG", 'P', "PF", true, sab, "PT", c.name, 'N');
    for (const auto& s : c.synonyms) {
      emit_atom(c, "ENG", 'S', "VO", rng.chance(0.5),
                c.foreign_only ? sab : kAllowedVocabularies[rng.below(kAllowedVocabularies.size())],
                "SY", s, 'N');
    }
    if (rng.chance(0.2)) emit_atom(c, "FRE", 'P', "PF", true, "MSHFRE", "PT", c.name + " (fr)", 'N');
    if (rng.chance(0.1)) emit_atom(c, "ENG", 'S', "VO", false, sab, "OP", c.name + " [obsolete]", 'O');
    for (const auto& [dsab, text] : c.definitions) {
      def << c.cui.str() << "|A0000000|AT0000000||" << dsab << '|' << text << "|N||\n";
    }
    for (const auto* t : c.types) {
      sty << c.cui.str() << '|' << t->tui << "|A1.2|" << t->name << "|AT0000000|256|\n";
    }
  }
  manifest.attribute_cuis = n;

  std::size_t rui = 0;
  std::set<std::pair<std::size_t, std::size_t>> graph_edges;
  for (const auto& link : links) {
    for (int direction = 0; direction < 2; ++direction) {
      const auto& from = concepts[direction == 0 ? link.a : link.b];
      const auto& to = concepts[direction == 0 ? link.b : link.a];
      const auto& r = direction == 0 ? link.rel : link.inverse_rel;
      const auto& ra = direction == 0 ? link.rela : link.inverse_rela;
      char rui_text[16];
      std::snprintf(rui_text, sizeof(rui_text), "R%07zu", ++rui);
      rel << from.cui.str() << "||CUI|" << r << '|' << to.cui.str() << "||CUI|" << ra << '|'
          << rui_text << "||" << link.vocabulary << '|' << link.vocabulary << "|||N||\n";
      ++manifest.mrrel_lines;
    }
    if (link.vocabulary != kForeignVocabulary) {
      manifest.admitted_relations += 2;
      if (!concepts[link.a].foreign_only && !concepts[link.b].foreign_only) {
        graph_edges.insert(std::minmax(link.a, link.b));
      }
    }
  }

  auto restricted = [&](const Concept& c) {
    return !c.foreign_only &&
           std::any_of(c.types.begin(), c.types.end(), [](const SemanticType* t) {
             return std::any_of(kAllowedTypes.begin(), kAllowedTypes.end(),
                                [t](const SemanticType& a) { return &a == t; });
           });
  };
  for (const auto& c : concepts) {
    if (!c.foreign_only) ++manifest.graph_nodes;
    if (restricted(c)) ++manifest.restricted_nodes;
  }
  manifest.graph_edges = graph_edges.size();
  for (const auto& [a, b] : graph_edges) {
    if (restricted(concepts[a]) && restricted(concepts[b])) ++manifest.restricted_edges;
  }

  nlohmann::json targets = nlohmann::json::array();
  for (std::size_t t = 0; t < n_targets; ++t) {
    PlantedTarget planted;
    planted.keyword = keywords[t];
    planted.id = keywords[t] + "-syndrome";
    planted.name = capitalise(keywords[t]) + " syndrome";
    planted.target_cui = concepts[background + t * cluster_size].cui;
    std::vector<std::string> definitive_names, context_names;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = concepts[i];
      if (c.cluster != static_cast<int>(t) ||
          (c.role != Role::kClusterGold && c.role != Role::kOrphanGold)) {
        continue;
      }
      const bool definitive = c.name.rfind(keywords[t] + " ", 0) == 0;
      planted.gold.emplace(c.cui, definitive);
      (definitive ? definitive_names : context_names).push_back(c.name);
      // Manual benchmark: a deterministic ~60% subset, always including the root.
      if (c.cui == planted.target_cui || (c.cui.number() / 7) % 5 < 3) planted.manual.insert(c.cui);
    }
    std::string description = planted.name + ", " + keywords[t] + " disorder, chronic " +
                              keywords[t] + " state. Variants:";
    for (std::size_t k = 0; k < std::min<std::size_t>(6, definitive_names.size()); ++k) {
      description += (k ? ", " : " ") + definitive_names[k];
    }
    description += ". Include: care events for " + keywords[t] +
                   ". Exclude: concepts limited to a single body part.";
    std::string fewshots = "definitive: " +
                           (definitive_names.empty() ? planted.name : definitive_names.front()) +
                           " context dependent: " +
                           (context_names.empty() ? std::string("none") : context_names.front());
    targets.push_back({{"id", planted.id},
                       {"name", planted.name},
                       {"description", description},
                       {"target_cui", planted.target_cui.str()},
                       {"fewshots", fewshots},
                       {"special_instructions", "Exclude foetal or neonatal forms of " + keywords[t] + "."}});
    manifest.targets.push_back(std::move(planted));
  }

  files.mrconso = std::move(conso).str();
  files.mrrel = std::move(rel).str();
  files.mrdef = std::move(def).str();
  files.mrsty = std::move(sty).str();
  files.targets_json = targets.dump(2) + "\n";
  return files;
}

void write_fixture(const FixtureFiles& files, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "manual");
  fs::create_directories(dir / "gold");
  write_text(dir / "MRCONSO.RRF", files.mrconso);
  write_text(dir / "MRREL.RRF", files.mrrel);
  write_text(dir / "MRDEF.RRF", files.mrdef);
  write_text(dir / "MRSTY.RRF", files.mrsty);
  write_text(dir / "targets.json", files.targets_json);
  write_text(dir / "manifest.json", files.manifest.to_json().dump(2) + "\n");
  for (const auto& t : files.manifest.targets) {
    std::string manual = "cui\n";
    for (const auto& cui : t.manual) manual += cui.str() + "\n";
    write_text(dir / "manual" / (t.id + ".csv"), manual);
    std::string gold = "cui,include,class\n";
    for (const auto& [cui, definitive] : t.gold) {
      gold += cui.str() + ",1," + (definitive ? "definitive" : "context_dependent") + "\n";
    }
    write_text(dir / "gold" / (t.id + ".csv"), gold);
  }
  const nlohmann::json config = {
      {"rrf_dir", "."},
      {"run_dir", "run"},
      {"targets", "targets.json"},
      {"manual_dir", "manual"},
      {"gold_dir", "gold"},
      {"vocabularies", kAllowedVocabularies},
      {"language", "ENG"},
      {"embedding", {{"provider", "local"}, {"dimension", 256}, {"batch", 64}}},
      {"chat", {{"provider", "mock-permissive"}}},
      {"retrieval", {{"k", 500}, {"hops", 0}, {"max_neighbours", 350}, {"child_depth", 1}}},
      {"curation", {{"chunk_size", 50}, {"retries", 3}, {"runs", 5}}},
      {"review",
       {{"host", "127.0.0.1"},
        {"port", 8080},
        {"tokens",
         {{"token-ann1", {{"id", "ann1"}, {"role", "annotator"}}},
          {"token-ann2", {{"id", "ann2"}, {"role", "annotator"}}},
          {"token-adj", {{"id", "adj"}, {"role", "adjudicator"}}}}}}}};
  write_text(dir / "config.json", config.dump(2) + "\n");
}

}  // namespace conceptset::fixture
