#include "conceptset/rrf.hpp"

#include <algorithm>

#include "conceptset/error.hpp"

namespace conceptset::rrf {

namespace {

void check_stream(std::istream& in, const char* what) {
  if (!in.good() && !in.eof()) {
    throw Error(ErrorCode::kIo, std::string("unreadable ") + what + " stream");
  }
}

// Runs `handle` over every line, stripping a trailing '\r'.
template <typename Handler>
void for_each_line(std::istream& in, const char* what, ParseReport& report,
                   Handler&& handle) {
  check_stream(in, what);
  std::string line;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++report.lines;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    handle(std::string_view(line), fields);
  }
  if (in.bad()) {
    throw Error(ErrorCode::kIo, std::string("read failure in ") + what);
  }
}

std::string column_error(std::size_t expected, std::string_view line) {
  const auto pipes = std::count(line.begin(), line.end(), '|');
  return "expected " + std::to_string(expected) + " '|'-terminated fields, found " +
         std::to_string(pipes) + " delimiters";
}

}  // namespace

void ParseReport::add_error(std::uint64_t line, std::string message) {
  ++error_count;
  if (errors.size() < kMaxStoredErrors) {
    errors.push_back({line, std::move(message)});
  }
}

const VocabularySet& default_vocabularies() {
  static const VocabularySet kDefault{"SNOMEDCT_US", "NCI", "MSH"};
  return kDefault;
}

const std::vector<std::string>& default_definition_priority() {
  static const std::vector<std::string> kPriority{"SNOMEDCT_US", "NCI", "MSH"};
  return kPriority;
}

bool split_record(std::string_view line, std::size_t expected,
                  std::vector<std::string_view>& fields) {
  fields.clear();
  if (line.empty() || line.back() != '|') return false;
  std::size_t start = 0;
  while (start < line.size()) {
    const auto bar = line.find('|', start);
    if (bar == std::string_view::npos) return false;
    fields.push_back(line.substr(start, bar - start));
    if (fields.size() > expected) return false;
    start = bar + 1;
  }
  return fields.size() == expected;
}

ParseReport parse_concepts(std::istream& mrconso, const VocabularySet& vocabularies,
                           std::string_view language,
                           const std::function<void(AtomRecord&&)>& sink) {
  ParseReport report;
  for_each_line(mrconso, "MRCONSO", report, [&](std::string_view line, auto& f) {
    if (!split_record(line, kMrconsoFields, f)) {
      report.add_error(report.lines, column_error(kMrconsoFields, line));
      return;
    }
    auto cui = Cui::parse(f[0]);
    if (!cui) {
      report.add_error(report.lines, "malformed CUI '" + std::string(f[0]) + "'");
      return;
    }
    if (f[2].size() != 1 || f[16].size() != 1 ||
        (f[6] != "Y" && f[6] != "N")) {
      report.add_error(report.lines, "malformed TS/ISPREF/SUPPRESS field");
      return;
    }
    if (f[14].empty()) {
      report.add_error(report.lines, "empty STR field");
      return;
    }
    // Suppressed atoms (SUPPRESS other than N) never enter the graph.
    if (f[1] != language || !vocabularies.contains(std::string(f[11])) ||
        f[16] != "N") {
      ++report.filtered;
      return;
    }
    AtomRecord atom;
    atom.cui = *cui;
    atom.language = std::string(f[1]);
    atom.term_status = f[2][0];
    atom.string_type = std::string(f[4]);
    atom.is_preferred = f[6] == "Y";
    atom.source_vocabulary = std::string(f[11]);
    atom.name = std::string(f[14]);
    atom.suppress = f[16][0];
    ++report.records;
    sink(std::move(atom));
  });
  return report;
}

ParseReport parse_relations(std::istream& mrrel, const VocabularySet& vocabularies,
                            const std::function<void(RelationRecord&&)>& sink) {
  ParseReport report;
  for_each_line(mrrel, "MRREL", report, [&](std::string_view line, auto& f) {
    if (!split_record(line, kMrrelFields, f)) {
      report.add_error(report.lines, column_error(kMrrelFields, line));
      return;
    }
    auto cui1 = Cui::parse(f[0]);
    auto cui2 = Cui::parse(f[4]);
    if (!cui1 || !cui2) {
      report.add_error(report.lines, "malformed CUI1/CUI2");
      return;
    }
    if (f[3].empty()) {
      report.add_error(report.lines, "empty REL field");
      return;
    }
    if (!vocabularies.contains(std::string(f[10]))) {
      ++report.filtered;
      return;
    }
    if (*cui1 == *cui2) {
      ++report.self_loops;
      return;
    }
    ++report.records;
    sink(RelationRecord{*cui1, *cui2, std::string(f[3]), std::string(f[7]),
                        std::string(f[10])});
  });
  return report;
}

Parsed<AtomRecord> collect_concepts(std::istream& mrconso,
                                    const VocabularySet& vocabularies,
                                    std::string_view language) {
  Parsed<AtomRecord> out;
  out.report = parse_concepts(mrconso, vocabularies, language,
                              [&](AtomRecord&& a) { out.records.push_back(std::move(a)); });
  return out;
}

Parsed<RelationRecord> collect_relations(std::istream& mrrel,
                                         const VocabularySet& vocabularies) {
  Parsed<RelationRecord> out;
  out.report = parse_relations(mrrel, vocabularies, [&](RelationRecord&& r) {
    out.records.push_back(std::move(r));
  });
  return out;
}

ParsedAttributes parse_attributes(std::istream& mrdef, std::istream& mrsty,
                                  const std::vector<std::string>& definition_priority) {
  ParsedAttributes out;
  auto rank_of = [&](std::string_view sab) {
    auto it = std::find(definition_priority.begin(), definition_priority.end(), sab);
    return static_cast<std::size_t>(it - definition_priority.begin());
  };
  // Rank of the vocabulary that supplied the currently kept definition.
  std::map<Cui, std::size_t> kept_rank;

  auto& defs = out.definitions_report;
  for_each_line(mrdef, "MRDEF", defs, [&](std::string_view line, auto& f) {
    if (!split_record(line, kMrdefFields, f)) {
      defs.add_error(defs.lines, column_error(kMrdefFields, line));
      return;
    }
    auto cui = Cui::parse(f[0]);
    if (!cui) {
      defs.add_error(defs.lines, "malformed CUI '" + std::string(f[0]) + "'");
      return;
    }
    if (f[5].empty()) {
      defs.add_error(defs.lines, "empty DEF field");
      return;
    }
    ++defs.records;
    auto& attrs = out.attributes[*cui];
    attrs.cui = *cui;
    const auto rank = rank_of(f[4]);
    const std::string_view text = f[5];
    bool replace = !attrs.definition.has_value();
    if (!replace) {
      const auto& current = *attrs.definition;
      const auto current_rank = kept_rank[*cui];
      replace = rank < current_rank ||
                (rank == current_rank &&
                 (text.size() > current.size() ||
                  (text.size() == current.size() && text < current)));
    }
    if (replace) {
      attrs.definition = std::string(text);
      kept_rank[*cui] = rank;
    }
  });

  auto& stys = out.semantic_types_report;
  for_each_line(mrsty, "MRSTY", stys, [&](std::string_view line, auto& f) {
    if (!split_record(line, kMrstyFields, f)) {
      stys.add_error(stys.lines, column_error(kMrstyFields, line));
      return;
    }
    auto cui = Cui::parse(f[0]);
    if (!cui) {
      stys.add_error(stys.lines, "malformed CUI '" + std::string(f[0]) + "'");
      return;
    }
    if (f[3].empty()) {
      stys.add_error(stys.lines, "empty STY field");
      return;
    }
    ++stys.records;
    auto& attrs = out.attributes[*cui];
    attrs.cui = *cui;
    attrs.semantic_types.emplace(f[3]);
  });
  return out;
}

}  // namespace conceptset::rrf
