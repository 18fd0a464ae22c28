#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "conceptset/cui.hpp"

namespace conceptset::rrf {

// Field counts of the RRF layouts we read (excluding the trailing empty field
// produced by the terminating '|').
inline constexpr std::size_t kMrconsoFields = 18;
inline constexpr std::size_t kMrrelFields = 16;
inline constexpr std::size_t kMrdefFields = 8;
inline constexpr std::size_t kMrstyFields = 6;

struct AtomRecord {
  Cui cui;
  std::string language;
  char term_status = 'P';
  std::string string_type;
  bool is_preferred = false;
  std::string source_vocabulary;
  std::string name;
  char suppress = 'N';

  bool operator==(const AtomRecord&) const = default;
};

struct RelationRecord {
  Cui cui1;
  Cui cui2;
  std::string rel;
  std::string rela;  // empty when absent
  std::string source_vocabulary;

  bool operator==(const RelationRecord&) const = default;
};

struct ConceptAttributes {
  Cui cui;
  std::optional<std::string> definition;
  std::set<std::string> semantic_types;

  bool operator==(const ConceptAttributes&) const = default;
};

using AttributeMap = std::map<Cui, ConceptAttributes>;
using VocabularySet = std::set<std::string>;

struct LineError {
  std::uint64_t line = 0;  // 1-based
  std::string message;
};

// Per-stream bookkeeping. Malformed lines never abort a parse; they are
// counted here and the first kMaxStoredErrors are kept verbatim.
struct ParseReport {
  static constexpr std::size_t kMaxStoredErrors = 1000;

  std::uint64_t lines = 0;
  std::uint64_t records = 0;
  std::uint64_t filtered = 0;
  std::uint64_t self_loops = 0;
  std::uint64_t error_count = 0;
  std::vector<LineError> errors;

  void add_error(std::uint64_t line, std::string message);
};

template <typename Record>
struct Parsed {
  std::vector<Record> records;
  ParseReport report;
};

const VocabularySet& default_vocabularies();
// Definition source priority, highest first.
const std::vector<std::string>& default_definition_priority();

// Splits one RRF record into its fields. Returns false unless the line holds
// exactly `expected` fields followed by a terminating '|'.
bool split_record(std::string_view line, std::size_t expected,
                  std::vector<std::string_view>& fields);

// Streaming parsers: each admitted record is handed to `sink` as soon as its
// line is read, so memory stays bounded by one line plus the sink's state.
// Throws Error(kIo) if the stream is unreadable.
ParseReport parse_concepts(std::istream& mrconso, const VocabularySet& vocabularies,
                           std::string_view language,
                           const std::function<void(AtomRecord&&)>& sink);
ParseReport parse_relations(std::istream& mrrel, const VocabularySet& vocabularies,
                            const std::function<void(RelationRecord&&)>& sink);

Parsed<AtomRecord> collect_concepts(std::istream& mrconso,
                                    const VocabularySet& vocabularies,
                                    std::string_view language = "ENG");
Parsed<RelationRecord> collect_relations(std::istream& mrrel,
                                         const VocabularySet& vocabularies);

struct ParsedAttributes {
  AttributeMap attributes;
  ParseReport definitions_report;
  ParseReport semantic_types_report;
};

// Merges MRDEF and MRSTY into one record per CUI. When a CUI has several
// definitions the one from the highest-priority vocabulary wins, then the
// longest, then the lexicographically smallest. Semantic types are unioned.
ParsedAttributes parse_attributes(
    std::istream& mrdef, std::istream& mrsty,
    const std::vector<std::string>& definition_priority =
        default_definition_priority());

}  // namespace conceptset::rrf
