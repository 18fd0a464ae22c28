#include "conceptset/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "conceptset/error.hpp"

namespace conceptset {

namespace {

std::size_t intersection_size(const CuiSet& a, const CuiSet& b) {
  const auto& small = a.size() <= b.size() ? a : b;
  const auto& large = a.size() <= b.size() ? b : a;
  return static_cast<std::size_t>(std::count_if(
      small.begin(), small.end(), [&](const Cui& c) { return large.contains(c); }));
}

std::optional<double> ratio(std::size_t numerator, std::size_t denominator) {
  if (denominator == 0) return std::nullopt;
  return static_cast<double>(numerator) / static_cast<double>(denominator);
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

MetricReport class_metrics(const std::vector<std::pair<ClassLabel, ClassLabel>>& pairs,
                           ClassLabel positive) {
  MetricReport m;
  for (const auto& [pred, gold] : pairs) {
    if (pred == positive && gold == positive) ++m.true_positives;
    if (gold == positive) ++m.recall_denominator;
    if (pred == positive) ++m.precision_denominator;
  }
  m.recall = ratio(m.true_positives, m.recall_denominator);
  m.precision = ratio(m.true_positives, m.precision_denominator);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

bool truthy(std::string_view text) {
  std::string lower(text);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return lower == "1" || lower == "true" || lower == "yes" || lower == "y" ||
         lower == "include" || lower == "included";
}

}  // namespace

const char* class_label_name(ClassLabel label) {
  return label == ClassLabel::kDefinitive ? "definitive" : "context_dependent";
}

std::optional<ClassLabel> parse_class_label(std::string_view text) {
  if (text == "definitive") return ClassLabel::kDefinitive;
  if (text == "context_dependent" || text == "context-dependent") {
    return ClassLabel::kContextDependent;
  }
  return std::nullopt;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"recall", optional_json(r.recall)},
          {"precision", optional_json(r.precision)},
          {"f1", optional_json(r.f1)},
          {"true_positives", r.true_positives},
          {"recall_denominator", r.recall_denominator},
          {"precision_denominator", r.precision_denominator}};
}

std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall) {
  if (!precision || !recall) return std::nullopt;
  const double sum = *precision + *recall;
  if (sum == 0) return 0.0;
  return 2 * *precision * *recall / sum;
}

MetricReport retrieval_recall(const CuiSet& manual, const CuiSet& retrieved) {
  if (manual.empty()) throw Error(ErrorCode::kUndefinedMetric, "retrieval recall needs a non-empty manual set");
  MetricReport m;
  m.true_positives = intersection_size(manual, retrieved);
  m.recall_denominator = manual.size();
  m.precision_denominator = retrieved.size();
  m.recall = ratio(m.true_positives, m.recall_denominator);
  m.precision = ratio(m.true_positives, m.precision_denominator);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

MetricReport llm_filter_metrics(const CuiSet& predicted, const CuiSet& gold,
                                const CuiSet& retrieved) {
  MetricReport m;
  m.true_positives = intersection_size(gold, predicted);
  m.recall_denominator = intersection_size(gold, retrieved);
  m.precision_denominator = predicted.size();
  m.recall = ratio(m.true_positives, m.recall_denominator);
  m.precision = ratio(m.true_positives, m.precision_denominator);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

MetricReport manual_recall(const CuiSet& manual_predictions, const CuiSet& gold) {
  if (gold.empty()) throw Error(ErrorCode::kUndefinedMetric, "manual recall needs a non-empty gold set");
  MetricReport m;
  m.true_positives = intersection_size(gold, manual_predictions);
  m.recall_denominator = gold.size();
  m.recall = ratio(m.true_positives, m.recall_denominator);
  return m;
}

nlohmann::json to_json(const ClassificationReport& r) {
  return {{"definitive", to_json(r.definitive)},
          {"context_dependent", to_json(r.context_dependent)},
          {"macro_recall", r.macro_recall},
          {"macro_precision", r.macro_precision},
          {"macro_f1", r.macro_f1},
          {"evaluated", r.evaluated},
          {"predicted_share", {{"definitive", r.predicted_definitive_share},
                               {"context_dependent", r.predicted_context_share}}},
          {"gold_share", {{"definitive", r.gold_definitive_share},
                          {"context_dependent", r.gold_context_share}}}};
}

ClassificationReport classification_report(const std::map<Cui, ClassLabel>& predicted,
                                           const std::map<Cui, ClassLabel>& gold) {
  std::vector<std::pair<ClassLabel, ClassLabel>> pairs;
  for (const auto& [cui, label] : predicted) {
    if (auto it = gold.find(cui); it != gold.end()) pairs.emplace_back(label, it->second);
  }
  if (pairs.empty()) {
    throw Error(ErrorCode::kUndefinedMetric, "no CUIs shared by prediction and gold");
  }
  ClassificationReport r;
  r.evaluated = pairs.size();
  r.definitive = class_metrics(pairs, ClassLabel::kDefinitive);
  r.context_dependent = class_metrics(pairs, ClassLabel::kContextDependent);
  r.macro_recall = (r.definitive.recall.value_or(0) + r.context_dependent.recall.value_or(0)) / 2;
  r.macro_precision =
      (r.definitive.precision.value_or(0) + r.context_dependent.precision.value_or(0)) / 2;
  r.macro_f1 = (r.definitive.f1.value_or(0) + r.context_dependent.f1.value_or(0)) / 2;
  const double n = static_cast<double>(pairs.size());
  r.predicted_definitive_share = static_cast<double>(r.definitive.precision_denominator) / n;
  r.predicted_context_share = static_cast<double>(r.context_dependent.precision_denominator) / n;
  r.gold_definitive_share = static_cast<double>(r.definitive.recall_denominator) / n;
  r.gold_context_share = static_cast<double>(r.context_dependent.recall_denominator) / n;
  return r;
}

SetAgreement set_agreement(const CuiSet& a, const CuiSet& b) {
  if (a.empty() || b.empty()) {
    throw Error(ErrorCode::kUndefinedMetric, "set agreement needs two non-empty sets");
  }
  SetAgreement s;
  s.intersection_size = intersection_size(a, b);
  s.union_size = a.size() + b.size() - s.intersection_size;
  s.jaccard = static_cast<double>(s.intersection_size) / static_cast<double>(s.union_size);
  s.overlap = static_cast<double>(s.intersection_size) /
              static_cast<double>(std::min(a.size(), b.size()));
  return s;
}

nlohmann::json to_json(const AgreementReport& r) {
  return {{"n", r.n},
          {"disagreements", r.disagreements},
          {"percent_agreement", r.percent_agreement},
          {"observed", r.observed},
          {"expected", r.expected},
          {"kappa", optional_json(r.kappa)},
          {"marginals_first", r.marginals_first},
          {"marginals_second", r.marginals_second}};
}

AgreementReport annotator_agreement(const std::map<std::string, std::string>& first,
                                    const std::map<std::string, std::string>& second) {
  if (first.size() != second.size() ||
      !std::equal(first.begin(), first.end(), second.begin(),
                  [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw Error(ErrorCode::kInvalidArgument, "annotations cover different items");
  }
  if (first.empty()) throw Error(ErrorCode::kInvalidArgument, "agreement needs at least one item");
  AgreementReport r;
  r.n = first.size();
  std::map<std::string, std::size_t> count_first, count_second;
  for (auto a = first.begin(), b = second.begin(); a != first.end(); ++a, ++b) {
    if (a->second != b->second) ++r.disagreements;
    ++count_first[a->second];
    ++count_second[b->second];
  }
  const double n = static_cast<double>(r.n);
  for (const auto& [label, count] : count_first) r.marginals_first[label] = count / n;
  for (const auto& [label, count] : count_second) r.marginals_second[label] = count / n;
  r.observed = static_cast<double>(r.n - r.disagreements) / n;
  r.percent_agreement = 100.0 * r.observed;
  for (const auto& [label, p1] : r.marginals_first) {
    if (auto it = r.marginals_second.find(label); it != r.marginals_second.end()) {
      r.expected += p1 * it->second;
    }
  }
  if (r.expected < 1.0) r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

MeanSd run_variability(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "no values to summarise");
  MeanSd out;
  // Identical runs must report exactly zero spread, which summation rounding
  // would not guarantee.
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    out.mean = values.front();
    return out;
  }
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  return fields;
}

std::string csv_field(std::string_view value) {
  if (value.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(value);
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

LabelledSet read_labelled_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kParse, "empty CSV");
  const auto header = split_csv_line(line);
  auto column = [&](std::initializer_list<const char*> names) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      for (const char* name : names) {
        if (header[i] == name) return i;
      }
    }
    return std::nullopt;
  };
  const auto cui_col = column({"cui", "CUI"});
  if (!cui_col) throw Error(ErrorCode::kParse, "CSV header lacks a 'cui' column");
  const auto include_col = column({"include", "label"});
  const auto class_col = column({"class"});
  const auto name_col = column({"name"});

  LabelledSet out;
  std::size_t line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    auto field = [&](std::optional<std::size_t> col) -> std::string {
      return col && *col < fields.size() ? fields[*col] : std::string();
    };
    auto cui = Cui::parse(field(cui_col));
    if (!cui) {
      throw Error(ErrorCode::kParse, "line " + std::to_string(line_number) + ": malformed CUI '" +
                                         field(cui_col) + "'");
    }
    if (name_col) out.names[*cui] = field(name_col);
    if (include_col && !truthy(field(include_col))) continue;
    out.members.insert(*cui);
    if (class_col && !field(class_col).empty()) {
      auto label = parse_class_label(field(class_col));
      if (!label) {
        throw Error(ErrorCode::kParse, "line " + std::to_string(line_number) +
                                           ": unknown class '" + field(class_col) + "'");
      }
      out.class_of[*cui] = *label;
    }
  }
  return out;
}

LabelledSet read_labelled_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return read_labelled_csv(in);
}

std::string format_ratio(std::optional<double> value) {
  if (!value) return "NA";
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.2f", *value);
  return buffer;
}

}  // namespace conceptset
