#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptset/cui.hpp"

namespace conceptset {

enum class ClassLabel { kDefinitive, kContextDependent };

const char* class_label_name(ClassLabel label);
// Accepts "definitive", "context_dependent" and "context-dependent".
std::optional<ClassLabel> parse_class_label(std::string_view text);

// Ratios keep their numerators/denominators. An undefined ratio (empty
// denominator) is nullopt, never 0.
struct MetricReport {
  std::optional<double> recall;
  std::optional<double> precision;
  std::optional<double> f1;
  std::size_t true_positives = 0;
  std::size_t recall_denominator = 0;
  std::size_t precision_denominator = 0;
};

nlohmann::json to_json(const MetricReport& report);

// Harmonic mean; nullopt when either input is undefined, 0 when both are 0.
std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall);

// recall = |M∩R|/|M|, precision = |M∩R|/|R|. Throws kUndefinedMetric for
// an empty manual set.
MetricReport retrieval_recall(const CuiSet& manual, const CuiSet& retrieved);

// recall = |G∩P|/|G∩R|, precision = |G∩P|/|P|, with G the positively
// adjudicated gold set and R the retrieval space.
MetricReport llm_filter_metrics(const CuiSet& predicted, const CuiSet& gold,
                                const CuiSet& retrieved);

// recall = |G∩P_M|/|G|; precision is deliberately left undefined. Throws
// kUndefinedMetric for an empty gold set.
MetricReport manual_recall(const CuiSet& manual_predictions, const CuiSet& gold);

struct ClassificationReport {
  MetricReport definitive;
  MetricReport context_dependent;
  // Unweighted mean over the two classes. An undefined per-class value
  // counts as 0 in the mean; the per-class entry itself stays undefined.
  double macro_recall = 0;
  double macro_precision = 0;
  double macro_f1 = 0;
  std::size_t evaluated = 0;
  double predicted_definitive_share = 0;
  double predicted_context_share = 0;
  double gold_definitive_share = 0;
  double gold_context_share = 0;
};

nlohmann::json to_json(const ClassificationReport& report);

// Scored on keys(pred) ∩ keys(gold). Throws kUndefinedMetric when empty.
ClassificationReport classification_report(const std::map<Cui, ClassLabel>& predicted,
                                           const std::map<Cui, ClassLabel>& gold);

struct SetAgreement {
  double jaccard = 0;
  double overlap = 0;
  std::size_t union_size = 0;
  std::size_t intersection_size = 0;
};

// Throws kUndefinedMetric when either set is empty.
SetAgreement set_agreement(const CuiSet& a, const CuiSet& b);

struct AgreementReport {
  std::size_t n = 0;
  std::size_t disagreements = 0;
  double percent_agreement = 0;
  double observed = 0;  // p_o
  double expected = 0;  // p_e
  std::optional<double> kappa;
  std::map<std::string, double> marginals_first;
  std::map<std::string, double> marginals_second;
};

nlohmann::json to_json(const AgreementReport& report);

// Percent agreement and Cohen's kappa. Both maps must share the same keys
// (kInvalidArgument otherwise) and hold at least one item. Kappa is
// undefined when p_e = 1.
AgreementReport annotator_agreement(const std::map<std::string, std::string>& first,
                                    const std::map<std::string, std::string>& second);

struct MeanSd {
  double mean = 0;
  double sd = 0;  // sample SD (n-1); 0 for a single value
};

// Throws kInvalidArgument for an empty list.
MeanSd run_variability(std::span<const double> values);

// A concept set read from CSV. Recognised header columns: cui (required),
// name, include/label (truthy = member; absent = every row is a member),
// class.
struct LabelledSet {
  CuiSet members;
  std::map<Cui, ClassLabel> class_of;
  std::map<Cui, std::string> names;
};

LabelledSet read_labelled_csv(std::istream& in);
LabelledSet read_labelled_csv_file(const std::string& path);

// Minimal RFC 4180 helpers shared by every CSV we emit or read.
std::vector<std::string> split_csv_line(std::string_view line);
std::string csv_field(std::string_view value);

// Two-decimal display rounding; "NA" for undefined.
std::string format_ratio(std::optional<double> value);

}  // namespace conceptset
