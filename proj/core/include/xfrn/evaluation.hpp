#pragma once

#include "xfrn/corpus.hpp"
#include "xfrn/model.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xfrn {

// Normalized answer tokens: lowercase, punctuation dropped, then whitespace
// split, or one token per character for ja, ko and zh.
std::vector<std::string> f1_tokens(std::string_view text, std::string_view language);

// Max over golds of the multiset-overlap F1. Empty vs empty is 1, one side
// empty is 0. Throws DataError when golds is empty.
double token_f1(std::string_view prediction, const std::vector<std::string>& golds, std::string_view language);

// First line of the generated continuation, surrounding whitespace trimmed.
std::string extract_answer(std::string_view generated);

enum class QaCondition { none, type1, baseline };
std::string_view to_string(QaCondition c);

struct QaResult {
  std::string question_id;
  std::string language;
  QaCondition condition = QaCondition::none;
  std::string generated;
  double f1 = 0;
  std::string error;  // non-empty when generation failed (f1 is then 0)
};

// Per-language masks. The key "*" applies to languages without an entry.
struct QaMasks {
  std::map<std::string, DeactivationMask> type1;
  std::map<std::string, DeactivationMask> baseline;
};

struct DeltaRow {
  std::string language;
  double threshold = 0;  // questions with condition-none F1 > threshold; -1 keeps all
  int questions = 0;
  double mean_none = kUndefined;
  double delta_type1 = kUndefined;     // mean(type1) - mean(none) on the same set
  double delta_baseline = kUndefined;  // mean(baseline) - mean(none) on the same set
};

struct DeltaReport {
  std::vector<QaResult> results;
  std::vector<DeltaRow> rows;
  std::map<std::string, std::string> provenance;

  const DeltaRow* find(const std::string& language, double threshold) const;

  void write_json(const std::filesystem::path& path) const;
  // question_id,language,condition,f1,error,generated
  void write_questions_csv(const std::filesystem::path& path) const;
  // question_id,language,condition,x,y with x = none F1, y = condition F1.
  void write_scatter_csv(const std::filesystem::path& path) const;
};

struct QaOptions {
  int max_new_tokens = 32;
  std::vector<double> thresholds = {0.5, 0.8};
};

// Aggregates results (one per question and condition) into delta rows: an
// unfiltered row per language plus one per threshold.
DeltaReport build_delta_report(std::vector<QaResult> results, const std::vector<double>& thresholds);

DeltaReport run_qa_protocol(const QaDataset& dataset, const ModelAdapter& model, const QaMasks& masks,
                            const QaOptions& options = {});

}  // namespace xfrn
