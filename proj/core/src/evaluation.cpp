#include "xfrn/evaluation.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace xfrn {

namespace {

// Invalid sequences decode to U+FFFD one byte at a time.
std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    int len = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    char32_t cp = len == 1 ? b : len == 2 ? (b & 0x1F) : len == 3 ? (b & 0x0F) : (b & 0x07);
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      const auto c = static_cast<unsigned char>(s[i + k]);
      if ((c >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (c & 0x3F);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

char32_t to_lower(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 0x20;
  if ((c >= 0xC0 && c <= 0xDE && c != 0xD7)) return c + 0x20;
  if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 0x20;
  if (c >= 0x410 && c <= 0x42F) return c + 0x20;
  if (c >= 0x400 && c <= 0x40F) return c + 0x50;
  // Latin Extended-A pairs upper/lower on alternating code points.
  if ((c >= 0x100 && c <= 0x137) || (c >= 0x14A && c <= 0x177)) return c % 2 == 0 ? c + 1 : c;
  if ((c >= 0x139 && c <= 0x148) || (c >= 0x179 && c <= 0x17E)) return c % 2 == 1 ? c + 1 : c;
  return c;
}

bool is_space(char32_t c) {
  return c == ' ' || (c >= 0x09 && c <= 0x0D) || c == 0xA0 || c == 0x3000 || (c >= 0x2000 && c <= 0x200B) ||
         c == 0x202F || c == 0x205F;
}

bool is_punct(char32_t c) {
  if (c < 0x80) return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
                       (c >= 0x7B && c <= 0x7E);
  switch (c) {
    case 0xA1: case 0xA7: case 0xAB: case 0xB6: case 0xB7: case 0xBB: case 0xBF: case 0x30FB:
      return true;
    default:
      break;
  }
  return (c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E) || (c >= 0x3001 && c <= 0x3003) ||
         (c >= 0x3008 && c <= 0x3011) || (c >= 0x3014 && c <= 0x301F) || (c >= 0xFF01 && c <= 0xFF0F) ||
         (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65);
}

bool per_character(std::string_view language) {
  std::string base(language.substr(0, language.find_first_of("-_")));
  std::transform(base.begin(), base.end(), base.begin(), [](unsigned char c) { return std::tolower(c); });
  return base == "ja" || base == "ko" || base == "zh";
}

double multiset_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int common = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2 * p * r / (p + r);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string fmt(double v) { return format_number(v); }

const DeactivationMask& pick(const std::map<std::string, DeactivationMask>& masks, const std::string& language,
                             const char* what) {
  auto it = masks.find(language);
  if (it == masks.end()) it = masks.find("*");
  if (it == masks.end()) throw ConfigError(std::string("no ") + what + " mask for language '" + language + "'");
  return it->second;
}

}  // namespace

std::vector<std::string> f1_tokens(std::string_view text, std::string_view language) {
  const bool chars = per_character(language);
  std::vector<std::string> tokens;
  std::string current;
  for (char32_t c : decode_utf8(text)) {
    if (is_space(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (is_punct(c)) continue;
    c = to_lower(c);
    if (chars) {
      std::string one;
      append_utf8(one, c);
      tokens.push_back(std::move(one));
    } else {
      append_utf8(current, c);
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

double token_f1(std::string_view prediction, const std::vector<std::string>& golds, std::string_view language) {
  if (golds.empty()) throw DataError("token F1 needs at least one gold answer");
  const auto pred = f1_tokens(prediction, language);
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, multiset_f1(pred, f1_tokens(g, language)));
  return best;
}

std::string extract_answer(std::string_view generated) {
  const auto nl = generated.find('\n');
  std::string_view line = generated.substr(0, nl);
  const auto first = line.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return "";
  const auto last = line.find_last_not_of(" \t\r");
  return std::string(line.substr(first, last - first + 1));
}

std::string_view to_string(QaCondition c) {
  switch (c) {
    case QaCondition::none: return "none";
    case QaCondition::type1: return "type1";
    case QaCondition::baseline: return "baseline";
  }
  return "none";
}

const DeltaRow* DeltaReport::find(const std::string& language, double threshold) const {
  for (const auto& r : rows)
    if (r.language == language && r.threshold == threshold) return &r;
  return nullptr;
}

DeltaReport build_delta_report(std::vector<QaResult> results, const std::vector<double>& thresholds) {
  // (language, question) -> condition -> f1
  std::map<std::pair<std::string, std::string>, std::map<QaCondition, double>> table;
  for (const auto& r : results) {
    if (!table[{r.language, r.question_id}].emplace(r.condition, r.f1).second) {
      throw DataError("duplicate result for question '" + r.question_id + "' under " + std::string(to_string(r.condition)));
    }
  }
  std::set<std::string> languages;
  for (const auto& [key, _] : table) languages.insert(key.first);
  languages.insert("*");

  DeltaReport report;
  std::vector<double> filters = {-1.0};
  filters.insert(filters.end(), thresholds.begin(), thresholds.end());
  for (const auto& lang : languages) {
    for (double t : filters) {
      DeltaRow row;
      row.language = lang;
      row.threshold = t;
      double sum_none = 0, sum_t1 = 0, sum_base = 0;
      int n_t1 = 0, n_base = 0;
      for (const auto& [key, by_cond] : table) {
        if (lang != "*" && key.first != lang) continue;
        auto none = by_cond.find(QaCondition::none);
        if (none == by_cond.end()) throw DataError("question '" + key.second + "' has no unmasked result");
        // Membership depends on the unmasked score alone.
        if (!(none->second > t)) continue;
        ++row.questions;
        sum_none += none->second;
        if (auto it = by_cond.find(QaCondition::type1); it != by_cond.end()) {
          sum_t1 += it->second;
          ++n_t1;
        }
        if (auto it = by_cond.find(QaCondition::baseline); it != by_cond.end()) {
          sum_base += it->second;
          ++n_base;
        }
      }
      if (row.questions > 0) {
        row.mean_none = sum_none / row.questions;
        if (n_t1 > 0 && n_t1 != row.questions) throw DataError("type1 results missing for some questions");
        if (n_base > 0 && n_base != row.questions) throw DataError("baseline results missing for some questions");
        if (n_t1 > 0) row.delta_type1 = sum_t1 / n_t1 - row.mean_none;
        if (n_base > 0) row.delta_baseline = sum_base / n_base - row.mean_none;
      }
      report.rows.push_back(row);
    }
  }
  report.results = std::move(results);
  return report;
}

DeltaReport run_qa_protocol(const QaDataset& dataset, const ModelAdapter& model, const QaMasks& masks,
                            const QaOptions& options) {
  if (dataset.items.empty()) throw DataError("QA dataset is empty");
  for (const auto* group : {&masks.type1, &masks.baseline}) {
    for (const auto& [_, m] : *group) m.validate(model.num_layers(), model.mlp_dim());
  }
  GenerateOptions gen;
  gen.max_new_tokens = options.max_new_tokens;
  gen.stop_at_newline = true;

  std::vector<QaResult> results;
  for (const auto& item : dataset.items) {
    const auto& t1 = pick(masks.type1, item.language, "type1");
    const auto& base = pick(masks.baseline, item.language, "baseline");
    const std::string prompt = qa_prompt(item.question, item.language);
    for (auto [cond, mask] : {std::pair{QaCondition::none, static_cast<const DeactivationMask*>(nullptr)},
                              std::pair{QaCondition::type1, &t1}, std::pair{QaCondition::baseline, &base}}) {
      QaResult r;
      r.question_id = item.question_id;
      r.language = item.language;
      r.condition = cond;
      try {
        r.generated = extract_answer(generate(model, prompt, mask, gen));
        r.f1 = item.answers.empty() ? 0.0 : token_f1(r.generated, item.answers, item.language);
        if (item.answers.empty()) r.error = "no gold answers";
      } catch (const std::exception& e) {
        r.generated.clear();
        r.f1 = 0.0;
        r.error = e.what();
      }
      results.push_back(std::move(r));
    }
  }
  return build_delta_report(std::move(results), options.thresholds);
}

void DeltaReport::write_json(const std::filesystem::path& path) const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"language", r.language},
                      {"threshold", r.threshold < 0 ? json(nullptr) : json(r.threshold)},
                      {"questions", r.questions},
                      {"mean_none", number_or_null(r.mean_none)},
                      {"delta_type1", number_or_null(r.delta_type1)},
                      {"delta_baseline", number_or_null(r.delta_baseline)}});
  }
  int errors = 0;
  for (const auto& r : results) errors += r.error.empty() ? 0 : 1;
  const json j = {{"rows", rows_j}, {"results", results.size()}, {"generation_errors", errors}, {"provenance", provenance}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

void DeltaReport::write_questions_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : provenance) out << "# " << k << '=' << v << '\n';
  out << "question_id,language,condition,f1,error,generated\n";
  for (const auto& r : results) {
    out << csv_field(r.question_id) << ',' << csv_field(r.language) << ',' << to_string(r.condition) << ','
        << fmt(r.f1) << ',' << csv_field(r.error) << ',' << csv_field(r.generated) << '\n';
  }
}

void DeltaReport::write_scatter_csv(const std::filesystem::path& path) const {
  std::map<std::pair<std::string, std::string>, double> none;
  for (const auto& r : results)
    if (r.condition == QaCondition::none) none[{r.language, r.question_id}] = r.f1;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "question_id,language,condition,x,y\n";
  for (const auto& r : results) {
    if (r.condition == QaCondition::none) continue;
    out << csv_field(r.question_id) << ',' << csv_field(r.language) << ',' << to_string(r.condition) << ','
        << fmt(none.at({r.language, r.question_id})) << ',' << fmt(r.f1) << '\n';
  }
}

}  // namespace xfrn
