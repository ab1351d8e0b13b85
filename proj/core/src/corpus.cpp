#include "xfrn/corpus.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace xfrn {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

const std::string& ParallelCorpus::sentence(std::size_t i, const std::string& language) const {
  const auto& p = pairs.at(i);
  auto it = p.sentences.find(language);
  if (it == p.sentences.end()) {
    throw DataError("pair " + std::to_string(p.pair_index) + " has no '" + language + "' sentence");
  }
  return it->second;
}

ParallelCorpus ParallelCorpus::subset(const std::set<int>& pair_indices) const {
  ParallelCorpus out;
  out.languages = languages;
  for (const auto& p : pairs)
    if (pair_indices.count(p.pair_index)) out.pairs.push_back(p);
  return out;
}

void ParallelCorpus::validate() const {
  std::set<int> seen;
  for (const auto& p : pairs) {
    if (!p.sentences.count("en")) throw DataError("pair " + std::to_string(p.pair_index) + " has no English side");
    if (!seen.insert(p.pair_index).second) throw DataError("duplicate pair_index " + std::to_string(p.pair_index));
  }
}

ParallelCorpus load_parallel_tsv(const std::filesystem::path& path, const std::vector<std::string>& languages) {
  std::ifstream in(path);
  if (!in) throw ConfigError("corpus file '" + path.string() + "' not found");
  std::string line;
  if (!std::getline(in, line)) throw DataError("corpus file '" + path.string() + "' is empty");
  const auto header = split_tabs(strip_cr(line));
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column[header[i]] = i;
  if (!column.count("en")) throw DataError("corpus '" + path.string() + "' has no 'en' column");

  std::vector<std::string> wanted = languages.empty() ? std::vector<std::string>{} : languages;
  if (wanted.empty()) {
    for (const auto& h : header)
      if (h != "pair_index") wanted.push_back(h);
  }
  if (std::find(wanted.begin(), wanted.end(), "en") == wanted.end()) wanted.insert(wanted.begin(), "en");
  for (const auto& lang : wanted) {
    if (!column.count(lang)) throw DataError("corpus '" + path.string() + "' has no '" + lang + "' column");
  }
  const bool has_index = column.count("pair_index") > 0;

  ParallelCorpus corpus;
  corpus.languages.insert(wanted.begin(), wanted.end());
  int row_no = 0;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    ParallelPair pair;
    pair.pair_index = row_no;
    if (has_index) {
      const auto& cell = cells.size() > column["pair_index"] ? cells[column["pair_index"]] : std::string();
      try {
        pair.pair_index = std::stoi(cell);
      } catch (const std::exception&) {
        throw DataError("corpus '" + path.string() + "' row " + std::to_string(row_no + 2) + ": bad pair_index");
      }
    }
    ++row_no;
    bool complete = true;
    for (const auto& lang : wanted) {
      const std::size_t c = column[lang];
      if (c >= cells.size() || cells[c].empty()) {
        complete = false;
        break;
      }
      pair.sentences[lang] = cells[c];
    }
    if (!complete) {
      ++corpus.dropped_rows;
      continue;
    }
    corpus.pairs.push_back(std::move(pair));
  }
  corpus.validate();
  return corpus;
}

void write_parallel_tsv(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus to '" + path.string() + "'");
  std::vector<std::string> langs(corpus.languages.begin(), corpus.languages.end());
  std::stable_partition(langs.begin(), langs.end(), [](const std::string& l) { return l == "en"; });
  out << "pair_index";
  for (const auto& l : langs) out << '\t' << l;
  out << '\n';
  for (const auto& p : corpus.pairs) {
    out << p.pair_index;
    for (const auto& l : langs) {
      auto it = p.sentences.find(l);
      out << '\t' << (it == p.sentences.end() ? "" : it->second);
    }
    out << '\n';
  }
}

std::vector<std::size_t> seeded_derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw DataError("a derangement needs at least 2 items, got " + std::to_string(n));
  // Sattolo's algorithm yields a single n-cycle, hence no fixed points.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(perm[i], perm[j]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] == i) throw DataError("derangement check failed at position " + std::to_string(i));
  }
  return perm;
}

NonParallelPairing make_nonparallel_pairs(const ParallelCorpus& corpus, const std::string& l2, std::uint64_t seed) {
  if (corpus.size() < 2) {
    throw DataError("non-parallel pairing needs at least 2 pairs, corpus has " + std::to_string(corpus.size()));
  }
  NonParallelPairing out;
  out.permutation = seeded_derangement(corpus.size(), seed);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::size_t j = out.permutation[i];
    out.sentences.emplace_back(corpus.sentence(i, "en"), corpus.sentence(j, l2));
    out.pair_indices.emplace_back(corpus.pairs[i].pair_index, corpus.pairs[j].pair_index);
    if (corpus.pairs[i].pair_index == corpus.pairs[j].pair_index) {
      throw DataError("non-parallel pairing produced a parallel pair");
    }
  }
  return out;
}

SplitPlan split_50_50(const std::vector<int>& ids, std::uint64_t seed) {
  if (ids.empty()) throw DataError("cannot split an empty id list");
  std::vector<int> shuffled = ids;
  Rng rng(seed);
  rng.shuffle(shuffled);
  const std::size_t n_train = (shuffled.size() + 1) / 2;
  SplitPlan plan;
  plan.seed = seed;
  plan.train_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
  plan.test_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
  std::sort(plan.train_ids.begin(), plan.train_ids.end());
  std::sort(plan.test_ids.begin(), plan.test_ids.end());
  check_split_hygiene(plan.train_ids, plan.test_ids);
  return plan;
}

void check_split_hygiene(const std::vector<int>& train_ids, const std::vector<int>& test_ids) {
  std::set<int> train(train_ids.begin(), train_ids.end());
  for (int id : test_ids) {
    if (train.count(id)) throw DataError("split hygiene violated: id " + std::to_string(id) + " is in train and test");
  }
}

QaDataset load_qa_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("QA file '" + path.string() + "' not found");
  QaDataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (strip_cr(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      QaItem item{j.at("question_id").get<std::string>(), j.at("language").get<std::string>(),
                  j.at("question").get<std::string>(), j.at("answers").get<std::vector<std::string>>()};
      if (item.answers.empty()) throw DataError("no gold answers");
      ds.items.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

void write_qa_jsonl(const QaDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write QA file '" + path.string() + "'");
  for (const auto& item : dataset.items) {
    json j = {{"question_id", item.question_id},
              {"language", item.language},
              {"question", item.question},
              {"answers", item.answers}};
    out << j.dump() << '\n';
  }
}

std::string answer_cue(const std::string& language) {
  static const std::map<std::string, std::string> cues = {
      {"en", "Answer:"},    {"ja", "答え:"},       {"ko", "답변:"},     {"zh", "答案:"},
      {"nl", "Antwoord:"},  {"it", "Risposta:"},   {"de", "Antwort:"},  {"fr", "Réponse:"},
      {"es", "Respuesta:"}, {"pt", "Resposta:"},   {"ru", "Ответ:"},    {"sv", "Svar:"},
  };
  auto it = cues.find(language);
  return it == cues.end() ? "Answer:" : it->second;
}

std::string qa_prompt(const std::string& question, const std::string& language) {
  return question + "\n" + answer_cue(language);
}

}  // namespace xfrn
