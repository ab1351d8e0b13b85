#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace xfrn {

struct ParallelPair {
  int pair_index = 0;
  std::map<std::string, std::string> sentences;  // language code -> sentence
};

// Every pair has an English side; pair_index is unique.
struct ParallelCorpus {
  std::vector<ParallelPair> pairs;
  std::set<std::string> languages;
  int dropped_rows = 0;

  std::size_t size() const { return pairs.size(); }
  const std::string& sentence(std::size_t i, const std::string& language) const;
  // Sub-corpus keeping only the given pair indices (original order kept).
  ParallelCorpus subset(const std::set<int>& pair_indices) const;
  void validate() const;
};

struct QaItem {
  std::string question_id;
  std::string language;
  std::string question;
  std::vector<std::string> answers;
};

struct QaDataset {
  std::vector<QaItem> items;
};

struct SplitPlan {
  std::vector<int> train_ids;
  std::vector<int> test_ids;
  std::uint64_t seed = 0;
};

// TSV with a header row naming language codes. Rows with an empty cell in any
// requested language are dropped and counted. A "pair_index" column, when
// present, supplies the indices; otherwise rows are numbered from 0.
ParallelCorpus load_parallel_tsv(const std::filesystem::path& path, const std::vector<std::string>& languages);
void write_parallel_tsv(const ParallelCorpus& corpus, const std::filesystem::path& path);

// Each English sentence paired with the L2 sentence of a different pair
// (a seeded derangement).
struct NonParallelPairing {
  std::vector<std::pair<std::string, std::string>> sentences;  // (en, l2)
  std::vector<std::pair<int, int>> pair_indices;               // (en pair, l2 pair)
  std::vector<std::size_t> permutation;                        // l2 row used for en row i
};
NonParallelPairing make_nonparallel_pairs(const ParallelCorpus& corpus, const std::string& l2, std::uint64_t seed);

// Seeded derangement of 0..n-1 (no fixed points). Requires n >= 2.
std::vector<std::size_t> seeded_derangement(std::size_t n, std::uint64_t seed);

// Disjoint halves after a seeded shuffle; with an odd count the extra id goes
// to train.
SplitPlan split_50_50(const std::vector<int>& ids, std::uint64_t seed);

// Throws DataError if the two id sets intersect.
void check_split_hygiene(const std::vector<int>& train_ids, const std::vector<int>& test_ids);

QaDataset load_qa_jsonl(const std::filesystem::path& path);
void write_qa_jsonl(const QaDataset& dataset, const std::filesystem::path& path);

// Zero-shot prompt: the question, a newline, then the localized answer cue.
std::string answer_cue(const std::string& language);
std::string qa_prompt(const std::string& question, const std::string& language);

}  // namespace xfrn
