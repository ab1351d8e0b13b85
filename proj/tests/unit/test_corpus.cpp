#include "test_util.hpp"
#include "xfrn/corpus.hpp"
#include "xfrn/error.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace xfrn;
using xfrn::testing::TempDir;

TEST(Corpus, LoadsThreeRows) {
  TempDir dir("corpus");
  xfrn::testing::spit(dir / "c.tsv", "en\tja\nhello\tこんにちは\ncat\t猫\ndog\t犬\n");
  const auto c = load_parallel_tsv(dir / "c.tsv", {"en", "ja"});
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.dropped_rows, 0);
  EXPECT_EQ(c.sentence(1, "ja"), "猫");
  EXPECT_EQ(c.pairs[2].pair_index, 2);
  EXPECT_EQ(c.languages, (std::set<std::string>{"en", "ja"}));
}

TEST(Corpus, DropsRowWithEmptyCell) {
  TempDir dir("corpus");
  xfrn::testing::spit(dir / "c.tsv", "en\tja\tnl\na\tb\tc\nd\t\tf\ng\th\ti\r\n");
  const auto c = load_parallel_tsv(dir / "c.tsv", {"en", "ja"});
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.dropped_rows, 1);
  EXPECT_EQ(c.sentence(1, "ja"), "h");
  // Rows keep their original numbering after a drop.
  EXPECT_EQ(c.pairs[1].pair_index, 2);
  // A language that is not requested does not cause drops.
  xfrn::testing::spit(dir / "d.tsv", "en\tja\tnl\na\tb\t\n");
  EXPECT_EQ(load_parallel_tsv(dir / "d.tsv", {"en", "ja"}).dropped_rows, 0);
}

TEST(Corpus, MissingEnglishColumnIsError) {
  TempDir dir("corpus");
  xfrn::testing::spit(dir / "c.tsv", "ja\tnl\na\tb\n");
  EXPECT_THROW(load_parallel_tsv(dir / "c.tsv", {"ja"}), DataError);
  xfrn::testing::spit(dir / "d.tsv", "en\tnl\na\tb\n");
  EXPECT_THROW(load_parallel_tsv(dir / "d.tsv", {"en", "ko"}), DataError);
  EXPECT_THROW(load_parallel_tsv(dir / "absent.tsv", {"en"}), ConfigError);
}

TEST(Corpus, PairIndexColumnAndDuplicates) {
  TempDir dir("corpus");
  xfrn::testing::spit(dir / "c.tsv", "pair_index\ten\tit\n10\ta\tb\n3\tc\td\n");
  const auto c = load_parallel_tsv(dir / "c.tsv", {});
  EXPECT_EQ(c.pairs[0].pair_index, 10);
  EXPECT_EQ(c.pairs[1].pair_index, 3);
  xfrn::testing::spit(dir / "d.tsv", "pair_index\ten\n1\ta\n1\tb\n");
  EXPECT_THROW(load_parallel_tsv(dir / "d.tsv", {}), DataError);
}

TEST(Corpus, TsvRoundTrip) {
  TempDir dir("corpus");
  ParallelCorpus c;
  c.languages = {"en", "ko"};
  for (int i = 0; i < 5; ++i) c.pairs.push_back({i * 2, {{"en", "s" + std::to_string(i)}, {"ko", "k" + std::to_string(i)}}});
  write_parallel_tsv(c, dir / "c.tsv");
  const auto back = load_parallel_tsv(dir / "c.tsv", {"en", "ko"});
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back.pairs[i].pair_index, c.pairs[i].pair_index);
    EXPECT_EQ(back.pairs[i].sentences, c.pairs[i].sentences);
  }
}

TEST(Corpus, ThousandRowsPerLanguage) {
  // Protocol scale: 1k sentences per language.
  TempDir dir("corpus");
  std::string text = "en\tja\n";
  for (int i = 0; i < 1000; ++i) text += "e" + std::to_string(i) + "\tj" + std::to_string(i) + "\n";
  xfrn::testing::spit(dir / "c.tsv", text);
  const auto c = load_parallel_tsv(dir / "c.tsv", {"en", "ja"});
  EXPECT_EQ(c.size(), 1000u);
  std::vector<int> ids;
  for (const auto& p : c.pairs) ids.push_back(p.pair_index);
  const auto plan = split_50_50(ids, 1);
  EXPECT_EQ(plan.train_ids.size(), 500u);
  EXPECT_EQ(plan.test_ids.size(), 500u);
}

TEST(Derangement, SizeTwoIsTheSwap) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_EQ(seeded_derangement(2, seed), (std::vector<std::size_t>{1, 0}));
}

TEST(Derangement, NoFixedPointsAndIsPermutation) {
  for (std::size_t n = 2; n < 60; ++n) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto p = seeded_derangement(n, seed);
      ASSERT_EQ(p.size(), n);
      std::vector<std::size_t> sorted = p;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(sorted[i], i);
        EXPECT_NE(p[i], i);
      }
    }
  }
}

TEST(Derangement, SeededIsReproducible) {
  EXPECT_EQ(seeded_derangement(40, 9), seeded_derangement(40, 9));
  EXPECT_NE(seeded_derangement(40, 9), seeded_derangement(40, 10));
  EXPECT_THROW(seeded_derangement(1, 0), DataError);
  EXPECT_THROW(seeded_derangement(0, 0), DataError);
}

TEST(Derangement, DrawsEverySingleCycleOfFour) {
  // Sattolo's algorithm only produces cyclic permutations; with n = 4 those
  // are 6 of the 9 derangements. All draws must be among the cyclic ones.
  std::set<std::vector<std::size_t>> seen;
  for (std::uint64_t seed = 0; seed < 400; ++seed) seen.insert(seeded_derangement(4, seed));
  EXPECT_EQ(seen.size(), 6u);
}

TEST(NonParallel, PairsNeverShareIndex) {
  ParallelCorpus c;
  c.languages = {"en", "it"};
  for (int i = 0; i < 30; ++i) c.pairs.push_back({100 + i, {{"en", "e" + std::to_string(i)}, {"it", "i" + std::to_string(i)}}});
  const auto np = make_nonparallel_pairs(c, "it", 5);
  ASSERT_EQ(np.sentences.size(), 30u);
  for (std::size_t k = 0; k < 30; ++k) {
    EXPECT_NE(np.pair_indices[k].first, np.pair_indices[k].second);
    EXPECT_EQ(np.sentences[k].first, c.sentence(k, "en"));
    EXPECT_EQ(np.sentences[k].second, c.sentence(np.permutation[k], "it"));
  }
  const auto again = make_nonparallel_pairs(c, "it", 5);
  EXPECT_EQ(again.permutation, np.permutation);
}

TEST(NonParallel, SizeOneCorpusIsError) {
  ParallelCorpus c;
  c.languages = {"en", "it"};
  c.pairs.push_back({0, {{"en", "a"}, {"it", "b"}}});
  EXPECT_THROW(make_nonparallel_pairs(c, "it", 0), DataError);
}

TEST(Split, FourIdsTwoTwo) {
  const auto plan = split_50_50({1, 2, 3, 4}, 3);
  EXPECT_EQ(plan.train_ids.size(), 2u);
  EXPECT_EQ(plan.test_ids.size(), 2u);
  EXPECT_EQ(plan.seed, 3u);
}

TEST(Split, FiveIdsThreeTwo) {
  const auto plan = split_50_50({1, 2, 3, 4, 5}, 3);
  EXPECT_EQ(plan.train_ids.size(), 3u);
  EXPECT_EQ(plan.test_ids.size(), 2u);
}

TEST(Split, DisjointCoveringAndSeeded) {
  std::vector<int> ids;
  for (int i = 0; i < 101; ++i) ids.push_back(i * 3);
  const auto a = split_50_50(ids, 11);
  const auto b = split_50_50(ids, 11);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.test_ids, b.test_ids);
  std::set<int> all(a.train_ids.begin(), a.train_ids.end());
  for (int id : a.test_ids) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all, std::set<int>(ids.begin(), ids.end()));
  EXPECT_NO_THROW(check_split_hygiene(a.train_ids, a.test_ids));
  EXPECT_NE(split_50_50(ids, 12).train_ids, a.train_ids);
  EXPECT_THROW(split_50_50({}, 0), DataError);
}

TEST(Split, HygieneDetectsIntersection) {
  EXPECT_THROW(check_split_hygiene({1, 2, 3}, {3, 4}), DataError);
  EXPECT_NO_THROW(check_split_hygiene({1, 2}, {3, 4}));
}

TEST(Qa, JsonlRoundTripAndErrors) {
  TempDir dir("corpus");
  QaDataset ds;
  ds.items.push_back({"q1", "ja", "日本の首都は?", {"東京", "とうきょう"}});
  ds.items.push_back({"q2", "en", "Capital of France?", {"Paris"}});
  write_qa_jsonl(ds, dir / "qa.jsonl");
  const auto back = load_qa_jsonl(dir / "qa.jsonl");
  ASSERT_EQ(back.items.size(), 2u);
  EXPECT_EQ(back.items[0].answers, ds.items[0].answers);
  EXPECT_EQ(back.items[1].question, "Capital of France?");

  xfrn::testing::spit(dir / "bad.jsonl", R"({"question_id":"q","language":"en","question":"x","answers":[]})" "\n");
  EXPECT_THROW(load_qa_jsonl(dir / "bad.jsonl"), DataError);
  xfrn::testing::spit(dir / "bad2.jsonl", "{not json}\n");
  EXPECT_THROW(load_qa_jsonl(dir / "bad2.jsonl"), DataError);
  EXPECT_THROW(load_qa_jsonl(dir / "absent.jsonl"), ConfigError);
}

TEST(Qa, PromptIsQuestionNewlineCue) {
  EXPECT_EQ(qa_prompt("Who?", "en"), "Who?\nAnswer:");
  EXPECT_EQ(qa_prompt("誰?", "ja"), "誰?\n答え:");
  EXPECT_EQ(answer_cue("xx"), "Answer:");
}

TEST(Corpus, SubsetKeepsOrder) {
  ParallelCorpus c;
  c.languages = {"en"};
  for (int i = 0; i < 6; ++i) c.pairs.push_back({i, {{"en", std::to_string(i)}}});
  const auto s = c.subset({4, 1, 5});
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.pairs[0].pair_index, 1);
  EXPECT_EQ(s.pairs[2].pair_index, 5);
}
