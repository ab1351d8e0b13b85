#include "test_util.hpp"
#include "xfrn/corpus.hpp"
#include "xfrn/error.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/intervention.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace xfrn;
using xfrn::testing::TempDir;

namespace {

PairedSentences paired(const ParallelCorpus& c, const std::string& lang, std::uint64_t seed) {
  PairedSentences s;
  s.language = lang;
  for (std::size_t k = 0; k < c.size(); ++k) {
    const int idx = c.pairs[k].pair_index;
    s.en.push_back({"en-" + std::to_string(idx), "en", c.sentence(k, "en")});
    s.l2.push_back({lang + "-" + std::to_string(idx), lang, c.sentence(k, lang)});
    s.pair_indices.push_back(idx);
  }
  s.nonparallel = seeded_derangement(c.size(), seed);
  return s;
}

const PlantedFixture& fixture() {
  static const PlantedFixture fx = build_planted_fixture(FixtureOptions{});
  return fx;
}

}  // namespace

// ---------------------------------------------------------------------------
// Baseline masks

TEST(Baseline, MatchesHistogramAndAvoidsReference) {
  const DeactivationMask ref({{1, 0}, {1, 4}, {1, 9}, {5, 2}, {5, 3}}, MaskProvenance::detected_type1);
  const auto b = baseline_mask(ref, 16, 7);
  EXPECT_EQ(b.histogram(), (std::map<int, int>{{1, 3}, {5, 2}}));
  for (const auto& e : b.entries()) EXPECT_FALSE(ref.entries().count(e));
  EXPECT_EQ(b.provenance(), MaskProvenance::baseline_random);
  EXPECT_EQ(b.seed(), std::optional<std::uint64_t>(7));
}

TEST(Baseline, SeededDeterminism) {
  const DeactivationMask ref({{2, 1}, {2, 2}, {3, 0}}, MaskProvenance::detected_type1);
  EXPECT_EQ(baseline_mask(ref, 64, 3).entries(), baseline_mask(ref, 64, 3).entries());
  EXPECT_NE(baseline_mask(ref, 64, 3).entries(), baseline_mask(ref, 64, 4).entries());
}

TEST(Baseline, Errors) {
  EXPECT_THROW(baseline_mask(DeactivationMask{}, 8, 0), ConfigError);
  // Three taken in a layer of four leaves one to draw from.
  const DeactivationMask full({{1, 0}, {1, 1}, {1, 2}}, MaskProvenance::detected_type1);
  EXPECT_THROW(baseline_mask(full, 4, 0), ConfigError);
  EXPECT_NO_THROW(baseline_mask(full, 6, 0));
}

TEST(Baseline, HistogramEqualityOnRandomReferences) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int dm = 4 + static_cast<int>(rng.uniform_index(60));
    std::set<NeuronId> entries;
    const int layers = 1 + static_cast<int>(rng.uniform_index(6));
    for (int l = 1; l <= layers; ++l) {
      const int count = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(dm / 2 + 1)));
      while (static_cast<int>(std::count_if(entries.begin(), entries.end(), [&](const NeuronId& e) { return e.layer == l; })) < count)
        entries.insert({l, static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(dm)))});
    }
    if (entries.empty()) continue;
    const DeactivationMask ref(entries, MaskProvenance::detected_type1);
    const auto b = baseline_mask(ref, dm, rng.next());
    ASSERT_EQ(b.histogram(), ref.histogram());
    for (const auto& e : b.entries()) {
      ASSERT_FALSE(ref.entries().count(e));
      ASSERT_GE(e.index, 0);
      ASSERT_LT(e.index, dm);
    }
  }
}

// ---------------------------------------------------------------------------
// Re-measurement

TEST(Remeasure, EmptyMaskReproducesCurves) {
  const auto model = xfrn::testing::random_decoder(3, 3, 16, 24);
  ParallelCorpus c;
  c.languages = {"en", "xx"};
  for (int i = 0; i < 12; ++i)
    c.pairs.push_back({i, {{"en", "w" + std::to_string(i % 7) + " w" + std::to_string((i * 3) % 11)},
                           {"xx", "w" + std::to_string(10 + i % 9) + " w" + std::to_string(i % 5)}}});
  RemeasureOptions opt;
  opt.metrics = {CurveMetric::hs_parallel, CurveMetric::hs_nonparallel, CurveMetric::act_parallel,
                 CurveMetric::act_nonparallel, CurveMetric::centroid_cos, CurveMetric::mutual_knn,
                 CurveMetric::cevr_dim};
  opt.knn_k = 3;
  const auto r = remeasure_under_mask(*model, paired(c, "xx", 1), DeactivationMask{}, "none", opt);
  ASSERT_EQ(r.before.size(), 7u);
  ASSERT_EQ(r.after.size(), 7u);
  for (std::size_t i = 0; i < r.before.size(); ++i) {
    EXPECT_EQ(r.before[i].metric, r.after[i].metric);
    ASSERT_EQ(r.before[i].values.size(), r.after[i].values.size());
    for (std::size_t l = 0; l < r.before[i].values.size(); ++l)
      EXPECT_NEAR(r.before[i].values[l], r.after[i].values[l], 1e-5) << to_string(r.before[i].metric);
    // Metadata agree except for the condition tag.
    auto mb = r.before[i].metadata, ma = r.after[i].metadata;
    EXPECT_EQ(mb.at("condition"), "none");
    mb.erase("condition");
    ma.erase("condition");
    EXPECT_EQ(mb, ma);
  }
  EXPECT_NEAR(r.gap_before(), r.gap_after(), 1e-5);
}

TEST(Remeasure, InvalidMaskFailsFast) {
  const auto model = xfrn::testing::random_decoder(4, 2, 8, 8);
  PairedSentences s;
  s.language = "xx";
  s.en = {{"a", "en", "w1"}, {"b", "en", "w2"}};
  s.l2 = {{"c", "xx", "w3"}, {"d", "xx", "w4"}};
  s.nonparallel = {1, 0};
  EXPECT_THROW(remeasure_under_mask(*model, s, DeactivationMask({{3, 0}}, MaskProvenance::custom), "type1", {}),
               ModelError);
  EXPECT_THROW(remeasure_under_mask(*model, s, DeactivationMask({{1, 8}}, MaskProvenance::custom), "type1", {}),
               ModelError);
  s.nonparallel = {0};
  EXPECT_THROW(remeasure_under_mask(*model, s, DeactivationMask{}, "none", {}), DataError);
}

TEST(Remeasure, PlantedTypeOneMaskClosesTheGap) {
  const auto& fx = fixture();
  const auto corpus = fx.make_corpus(120, 21);
  for (const std::string lang : {"ja", "ko"}) {
    const auto s = paired(corpus, lang, 5);
    const DeactivationMask type1(fx.ground_truth(TransferType::type1, lang), MaskProvenance::detected_type1);
    const auto treated = remeasure_under_mask(*fx.model, s, type1, "type1", {});
    const auto control = remeasure_under_mask(*fx.model, s, baseline_mask(type1, fx.options.mlp_dim, 9), "baseline", {});
    ASSERT_GT(treated.gap_before(), 0.0);
    const double shrink = 1.0 - treated.gap_after() / treated.gap_before();
    const double drift = std::abs(control.gap_after() - control.gap_before()) / control.gap_before();
    EXPECT_GE(shrink, 0.5) << lang;
    EXPECT_LT(drift, 0.1) << lang;
  }
}

TEST(Remeasure, ReportSerialization) {
  TempDir dir("intervention");
  const auto model = xfrn::testing::random_decoder(5, 2, 8, 8);
  PairedSentences s;
  s.language = "xx";
  s.en = {{"a", "en", "w1 w2"}, {"b", "en", "w2"}, {"e", "en", "w5"}};
  s.l2 = {{"c", "xx", "w3"}, {"d", "xx", "w4 w0"}, {"f", "xx", "w6"}};
  s.pair_indices = {4, 8, 9};
  s.nonparallel = {1, 2, 0};
  const DeactivationMask m({{1, 2}, {2, 5}}, MaskProvenance::baseline_random, 12);
  const auto r = remeasure_under_mask(*model, s, m, "baseline", {});
  r.write_csv(dir / "r.csv");
  const std::string csv = xfrn::testing::slurp(dir / "r.csv");
  EXPECT_EQ(csv.rfind("# condition=baseline\n# language=xx\n# mask_provenance=baseline_random\n# mask_size=2\n"
                      "# mask_seed=12\n# split=test\n",
                      0),
            0u);
  EXPECT_NE(csv.find("layer,metric,before,after,delta\n1,hs_parallel,"), std::string::npos);
  r.write_json(dir / "r.json");
  const std::string js = xfrn::testing::slurp(dir / "r.json");
  EXPECT_NE(js.find("\"test_pair_indices\""), std::string::npos);
  EXPECT_NE(js.find("\"baseline_random\""), std::string::npos);
}

// ---------------------------------------------------------------------------
// Cross-lingual deactivation

TEST(CrossLingual, SameMaskAndEmptyMasks) {
  const auto model = xfrn::testing::random_decoder(6, 3, 16, 16);
  const std::vector<CaptureInput> xs = {{"a", "xx", "w1 w2"}, {"b", "xx", "w3"}, {"c", "xx", "w4 w4 w9"}};
  const DeactivationMask m({{1, 1}, {2, 3}, {3, 0}}, MaskProvenance::detected_type1);
  const auto same = cross_lingual_effect(*model, xs, m, m);
  EXPECT_EQ(same.cross.values, same.own.values);
  const auto none = cross_lingual_effect(*model, xs, DeactivationMask{}, DeactivationMask{});
  for (double v : none.cross.values) EXPECT_NEAR(v, 1.0, 1e-12);
  for (double v : none.own.values) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_EQ(none.cross.metadata.at("condition"), "cross");
  EXPECT_EQ(none.own.metadata.at("condition"), "own");
}

TEST(CrossLingual, PlantedTypeTwoMasksAreLanguageSpecific) {
  const auto& fx = fixture();
  const auto corpus = fx.make_corpus(40, 22);
  std::vector<CaptureInput> ko;
  for (std::size_t k = 0; k < corpus.size(); ++k) ko.push_back({"ko-" + std::to_string(k), "ko", corpus.sentence(k, "ko")});
  const DeactivationMask ja_mask(fx.ground_truth(TransferType::type2, "ja"), MaskProvenance::detected_type2);
  const DeactivationMask ko_mask(fx.ground_truth(TransferType::type2, "ko"), MaskProvenance::detected_type2);
  const auto e = cross_lingual_effect(*fx.model, ko, ja_mask, ko_mask);
  const int L = fx.options.num_layers;
  // Beyond the boundary the foreign mask leaves ko in place; its own mask
  // moves the centroid at every Type-2 layer.
  for (int l = 1; l <= L; ++l) EXPECT_GE(e.cross.at_layer(l), 0.99) << l;
  for (int l = type_boundary(L) + 1; l <= L; ++l) EXPECT_LE(e.own.at_layer(l), 0.9) << l;
}
