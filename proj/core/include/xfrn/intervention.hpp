#pragma once

#include "xfrn/geometry.hpp"
#include "xfrn/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace xfrn {

// Per layer, draws (seeded, without replacement) as many indices as the
// reference has in that layer, never reusing a reference index. Throws
// ConfigError when a layer cannot be matched.
DeactivationMask baseline_mask(const DeactivationMask& reference, int mlp_dim, std::uint64_t seed);

// Captures `kind` for every input and returns one n x dim matrix per layer
// (rows in input order).
std::vector<Matrix> capture_layers(const ModelAdapter& model, const std::vector<CaptureInput>& inputs,
                                   CaptureKind kind, const DeactivationMask* mask);

// Test-split material for one English/L2 language pair. en[k] and l2[k] are
// translations; nonparallel[k] is the l2 row paired with en[k] in the
// non-parallel condition.
struct PairedSentences {
  std::string language;
  std::vector<CaptureInput> en;
  std::vector<CaptureInput> l2;
  std::vector<int> pair_indices;
  std::vector<std::size_t> nonparallel;
};

struct RemeasureOptions {
  std::set<CurveMetric> metrics = {CurveMetric::hs_parallel, CurveMetric::hs_nonparallel};
  int knn_k = 5;
  double cevr_threshold = 0.9;
};

struct InterventionReport {
  std::string condition;  // none, type1, type2, baseline
  std::string language;
  std::vector<SimilarityCurve> before;
  std::vector<SimilarityCurve> after;
  DeactivationMask mask;
  std::vector<int> test_pair_indices;
  std::map<std::string, std::string> provenance;

  const SimilarityCurve* find(const std::vector<SimilarityCurve>& curves, CurveMetric metric) const;
  // Layer-averaged hidden-state gap (parallel minus non-parallel); NaN if the
  // curves were not requested.
  double gap_before() const;
  double gap_after() const;

  // Long CSV: layer,metric,before,after,delta.
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

// Captures the sentences with and without the mask and recomputes the
// requested curves for both. The mask is validated before any forward pass.
InterventionReport remeasure_under_mask(const ModelAdapter& model, const PairedSentences& sentences,
                                        const DeactivationMask& mask, const std::string& condition,
                                        const RemeasureOptions& options);

struct CrossLingualEffect {
  SimilarityCurve cross;  // cos(C_l2, C_l2 under l1's mask)
  SimilarityCurve own;    // cos(C_l2, C_l2 under l2's own mask)
};

CrossLingualEffect cross_lingual_effect(const ModelAdapter& model, const std::vector<CaptureInput>& l2_sentences,
                                        const DeactivationMask& l1_mask, const DeactivationMask& l2_mask);

}  // namespace xfrn
