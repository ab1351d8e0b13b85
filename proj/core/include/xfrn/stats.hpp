#pragma once

#include "xfrn/geometry.hpp"
#include "xfrn/types.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace xfrn {

struct LabeledActivations {
  std::vector<double> values;
  std::vector<int> labels;
};

// eta^2 = S_B / (S_W + S_B); 0 when all values are identical. Throws
// DataError with fewer than two distinct labels.
double correlation_ratio(const LabeledActivations& data);

// |A n B| / |A u B|. Throws DataError when both sets are empty.
double jaccard(const std::set<NeuronId>& a, const std::set<NeuronId>& b);

// Per-layer Jaccard of the two selections restricted to each layer in
// [1, num_layers]; NaN where both restrictions are empty.
SimilarityCurve overlap_by_layer(const std::set<NeuronId>& a, const std::set<NeuronId>& b, int num_layers);

struct HypothesisResult {
  double statistic = 0;  // F or U
  double p_value = 1;
  std::vector<int> n_per_group;
  // Zero within-group variance with nonzero between-group variance: F is
  // +inf and p is its limit 0.
  bool degenerate = false;
  bool exact = false;  // p from the exact null distribution
};

HypothesisResult anova_oneway(const std::vector<std::vector<double>>& groups);

// U for `a` (count of pairs with a_i > b_j, ties counting 1/2) and a
// two-sided p-value: exact when |a| * |b| <= 400, otherwise the normal
// approximation with tie correction and continuity correction.
HypothesisResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);

struct EtaP {
  double eta2 = 0;
  double p = 1;
};

// Fraction of entries with eta2 > threshold and p < alpha, per threshold.
std::map<double, double> significant_fraction(const std::vector<EtaP>& scores,
                                              const std::vector<double>& thresholds = {0.1, 0.25},
                                              double alpha = 0.05);

}  // namespace xfrn
