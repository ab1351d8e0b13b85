#pragma once

// Latent-space diagnostics over captured hidden states and activations.
// Inputs are row-per-sample matrices in double precision; layers are 1-based.

#include "xfrn/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xfrn {

enum class CurveMetric {
  hs_parallel,
  hs_nonparallel,
  act_parallel,
  act_nonparallel,
  centroid_cos,
  mutual_knn,
  cevr_dim,
  trajectory_cos,
  separability_acc,
  neuron_overlap,  // per-layer Jaccard of two neuron selections
};

std::string_view to_string(CurveMetric m);
CurveMetric parse_curve_metric(std::string_view name);

enum class Distance { cosine, euclidean };

std::string_view to_string(Distance d);
Distance parse_distance(std::string_view name);

// One scalar per layer, starting at first_layer. NaN marks an undefined
// entry.
struct SimilarityCurve {
  CurveMetric metric = CurveMetric::hs_parallel;
  int first_layer = 1;
  std::vector<double> values;
  std::map<std::string, std::string> metadata;

  int last_layer() const { return first_layer + static_cast<int>(values.size()) - 1; }
  double at_layer(int layer) const;
  // Mean over defined entries; NaN if none.
  double mean() const;

  // CSV columns: layer,value,metric,metadata ("k=v;k=v"; undefined values are empty).
  void write_csv(const std::filesystem::path& path) const;
  std::string to_json() const;
  static SimilarityCurve from_json(std::string_view text);
};

// Provenance entries become leading "# key=value" lines.
void write_curves_csv(const std::vector<SimilarityCurve>& curves, const std::filesystem::path& path,
                      const std::map<std::string, std::string>& provenance = {});

Matrix to_matrix(const RowMatrixF& m);

// Row mean. Throws DataError on an empty matrix.
Vector centroid(const Matrix& hidden);
// Mean over aligned rows k of (en_k + l2_k) / 2.
Vector centroid_shared(const Matrix& en, const Matrix& l2);

// Smallest k whose leading k squared singular values reach `threshold` of the
// total. Throws DataError for an all-zero matrix.
int cevr_dimensionality(const Matrix& hidden, double threshold);
std::vector<double> singular_values(const Matrix& m);

struct PairCosine {
  double mean = kUndefined;
  int used = 0;
  int skipped = 0;  // pairs with a zero vector
};

// Mean cosine between row k of a and row k of b.
PairCosine mean_pair_cosine(const Matrix& a, const Matrix& b);

// Per-layer matrices: first[l-1] row k pairs with second[l-1] row k.
struct PairedLayers {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

enum class GapKind { hidden_state, mlp_activation };

// Returns {parallel, nonparallel} curves of mean pair cosine per layer.
std::pair<SimilarityCurve, SimilarityCurve> similarity_gap_curve(const PairedLayers& parallel,
                                                                 const PairedLayers& nonparallel, GapKind kind);

// k nearest neighbours of row i among the other rows, nearest first; ties go
// to the lower index.
std::vector<int> knn_indices(const Matrix& points, int i, int k, Distance dist = Distance::cosine);

double mutual_knn_alignment(const Matrix& phi, const Matrix& psi, int k, Distance dist = Distance::cosine);

// cos(C_a^l, C_b^l) per layer. Throws DataError on a zero centroid.
SimilarityCurve centroid_distance_curve(const std::vector<Vector>& centroids_a, const std::vector<Vector>& centroids_b);

// P = C^m - C^1; entry for layer l in 2..m is cos(C^l - C^{l-1}, P).
SimilarityCurve trajectory_linearity(const std::vector<Vector>& centroids, int m = 10);

// Rows [a_k, b_k].
Matrix concat_pairs(const Matrix& a, const Matrix& b);

struct ProbeOptions {
  int folds = 10;
  std::uint64_t seed = 0;
  double l2 = 1e-2;  // ridge penalty on the mean log-loss
  int max_newton_iters = 50;
  int newton_max_features = 512;  // above this, accelerated gradient descent
  int gd_iters = 400;
};

// Mean held-out accuracy of an L2-regularized logistic regression (features
// standardized on each training fold), stratified k-fold.
double separability_accuracy(const Matrix& positive, const Matrix& negative, const ProbeOptions& options);
SimilarityCurve separability_probe(const std::vector<Matrix>& positive_by_layer,
                                   const std::vector<Matrix>& negative_by_layer, const ProbeOptions& options);

struct PcaProjection {
  int layer = 0;
  Matrix components;  // 2 x d, orthonormal rows
  Matrix coords;      // n x 2
  std::vector<std::string> labels;
  Vector explained_variance;  // variance along each component
  double total_variance = 0;
  bool degenerate = false;  // rank < 2: second component is arbitrary

  void write_csv(const std::filesystem::path& path) const;
};

// Pools all languages' rows, mean-centres them and projects onto the top two
// right singular vectors (sign fixed so each component's largest-magnitude
// entry is positive).
PcaProjection pca_project(const std::vector<std::pair<std::string, Matrix>>& by_language, int layer);

}  // namespace xfrn
