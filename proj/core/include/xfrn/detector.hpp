#pragma once

// Transfer-neuron scoring.
//
// For a sample k at layer l with pre-MLP residual p_k = h^{l-1}_k + A^l_k and
// a target centroid C^l:
//   layer score   L_k   = cos(p_k, C^l)
//   neuron score  N_ik  = cos(p_k + alpha_ik v_i, C^l)
//   transfer score  s_i = mean_k (N_ik - L_k)
// Type-1 targets the shared centroid over layers 1..B, Type-2 the language
// centroid over B+1..L, with B = type_boundary(L). Ranking is global across
// the candidate layers.

#include "xfrn/store.hpp"
#include "xfrn/types.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace xfrn {

// Throws DataError if either vector is zero.
double layer_score(const Vector& pre_mlp, const Vector& centroid);
// Throws DataError if pre_mlp + alpha * v or the centroid is zero.
double neuron_score(const Vector& pre_mlp, double alpha, const Vector& value, const Vector& centroid);

struct TransferScore {
  double score = kUndefined;  // NaN when no sample is usable
  int used = 0;
  int excluded = 0;  // samples with a zero pre-MLP or zero shifted vector
};

// One neuron over n samples: pre is n x d, alpha has n entries.
TransferScore transfer_score(const Matrix& pre_mlp, const Vector& alpha, const Vector& value, const Vector& centroid);

// All neurons of one layer: alpha is n x d_m, values is d_m x d. Uses
// |p + a v|^2 = |p|^2 + 2a p.v + a^2 |v|^2 so the cost is one n x d x d_m
// product.
std::vector<TransferScore> score_layer(const Matrix& pre_mlp, const Matrix& alpha, const Matrix& values,
                                       const Vector& centroid);

struct ScoredNeuron {
  NeuronId id;
  double score = kUndefined;
};

// Descending score; ties by (layer, index) ascending; undefined scores last.
void rank_in_place(std::vector<ScoredNeuron>& scored);

// Top k per layer from a ranking.
std::set<NeuronId> top_per_layer(const std::vector<ScoredNeuron>& ranked, int k);

std::pair<int, int> candidate_layers(TransferType type, int num_layers);

struct DetectionResult {
  std::string model_id;
  std::string language;
  TransferType type = TransferType::type1;
  std::string target;  // "to_shared" or "to_language:<code>"
  std::string split = "train";
  int top_n = 0;
  long long population = 0;  // L * d_m
  long long candidates = 0;  // neurons in the candidate layers
  bool top_n_exceeds_candidates = false;
  int excluded_samples = 0;
  std::vector<int> pair_indices;  // the samples the scores came from
  std::vector<NeuronScoreRow> rows;  // ranked, at most top_n
  std::map<std::string, std::string> provenance;

  std::set<NeuronId> neurons() const;
  std::map<int, int> layer_histogram() const;

  // CSV: '#'-prefixed provenance lines, then layer,index,score,rank.
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
  static DetectionResult read_json(const std::filesystem::path& path);
};

struct DetectionInputs {
  std::vector<ScoredNeuron> ranked;  // every candidate
  int excluded_samples = 0;
  std::vector<int> pair_indices;
};

// Scores every candidate neuron of `type` for `language` using the given
// split of the run.
DetectionInputs score_candidates(const CaptureRun& run, const ValueVectorTable& values, const std::string& language,
                                 TransferType type, const std::string& split = "train");

DetectionResult detect_transfer_neurons(const CaptureRun& run, const ValueVectorTable& values,
                                        const std::string& language, TransferType type, int top_n,
                                        const std::string& split = "train");

// eta^2 of each column of alpha against binary labels (1 = target).
std::vector<double> eta_squared_columns(const Matrix& alpha, const std::vector<int>& labels);

struct LanguageSpecificResult {
  std::string target;
  double threshold = 0;
  std::vector<std::pair<NeuronId, double>> neurons;  // eta^2 >= threshold, by (layer, index)
  std::map<int, int> histogram;                      // layer -> count
  int samples = 0;

  void write_csv(const std::filesystem::path& path) const;
};

// Label 1 for `target` (or, with a label map, for every language mapped to
// the target's group), 0 otherwise; all captured languages take part.
LanguageSpecificResult detect_language_specific_neurons(const CaptureRun& run, const std::string& target,
                                                        double threshold,
                                                        const std::optional<std::string>& split = {},
                                                        const std::map<std::string, std::string>* label_map = nullptr);

}  // namespace xfrn
