#pragma once

// Synthetic gated-MLP decoder with known transfer neurons.
//
// Hidden-state coordinates (all standard-basis directions):
//   0                bias (every token carries `bias`)
//   1 .. n           language offsets, a centred simplex (they sum to zero)
//   n+1 .. 2n        language tags
//   2n+1             word channel (1 on content words)
//   2n+2             suppression channel (written by the QA detector neurons)
//   then 2*q         question/answer concept directions for the QA circuit
//   rest             corpus concept semantics
//
// Layer 1 mixes tokens with a prefix mean; later layers do not mix. Type-1
// neurons of language j fire only on j (gate reads tag j) and write -offset_j,
// removing the offset over layers 1..B. Type-2 neurons write it back over
// layers B+1..L. The QA circuit answers a question only when the Type-1
// neurons have removed the offset by layer B+1.

#include "xfrn/corpus.hpp"
#include "xfrn/model.hpp"

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace xfrn {

struct FixtureOptions {
  std::uint64_t seed = 0;
  int num_layers = 8;
  int hidden_dim = 64;
  int mlp_dim = 256;
  std::vector<std::string> languages = {"en", "ja", "nl", "it", "ko"};
  int planted_per_layer = 4;

  double bias = 1.0;
  double offset_norm = 6.0;    // |offset_j| in the embedding
  double tag_norm = 0.5;       // tag magnitude in the embedding
  double semantic_norm = 3.0;  // |semantics| of a concept word
  double gate_std = 0.03;      // unplanted neurons
  double down_std = 0.015;
  int corpus_concepts = 48;
  int qa_concepts = 6;
  int max_context = 256;
  std::string model_id = "planted-fixture";
};

struct PlantedNeuron {
  NeuronId id;
  TransferType type = TransferType::type1;
  std::string language;
  Vector direction;  // unit norm
  double gain = 0;   // norm of the down-projection row
};

struct ClusterSpec {
  std::string language;
  Vector mean;        // layer-1 pre-MLP residual
  Matrix covariance;  // same space
};

struct PlantedFixture {
  FixtureOptions options;
  std::shared_ptr<GatedDecoder> model;
  std::vector<PlantedNeuron> planted;
  std::vector<ClusterSpec> clusters;
  int qa_concepts = 0;  // QA pairs actually wired (0 when they do not fit)

  std::set<NeuronId> ground_truth(TransferType type, const std::string& language) const;
  std::set<NeuronId> ground_truth(TransferType type) const;

  const std::string& word(int concept_id, const std::string& language) const;

  // Parallel sentences of 3 to 6 corpus concept words, same order in every
  // language; pair indices 0..n-1.
  ParallelCorpus make_corpus(int n_pairs, std::uint64_t seed) const;
  // One single-word question per (QA concept, language); the gold answer is
  // the paired concept's word in the same language.
  QaDataset make_qa() const;

  // word_[concept][language index]
  std::vector<std::vector<std::string>> words;
};

PlantedFixture build_planted_fixture(const FixtureOptions& options);
PlantedFixture build_planted_fixture(std::uint64_t seed, int num_layers, int hidden_dim, int mlp_dim,
                                     const std::vector<std::string>& languages, int planted_per_layer);

// Reads the "fixture" block of an adapter config. Unknown keys are rejected.
FixtureOptions parse_fixture_options(std::string_view json_text);
std::string fixture_options_json(const FixtureOptions& options);

}  // namespace xfrn
