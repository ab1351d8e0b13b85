#pragma once

#include "xfrn/corpus.hpp"
#include "xfrn/model.hpp"
#include "xfrn/store.hpp"
#include "xfrn/rng.hpp"
#include "xfrn/tokenizer.hpp"
#include "xfrn/types.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <memory>
#include <string>
#include <vector>

namespace xfrn::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("xfrn-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Matrix random_matrix(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

inline Vector random_vector(Rng& rng, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline RowMatrixF random_matrix_f(Rng& rng, int rows, int cols, double scale) {
  RowMatrixF m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<float>(scale * rng.normal());
  return m;
}

inline VectorF ones_f(int n) { return VectorF::Ones(n); }

// Small random decoder on the llama path: RMSNorm, causal self-attention with
// RoPE and grouped KV heads, SiLU-gated MLP. Vocabulary is w0..w{V-3} plus
// "\n" and "</s>".
inline std::shared_ptr<GatedDecoder> random_decoder(std::uint64_t seed, int layers, int d, int dm, int vocab = 24,
                                                    int heads = 2, int kv_heads = 1) {
  Rng rng(seed);
  std::vector<std::string> words;
  for (int i = 0; i < vocab - 2; ++i) words.push_back("w" + std::to_string(i));
  words.push_back("\n");
  words.push_back("</s>");
  Tokenizer::Options opt;
  opt.eos_token = "</s>";
  opt.unk_token = std::nullopt;
  Tokenizer tok(words, opt);

  DecoderConfig cfg;
  cfg.model_id = "random-llama";
  cfg.num_layers = layers;
  cfg.hidden_dim = d;
  cfg.mlp_dim = dm;
  cfg.vocab_size = vocab;
  cfg.num_heads = heads;
  cfg.num_kv_heads = kv_heads;
  cfg.max_context = 64;
  const int hd = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<LayerWeights> ws;
  for (int l = 0; l < layers; ++l) {
    LayerWeights w;
    w.attention = AttentionKind::causal_self;
    w.attn_norm = ones_f(d);
    w.wq = random_matrix_f(rng, d, d, s);
    w.wk = random_matrix_f(rng, d, hd * kv_heads, s);
    w.wv = random_matrix_f(rng, d, hd * kv_heads, s);
    w.wo = random_matrix_f(rng, d, d, s);
    w.mlp_norm = ones_f(d);
    w.gate = random_matrix_f(rng, d, dm, s);
    w.up = random_matrix_f(rng, d, dm, s);
    w.down = random_matrix_f(rng, dm, d, 1.0 / std::sqrt(static_cast<double>(dm)));
    ws.push_back(std::move(w));
  }
  return std::make_shared<GatedDecoder>(cfg, tok, random_matrix_f(rng, vocab, d, 1.0), std::move(ws), ones_f(d),
                                        random_matrix_f(rng, vocab, d, s));
}

// Captures every pair of `corpus` in every listed language into a run file.
// Pairs whose index is in `test_ids` go to split "test", the rest to "train".
inline CaptureRun capture_corpus(const ModelAdapter& model, const ParallelCorpus& corpus,
                                 const std::vector<std::string>& languages, const std::filesystem::path& path,
                                 const std::set<int>& test_ids = {},
                                 std::set<CaptureKind> kinds = {CaptureKind::hidden_state, CaptureKind::pre_mlp,
                                                                CaptureKind::mlp_activation}) {
  CaptureWriter w(model.manifest(kinds), path);
  w.set_created("fixed");
  std::vector<CaptureInput> inputs;
  for (const auto& pair : corpus.pairs) {
    const std::string split = test_ids.count(pair.pair_index) ? "test" : "train";
    for (const auto& lang : languages) {
      const std::string id = lang + "-" + std::to_string(100000 + pair.pair_index);
      w.add_sample(SampleInfo{id, lang, pair.pair_index, split});
      inputs.push_back(CaptureInput{id, lang, pair.sentences.at(lang)});
    }
  }
  forward_capture(model, inputs, kinds, nullptr, [&](ActivationRecord&& r) { w.write(r); });
  return w.finish();
}

}  // namespace xfrn::testing
