#pragma once

// Capture-and-intervene interface over gated-MLP decoders.
//
// Per layer l the block computes
//   pre   = h^{l-1} + A^l                         (attention residual)
//   alpha = a(norm(pre) M_gate) * (norm(pre) M_up) (elementwise; the neurons)
//   h^l   = pre + alpha M_down = pre + sum_i alpha_i v_i
// where v_i is row i of M_down. Deactivation zeroes selected alpha entries
// right before the down projection.

#include "xfrn/store.hpp"
#include "xfrn/tokenizer.hpp"
#include "xfrn/types.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace xfrn {

enum class HookPoint { attention_out, pre_mlp, mlp_activation, mlp_output, hidden_state };

struct ForwardHooks {
  // Final-token reads, called once per (layer, point) in layer order.
  std::function<void(int layer, HookPoint point, const VectorF& value)> read;
  // Activations of every live position (rows), before the down projection.
  // Writes are honoured.
  std::function<void(int layer, Eigen::Ref<RowMatrixF> alpha)> write_alpha;
};

class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual const std::string& model_id() const = 0;
  virtual int num_layers() const = 0;
  virtual int hidden_dim() const = 0;
  virtual int mlp_dim() const = 0;
  virtual int max_context() const = 0;

  virtual std::vector<int> tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const int> tokens) const = 0;
  virtual std::optional<int> eos_id() const = 0;
  virtual std::optional<int> newline_id() const = 0;

  // Runs the whole sequence and returns the final-token logits.
  virtual VectorF forward(std::span<const int> tokens, const ForwardHooks& hooks) const = 0;

  virtual ValueVectorTable value_vectors() const = 0;

  ModelManifest manifest(std::set<CaptureKind> kinds) const;
};

enum class MaskProvenance { detected_type1, detected_type2, baseline_random, custom };

std::string_view to_string(MaskProvenance p);
MaskProvenance parse_mask_provenance(std::string_view name);

class DeactivationMask {
 public:
  DeactivationMask() = default;
  DeactivationMask(std::set<NeuronId> entries, MaskProvenance provenance,
                   std::optional<std::uint64_t> seed = std::nullopt)
      : entries_(std::move(entries)), provenance_(provenance), seed_(seed) {}

  const std::set<NeuronId>& entries() const { return entries_; }
  MaskProvenance provenance() const { return provenance_; }
  std::optional<std::uint64_t> seed() const { return seed_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  // Throws ModelError naming the first entry outside [1, L] x [0, d_m).
  void validate(int num_layers, int mlp_dim) const;

  std::map<int, std::vector<int>> by_layer() const;
  std::map<int, int> histogram() const;

  // CSV "layer,index" with a header row; '#' lines are comments.
  static DeactivationMask read_csv(const std::filesystem::path& path,
                                   MaskProvenance provenance = MaskProvenance::custom);
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::set<NeuronId> entries_;
  MaskProvenance provenance_ = MaskProvenance::custom;
  std::optional<std::uint64_t> seed_;
};

struct CaptureInput {
  std::string sample_id;
  std::string language;
  std::string text;
};

using RecordSink = std::function<void(ActivationRecord&&)>;

// One record per (input, layer), final token only. The mask is validated
// before any forward pass runs.
void forward_capture(const ModelAdapter& model, std::span<const CaptureInput> batch,
                     const std::set<CaptureKind>& kinds, const DeactivationMask* mask,
                     const RecordSink& sink);
std::vector<ActivationRecord> forward_capture(const ModelAdapter& model, std::span<const CaptureInput> batch,
                                              const std::set<CaptureKind>& kinds,
                                              const DeactivationMask* mask = nullptr);

struct GenerateOptions {
  int max_new_tokens = 32;
  bool stop_at_newline = false;
};

// Greedy decoding (ties go to the lowest token id) with the mask applied at
// every step. Throws ModelError when prompt plus budget exceeds the context.
std::string generate(const ModelAdapter& model, std::string_view prompt, const DeactivationMask* mask,
                     const GenerateOptions& options);
std::string generate(const ModelAdapter& model, std::string_view prompt, const DeactivationMask* mask,
                     int max_new_tokens);

// ---------------------------------------------------------------------------
// Reference decoder

enum class AttentionKind {
  none,         // A = 0
  prefix_mean,  // A_t = mean of h_s for s <= t (parameter-free mixing stub)
  causal_self,  // multi-head causal self-attention with RoPE and GQA
};

enum class Activation { silu, gelu_tanh };

struct DecoderConfig {
  std::string model_id;
  std::string family = "llama";
  int num_layers = 0;
  int hidden_dim = 0;
  int mlp_dim = 0;
  int vocab_size = 0;
  int num_heads = 1;
  int num_kv_heads = 1;
  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;
  int max_context = 512;
  Activation activation = Activation::silu;
  // Whether the captured last-layer hidden state has the final norm applied.
  bool final_norm_in_hidden = false;
};

// All projections use the row-vector convention x * W.
struct LayerWeights {
  AttentionKind attention = AttentionKind::none;
  VectorF attn_norm;  // empty: no norm
  RowMatrixF wq, wk, wv, wo;
  VectorF mlp_norm;  // empty: no norm
  RowMatrixF gate;   // d x d_m
  RowMatrixF up;     // d x d_m
  RowMatrixF down;   // d_m x d, rows are value vectors
};

class GatedDecoder final : public ModelAdapter {
 public:
  GatedDecoder(DecoderConfig config, Tokenizer tokenizer, RowMatrixF embedding, std::vector<LayerWeights> layers,
               VectorF final_norm, RowMatrixF lm_head);

  const std::string& model_id() const override { return config_.model_id; }
  int num_layers() const override { return config_.num_layers; }
  int hidden_dim() const override { return config_.hidden_dim; }
  int mlp_dim() const override { return config_.mlp_dim; }
  int max_context() const override { return config_.max_context; }

  std::vector<int> tokenize(std::string_view text) const override { return tokenizer_.encode(text); }
  std::string detokenize(std::span<const int> tokens) const override { return tokenizer_.decode(tokens); }
  std::optional<int> eos_id() const override { return tokenizer_.eos_id(); }
  std::optional<int> newline_id() const override { return tokenizer_.newline_id(); }

  VectorF forward(std::span<const int> tokens, const ForwardHooks& hooks) const override;
  ValueVectorTable value_vectors() const override;

  const DecoderConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const RowMatrixF& embedding() const { return embedding_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const VectorF& final_norm() const { return final_norm_; }
  const RowMatrixF& lm_head() const { return lm_head_; }

 private:
  RowMatrixF attention(const LayerWeights& w, const RowMatrixF& h) const;
  RowMatrixF norm(const RowMatrixF& x, const VectorF& weight) const;

  DecoderConfig config_;
  Tokenizer tokenizer_;
  RowMatrixF embedding_;
  std::vector<LayerWeights> layers_;
  VectorF final_norm_;
  RowMatrixF lm_head_;
  int last_mixing_layer_ = 0;
};

// Weights file: XFRN1 framing with kind="weights". The header embeds the
// tokenizer; an explicit tokenizer passed to load_decoder takes precedence.
void save_decoder(const GatedDecoder& model, const std::filesystem::path& path);
std::shared_ptr<GatedDecoder> load_decoder(const std::filesystem::path& weights,
                                           std::optional<Tokenizer> tokenizer = std::nullopt);

// Adapter configuration (JSON): model_id, family, hook_points, dtype, device,
// max_context, plus either "weights" + "tokenizer" paths or a "fixture" block.
struct AdapterConfig {
  std::string model_id;
  std::string family;
  std::map<std::string, std::string> hook_points;
  std::string dtype = "f32";
  std::string device = "cpu";
  int max_context = 512;
  bool final_norm_in_hidden = false;
  std::filesystem::path weights;
  std::filesystem::path tokenizer;
  std::optional<std::string> fixture_json;  // raw "fixture" block
  std::filesystem::path source;             // file the config came from
};

AdapterConfig load_adapter_config(const std::filesystem::path& path);
// `source` anchors relative paths; it need not exist.
AdapterConfig parse_adapter_config(std::string_view json_text, const std::filesystem::path& source);
// Resolves relative paths against the config file, then against $XFRN_CACHE.
std::shared_ptr<ModelAdapter> load_adapter(const AdapterConfig& config);

}  // namespace xfrn
