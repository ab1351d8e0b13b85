#include "xfrn/model.hpp"

#include "xfrn/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace xfrn {

ModelManifest ModelAdapter::manifest(std::set<CaptureKind> kinds) const {
  ModelManifest m;
  m.model_id = model_id();
  m.num_layers = num_layers();
  m.hidden_dim = hidden_dim();
  m.mlp_dim = mlp_dim();
  m.capture_kinds = std::move(kinds);
  return m;
}

// ---------------------------------------------------------------------------
// DeactivationMask

std::string_view to_string(MaskProvenance p) {
  switch (p) {
    case MaskProvenance::detected_type1: return "detected_type1";
    case MaskProvenance::detected_type2: return "detected_type2";
    case MaskProvenance::baseline_random: return "baseline_random";
    case MaskProvenance::custom: return "custom";
  }
  return "custom";
}

MaskProvenance parse_mask_provenance(std::string_view name) {
  if (name == "detected_type1") return MaskProvenance::detected_type1;
  if (name == "detected_type2") return MaskProvenance::detected_type2;
  if (name == "baseline_random") return MaskProvenance::baseline_random;
  if (name == "custom") return MaskProvenance::custom;
  throw DataError("unknown mask provenance '" + std::string(name) + "'");
}

void DeactivationMask::validate(int num_layers, int mlp_dim) const {
  for (const auto& n : entries_) {
    if (n.layer < 1 || n.layer > num_layers || n.index < 0 || n.index >= mlp_dim) {
      throw ModelError("mask entry (layer " + std::to_string(n.layer) + ", neuron " + std::to_string(n.index) +
                       ") is outside the model (layers 1.." + std::to_string(num_layers) + ", neurons 0.." +
                       std::to_string(mlp_dim - 1) + ")");
    }
  }
}

std::map<int, std::vector<int>> DeactivationMask::by_layer() const {
  std::map<int, std::vector<int>> out;
  for (const auto& n : entries_) out[n.layer].push_back(n.index);
  return out;
}

std::map<int, int> DeactivationMask::histogram() const {
  std::map<int, int> out;
  for (const auto& n : entries_) ++out[n.layer];
  return out;
}

DeactivationMask DeactivationMask::read_csv(const std::filesystem::path& path, MaskProvenance provenance) {
  std::ifstream in(path);
  if (!in) throw ConfigError("mask file '" + path.string() + "' not found");
  std::set<NeuronId> entries;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      if (line.rfind("layer", 0) == 0) continue;
    }
    NeuronId id;
    char comma = 0;
    std::istringstream row(line);
    if (!(row >> id.layer >> comma >> id.index) || comma != ',') {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 'layer,index'");
    }
    if (!entries.insert(id).second) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": duplicate mask entry");
    }
  }
  return DeactivationMask(std::move(entries), provenance);
}

void DeactivationMask::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write mask to '" + path.string() + "'");
  out << "# provenance=" << to_string(provenance_);
  if (seed_) out << " seed=" << *seed_;
  out << "\nlayer,index\n";
  for (const auto& n : entries_) out << n.layer << ',' << n.index << '\n';
}

// ---------------------------------------------------------------------------
// Capture and generation

namespace {

ForwardHooks mask_hooks(const DeactivationMask* mask) {
  ForwardHooks hooks;
  if (mask && !mask->empty()) {
    auto layers = std::make_shared<std::map<int, std::vector<int>>>(mask->by_layer());
    hooks.write_alpha = [layers](int layer, Eigen::Ref<RowMatrixF> alpha) {
      auto it = layers->find(layer);
      if (it == layers->end()) return;
      for (int idx : it->second) alpha.col(idx).setZero();
    };
  }
  return hooks;
}

}  // namespace

void forward_capture(const ModelAdapter& model, std::span<const CaptureInput> batch,
                     const std::set<CaptureKind>& kinds, const DeactivationMask* mask, const RecordSink& sink) {
  if (mask) mask->validate(model.num_layers(), model.mlp_dim());
  if (batch.empty()) return;

  ForwardHooks hooks = mask_hooks(mask);
  for (const auto& input : batch) {
    const auto tokens = model.tokenize(input.text);
    if (tokens.empty()) throw DataError("sample '" + input.sample_id + "' tokenizes to an empty sequence");
    if (static_cast<int>(tokens.size()) > model.max_context()) {
      throw ModelError("sample '" + input.sample_id + "' has " + std::to_string(tokens.size()) +
                       " tokens, over the context limit of " + std::to_string(model.max_context()));
    }
    std::vector<ActivationRecord> records(static_cast<std::size_t>(model.num_layers()));
    for (int l = 0; l < model.num_layers(); ++l) {
      records[static_cast<std::size_t>(l)].sample_id = input.sample_id;
      records[static_cast<std::size_t>(l)].language = input.language;
      records[static_cast<std::size_t>(l)].layer = l + 1;
    }
    hooks.read = [&](int layer, HookPoint point, const VectorF& value) {
      auto& rec = records[static_cast<std::size_t>(layer - 1)];
      switch (point) {
        case HookPoint::attention_out:
          if (kinds.count(CaptureKind::attention_out)) rec.attention_out = value;
          break;
        case HookPoint::pre_mlp:
          if (kinds.count(CaptureKind::pre_mlp)) rec.pre_mlp = value;
          break;
        case HookPoint::mlp_activation:
          if (kinds.count(CaptureKind::mlp_activation)) rec.mlp_activation = value;
          break;
        case HookPoint::hidden_state:
          if (kinds.count(CaptureKind::hidden_state)) rec.hidden_state = value;
          break;
        case HookPoint::mlp_output: break;
      }
    };
    model.forward(tokens, hooks);
    for (auto& rec : records) sink(std::move(rec));
  }
}

std::vector<ActivationRecord> forward_capture(const ModelAdapter& model, std::span<const CaptureInput> batch,
                                              const std::set<CaptureKind>& kinds, const DeactivationMask* mask) {
  std::vector<ActivationRecord> out;
  forward_capture(model, batch, kinds, mask, [&](ActivationRecord&& r) { out.push_back(std::move(r)); });
  return out;
}

std::string generate(const ModelAdapter& model, std::string_view prompt, const DeactivationMask* mask,
                     const GenerateOptions& options) {
  if (options.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (mask) mask->validate(model.num_layers(), model.mlp_dim());
  auto tokens = model.tokenize(prompt);
  if (tokens.empty()) throw DataError("prompt tokenizes to an empty sequence");
  const int needed = static_cast<int>(tokens.size()) + options.max_new_tokens;
  if (needed > model.max_context()) {
    throw ModelError("prompt of " + std::to_string(tokens.size()) + " tokens plus " +
                     std::to_string(options.max_new_tokens) + " new tokens exceeds the context limit of " +
                     std::to_string(model.max_context()));
  }
  const ForwardHooks hooks = mask_hooks(mask);
  const std::size_t prompt_len = tokens.size();
  for (int step = 0; step < options.max_new_tokens; ++step) {
    const VectorF logits = model.forward(tokens, hooks);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    const int next = static_cast<int>(best);
    if (model.eos_id() && next == *model.eos_id()) break;
    tokens.push_back(next);
    if (options.stop_at_newline && model.newline_id() && next == *model.newline_id()) break;
  }
  return model.detokenize(std::span<const int>(tokens).subspan(prompt_len));
}

std::string generate(const ModelAdapter& model, std::string_view prompt, const DeactivationMask* mask,
                     int max_new_tokens) {
  return generate(model, prompt, mask, GenerateOptions{max_new_tokens, false});
}

// ---------------------------------------------------------------------------
// GatedDecoder

GatedDecoder::GatedDecoder(DecoderConfig config, Tokenizer tokenizer, RowMatrixF embedding,
                           std::vector<LayerWeights> layers, VectorF final_norm, RowMatrixF lm_head)
    : config_(std::move(config)),
      tokenizer_(std::move(tokenizer)),
      embedding_(std::move(embedding)),
      layers_(std::move(layers)),
      final_norm_(std::move(final_norm)),
      lm_head_(std::move(lm_head)) {
  const int d = config_.hidden_dim;
  const int dm = config_.mlp_dim;
  if (config_.num_layers < 2) throw ModelError("decoder needs at least 2 layers");
  if (static_cast<int>(layers_.size()) != config_.num_layers) throw ModelError("layer count does not match config");
  if (embedding_.cols() != d || embedding_.rows() != config_.vocab_size) throw ModelError("embedding shape mismatch");
  if (lm_head_.cols() != d || lm_head_.rows() != config_.vocab_size) throw ModelError("lm_head shape mismatch");
  if (tokenizer_.size() != config_.vocab_size) {
    throw ModelError("tokenizer has " + std::to_string(tokenizer_.size()) + " entries, model vocabulary is " +
                     std::to_string(config_.vocab_size));
  }
  if (final_norm_.size() != 0 && final_norm_.size() != d) throw ModelError("final_norm shape mismatch");
  for (int l = 0; l < config_.num_layers; ++l) {
    const auto& w = layers_[static_cast<std::size_t>(l)];
    const std::string where = "layer " + std::to_string(l + 1) + ": ";
    if (w.gate.rows() != d || w.gate.cols() != dm) throw ModelError(where + "gate must be d x d_m");
    if (w.up.rows() != d || w.up.cols() != dm) throw ModelError(where + "up must be d x d_m");
    if (w.down.rows() != dm || w.down.cols() != d) throw ModelError(where + "down must be d_m x d");
    if (w.mlp_norm.size() != 0 && w.mlp_norm.size() != d) throw ModelError(where + "mlp_norm shape mismatch");
    if (w.attention == AttentionKind::causal_self) {
      const int hd = d / config_.num_heads;
      if (config_.num_heads < 1 || config_.num_kv_heads < 1 || config_.num_heads % config_.num_kv_heads != 0 ||
          hd * config_.num_heads != d || hd % 2 != 0) {
        throw ModelError(where + "invalid head configuration");
      }
      if (w.wq.rows() != d || w.wq.cols() != d || w.wo.rows() != d || w.wo.cols() != d ||
          w.wk.rows() != d || w.wk.cols() != hd * config_.num_kv_heads || w.wv.rows() != d ||
          w.wv.cols() != hd * config_.num_kv_heads) {
        throw ModelError(where + "attention projection shape mismatch");
      }
      if (w.attn_norm.size() != 0 && w.attn_norm.size() != d) throw ModelError(where + "attn_norm shape mismatch");
    }
    if (w.attention != AttentionKind::none) last_mixing_layer_ = l + 1;
  }
}

RowMatrixF GatedDecoder::norm(const RowMatrixF& x, const VectorF& weight) const {
  if (weight.size() == 0) return x;
  RowMatrixF out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float ms = x.row(r).squaredNorm() / static_cast<float>(x.cols());
    const float inv = 1.0f / std::sqrt(ms + config_.norm_eps);
    out.row(r) = (x.row(r) * inv).cwiseProduct(weight.transpose());
  }
  return out;
}

RowMatrixF GatedDecoder::attention(const LayerWeights& w, const RowMatrixF& h) const {
  const Eigen::Index T = h.rows();
  const int d = config_.hidden_dim;
  switch (w.attention) {
    case AttentionKind::none:
      return RowMatrixF::Zero(T, d);
    case AttentionKind::prefix_mean: {
      RowMatrixF out(T, d);
      Eigen::RowVectorXf running = Eigen::RowVectorXf::Zero(d);
      for (Eigen::Index t = 0; t < T; ++t) {
        running += h.row(t);
        out.row(t) = running / static_cast<float>(t + 1);
      }
      return out;
    }
    case AttentionKind::causal_self: break;
  }

  const int H = config_.num_heads;
  const int KV = config_.num_kv_heads;
  const int hd = d / H;
  const int group = H / KV;
  const RowMatrixF x = norm(h, w.attn_norm);
  RowMatrixF q = x * w.wq;
  RowMatrixF k = x * w.wk;
  const RowMatrixF v = x * w.wv;

  // Rotate-half RoPE.
  const int half = hd / 2;
  auto rope = [&](RowMatrixF& m, int heads) {
    for (Eigen::Index t = 0; t < T; ++t) {
      for (int head = 0; head < heads; ++head) {
        float* p = m.row(t).data() + head * hd;
        for (int i = 0; i < half; ++i) {
          const double freq = std::pow(static_cast<double>(config_.rope_theta), -2.0 * i / hd);
          const double angle = static_cast<double>(t) * freq;
          const float c = static_cast<float>(std::cos(angle));
          const float s = static_cast<float>(std::sin(angle));
          const float a = p[i];
          const float b = p[i + half];
          p[i] = a * c - b * s;
          p[i + half] = b * c + a * s;
        }
      }
    }
  };
  rope(q, H);
  rope(k, KV);

  RowMatrixF ctx = RowMatrixF::Zero(T, d);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(static_cast<std::size_t>(T));
  for (int head = 0; head < H; ++head) {
    const int kvh = head / group;
    for (Eigen::Index t = 0; t < T; ++t) {
      float mx = -std::numeric_limits<float>::infinity();
      for (Eigen::Index s = 0; s <= t; ++s) {
        float dot = 0.0f;
        for (int i = 0; i < hd; ++i) dot += q(t, head * hd + i) * k(s, kvh * hd + i);
        scores[static_cast<std::size_t>(s)] = dot * scale;
        mx = std::max(mx, scores[static_cast<std::size_t>(s)]);
      }
      float total = 0.0f;
      for (Eigen::Index s = 0; s <= t; ++s) {
        scores[static_cast<std::size_t>(s)] = std::exp(scores[static_cast<std::size_t>(s)] - mx);
        total += scores[static_cast<std::size_t>(s)];
      }
      for (Eigen::Index s = 0; s <= t; ++s) {
        const float p = scores[static_cast<std::size_t>(s)] / total;
        for (int i = 0; i < hd; ++i) ctx(t, head * hd + i) += p * v(s, kvh * hd + i);
      }
    }
  }
  return ctx * w.wo;
}

VectorF GatedDecoder::forward(std::span<const int> tokens, const ForwardHooks& hooks) const {
  if (tokens.empty()) throw DataError("forward on an empty token sequence");
  if (static_cast<int>(tokens.size()) > config_.max_context) {
    throw ModelError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds the context limit of " +
                     std::to_string(config_.max_context));
  }
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.size());
  RowMatrixF h(T, config_.hidden_dim);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= config_.vocab_size) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    h.row(t) = embedding_.row(id);
  }

  auto emit = [&](int layer, HookPoint point, const auto& row) {
    if (hooks.read) hooks.read(layer, point, VectorF(row.transpose()));
  };

  for (int l = 1; l <= config_.num_layers; ++l) {
    const auto& w = layers_[static_cast<std::size_t>(l - 1)];
    // Past the last token-mixing layer only the final position matters.
    if (l > last_mixing_layer_ && h.rows() > 1) {
      RowMatrixF last = h.bottomRows(1);
      h = std::move(last);
    }
    const RowMatrixF a = attention(w, h);
    const RowMatrixF pre = h + a;
    const RowMatrixF x = norm(pre, w.mlp_norm);
    RowMatrixF gate = x * w.gate;
    const RowMatrixF up = x * w.up;
    if (config_.activation == Activation::silu) {
      gate = gate.unaryExpr([](float z) { return z / (1.0f + std::exp(-z)); });
    } else {
      gate = gate.unaryExpr([](float z) {
        return 0.5f * z * (1.0f + std::tanh(0.7978845608f * (z + 0.044715f * z * z * z)));
      });
    }
    RowMatrixF alpha = gate.cwiseProduct(up);
    if (hooks.write_alpha) hooks.write_alpha(l, alpha);
    const RowMatrixF mlp = alpha * w.down;
    h = pre + mlp;

    const Eigen::Index last = h.rows() - 1;
    emit(l, HookPoint::attention_out, a.row(last));
    emit(l, HookPoint::pre_mlp, pre.row(last));
    emit(l, HookPoint::mlp_activation, alpha.row(last));
    emit(l, HookPoint::mlp_output, mlp.row(last));
    if (l == config_.num_layers && config_.final_norm_in_hidden) {
      emit(l, HookPoint::hidden_state, norm(h.bottomRows(1), final_norm_).row(0));
    } else {
      emit(l, HookPoint::hidden_state, h.row(last));
    }
  }
  const RowMatrixF final_h = norm(h.bottomRows(1), final_norm_);
  return lm_head_ * final_h.row(0).transpose();
}

ValueVectorTable GatedDecoder::value_vectors() const {
  ValueVectorTable table;
  table.model_id = config_.model_id;
  for (const auto& w : layers_) table.layers.push_back(w.down);
  return table;
}

}  // namespace xfrn
