#include "framing.hpp"
#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/model.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <functional>

namespace xfrn {

namespace fs = std::filesystem;

namespace {

std::string attention_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::none: return "none";
    case AttentionKind::prefix_mean: return "prefix_mean";
    case AttentionKind::causal_self: return "causal_self";
  }
  return "none";
}

AttentionKind parse_attention(const std::string& s) {
  if (s == "none") return AttentionKind::none;
  if (s == "prefix_mean") return AttentionKind::prefix_mean;
  if (s == "causal_self") return AttentionKind::causal_self;
  throw ModelError("unknown attention kind '" + s + "'");
}

std::string activation_name(Activation a) { return a == Activation::silu ? "silu" : "gelu_tanh"; }

Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu_tanh") return Activation::gelu_tanh;
  throw ModelError("unknown activation '" + s + "'");
}

struct TensorWriter {
  std::FILE* blob;
  std::uint64_t offset = 0;
  json index = json::array();

  void put(const std::string& name, const float* data, Eigen::Index rows, Eigen::Index cols) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(rows * cols) * sizeof(float);
    write_f32_le(blob, data, static_cast<std::size_t>(rows * cols));
    index.push_back({{"name", name}, {"shape", {rows, cols}}, {"offset", offset}, {"length", bytes}});
    offset += bytes;
  }
  void put(const std::string& name, const RowMatrixF& m) {
    if (m.size() > 0) put(name, m.data(), m.rows(), m.cols());
  }
  void put(const std::string& name, const VectorF& v) {
    if (v.size() > 0) put(name, v.data(), 1, v.size());
  }
};

std::shared_ptr<GatedDecoder> load_decoder_impl(const fs::path& path, std::optional<Tokenizer> tokenizer,
                                                const std::function<void(DecoderConfig&)>& adjust) {
  if (!fs::exists(path)) throw ModelError("weights file '" + path.string() + "' not found");
  const FramedFile framed = read_framing(path);
  json header;
  try {
    header = json::parse(framed.header_json);
  } catch (const json::exception& e) {
    throw ModelError("'" + path.string() + "': malformed header: " + e.what());
  }
  if (header.value("kind", "") != "weights") throw ModelError("'" + path.string() + "' is not a weights file");

  try {
    const json& c = header.at("config");
    DecoderConfig cfg;
    cfg.model_id = c.at("model_id").get<std::string>();
    cfg.family = c.at("family").get<std::string>();
    cfg.num_layers = c.at("num_layers").get<int>();
    cfg.hidden_dim = c.at("hidden_dim").get<int>();
    cfg.mlp_dim = c.at("mlp_dim").get<int>();
    cfg.vocab_size = c.at("vocab_size").get<int>();
    cfg.num_heads = c.at("num_heads").get<int>();
    cfg.num_kv_heads = c.at("num_kv_heads").get<int>();
    cfg.rope_theta = c.at("rope_theta").get<float>();
    cfg.norm_eps = c.at("norm_eps").get<float>();
    cfg.max_context = c.at("max_context").get<int>();
    cfg.activation = parse_activation(c.at("activation").get<std::string>());
    cfg.final_norm_in_hidden = c.at("final_norm_in_hidden").get<bool>();
    if (adjust) adjust(cfg);

    if (!tokenizer) {
      if (!header.contains("tokenizer")) throw ModelError("'" + path.string() + "' embeds no tokenizer and none was given");
      tokenizer = Tokenizer::from_json(header["tokenizer"].dump());
    }

    std::map<std::string, std::pair<std::vector<float>, std::pair<Eigen::Index, Eigen::Index>>> tensors;
    for (const auto& t : header.at("tensors")) {
      auto data = read_f32_le(path, framed.data_start + t.at("offset").get<std::uint64_t>(),
                              t.at("length").get<std::uint64_t>());
      const Eigen::Index r = t.at("shape")[0].get<Eigen::Index>();
      const Eigen::Index cc = t.at("shape")[1].get<Eigen::Index>();
      if (static_cast<Eigen::Index>(data.size()) != r * cc) throw ModelError("tensor '" + t.at("name").get<std::string>() + "' size mismatch");
      tensors[t.at("name").get<std::string>()] = {std::move(data), {r, cc}};
    }
    auto matrix = [&](const std::string& name) -> RowMatrixF {
      auto it = tensors.find(name);
      if (it == tensors.end()) return RowMatrixF();
      auto& [data, shape] = it->second;
      return Eigen::Map<RowMatrixF>(data.data(), shape.first, shape.second);
    };
    auto vector = [&](const std::string& name) -> VectorF {
      const RowMatrixF m = matrix(name);
      if (m.size() == 0) return VectorF();
      return Eigen::Map<const VectorF>(m.data(), m.size());
    };
    auto require = [&](const std::string& name) {
      if (!tensors.count(name)) throw ModelError("weights file '" + path.string() + "' lacks tensor '" + name + "'");
      return matrix(name);
    };

    const json& layer_meta = header.at("layers");
    if (static_cast<int>(layer_meta.size()) != cfg.num_layers) throw ModelError("layer metadata count mismatch");
    std::vector<LayerWeights> layers;
    for (int l = 1; l <= cfg.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerWeights w;
      w.attention = parse_attention(layer_meta[static_cast<std::size_t>(l - 1)].at("attention").get<std::string>());
      w.attn_norm = vector(p + "attn_norm");
      w.mlp_norm = vector(p + "mlp_norm");
      if (w.attention == AttentionKind::causal_self) {
        w.wq = require(p + "wq");
        w.wk = require(p + "wk");
        w.wv = require(p + "wv");
        w.wo = require(p + "wo");
      }
      w.gate = require(p + "gate");
      w.up = require(p + "up");
      w.down = require(p + "down");
      layers.push_back(std::move(w));
    }
    return std::make_shared<GatedDecoder>(cfg, std::move(*tokenizer), require("embedding"), std::move(layers),
                                          vector("final_norm"), require("lm_head"));
  } catch (const json::exception& e) {
    throw ModelError("'" + path.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw ModelError(e.what());
  }
}

fs::path resolve(const fs::path& p, const fs::path& config_dir) {
  if (p.empty() || p.is_absolute()) return p;
  const fs::path local = config_dir / p;
  if (fs::exists(local)) return local;
  if (const char* cache = std::getenv("XFRN_CACHE"); cache && *cache) {
    const fs::path cached = fs::path(cache) / p;
    if (fs::exists(cached)) return cached;
  }
  return local;
}

}  // namespace

void save_decoder(const GatedDecoder& model, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path blob_path = detail::temp_blob_path(path);
  std::FILE* blob = std::fopen(blob_path.c_str(), "wb");
  if (!blob) throw DataError("cannot open '" + blob_path.string() + "'");
  TensorWriter tw{blob};
  tw.put("embedding", model.embedding());
  tw.put("lm_head", model.lm_head());
  tw.put("final_norm", model.final_norm());
  json layer_meta = json::array();
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const auto& w = model.layers()[i];
    const std::string p = "layers." + std::to_string(i + 1) + ".";
    layer_meta.push_back({{"attention", attention_name(w.attention)}});
    tw.put(p + "attn_norm", w.attn_norm);
    tw.put(p + "wq", w.wq);
    tw.put(p + "wk", w.wk);
    tw.put(p + "wv", w.wv);
    tw.put(p + "wo", w.wo);
    tw.put(p + "mlp_norm", w.mlp_norm);
    tw.put(p + "gate", w.gate);
    tw.put(p + "up", w.up);
    tw.put(p + "down", w.down);
  }
  std::fclose(blob);

  const auto& c = model.config();
  json header = {{"format", "XFRN1"},
                 {"kind", "weights"},
                 {"config",
                  {{"model_id", c.model_id},
                   {"family", c.family},
                   {"num_layers", c.num_layers},
                   {"hidden_dim", c.hidden_dim},
                   {"mlp_dim", c.mlp_dim},
                   {"vocab_size", c.vocab_size},
                   {"num_heads", c.num_heads},
                   {"num_kv_heads", c.num_kv_heads},
                   {"rope_theta", c.rope_theta},
                   {"norm_eps", c.norm_eps},
                   {"max_context", c.max_context},
                   {"activation", activation_name(c.activation)},
                   {"final_norm_in_hidden", c.final_norm_in_hidden}}},
                 {"layers", layer_meta},
                 {"tokenizer", json::parse(model.tokenizer().to_json())},
                 {"tensors", tw.index},
                 {"data_bytes", tw.offset}};
  try {
    detail::write_framed(path, header, blob_path);
  } catch (...) {
    fs::remove(blob_path);
    throw;
  }
  fs::remove(blob_path);
}

std::shared_ptr<GatedDecoder> load_decoder(const fs::path& weights, std::optional<Tokenizer> tokenizer) {
  return load_decoder_impl(weights, std::move(tokenizer), {});
}

AdapterConfig load_adapter_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("adapter config '" + path.string() + "' not found");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_adapter_config(text, path);
}

AdapterConfig parse_adapter_config(std::string_view text, const fs::path& path) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("adapter config '" + path.string() + "': " + e.what());
  }
  AdapterConfig c;
  c.source = path;
  try {
    c.model_id = j.at("model_id").get<std::string>();
    c.family = j.value("family", std::string(j.contains("fixture") ? "fixture" : "llama"));
    if (j.contains("hook_points")) c.hook_points = j["hook_points"].get<std::map<std::string, std::string>>();
    c.dtype = j.value("dtype", c.dtype);
    c.device = j.value("device", c.device);
    c.max_context = j.value("max_context", c.max_context);
    c.final_norm_in_hidden = j.value("final_norm_in_hidden", c.final_norm_in_hidden);
    if (j.contains("weights")) c.weights = j["weights"].get<std::string>();
    if (j.contains("tokenizer")) c.tokenizer = j["tokenizer"].get<std::string>();
    if (j.contains("fixture")) c.fixture_json = j["fixture"].dump();
  } catch (const json::exception& e) {
    throw ConfigError("adapter config '" + path.string() + "': " + e.what());
  }
  if (c.dtype != "f32") throw ConfigError("adapter config: dtype '" + c.dtype + "' unsupported (only f32)");
  if (c.device != "cpu") throw ConfigError("adapter config: device '" + c.device + "' unsupported (only cpu)");
  if (c.max_context < 1) throw ConfigError("adapter config: max_context must be positive");
  if (!c.fixture_json && c.weights.empty()) throw ConfigError("adapter config needs either \"weights\" or \"fixture\"");
  static const std::set<std::string> known_points = {"attention_out", "pre_mlp", "mlp_activation", "mlp_output",
                                                     "hidden_state"};
  for (const auto& [point, name] : c.hook_points) {
    if (!known_points.count(point)) throw ConfigError("adapter config: unknown hook point '" + point + "'");
  }
  return c;
}

std::shared_ptr<ModelAdapter> load_adapter(const AdapterConfig& config) {
  const fs::path dir = config.source.empty() ? fs::current_path() : config.source.parent_path();
  if (config.fixture_json) {
    FixtureOptions opt = parse_fixture_options(*config.fixture_json);
    opt.model_id = config.model_id;
    opt.max_context = config.max_context;
    return build_planted_fixture(opt).model;
  }
  std::optional<Tokenizer> tok;
  if (!config.tokenizer.empty()) {
    const fs::path tp = resolve(config.tokenizer, dir);
    if (!fs::exists(tp)) throw ModelError("tokenizer file '" + tp.string() + "' not found");
    tok = Tokenizer::load(tp);
  }
  const fs::path wp = resolve(config.weights, dir);
  return load_decoder_impl(wp, std::move(tok), [&](DecoderConfig& c) {
    c.model_id = config.model_id;
    c.max_context = config.max_context;
    c.final_norm_in_hidden = config.final_norm_in_hidden;
  });
}

}  // namespace xfrn
