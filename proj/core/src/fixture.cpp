#include "xfrn/fixture.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_set>

namespace xfrn {

namespace {

double silu(double z) { return z / (1.0 + std::exp(-z)); }

// Gate pre-activation of a planted neuron on its own language's corpus
// sentences; silu is close to linear there.
constexpr double kFire = 8.0;

std::string utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

std::string pseudo_word(const std::string& language, Rng& rng) {
  std::string w;
  if (language == "ja") {
    const int n = 2 + static_cast<int>(rng.uniform_index(2));
    for (int i = 0; i < n; ++i) w += utf8(static_cast<char32_t>(0x3042 + rng.uniform_index(0x3093 - 0x3042)));
  } else if (language == "ko") {
    const int n = 2 + static_cast<int>(rng.uniform_index(2));
    for (int i = 0; i < n; ++i) w += utf8(static_cast<char32_t>(0xAC00 + rng.uniform_index(11172)));
  } else if (language == "zh") {
    const int n = 1 + static_cast<int>(rng.uniform_index(2));
    for (int i = 0; i < n; ++i) w += utf8(static_cast<char32_t>(0x4E00 + rng.uniform_index(20000)));
  } else {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
    static const char* nuclei[] = {"a", "e", "i", "o", "u"};
    const int n = 2 + static_cast<int>(rng.uniform_index(2));
    for (int i = 0; i < n; ++i) {
      w += onsets[rng.uniform_index(14)];
      w += nuclei[rng.uniform_index(5)];
    }
  }
  return w;
}

struct Layout {
  int n_lang = 0;
  int bias = 0;
  int offset0 = 1;
  int tag0 = 0;
  int word = 0;
  int suppress = 0;
  int qa0 = 0;
  int corpus0 = 0;
  int qa_concepts = 0;
};

}  // namespace

std::set<NeuronId> PlantedFixture::ground_truth(TransferType type, const std::string& language) const {
  std::set<NeuronId> out;
  for (const auto& p : planted)
    if (p.type == type && p.language == language) out.insert(p.id);
  return out;
}

std::set<NeuronId> PlantedFixture::ground_truth(TransferType type) const {
  std::set<NeuronId> out;
  for (const auto& p : planted)
    if (p.type == type) out.insert(p.id);
  return out;
}

const std::string& PlantedFixture::word(int concept_id, const std::string& language) const {
  const auto& langs = options.languages;
  const auto it = std::find(langs.begin(), langs.end(), language);
  if (it == langs.end()) throw DataError("fixture has no language '" + language + "'");
  return words.at(static_cast<std::size_t>(concept_id)).at(static_cast<std::size_t>(it - langs.begin()));
}

ParallelCorpus PlantedFixture::make_corpus(int n_pairs, std::uint64_t seed) const {
  if (n_pairs < 1) throw ConfigError("corpus size must be positive");
  Rng rng(seed);
  ParallelCorpus corpus;
  corpus.languages.insert(options.languages.begin(), options.languages.end());
  for (int p = 0; p < n_pairs; ++p) {
    const int len = 3 + static_cast<int>(rng.uniform_index(4));
    std::vector<int> concepts;
    for (int i = 0; i < len; ++i)
      concepts.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(options.corpus_concepts))));
    ParallelPair pair;
    pair.pair_index = p;
    for (const auto& lang : options.languages) {
      std::string s;
      for (int c : concepts) {
        if (!s.empty()) s += ' ';
        s += word(c, lang);
      }
      pair.sentences[lang] = s;
    }
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

QaDataset PlantedFixture::make_qa() const {
  QaDataset ds;
  for (const auto& lang : options.languages) {
    for (int k = 0; k < qa_concepts; ++k) {
      const int q = options.corpus_concepts + 2 * k;
      ds.items.push_back(QaItem{"q" + std::to_string(k) + "-" + lang, lang, word(q, lang) + " ?",
                                {word(q + 1, lang)}});
    }
  }
  return ds;
}

PlantedFixture build_planted_fixture(const FixtureOptions& opt) {
  const int L = opt.num_layers;
  const int d = opt.hidden_dim;
  const int dm = opt.mlp_dim;
  const int n = static_cast<int>(opt.languages.size());
  const int k = opt.planted_per_layer;
  if (d < 2) throw ConfigError("fixture hidden_dim must be at least 2, got " + std::to_string(d));
  if (L < 2) throw ConfigError("fixture needs at least 2 layers");
  if (n < 2) throw ConfigError("fixture needs at least 2 languages");
  if (std::set<std::string>(opt.languages.begin(), opt.languages.end()).size() != opt.languages.size()) {
    throw ConfigError("fixture languages must be distinct");
  }
  if (k < 0) throw ConfigError("planted_per_layer must be non-negative");
  if (k * n > dm) {
    throw ConfigError("planted_per_layer x languages = " + std::to_string(k * n) + " exceeds mlp_dim " +
                      std::to_string(dm));
  }
  if (opt.corpus_concepts < 2) throw ConfigError("fixture needs at least 2 corpus concepts");

  Layout lay;
  lay.n_lang = n;
  lay.tag0 = 1 + n;
  lay.word = 1 + 2 * n;
  lay.suppress = lay.word + 1;
  lay.qa0 = lay.suppress + 1;
  const int min_d = lay.qa0 + 2;
  if (d < min_d) {
    throw ConfigError("fixture layout for " + std::to_string(n) + " languages needs hidden_dim >= " +
                      std::to_string(min_d) + ", got " + std::to_string(d));
  }
  const int B = type_boundary(L);
  const int qa_fit = std::max(0, (d - min_d) / 2);
  int nq = std::min(opt.qa_concepts, qa_fit);
  if (L < B + 2 || k * n + n > dm || k * n + nq > dm) nq = 0;
  lay.qa_concepts = nq;
  lay.corpus0 = lay.qa0 + 2 * nq;
  const int corpus_dims = d - lay.corpus0;

  PlantedFixture fx;
  fx.options = opt;
  fx.qa_concepts = nq;

  Rng root(opt.seed);
  Rng word_rng = root.fork(1);
  Rng sem_rng = root.fork(2);
  Rng weight_rng = root.fork(3);
  Rng index_rng = root.fork(4);

  // Vocabulary.
  const int n_concepts = opt.corpus_concepts + 2 * nq;
  std::unordered_set<std::string> used;
  std::vector<std::string> vocab = {"<unk>", "\n", "?"};
  std::map<std::string, std::vector<int>> cue_langs;
  for (int j = 0; j < n; ++j) cue_langs[answer_cue(opt.languages[j])].push_back(j);
  std::vector<std::pair<std::string, int>> cues;  // token, language index or -1
  for (const auto& [cue, langs] : cue_langs) {
    cues.emplace_back(cue, langs.size() == 1 ? langs.front() : -1);
    vocab.push_back(cue);
  }
  used.insert(vocab.begin(), vocab.end());
  fx.words.assign(static_cast<std::size_t>(n_concepts), std::vector<std::string>(static_cast<std::size_t>(n)));
  for (int c = 0; c < n_concepts; ++c) {
    for (int j = 0; j < n; ++j) {
      std::string w;
      do {
        w = pseudo_word(opt.languages[j], word_rng);
      } while (!used.insert(w).second);
      fx.words[c][j] = w;
    }
  }
  const int first_word = static_cast<int>(vocab.size());
  for (int c = 0; c < n_concepts; ++c)
    for (int j = 0; j < n; ++j) vocab.push_back(fx.words[c][j]);
  const int V = static_cast<int>(vocab.size());

  // Language offsets: centred simplex scaled to offset_norm.
  std::vector<Vector> offset_dir(static_cast<std::size_t>(n), Vector::Zero(d));
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) offset_dir[j][lay.offset0 + i] = (i == j ? 1.0 : 0.0) - 1.0 / n;
    offset_dir[j].normalize();
  }

  // Concept semantics.
  std::vector<Vector> sem(static_cast<std::size_t>(n_concepts), Vector::Zero(d));
  for (int c = 0; c < opt.corpus_concepts; ++c) {
    for (int i = 0; i < corpus_dims; ++i) sem[c][lay.corpus0 + i] = sem_rng.normal();
    if (sem[c].norm() == 0.0) sem[c][lay.corpus0] = 1.0;
    sem[c] *= opt.semantic_norm / sem[c].norm();
  }
  for (int c = 0; c < 2 * nq; ++c) sem[opt.corpus_concepts + c][lay.qa0 + c] = opt.semantic_norm;

  RowMatrixF embedding = RowMatrixF::Zero(V, d);
  for (int t = 0; t < V; ++t) embedding(t, lay.bias) = static_cast<float>(opt.bias);
  for (std::size_t ci = 0; ci < cues.size(); ++ci) {
    const int j = cues[ci].second;
    if (j < 0) continue;
    const int t = 3 + static_cast<int>(ci);
    Vector e = embedding.row(t).transpose().cast<double>();
    e += opt.offset_norm * offset_dir[j];
    e[lay.tag0 + j] += opt.tag_norm;
    embedding.row(t) = e.cast<float>().transpose();
  }
  for (int c = 0; c < n_concepts; ++c) {
    for (int j = 0; j < n; ++j) {
      const int t = first_word + c * n + j;
      Vector e = Vector::Zero(d);
      e[lay.bias] = opt.bias;
      e += opt.offset_norm * offset_dir[j] + sem[c];
      e[lay.tag0 + j] += opt.tag_norm;
      e[lay.word] = 1.0;
      embedding.row(t) = e.cast<float>().transpose();
    }
  }

  // Scales on a corpus sentence at layer 1 (last token plus prefix mean).
  const double x_bias = 2.0 * opt.bias;
  const double x_tag = 2.0 * opt.tag_norm;
  const double R = 2.0 * opt.offset_norm;
  const double s_fire = silu(kFire);
  const double S = opt.semantic_norm;

  std::vector<LayerWeights> layers(static_cast<std::size_t>(L));
  std::vector<double> share(static_cast<std::size_t>(std::max(k, 0)));
  // Unequal but within a factor of two, so every planted neuron stays well
  // above the unplanted ones.
  for (int i = 0; i < k; ++i) share[i] = static_cast<double>(2 * k - i) / (k * (3 * k + 1) / 2.0);

  for (int l = 1; l <= L; ++l) {
    auto& w = layers[static_cast<std::size_t>(l - 1)];
    w.attention = l == 1 ? AttentionKind::prefix_mean : AttentionKind::none;
    w.gate.resize(d, dm);
    w.up.resize(d, dm);
    w.down.resize(dm, d);
    for (int i = 0; i < dm; ++i) {
      for (int r = 0; r < d; ++r) w.gate(r, i) = static_cast<float>(opt.gate_std * weight_rng.normal());
      for (int r = 0; r < d; ++r) w.up(r, i) = static_cast<float>(opt.gate_std * weight_rng.normal());
      for (int r = 0; r < d; ++r) w.down(i, r) = static_cast<float>(opt.down_std * weight_rng.normal());
    }

    std::vector<int> slots(static_cast<std::size_t>(dm));
    std::iota(slots.begin(), slots.end(), 0);
    Rng layer_rng = index_rng.fork(static_cast<std::uint64_t>(l));
    layer_rng.shuffle(slots);
    std::size_t next_slot = 0;

    auto set_neuron = [&](int i, const Vector& gate, const Vector& down) {
      w.gate.col(i) = gate.cast<float>();
      w.up.col(i).setZero();
      w.up(lay.bias, i) = static_cast<float>(1.0 / x_bias);
      w.down.row(i) = down.cast<float>().transpose();
    };

    const bool early = l <= B;
    const double per_layer = early ? R / B : R / (L - B);
    for (int j = 0; j < n; ++j) {
      for (int s = 0; s < k; ++s) {
        const int i = slots[next_slot++];
        Vector gate = Vector::Zero(d);
        gate[lay.tag0 + j] = kFire / x_tag;
        const Vector dir = early ? Vector(-offset_dir[j]) : Vector(offset_dir[j]);
        const double gain = share[s] * per_layer / s_fire;
        set_neuron(i, gate, gain * dir);
        fx.planted.push_back(
            PlantedNeuron{NeuronId{l, i}, early ? TransferType::type1 : TransferType::type2, opt.languages[j], dir, gain});
      }
    }

    if (nq > 0 && l == B + 1) {
      // Offset detectors: fire when language j's offset survived layers 1..B.
      const double theta = R / 4.0;
      const double c = 4.0 * kFire / R;
      for (int j = 0; j < n; ++j) {
        const int i = slots[next_slot++];
        Vector gate = c * offset_dir[j];
        gate[lay.bias] -= c * theta / x_bias;
        Vector down = Vector::Zero(d);
        down[lay.suppress] = 1.0 / (c * (0.75 * R - theta));
        set_neuron(i, gate, down);
      }
    }
    if (nq > 0 && l == B + 2) {
      // Knowledge neurons: question concept -> answer concept, unless
      // suppressed.
      const double c = 8.0 * kFire / S;
      for (int q = 0; q < nq; ++q) {
        const int i = slots[next_slot++];
        const int sq = lay.qa0 + 2 * q;
        Vector gate = Vector::Zero(d);
        gate[sq] = c;
        gate[lay.bias] = -c * (S / 8.0) / x_bias;
        gate[lay.suppress] = -c * S / 4.0;
        Vector down = Vector::Zero(d);
        down[sq + 1] = S / s_fire;
        down[sq] = -(S / 4.0) / s_fire;
        set_neuron(i, gate, down);
      }
    }
  }

  // Read-out: content words score by concept and language; the newline wins
  // once the final token is itself a content word.
  RowMatrixF lm_head = RowMatrixF::Zero(V, d);
  for (int c = 0; c < n_concepts; ++c) {
    const Vector s_hat = sem[c].normalized();
    for (int j = 0; j < n; ++j) {
      lm_head.row(first_word + c * n + j) = (s_hat + offset_dir[j]).cast<float>().transpose();
    }
  }
  constexpr double kNewline = 100.0;
  lm_head(1, lay.word) = static_cast<float>(kNewline);
  lm_head(1, lay.bias) = static_cast<float>(-kNewline * 0.8 / x_bias);

  DecoderConfig cfg;
  cfg.model_id = opt.model_id;
  cfg.family = "fixture";
  cfg.num_layers = L;
  cfg.hidden_dim = d;
  cfg.mlp_dim = dm;
  cfg.vocab_size = V;
  cfg.max_context = opt.max_context;
  cfg.activation = Activation::silu;

  Tokenizer::Options topt;
  topt.mode = Tokenizer::Mode::whitespace;
  Tokenizer tok(vocab, topt);
  fx.model = std::make_shared<GatedDecoder>(cfg, std::move(tok), std::move(embedding), std::move(layers), VectorF(),
                                            std::move(lm_head));

  // Cluster description at layer 1 from a reference sample.
  const auto sample = fx.make_corpus(64, opt.seed ^ 0x9e3779b97f4a7c15ULL);
  for (const auto& lang : opt.languages) {
    std::vector<CaptureInput> batch;
    for (std::size_t p = 0; p < sample.size(); ++p)
      batch.push_back({std::to_string(p), lang, sample.sentence(p, lang)});
    const auto recs = forward_capture(*fx.model, batch, {CaptureKind::pre_mlp});
    Matrix X(static_cast<Eigen::Index>(batch.size()), d);
    Eigen::Index r = 0;
    for (const auto& rec : recs)
      if (rec.layer == 1) X.row(r++) = rec.pre_mlp.cast<double>().transpose();
    ClusterSpec cs;
    cs.language = lang;
    cs.mean = X.colwise().mean().transpose();
    const Matrix centered = X.rowwise() - cs.mean.transpose();
    cs.covariance = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(1, X.rows() - 1));
    fx.clusters.push_back(std::move(cs));
  }
  return fx;
}

PlantedFixture build_planted_fixture(std::uint64_t seed, int num_layers, int hidden_dim, int mlp_dim,
                                     const std::vector<std::string>& languages, int planted_per_layer) {
  FixtureOptions opt;
  opt.seed = seed;
  opt.num_layers = num_layers;
  opt.hidden_dim = hidden_dim;
  opt.mlp_dim = mlp_dim;
  opt.languages = languages;
  opt.planted_per_layer = planted_per_layer;
  return build_planted_fixture(opt);
}

FixtureOptions parse_fixture_options(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("fixture block is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("fixture block must be an object");
  FixtureOptions o;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") o.seed = value.get<std::uint64_t>();
      else if (key == "num_layers") o.num_layers = value.get<int>();
      else if (key == "hidden_dim") o.hidden_dim = value.get<int>();
      else if (key == "mlp_dim") o.mlp_dim = value.get<int>();
      else if (key == "languages") o.languages = value.get<std::vector<std::string>>();
      else if (key == "planted_per_layer") o.planted_per_layer = value.get<int>();
      else if (key == "bias") o.bias = value.get<double>();
      else if (key == "offset_norm") o.offset_norm = value.get<double>();
      else if (key == "tag_norm") o.tag_norm = value.get<double>();
      else if (key == "semantic_norm") o.semantic_norm = value.get<double>();
      else if (key == "gate_std") o.gate_std = value.get<double>();
      else if (key == "down_std") o.down_std = value.get<double>();
      else if (key == "corpus_concepts") o.corpus_concepts = value.get<int>();
      else if (key == "qa_concepts") o.qa_concepts = value.get<int>();
      else if (key == "max_context") o.max_context = value.get<int>();
      else if (key == "model_id") o.model_id = value.get<std::string>();
      else throw ConfigError("unknown fixture option '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("fixture block: ") + e.what());
  }
  return o;
}

std::string fixture_options_json(const FixtureOptions& o) {
  json j = {{"seed", o.seed},
            {"num_layers", o.num_layers},
            {"hidden_dim", o.hidden_dim},
            {"mlp_dim", o.mlp_dim},
            {"languages", o.languages},
            {"planted_per_layer", o.planted_per_layer},
            {"bias", o.bias},
            {"offset_norm", o.offset_norm},
            {"tag_norm", o.tag_norm},
            {"semantic_norm", o.semantic_norm},
            {"gate_std", o.gate_std},
            {"down_std", o.down_std},
            {"corpus_concepts", o.corpus_concepts},
            {"qa_concepts", o.qa_concepts},
            {"max_context", o.max_context},
            {"model_id", o.model_id}};
  return j.dump(1);
}

}  // namespace xfrn
