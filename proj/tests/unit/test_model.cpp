#include "test_util.hpp"
#include "xfrn/corpus.hpp"
#include "xfrn/error.hpp"
#include "xfrn/evaluation.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/geometry.hpp"
#include "xfrn/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace xfrn;
using xfrn::testing::TempDir;

namespace {

struct LayerTrace {
  VectorF pre, alpha, mlp, hidden;
};

// Final-token values per layer from a raw forward.
std::vector<LayerTrace> trace(const ModelAdapter& model, const std::string& text, const DeactivationMask* mask) {
  std::vector<LayerTrace> out(static_cast<std::size_t>(model.num_layers()));
  ForwardHooks hooks;
  hooks.read = [&](int layer, HookPoint point, const VectorF& v) {
    auto& t = out[static_cast<std::size_t>(layer - 1)];
    switch (point) {
      case HookPoint::pre_mlp: t.pre = v; break;
      case HookPoint::mlp_activation: t.alpha = v; break;
      case HookPoint::mlp_output: t.mlp = v; break;
      case HookPoint::hidden_state: t.hidden = v; break;
      default: break;
    }
  };
  if (mask) {
    const auto layers = mask->by_layer();
    hooks.write_alpha = [layers](int layer, Eigen::Ref<RowMatrixF> alpha) {
      if (auto it = layers.find(layer); it != layers.end())
        for (int i : it->second) alpha.col(i).setZero();
    };
  }
  model.forward(model.tokenize(text), hooks);
  return out;
}

// Sum_i alpha_i v_i rebuilt in double from the value table.
Vector value_sum(const VectorF& alpha, const RowMatrixF& down) {
  Vector acc = Vector::Zero(down.cols());
  for (Eigen::Index i = 0; i < down.rows(); ++i)
    acc += static_cast<double>(alpha(i)) * down.row(i).transpose().cast<double>();
  return acc;
}

double max_abs_diff(const VectorF& a, const VectorF& b) { return (a - b).cwiseAbs().maxCoeff(); }

PlantedFixture small_fixture(std::uint64_t seed = 3) {
  FixtureOptions o;
  o.seed = seed;
  o.num_layers = 4;
  o.hidden_dim = 64;
  o.mlp_dim = 128;
  return build_planted_fixture(o);
}

std::string fixture_sentence(const PlantedFixture& fx, const std::string& lang) {
  return fx.make_corpus(1, 5).sentence(0, lang);
}

}  // namespace

TEST(Model, DecompositionIdentityRandomDecoder) {
  const auto model = xfrn::testing::random_decoder(1, 4, 32, 64);
  const auto values = model->value_vectors();
  for (const char* text : {"w1 w2 w3", "w0", "w5 w5 w7 w9 w11 w2"}) {
    const auto t = trace(*model, text, nullptr);
    for (int l = 0; l < 4; ++l) {
      const Vector rebuilt = value_sum(t[l].alpha, values.layers[l]);
      EXPECT_LE((rebuilt - t[l].mlp.cast<double>()).cwiseAbs().maxCoeff(), 1e-4) << "layer " << l + 1;
      EXPECT_LE(max_abs_diff(t[l].hidden, t[l].pre + t[l].mlp), 1e-5);
    }
  }
}

TEST(Model, DecompositionIdentityFixture) {
  const auto fx = small_fixture();
  const auto values = fx.model->value_vectors();
  for (const auto& lang : fx.options.languages) {
    const auto t = trace(*fx.model, fixture_sentence(fx, lang), nullptr);
    for (int l = 0; l < fx.model->num_layers(); ++l) {
      const Vector rebuilt = value_sum(t[l].alpha, values.layers[l]);
      EXPECT_LE((rebuilt - t[l].mlp.cast<double>()).cwiseAbs().maxCoeff(), 1e-4);
    }
  }
}

TEST(Model, EmptyMaskMatchesUnhooked) {
  const auto model = xfrn::testing::random_decoder(2, 3, 16, 32);
  const std::vector<CaptureInput> batch = {{"a", "en", "w1 w2"}, {"b", "en", "w3 w4 w5"}};
  const DeactivationMask empty;
  const auto plain = forward_capture(*model, batch, {CaptureKind::hidden_state});
  const auto masked = forward_capture(*model, batch, {CaptureKind::hidden_state}, &empty);
  ASSERT_EQ(plain.size(), masked.size());
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_LE(max_abs_diff(plain[i].hidden_state, masked[i].hidden_state), 1e-5);
}

TEST(Model, FullLayerMaskZeroesMlpOutput) {
  const auto model = xfrn::testing::random_decoder(3, 3, 16, 32);
  std::set<NeuronId> all;
  for (int i = 0; i < 32; ++i) all.insert({2, i});
  const DeactivationMask mask(all, MaskProvenance::custom);
  const auto t = trace(*model, "w1 w2 w3", &mask);
  EXPECT_EQ(t[1].mlp.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(t[1].alpha.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_TRUE(t[1].hidden == t[1].pre);
}

TEST(Model, SingleNeuronMaskRemovesItsContribution) {
  const auto model = xfrn::testing::random_decoder(4, 3, 16, 32);
  const auto values = model->value_vectors();
  const auto base = trace(*model, "w4 w8 w1", nullptr);
  for (int l = 1; l <= 3; ++l) {
    for (int i : {0, 7, 31}) {
      const DeactivationMask mask({{l, i}}, MaskProvenance::custom);
      const auto m = trace(*model, "w4 w8 w1", &mask);
      const Vector expected = -static_cast<double>(base[l - 1].alpha(i)) *
                              values.layers[l - 1].row(i).transpose().cast<double>();
      const Vector delta = (m[l - 1].hidden - base[l - 1].hidden).cast<double>();
      EXPECT_LE((delta - expected).cwiseAbs().maxCoeff(), 1e-4) << "l=" << l << " i=" << i;
      // Locality: earlier layers are untouched.
      for (int e = 1; e < l; ++e) EXPECT_TRUE(m[e - 1].hidden == base[e - 1].hidden);
    }
  }
}

TEST(Model, MaskSetLocalityOnMlpOutput) {
  const auto model = xfrn::testing::random_decoder(5, 2, 16, 32);
  const auto values = model->value_vectors();
  const auto base = trace(*model, "w2 w3", nullptr);
  const std::set<NeuronId> s = {{1, 1}, {1, 4}, {1, 9}, {1, 30}};
  const DeactivationMask mask(s, MaskProvenance::custom);
  const auto m = trace(*model, "w2 w3", &mask);
  Vector expected = Vector::Zero(16);
  for (const auto& n : s) expected -= static_cast<double>(base[0].alpha(n.index)) * values.layers[0].row(n.index).transpose().cast<double>();
  EXPECT_LE(((m[0].mlp - base[0].mlp).cast<double>() - expected).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Model, InvalidMaskFailsBeforeForward) {
  const auto model = xfrn::testing::random_decoder(6, 2, 16, 32);
  const std::vector<CaptureInput> batch = {{"a", "en", "w1"}};
  int sunk = 0;
  for (NeuronId bad : {NeuronId{3, 0}, NeuronId{0, 0}, NeuronId{1, 32}, NeuronId{1, -1}}) {
    const DeactivationMask mask({bad}, MaskProvenance::custom);
    EXPECT_THROW(forward_capture(*model, batch, {CaptureKind::hidden_state}, &mask, [&](ActivationRecord&&) { ++sunk; }),
                 ModelError);
    EXPECT_THROW(generate(*model, "w1", &mask, 2), ModelError);
  }
  EXPECT_EQ(sunk, 0);
}

TEST(Model, EmptyBatchGivesNoRecords) {
  const auto model = xfrn::testing::random_decoder(7, 2, 16, 32);
  EXPECT_TRUE(forward_capture(*model, std::vector<CaptureInput>{}, {CaptureKind::hidden_state}).empty());
}

TEST(Model, CaptureDimensionsMatchManifest) {
  const auto model = xfrn::testing::random_decoder(8, 3, 16, 40);
  const std::set<CaptureKind> kinds = {CaptureKind::hidden_state, CaptureKind::pre_mlp, CaptureKind::attention_out,
                                       CaptureKind::mlp_activation};
  const auto manifest = model->manifest(kinds);
  const std::vector<CaptureInput> batch = {{"a", "en", "w1 w2"}};
  const auto recs = forward_capture(*model, batch, kinds);
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) {
    for (auto k : kinds) EXPECT_EQ(r.get(k).size(), manifest.dim_of(k));
    // pre = h^{l-1} + A^l
    EXPECT_EQ(r.language, "en");
  }
  for (int l = 1; l < 3; ++l) EXPECT_LE(max_abs_diff(recs[l].pre_mlp, recs[l - 1].hidden_state + recs[l].attention_out), 1e-5);
}

TEST(Model, FinalTokenOnlyCapture) {
  const auto model = xfrn::testing::random_decoder(9, 2, 16, 32);
  // Captures of a prefix's last token differ from the full sequence's last token.
  const std::vector<CaptureInput> a = {{"a", "en", "w1 w2 w3"}};
  const std::vector<CaptureInput> b = {{"b", "en", "w1 w2"}};
  const auto ra = forward_capture(*model, a, {CaptureKind::hidden_state});
  const auto rb = forward_capture(*model, b, {CaptureKind::hidden_state});
  const auto t = trace(*model, "w1 w2 w3", nullptr);
  EXPECT_TRUE(ra[1].hidden_state == t[1].hidden);
  EXPECT_GT(max_abs_diff(ra[1].hidden_state, rb[1].hidden_state), 1e-3);
}

TEST(Model, GenerateIsDeterministic) {
  const auto model = xfrn::testing::random_decoder(10, 3, 16, 32);
  const DeactivationMask mask({{1, 3}, {2, 5}}, MaskProvenance::custom);
  EXPECT_EQ(generate(*model, "w1 w2", nullptr, 8), generate(*model, "w1 w2", nullptr, 8));
  EXPECT_EQ(generate(*model, "w1 w2", &mask, 8), generate(*model, "w1 w2", &mask, 8));
  const DeactivationMask empty;
  EXPECT_EQ(generate(*model, "w3", &empty, 8), generate(*model, "w3", nullptr, 8));
}

TEST(Model, GenerateContextOverflowNamesLimit) {
  const auto model = xfrn::testing::random_decoder(11, 2, 16, 32);
  try {
    generate(*model, "w1 w2 w3", nullptr, 62);
    FAIL() << "expected ModelError";
  } catch (const ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("64"), std::string::npos);
  }
  EXPECT_THROW(generate(*model, "w1", nullptr, 0), ConfigError);
}

TEST(Model, TypeBoundaryRounds) {
  EXPECT_EQ(type_boundary(32), 20);
  EXPECT_EQ(type_boundary(8), 5);
  EXPECT_EQ(type_boundary(4), 3);
  EXPECT_EQ(type_boundary(2), 1);
}

TEST(Model, MaskCsvRoundTrip) {
  TempDir dir("model");
  const DeactivationMask mask({{1, 2}, {3, 0}, {3, 7}}, MaskProvenance::detected_type1, 9);
  mask.write_csv(dir / "m.csv");
  const auto back = DeactivationMask::read_csv(dir / "m.csv", MaskProvenance::detected_type1);
  EXPECT_EQ(back.entries(), mask.entries());
  EXPECT_EQ(back.histogram(), (std::map<int, int>{{1, 1}, {3, 2}}));
}

TEST(Model, WeightsSaveLoadRoundTrip) {
  TempDir dir("model");
  const auto model = xfrn::testing::random_decoder(12, 2, 16, 32);
  save_decoder(*model, dir / "w.xfrn");
  const auto back = load_decoder(dir / "w.xfrn");
  EXPECT_EQ(back->model_id(), model->model_id());
  EXPECT_EQ(generate(*back, "w1 w5", nullptr, 6), generate(*model, "w1 w5", nullptr, 6));
  const auto a = trace(*model, "w1 w5 w6", nullptr);
  const auto b = trace(*back, "w1 w5 w6", nullptr);
  for (int l = 0; l < 2; ++l) EXPECT_TRUE(a[l].hidden == b[l].hidden);
}

TEST(Model, AdapterConfigErrors) {
  EXPECT_THROW(parse_adapter_config("{", "x.json"), ConfigError);
  EXPECT_THROW(parse_adapter_config(R"({"weights": "w"})", "x.json"), ConfigError);
  EXPECT_THROW(parse_adapter_config(R"({"model_id": "m"})", "x.json"), ConfigError);
  EXPECT_THROW(parse_adapter_config(R"({"model_id": "m", "weights": "w", "dtype": "bf16"})", "x.json"), ConfigError);
  EXPECT_THROW(parse_adapter_config(R"({"model_id": "m", "weights": "w", "hook_points": {"nope": "x"}})", "x.json"),
               ConfigError);
  const auto ok = parse_adapter_config(R"({"model_id": "m", "weights": "w.xfrn", "max_context": 99})", "x.json");
  EXPECT_EQ(ok.max_context, 99);
  EXPECT_EQ(ok.family, "llama");
}

TEST(Model, AdapterLoadsWeightsFromCache) {
  TempDir dir("model");
  TempDir cache("cache");
  const auto model = xfrn::testing::random_decoder(13, 2, 16, 32);
  save_decoder(*model, cache / "tiny.xfrn");
  xfrn::testing::spit(dir / "adapter.json", R"({"model_id": "tiny", "weights": "tiny.xfrn", "max_context": 32})");
  ::setenv("XFRN_CACHE", cache.path().c_str(), 1);
  const auto loaded = load_adapter(load_adapter_config(dir / "adapter.json"));
  ::unsetenv("XFRN_CACHE");
  EXPECT_EQ(loaded->model_id(), "tiny");
  EXPECT_EQ(loaded->max_context(), 32);
  EXPECT_EQ(generate(*loaded, "w2", nullptr, 4), generate(*model, "w2", nullptr, 4));

  xfrn::testing::spit(dir / "missing.json", R"({"model_id": "m", "weights": "absent.xfrn"})");
  EXPECT_THROW(load_adapter(load_adapter_config(dir / "missing.json")), ModelError);
}

// ---------------------------------------------------------------------------
// Planted fixture

TEST(Fixture, SeededBuildIsBitwiseIdentical) {
  const auto a = small_fixture(21);
  const auto b = small_fixture(21);
  ASSERT_EQ(a.model->layers().size(), b.model->layers().size());
  EXPECT_TRUE(a.model->embedding() == b.model->embedding());
  for (std::size_t l = 0; l < a.model->layers().size(); ++l) {
    EXPECT_TRUE(a.model->layers()[l].gate == b.model->layers()[l].gate);
    EXPECT_TRUE(a.model->layers()[l].up == b.model->layers()[l].up);
    EXPECT_TRUE(a.model->layers()[l].down == b.model->layers()[l].down);
  }
  EXPECT_TRUE(a.model->lm_head() == b.model->lm_head());
  EXPECT_EQ(a.ground_truth(TransferType::type1), b.ground_truth(TransferType::type1));
  const auto c = small_fixture(22);
  EXPECT_FALSE(a.model->layers()[0].gate == c.model->layers()[0].gate);
}

TEST(Fixture, PlantedZeroHasEmptyGroundTruth) {
  FixtureOptions o;
  o.planted_per_layer = 0;
  const auto fx = build_planted_fixture(o);
  EXPECT_TRUE(fx.planted.empty());
  EXPECT_TRUE(fx.ground_truth(TransferType::type1).empty());
  EXPECT_TRUE(fx.ground_truth(TransferType::type2).empty());
}

TEST(Fixture, PlantedDirectionsAndValueRows) {
  const auto fx = build_planted_fixture(FixtureOptions{});
  const int L = fx.options.num_layers;
  const int B = type_boundary(L);
  ASSERT_FALSE(fx.planted.empty());
  for (const auto& p : fx.planted) {
    EXPECT_NEAR(p.direction.norm(), 1.0, 1e-9);
    EXPECT_GT(p.gain, 0.0);
    const Vector row = fx.model->layers()[p.id.layer - 1].down.row(p.id.index).transpose().cast<double>();
    EXPECT_LE((row - p.gain * p.direction).cwiseAbs().maxCoeff(), 1e-5);
    if (p.type == TransferType::type1) {
      EXPECT_LE(p.id.layer, B);
    } else {
      EXPECT_GT(p.id.layer, B);
    }
  }
  // planted_per_layer neurons per language in every layer.
  for (const auto& lang : fx.options.languages) {
    std::map<int, int> per_layer;
    for (const auto& id : fx.ground_truth(TransferType::type1, lang)) ++per_layer[id.layer];
    for (const auto& id : fx.ground_truth(TransferType::type2, lang)) ++per_layer[id.layer];
    EXPECT_EQ(static_cast<int>(per_layer.size()), L);
    for (const auto& [_, c] : per_layer) EXPECT_EQ(c, fx.options.planted_per_layer);
  }
}

TEST(Fixture, ValueRowsPointTowardSharedThenBack) {
  // Type-1 rows oppose the language's own offset; Type-2 rows restore it.
  const auto fx = build_planted_fixture(FixtureOptions{});
  for (const auto& c : fx.clusters) {
    if (c.language == "en") continue;
    Vector mean_all = Vector::Zero(c.mean.size());
    for (const auto& o : fx.clusters) mean_all += o.mean;
    mean_all /= static_cast<double>(fx.clusters.size());
    const Vector to_shared = mean_all - c.mean;
    for (const auto& p : fx.planted) {
      if (p.language != c.language) continue;
      const double s = p.direction.dot(to_shared);
      if (p.type == TransferType::type1) EXPECT_GT(s, 0.0);
      else EXPECT_LT(s, 0.0);
    }
  }
}

TEST(Fixture, ClustersSeparableAtLayerOne) {
  const auto fx = build_planted_fixture(FixtureOptions{});
  const auto corpus = fx.make_corpus(80, 4);
  const auto capture = [&](const std::string& lang) {
    std::vector<CaptureInput> in;
    for (std::size_t i = 0; i < corpus.size(); ++i) in.push_back({std::to_string(i), lang, corpus.sentence(i, lang)});
    Matrix m(static_cast<Eigen::Index>(in.size()), fx.model->hidden_dim());
    Eigen::Index r = 0;
    forward_capture(*fx.model, in, {CaptureKind::pre_mlp}, nullptr, [&](ActivationRecord&& rec) {
      if (rec.layer == 1) m.row(r++) = rec.pre_mlp.cast<double>().transpose();
    });
    return m;
  };
  const Matrix en = capture("en");
  for (const auto& lang : fx.options.languages) {
    if (lang == "en") continue;
    ProbeOptions po;
    po.folds = 5;
    EXPECT_GE(separability_accuracy(en, capture(lang), po), 0.99) << lang;
  }
}

TEST(Fixture, MaskingRoutingNeuronsShiftsAnswers) {
  const auto fx = build_planted_fixture(FixtureOptions{});
  ASSERT_GT(fx.qa_concepts, 0);
  const auto qa = fx.make_qa();
  GenerateOptions g;
  g.max_new_tokens = 4;
  g.stop_at_newline = true;
  int shifted = 0, correct = 0, n = 0;
  for (const auto& item : qa.items) {
    if (item.language == "en") continue;
    const DeactivationMask mask(fx.ground_truth(TransferType::type1, item.language), MaskProvenance::detected_type1);
    const auto prompt = qa_prompt(item.question, item.language);
    const auto plain = extract_answer(generate(*fx.model, prompt, nullptr, g));
    const auto masked = extract_answer(generate(*fx.model, prompt, &mask, g));
    ++n;
    correct += token_f1(plain, item.answers, item.language) == 1.0;
    shifted += plain != masked;
  }
  EXPECT_EQ(correct, n);
  EXPECT_EQ(shifted, n);
}

TEST(Fixture, RejectsDegenerateShapes) {
  EXPECT_THROW(build_planted_fixture(1, 4, 1, 32, {"en", "ja"}, 1), ConfigError);
  EXPECT_THROW(build_planted_fixture(1, 4, 64, 32, {"en"}, 1), ConfigError);
  EXPECT_THROW(build_planted_fixture(1, 4, 64, 8, {"en", "ja"}, 5), ConfigError);
  EXPECT_NO_THROW(build_planted_fixture(1, 4, 16, 32, {"en", "ja"}, 2));
}

TEST(Fixture, OptionsJsonRoundTrip) {
  FixtureOptions o;
  o.seed = 77;
  o.num_layers = 6;
  o.languages = {"en", "it"};
  const auto back = parse_fixture_options(fixture_options_json(o));
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.num_layers, 6);
  EXPECT_EQ(back.languages, o.languages);
  EXPECT_THROW(parse_fixture_options(R"({"sead": 1})"), ConfigError);
}
