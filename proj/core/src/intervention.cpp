#include "xfrn/intervention.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace xfrn {

namespace {

std::string fmt(double v) { return format_number(v); }

struct Captured {
  std::vector<Matrix> en_hs, l2_hs, en_act, l2_act;
};

Captured capture_pair(const ModelAdapter& model, const PairedSentences& s, bool need_act, const DeactivationMask* mask) {
  Captured c;
  c.en_hs = capture_layers(model, s.en, CaptureKind::hidden_state, mask);
  c.l2_hs = capture_layers(model, s.l2, CaptureKind::hidden_state, mask);
  if (need_act) {
    c.en_act = capture_layers(model, s.en, CaptureKind::mlp_activation, mask);
    c.l2_act = capture_layers(model, s.l2, CaptureKind::mlp_activation, mask);
  }
  return c;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(static_cast<Eigen::Index>(perm.size()), m.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(perm[k]));
  return out;
}

std::vector<SimilarityCurve> compute_curves(const Captured& c, const PairedSentences& s, const RemeasureOptions& opt) {
  std::vector<SimilarityCurve> out;
  const auto& m = opt.metrics;
  auto gap = [&](const std::vector<Matrix>& en, const std::vector<Matrix>& l2, GapKind kind) {
    PairedLayers par, non;
    for (std::size_t l = 0; l < en.size(); ++l) {
      par.first.push_back(en[l]);
      par.second.push_back(l2[l]);
      non.first.push_back(en[l]);
      non.second.push_back(permute_rows(l2[l], s.nonparallel));
    }
    return similarity_gap_curve(par, non, kind);
  };
  if (m.count(CurveMetric::hs_parallel) || m.count(CurveMetric::hs_nonparallel)) {
    auto [p, n] = gap(c.en_hs, c.l2_hs, GapKind::hidden_state);
    if (m.count(CurveMetric::hs_parallel)) out.push_back(p);
    if (m.count(CurveMetric::hs_nonparallel)) out.push_back(n);
  }
  if (m.count(CurveMetric::act_parallel) || m.count(CurveMetric::act_nonparallel)) {
    auto [p, n] = gap(c.en_act, c.l2_act, GapKind::mlp_activation);
    if (m.count(CurveMetric::act_parallel)) out.push_back(p);
    if (m.count(CurveMetric::act_nonparallel)) out.push_back(n);
  }
  if (m.count(CurveMetric::centroid_cos)) {
    std::vector<Vector> ca, cb;
    for (std::size_t l = 0; l < c.en_hs.size(); ++l) {
      ca.push_back(centroid(c.en_hs[l]));
      cb.push_back(centroid(c.l2_hs[l]));
    }
    out.push_back(centroid_distance_curve(ca, cb));
  }
  if (m.count(CurveMetric::mutual_knn)) {
    SimilarityCurve k;
    k.metric = CurveMetric::mutual_knn;
    k.metadata["k"] = std::to_string(opt.knn_k);
    for (std::size_t l = 0; l < c.en_hs.size(); ++l) k.values.push_back(mutual_knn_alignment(c.en_hs[l], c.l2_hs[l], opt.knn_k));
    out.push_back(k);
  }
  if (m.count(CurveMetric::cevr_dim)) {
    SimilarityCurve k;
    k.metric = CurveMetric::cevr_dim;
    k.metadata["threshold"] = fmt(opt.cevr_threshold);
    for (const auto& h : c.l2_hs) k.values.push_back(cevr_dimensionality(h, opt.cevr_threshold));
    out.push_back(k);
  }
  for (auto& curve : out) {
    curve.metadata["languages"] = "en-" + s.language;
    curve.metadata["split"] = "test";
  }
  return out;
}

double layer_avg_gap(const InterventionReport& r, const std::vector<SimilarityCurve>& curves) {
  const auto* p = r.find(curves, CurveMetric::hs_parallel);
  const auto* n = r.find(curves, CurveMetric::hs_nonparallel);
  if (!p || !n) return kUndefined;
  double sum = 0;
  int count = 0;
  for (std::size_t l = 0; l < p->values.size(); ++l) {
    const double g = p->values[l] - n->values[l];
    if (is_defined(g)) {
      sum += g;
      ++count;
    }
  }
  return count == 0 ? kUndefined : sum / count;
}

}  // namespace

DeactivationMask baseline_mask(const DeactivationMask& reference, int mlp_dim, std::uint64_t seed) {
  if (reference.empty()) throw ConfigError("baseline mask needs a non-empty reference");
  Rng root(seed);
  std::set<NeuronId> entries;
  for (const auto& [layer, indices] : reference.by_layer()) {
    const int count = static_cast<int>(indices.size());
    if (count > mlp_dim - count) {
      throw ConfigError("layer " + std::to_string(layer) + ": reference has " + std::to_string(count) +
                        " neurons, only " + std::to_string(mlp_dim - count) + " remain to sample from");
    }
    const std::set<int> taken(indices.begin(), indices.end());
    std::vector<int> pool;
    for (int i = 0; i < mlp_dim; ++i)
      if (!taken.count(i)) pool.push_back(i);
    Rng rng = root.fork(static_cast<std::uint64_t>(layer));
    // Partial Fisher-Yates: the first `count` slots are a uniform sample.
    for (int t = 0; t < count; ++t) {
      const std::size_t j = static_cast<std::size_t>(t) + rng.uniform_index(pool.size() - static_cast<std::size_t>(t));
      std::swap(pool[static_cast<std::size_t>(t)], pool[j]);
      entries.insert(NeuronId{layer, pool[static_cast<std::size_t>(t)]});
    }
  }
  return DeactivationMask(std::move(entries), MaskProvenance::baseline_random, seed);
}

std::vector<Matrix> capture_layers(const ModelAdapter& model, const std::vector<CaptureInput>& inputs,
                                   CaptureKind kind, const DeactivationMask* mask) {
  const int L = model.num_layers();
  const int dim = kind == CaptureKind::mlp_activation ? model.mlp_dim() : model.hidden_dim();
  std::vector<Matrix> out(static_cast<std::size_t>(L), Matrix(static_cast<Eigen::Index>(inputs.size()), dim));
  std::map<std::string, Eigen::Index> row;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!row.emplace(inputs[i].sample_id, static_cast<Eigen::Index>(i)).second) {
      throw DataError("duplicate sample_id '" + inputs[i].sample_id + "'");
    }
  }
  forward_capture(model, inputs, {kind}, mask, [&](ActivationRecord&& rec) {
    out[static_cast<std::size_t>(rec.layer - 1)].row(row.at(rec.sample_id)) = rec.get(kind).cast<double>().transpose();
  });
  return out;
}

const SimilarityCurve* InterventionReport::find(const std::vector<SimilarityCurve>& curves, CurveMetric metric) const {
  for (const auto& c : curves)
    if (c.metric == metric) return &c;
  return nullptr;
}

double InterventionReport::gap_before() const { return layer_avg_gap(*this, before); }
double InterventionReport::gap_after() const { return layer_avg_gap(*this, after); }

void InterventionReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "# condition=" << condition << "\n# language=" << language << "\n# mask_provenance=" << to_string(mask.provenance())
      << "\n# mask_size=" << mask.size() << "\n# mask_seed=" << (mask.seed() ? std::to_string(*mask.seed()) : "")
      << "\n# split=test\n";
  for (const auto& [k, v] : provenance) out << "# " << k << '=' << v << '\n';
  out << "layer,metric,before,after,delta\n";
  for (std::size_t c = 0; c < before.size(); ++c) {
    const auto& b = before[c];
    const auto& a = after[c];
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      const double d = a.values[i] - b.values[i];
      out << (b.first_layer + static_cast<int>(i)) << ',' << to_string(b.metric) << ',' << fmt(b.values[i]) << ','
          << fmt(a.values[i]) << ',' << fmt(d) << '\n';
    }
  }
}

void InterventionReport::write_json(const std::filesystem::path& path) const {
  auto curves = [](const std::vector<SimilarityCurve>& cs) {
    json arr = json::array();
    for (const auto& c : cs) arr.push_back(json::parse(c.to_json()));
    return arr;
  };
  json entries = json::array();
  for (const auto& e : mask.entries()) entries.push_back({e.layer, e.index});
  json j = {{"condition", condition},
            {"language", language},
            {"split", "test"},
            {"test_pair_indices", test_pair_indices},
            {"mask",
             {{"provenance", std::string(to_string(mask.provenance()))},
              {"seed", mask.seed() ? json(*mask.seed()) : json(nullptr)},
              {"entries", entries}}},
            {"gap_before", number_or_null(gap_before())},
            {"gap_after", number_or_null(gap_after())},
            {"before", curves(before)},
            {"after", curves(after)},
            {"provenance", provenance}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

InterventionReport remeasure_under_mask(const ModelAdapter& model, const PairedSentences& s,
                                        const DeactivationMask& mask, const std::string& condition,
                                        const RemeasureOptions& opt) {
  mask.validate(model.num_layers(), model.mlp_dim());
  if (s.en.size() != s.l2.size() || s.en.empty()) throw DataError("re-measurement needs aligned, non-empty sentence lists");
  if (s.nonparallel.size() != s.en.size()) throw DataError("non-parallel pairing length mismatch");
  const bool need_act = opt.metrics.count(CurveMetric::act_parallel) || opt.metrics.count(CurveMetric::act_nonparallel);
  InterventionReport r;
  r.condition = condition;
  r.language = s.language;
  r.mask = mask;
  r.test_pair_indices = s.pair_indices;
  const Captured plain = capture_pair(model, s, need_act, nullptr);
  const Captured masked = capture_pair(model, s, need_act, &mask);
  r.before = compute_curves(plain, s, opt);
  r.after = compute_curves(masked, s, opt);
  for (auto& c : r.before) c.metadata["condition"] = "none";
  for (auto& c : r.after) c.metadata["condition"] = condition;
  return r;
}

CrossLingualEffect cross_lingual_effect(const ModelAdapter& model, const std::vector<CaptureInput>& l2_sentences,
                                        const DeactivationMask& l1_mask, const DeactivationMask& l2_mask) {
  l1_mask.validate(model.num_layers(), model.mlp_dim());
  l2_mask.validate(model.num_layers(), model.mlp_dim());
  if (l2_sentences.empty()) throw DataError("cross-lingual effect needs sentences");
  auto centroids = [&](const DeactivationMask* mask) {
    std::vector<Vector> out;
    for (const auto& m : capture_layers(model, l2_sentences, CaptureKind::hidden_state, mask)) out.push_back(centroid(m));
    return out;
  };
  const auto base = centroids(nullptr);
  CrossLingualEffect e;
  e.cross = centroid_distance_curve(base, centroids(&l1_mask));
  e.own = l1_mask.entries() == l2_mask.entries() ? e.cross : centroid_distance_curve(base, centroids(&l2_mask));
  e.cross.metadata["condition"] = "cross";
  e.own.metadata["condition"] = "own";
  return e;
}

}  // namespace xfrn
