#include "xfrn/detector.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace xfrn {

namespace {

std::string fmt(double v) { return format_number(v); }

std::string target_tag(TransferType type, const std::string& language) {
  return type == TransferType::type1 ? "to_shared" : "to_language:" + language;
}

}  // namespace

double layer_score(const Vector& pre_mlp, const Vector& centroid) {
  const double c = cosine(pre_mlp, centroid);
  if (!is_defined(c)) throw DataError("layer score undefined for a zero vector");
  return c;
}

double neuron_score(const Vector& pre_mlp, double alpha, const Vector& value, const Vector& centroid) {
  const Vector shifted = pre_mlp + alpha * value;
  const double c = cosine(shifted, centroid);
  if (!is_defined(c)) throw DataError("neuron score undefined: shifted vector or centroid is zero");
  return c;
}

TransferScore transfer_score(const Matrix& pre, const Vector& alpha, const Vector& value, const Vector& centroid) {
  if (pre.rows() != alpha.size()) throw DataError("transfer score: sample count mismatch");
  if (pre.rows() == 0) throw DataError("transfer score needs at least one sample");
  Matrix a(alpha.size(), 1);
  a.col(0) = alpha;
  Matrix v(1, value.size());
  v.row(0) = value.transpose();
  return score_layer(pre, a, v, centroid).front();
}

std::vector<TransferScore> score_layer(const Matrix& P, const Matrix& A, const Matrix& V, const Vector& C) {
  const Eigen::Index n = P.rows();
  const Eigen::Index dm = A.cols();
  if (A.rows() != n || V.rows() != dm || V.cols() != P.cols() || C.size() != P.cols()) {
    throw DataError("score_layer: shape mismatch");
  }
  const double cn = C.norm();
  if (cn == 0.0) throw DataError("target centroid is the zero vector");
  const Matrix pV = P * V.transpose();  // n x d_m
  const Vector pC = P * C;
  const Vector vC = V * C;
  const Vector pp = P.rowwise().squaredNorm();
  const Vector vv = V.rowwise().squaredNorm();

  std::vector<TransferScore> out(static_cast<std::size_t>(dm));
  std::vector<double> sum(static_cast<std::size_t>(dm), 0.0);
  for (Eigen::Index k = 0; k < n; ++k) {
    if (pp[k] == 0.0) {
      for (auto& t : out) ++t.excluded;
      continue;
    }
    const double lk = std::clamp(pC[k] / (std::sqrt(pp[k]) * cn), -1.0, 1.0);
    for (Eigen::Index i = 0; i < dm; ++i) {
      const double a = A(k, i);
      const double num = pC[k] + a * vC[i];
      const double den2 = pp[k] + 2.0 * a * pV(k, i) + a * a * vv[i];
      auto& t = out[static_cast<std::size_t>(i)];
      if (!(den2 > 1e-24 * (pp[k] + a * a * vv[i]))) {
        ++t.excluded;
        continue;
      }
      const double nk = std::clamp(num / (std::sqrt(den2) * cn), -1.0, 1.0);
      sum[static_cast<std::size_t>(i)] += nk - lk;
      ++t.used;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].used > 0) out[i].score = sum[i] / out[i].used;
  return out;
}

void rank_in_place(std::vector<ScoredNeuron>& scored) {
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredNeuron& a, const ScoredNeuron& b) {
    const bool da = is_defined(a.score), db = is_defined(b.score);
    if (da != db) return da;
    if (da && a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
}

std::set<NeuronId> top_per_layer(const std::vector<ScoredNeuron>& ranked, int k) {
  std::map<int, int> taken;
  std::set<NeuronId> out;
  for (const auto& s : ranked) {
    if (taken[s.id.layer] < k) {
      out.insert(s.id);
      ++taken[s.id.layer];
    }
  }
  return out;
}

std::pair<int, int> candidate_layers(TransferType type, int num_layers) {
  const int b = type_boundary(num_layers);
  return type == TransferType::type1 ? std::pair{1, b} : std::pair{b + 1, num_layers};
}

std::set<NeuronId> DetectionResult::neurons() const {
  std::set<NeuronId> out;
  for (const auto& r : rows) out.insert(r.neuron);
  return out;
}

std::map<int, int> DetectionResult::layer_histogram() const {
  std::map<int, int> h;
  for (const auto& r : rows) ++h[r.neuron.layer];
  return h;
}

void DetectionResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "# model_id=" << model_id << "\n# language=" << language << "\n# type=" << to_string(type)
      << "\n# target=" << target << "\n# split=" << split << "\n# top_n=" << top_n << "\n# population=" << population
      << "\n# candidates=" << candidates
      << "\n# top_n_exceeds_candidates=" << (top_n_exceeds_candidates ? "true" : "false") << '\n';
  static const std::set<std::string> fixed = {"model_id", "language", "type", "target", "split", "top_n",
                                              "population", "candidates", "top_n_exceeds_candidates"};
  for (const auto& [k, v] : provenance)
    if (!fixed.count(k)) out << "# " << k << '=' << v << '\n';
  out << "layer,index,score,rank\n";
  for (const auto& r : rows) out << r.neuron.layer << ',' << r.neuron.index << ',' << fmt(r.score) << ',' << r.rank << '\n';
}

void DetectionResult::write_json(const std::filesystem::path& path) const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"layer", r.neuron.layer},
                         {"index", r.neuron.index},
                         {"score", number_or_null(r.score)},
                         {"rank", r.rank},
                         {"target", r.target}});
  }
  json j = {{"model_id", model_id},
            {"language", language},
            {"type", std::string(to_string(type))},
            {"target", target},
            {"split", split},
            {"top_n", top_n},
            {"population", population},
            {"candidates", candidates},
            {"top_n_exceeds_candidates", top_n_exceeds_candidates},
            {"excluded_samples", excluded_samples},
            {"pair_indices", pair_indices},
            {"provenance", provenance},
            {"rows", rows_json}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

DetectionResult DetectionResult::read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("detection result '" + path.string() + "' not found");
  DetectionResult r;
  try {
    const json j = json::parse(in);
    r.model_id = j.at("model_id").get<std::string>();
    r.language = j.at("language").get<std::string>();
    r.type = parse_transfer_type(j.at("type").get<std::string>());
    r.target = j.at("target").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.top_n = j.at("top_n").get<int>();
    r.population = j.at("population").get<long long>();
    r.candidates = j.at("candidates").get<long long>();
    r.top_n_exceeds_candidates = j.at("top_n_exceeds_candidates").get<bool>();
    r.excluded_samples = j.at("excluded_samples").get<int>();
    r.pair_indices = j.at("pair_indices").get<std::vector<int>>();
    r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back(NeuronScoreRow{NeuronId{row.at("layer").get<int>(), row.at("index").get<int>()},
                                      number_from(row.at("score")), row.at("target").get<std::string>(),
                                      row.at("rank").get<int>()});
    }
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
  return r;
}

DetectionInputs score_candidates(const CaptureRun& run, const ValueVectorTable& values, const std::string& language,
                                 TransferType type, const std::string& split) {
  const auto& m = run.manifest();
  for (auto kind : {CaptureKind::pre_mlp, CaptureKind::mlp_activation, CaptureKind::hidden_state}) {
    if (!m.capture_kinds.count(kind)) {
      throw DataError("detection needs '" + std::string(to_string(kind)) + "' captures in '" + run.path().string() + "'");
    }
  }
  if (values.num_layers() != m.num_layers || values.mlp_dim() != m.mlp_dim || values.hidden_dim() != m.hidden_dim) {
    throw DataError("value-vector table does not match the run's model dimensions");
  }
  const auto [first, last] = candidate_layers(type, m.num_layers);
  DetectionInputs out;
  bool have_pairs = false;
  for (int l = first; l <= last; ++l) {
    Vector C;
    if (type == TransferType::type1) {
      const auto al = run.load_aligned(l, CaptureKind::hidden_state, "en", language, split);
      if (al.pair_indices.empty()) {
        throw DataError("no aligned en/" + language + " " + split + " samples at layer " + std::to_string(l));
      }
      C = centroid_shared(to_matrix(al.first), to_matrix(al.second));
    } else {
      const auto hs = run.load_slice(l, CaptureKind::hidden_state, language, split);
      if (hs.rows.rows() == 0) throw DataError("no " + language + " " + split + " samples at layer " + std::to_string(l));
      C = centroid(to_matrix(hs.rows));
    }
    const auto pre = run.load_slice(l, CaptureKind::pre_mlp, language, split);
    const auto act = run.load_slice(l, CaptureKind::mlp_activation, language, split);
    if (pre.sample_ids != act.sample_ids) throw DataError("pre-MLP and activation captures are not aligned");
    if (!have_pairs) {
      for (const auto& id : pre.sample_ids) out.pair_indices.push_back(run.samples().at(id).pair_index);
      std::sort(out.pair_indices.begin(), out.pair_indices.end());
      have_pairs = true;
    }
    const auto scores = score_layer(to_matrix(pre.rows), to_matrix(act.rows),
                                    to_matrix(values.layers[static_cast<std::size_t>(l - 1)]), C);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      out.ranked.push_back(ScoredNeuron{NeuronId{l, static_cast<int>(i)}, scores[i].score});
      out.excluded_samples += scores[i].excluded;
    }
  }
  rank_in_place(out.ranked);
  return out;
}

DetectionResult detect_transfer_neurons(const CaptureRun& run, const ValueVectorTable& values,
                                        const std::string& language, TransferType type, int top_n,
                                        const std::string& split) {
  if (top_n < 1) throw ConfigError("top_n must be positive");
  const auto inputs = score_candidates(run, values, language, type, split);
  DetectionResult r;
  r.model_id = run.manifest().model_id;
  r.language = language;
  r.type = type;
  r.target = target_tag(type, language);
  r.split = split;
  r.top_n = top_n;
  r.population = static_cast<long long>(run.manifest().num_layers) * run.manifest().mlp_dim;
  r.candidates = static_cast<long long>(inputs.ranked.size());
  r.top_n_exceeds_candidates = top_n > r.candidates;
  r.excluded_samples = inputs.excluded_samples;
  r.pair_indices = inputs.pair_indices;
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(top_n), inputs.ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    r.rows.push_back(NeuronScoreRow{inputs.ranked[i].id, inputs.ranked[i].score, r.target, static_cast<int>(i + 1)});
  }
  for (const auto& [k, v] : run.metadata()) r.provenance["run." + k] = v;
  return r;
}

std::vector<double> eta_squared_columns(const Matrix& alpha, const std::vector<int>& labels) {
  const Eigen::Index n = alpha.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw DataError("eta^2: label count mismatch");
  Eigen::Index n1 = 0;
  for (int l : labels) n1 += l == 1;
  const Eigen::Index n0 = n - n1;
  if (n1 == 0 || n0 == 0) throw DataError("eta^2 needs samples from both label groups");
  Vector s1 = Vector::Zero(alpha.cols()), s0 = Vector::Zero(alpha.cols());
  for (Eigen::Index k = 0; k < n; ++k) (labels[static_cast<std::size_t>(k)] == 1 ? s1 : s0) += alpha.row(k).transpose();
  const Vector m1 = s1 / static_cast<double>(n1);
  const Vector m0 = s0 / static_cast<double>(n0);
  const Vector m = (s1 + s0) / static_cast<double>(n);
  Vector sw = Vector::Zero(alpha.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const Vector& mk = labels[static_cast<std::size_t>(k)] == 1 ? m1 : m0;
    sw += (alpha.row(k).transpose() - mk).array().square().matrix();
  }
  const Vector sb = static_cast<double>(n1) * (m1 - m).array().square().matrix() +
                    static_cast<double>(n0) * (m0 - m).array().square().matrix();
  std::vector<double> out(static_cast<std::size_t>(alpha.cols()));
  for (Eigen::Index i = 0; i < alpha.cols(); ++i) {
    const double st = sb[i] + sw[i];
    out[static_cast<std::size_t>(i)] = st == 0.0 ? 0.0 : std::clamp(sb[i] / st, 0.0, 1.0);
  }
  return out;
}

void LanguageSpecificResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "# target=" << target << "\n# threshold=" << fmt(threshold) << "\n# samples=" << samples << '\n';
  out << "layer,index,eta2\n";
  for (const auto& [id, e] : neurons) out << id.layer << ',' << id.index << ',' << fmt(e) << '\n';
}

LanguageSpecificResult detect_language_specific_neurons(const CaptureRun& run, const std::string& target,
                                                        double threshold, const std::optional<std::string>& split,
                                                        const std::map<std::string, std::string>* label_map) {
  const auto langs = run.languages();
  if (langs.size() < 2) throw DataError("language-specific detection needs at least two captured languages");
  if (!langs.count(target)) throw DataError("target language '" + target + "' not in run");
  if (!run.manifest().capture_kinds.count(CaptureKind::mlp_activation)) {
    throw DataError("language-specific detection needs mlp_activation captures");
  }
  auto group_of = [&](const std::string& lang) {
    if (!label_map) return lang;
    auto it = label_map->find(lang);
    return it == label_map->end() ? lang : it->second;
  };
  const std::string target_group = group_of(target);
  LanguageSpecificResult r;
  r.target = target;
  r.threshold = threshold;
  for (int l = 1; l <= run.manifest().num_layers; ++l) {
    const auto sl = run.load_slice(l, CaptureKind::mlp_activation, std::nullopt, split);
    std::vector<int> labels;
    for (const auto& id : sl.sample_ids) labels.push_back(group_of(run.samples().at(id).language) == target_group);
    r.samples = static_cast<int>(labels.size());
    const auto eta = eta_squared_columns(to_matrix(sl.rows), labels);
    for (std::size_t i = 0; i < eta.size(); ++i) {
      if (eta[i] >= threshold) {
        r.neurons.emplace_back(NeuronId{l, static_cast<int>(i)}, eta[i]);
        ++r.histogram[l];
      }
    }
  }
  return r;
}

}  // namespace xfrn
