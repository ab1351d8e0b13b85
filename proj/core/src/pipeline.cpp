#include "xfrn/pipeline.hpp"

#include "json_util.hpp"
#include "xfrn/corpus.hpp"
#include "xfrn/detector.hpp"
#include "xfrn/error.hpp"
#include "xfrn/evaluation.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/geometry.hpp"
#include "xfrn/intervention.hpp"
#include "xfrn/report.hpp"
#include "xfrn/rng.hpp"
#include "xfrn/stats.hpp"
#include "xfrn/store.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

namespace xfrn {

namespace fs = std::filesystem;

namespace {

constexpr CurveMetric kAllCurveMetrics[] = {
    CurveMetric::hs_parallel,  CurveMetric::hs_nonparallel, CurveMetric::act_parallel,
    CurveMetric::act_nonparallel, CurveMetric::centroid_cos, CurveMetric::mutual_knn,
    CurveMetric::cevr_dim,     CurveMetric::trajectory_cos, CurveMetric::separability_acc,
    CurveMetric::neuron_overlap};
constexpr const char* kFigureOnly[] = {"neuron_distribution", "qa_scatter"};

// Curves that can be recomputed under a mask from captured sentences.
const std::set<CurveMetric> kRemeasurable = {CurveMetric::hs_parallel,  CurveMetric::hs_nonparallel,
                                             CurveMetric::act_parallel, CurveMetric::act_nonparallel,
                                             CurveMetric::centroid_cos, CurveMetric::mutual_knn,
                                             CurveMetric::cevr_dim};

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Independent, order-free seed for a named purpose.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view purpose) {
  Rng root(seed);
  return root.fork(fnv1a64(purpose)).next();
}

std::string sample_id(int pair_index, const std::string& language) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%07d.", pair_index);
  return buf + language;
}

std::string fmt(double v) { return format_number(v); }

std::string stem_name(TransferType type, const std::string& language) {
  return std::string(to_string(type)) + "_" + language;
}

fs::path ensure_dir(const ExperimentConfig& cfg, const char* name) {
  const fs::path d = cfg.output_dir / name;
  fs::create_directories(d);
  return d;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

void write_header(std::ostream& out, const std::map<std::string, std::string>& provenance) {
  for (const auto& [k, v] : provenance) out << "# " << k << '=' << v << '\n';
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
}

std::vector<TransferType> types_for(const CommandOptions& o) {
  if (o.type) return {*o.type};
  return {TransferType::type1, TransferType::type2};
}

std::vector<std::string> languages_for(const ExperimentConfig& cfg, const CommandOptions& o) {
  if (o.language) {
    if (std::find(cfg.languages.begin(), cfg.languages.end(), *o.language) == cfg.languages.end()) {
      throw ConfigError("language '" + *o.language + "' is not in the config's languages");
    }
    return {*o.language};
  }
  return cfg.second_languages();
}

std::set<CurveMetric> curve_metrics(const ExperimentConfig& cfg) {
  std::set<CurveMetric> out;
  for (auto m : kAllCurveMetrics)
    if (cfg.wants(to_string(m))) out.insert(m);
  return out;
}

// ---------------------------------------------------------------------------
// Split and run access

struct SplitState {
  ParallelCorpus corpus;
  SplitPlan plan;
};

SplitState load_split(const ExperimentConfig& cfg, bool check_recorded) {
  SplitState s;
  s.corpus = load_parallel_tsv(cfg.corpus, cfg.languages);
  s.corpus.validate();
  std::vector<int> ids;
  for (const auto& p : s.corpus.pairs) ids.push_back(p.pair_index);
  s.plan = split_50_50(ids, cfg.split_seed);
  check_split_hygiene(s.plan.train_ids, s.plan.test_ids);
  const fs::path recorded = cfg.output_dir / "runs" / "split.json";
  if (check_recorded && fs::exists(recorded)) {
    const json j = read_json_file(recorded);
    if (j.at("train_ids").get<std::vector<int>>() != s.plan.train_ids ||
        j.at("test_ids").get<std::vector<int>>() != s.plan.test_ids) {
      throw DataError("'" + recorded.string() + "' does not match the corpus and split_seed; re-run extract");
    }
  }
  return s;
}

CaptureRun open_run(const ExperimentConfig& cfg, const char* split) {
  const fs::path p = cfg.output_dir / "runs" / (std::string(split) + ".xfrn");
  if (!fs::exists(p)) throw DataError("capture run '" + p.string() + "' is missing; run extract first");
  return CaptureRun::open(p);
}

ValueVectorTable open_values(const ExperimentConfig& cfg) {
  const fs::path p = cfg.output_dir / "runs" / "values.xfrn";
  if (!fs::exists(p)) throw DataError("value-vector file '" + p.string() + "' is missing; run extract first");
  return read_value_vectors(p);
}

// Loads the train run and value vectors on first use.
class Detections {
 public:
  explicit Detections(const ExperimentConfig& cfg) : cfg_(cfg) {}

  // Reuses detect/<type>_<lang>.json when it matches the model and top_n;
  // otherwise detects and writes it.
  DetectionResult get(TransferType type, const std::string& language, CommandResult& result) {
    const fs::path stem = cfg_.output_dir / "detect" / stem_name(type, language);
    fs::path json_path = stem;
    json_path += ".json";
    if (fs::exists(json_path)) {
      auto r = DetectionResult::read_json(json_path);
      if (r.top_n == cfg_.top_n && r.model_id == cfg_.model.model_id &&
          r.provenance.count("config_hash") && r.provenance.at("config_hash") == cfg_.config_hash) {
        return r;
      }
    }
    return detect(type, language, result);
  }

  DetectionResult detect(TransferType type, const std::string& language, CommandResult& result) {
    if (!run_) {
      run_.emplace(open_run(cfg_, "train"));
      values_.emplace(open_values(cfg_));
    }
    auto r = detect_transfer_neurons(*run_, *values_, language, type, cfg_.top_n, "train");
    for (const auto& [k, v] : cfg_.provenance()) r.provenance[k] = v;
    const fs::path dir = ensure_dir(cfg_, "detect");
    const std::string name = stem_name(type, language);
    r.write_csv(dir / (name + ".csv"));
    r.write_json(dir / (name + ".json"));
    const DeactivationMask mask(r.neurons(),
                                type == TransferType::type1 ? MaskProvenance::detected_type1 : MaskProvenance::detected_type2);
    mask.write_csv(dir / (name + "_mask.csv"));
    result.outputs.push_back(dir / (name + ".csv"));
    result.outputs.push_back(dir / (name + ".json"));
    result.outputs.push_back(dir / (name + "_mask.csv"));
    if (r.top_n_exceeds_candidates) {
      result.warnings.push_back(name + ": top_n " + std::to_string(r.top_n) + " exceeds the " +
                                std::to_string(r.candidates) + " candidate neurons; all were kept");
    }
    return r;
  }

 private:
  const ExperimentConfig& cfg_;
  std::optional<CaptureRun> run_;
  std::optional<ValueVectorTable> values_;
};

DeactivationMask mask_of(const DetectionResult& r) {
  return DeactivationMask(r.neurons(), r.type == TransferType::type1 ? MaskProvenance::detected_type1
                                                                    : MaskProvenance::detected_type2);
}

DeactivationMask baseline_for(const DeactivationMask& reference, int mlp_dim, std::uint64_t seed) {
  if (reference.empty()) return DeactivationMask({}, MaskProvenance::baseline_random, seed);
  return baseline_mask(reference, mlp_dim, seed);
}

std::vector<CaptureInput> test_inputs(const SplitState& s, const std::string& language) {
  const std::set<int> test(s.plan.test_ids.begin(), s.plan.test_ids.end());
  std::vector<std::pair<int, const ParallelPair*>> rows;
  for (const auto& p : s.corpus.pairs)
    if (test.count(p.pair_index)) rows.emplace_back(p.pair_index, &p);
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<CaptureInput> out;
  for (const auto& [idx, p] : rows) {
    auto it = p->sentences.find(language);
    if (it == p->sentences.end()) throw DataError("pair " + std::to_string(idx) + " has no '" + language + "' sentence");
    out.push_back(CaptureInput{sample_id(idx, language), language, it->second});
  }
  return out;
}

PairedSentences paired_test(const SplitState& s, const std::string& language, std::uint64_t seed) {
  PairedSentences p;
  p.language = language;
  p.en = test_inputs(s, "en");
  p.l2 = test_inputs(s, language);
  p.pair_indices = s.plan.test_ids;
  std::sort(p.pair_indices.begin(), p.pair_indices.end());
  p.nonparallel = seeded_derangement(p.en.size(), sub_seed(seed, "nonparallel:" + language));
  return p;
}

// ---------------------------------------------------------------------------
// Small CSV reader for files this module wrote (quoted fields allowed).

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          fields.back() += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          fields.back() += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.emplace_back();
      } else {
        fields.back() += c;
      }
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::vector<SimilarityCurve> curves_from_json(const json& arr) {
  std::vector<SimilarityCurve> out;
  for (const auto& c : arr) out.push_back(SimilarityCurve::from_json(c.dump()));
  return out;
}

json curves_to_json(const std::vector<SimilarityCurve>& curves) {
  json arr = json::array();
  for (const auto& c : curves) arr.push_back(json::parse(c.to_json()));
  return arr;
}

double number_or(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
  return j[key].get<double>();
}

int int_or(const json& j, const char* key, int fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
  return j[key].get<int>();
}

std::uint64_t seed_or(const json& j, const char* key) {
  if (!j.contains(key)) return 0;
  if (!j[key].is_number_integer() || j[key].get<long long>() < 0) {
    throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
  }
  return j[key].get<std::uint64_t>();
}

std::vector<double> numbers_or(const json& j, const char* key, std::vector<double> fallback) {
  if (!j.contains(key)) return fallback;
  std::vector<double> out;
  if (!j[key].is_array()) throw ConfigError(std::string("config key '") + key + "' must be a list of numbers");
  for (const auto& v : j[key]) {
    if (!v.is_number()) throw ConfigError(std::string("config key '") + key + "' must be a list of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

fs::path resolve_path(const fs::path& p, const fs::path& base) { return p.is_absolute() ? p : base / p; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string fnv1a64_hex(std::string_view bytes) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::vector<std::string> ExperimentConfig::second_languages() const {
  std::vector<std::string> out;
  for (const auto& l : languages)
    if (l != "en") out.push_back(l);
  return out;
}

std::map<std::string, std::string> ExperimentConfig::provenance() const {
  return {{"config_hash", config_hash},
          {"model_id", model.model_id},
          {"seed", std::to_string(seed)},
          {"split_seed", std::to_string(split_seed)},
          {"top_n", std::to_string(top_n)}};
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file '" + path.string() + "' not found");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text, path);
}

ExperimentConfig parse_experiment_config(std::string_view text, const fs::path& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + source.string() + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + source.string() + "' must be a JSON object");
  static const std::set<std::string> known = {
      "model", "corpus", "qa", "languages", "split_seed", "seed", "top_n", "thresholds", "metrics",
      "capture_kinds", "knn_k", "cevr_threshold", "probe_folds", "trajectory_m", "max_new_tokens", "family_map",
      "output_dir"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
  }
  ExperimentConfig c;
  c.source = source;
  c.config_hash = fnv1a64_hex(text);
  const fs::path base = source.has_parent_path() ? source.parent_path() : fs::path(".");

  if (!j.contains("model")) throw ConfigError("config: missing key 'model'");
  try {
    if (j["model"].is_string()) {
      const fs::path mp = resolve_path(j["model"].get<std::string>(), base);
      if (!fs::exists(mp)) throw ConfigError("model config '" + mp.string() + "' not found");
      c.model = load_adapter_config(mp);
    } else if (j["model"].is_object()) {
      c.model = parse_adapter_config(j["model"].dump(), source);
    } else {
      throw ConfigError("config key 'model' must be a path or an object");
    }

    if (!j.contains("corpus") || !j["corpus"].is_string()) throw ConfigError("config: missing key 'corpus'");
    c.corpus = resolve_path(j["corpus"].get<std::string>(), base);
    if (!fs::exists(c.corpus)) throw ConfigError("corpus file '" + c.corpus.string() + "' not found");
    if (j.contains("qa")) {
      c.qa = resolve_path(j["qa"].get<std::string>(), base);
      if (!fs::exists(*c.qa)) throw ConfigError("QA file '" + c.qa->string() + "' not found");
    }
    if (!j.contains("languages")) throw ConfigError("config: missing key 'languages'");
    c.languages = j["languages"].get<std::vector<std::string>>();
    if (std::find(c.languages.begin(), c.languages.end(), "en") == c.languages.end()) {
      throw ConfigError("config: 'languages' must include en");
    }
    if (std::set<std::string>(c.languages.begin(), c.languages.end()).size() != c.languages.size()) {
      throw ConfigError("config: 'languages' has duplicates");
    }
    c.split_seed = seed_or(j, "split_seed");
    c.seed = seed_or(j, "seed");
    c.top_n = int_or(j, "top_n", c.top_n);
    if (c.top_n < 1) throw ConfigError("config: 'top_n' must be positive");
    if (j.contains("thresholds")) {
      const auto& t = j["thresholds"];
      static const std::set<std::string> tk = {"eta", "alpha", "language_specific", "qa"};
      for (const auto& [k, _] : t.items())
        if (!tk.count(k)) throw ConfigError("config: unknown key 'thresholds." + k + "'");
      c.eta_thresholds = numbers_or(t, "eta", c.eta_thresholds);
      c.alpha = number_or(t, "alpha", c.alpha);
      c.language_specific_threshold = number_or(t, "language_specific", c.language_specific_threshold);
      c.qa_thresholds = numbers_or(t, "qa", c.qa_thresholds);
    }
    std::set<std::string> valid;
    for (auto m : kAllCurveMetrics) valid.insert(std::string(to_string(m)));
    for (const char* f : kFigureOnly) valid.insert(f);
    if (j.contains("metrics")) {
      for (const auto& m : j["metrics"].get<std::vector<std::string>>()) {
        if (!valid.count(m)) throw ConfigError("config: unknown metric '" + m + "'");
        c.metrics.insert(m);
      }
    } else {
      // The probe is costly; it runs only when asked for.
      c.metrics = valid;
      c.metrics.erase("separability_acc");
    }
    if (j.contains("capture_kinds")) {
      c.capture_kinds.clear();
      for (const auto& k : j["capture_kinds"].get<std::vector<std::string>>()) c.capture_kinds.insert(parse_capture_kind(k));
    }
    c.knn_k = int_or(j, "knn_k", c.knn_k);
    c.cevr_threshold = number_or(j, "cevr_threshold", c.cevr_threshold);
    c.probe_folds = int_or(j, "probe_folds", c.probe_folds);
    c.trajectory_m = int_or(j, "trajectory_m", c.trajectory_m);
    c.max_new_tokens = int_or(j, "max_new_tokens", c.max_new_tokens);
    if (j.contains("family_map")) c.family_map = j["family_map"].get<std::map<std::string, std::string>>();
    c.output_dir = resolve_path(j.value("output_dir", std::string("out")), base);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + source.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  if (c.knn_k < 1) throw ConfigError("config: 'knn_k' must be positive");
  if (!(c.cevr_threshold > 0 && c.cevr_threshold <= 1)) throw ConfigError("config: 'cevr_threshold' must be in (0, 1]");
  if (c.probe_folds < 2) throw ConfigError("config: 'probe_folds' must be at least 2");
  if (c.trajectory_m < 2) throw ConfigError("config: 'trajectory_m' must be at least 2");
  if (c.max_new_tokens < 1) throw ConfigError("config: 'max_new_tokens' must be positive");
  return c;
}

void apply_overrides(ExperimentConfig& c, const CommandOptions& o) {
  if (o.top_n) {
    if (*o.top_n < 1) throw ConfigError("--top-n must be positive");
    c.top_n = *o.top_n;
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
}

// ---------------------------------------------------------------------------
// extract

CommandResult cmd_extract(const ExperimentConfig& cfg) {
  CommandResult result;
  const SplitState s = load_split(cfg, false);
  const auto model = load_adapter(cfg.model);
  const fs::path dir = ensure_dir(cfg, "runs");
  std::map<int, const ParallelPair*> by_index;
  for (const auto& p : s.corpus.pairs) by_index[p.pair_index] = &p;

  for (const auto& [split, ids] : {std::pair{"train", &s.plan.train_ids}, std::pair{"test", &s.plan.test_ids}}) {
    CaptureWriter w(model->manifest(cfg.capture_kinds), dir / (std::string(split) + ".xfrn"));
    for (const auto& [k, v] : cfg.provenance()) w.set_metadata(k, v);
    w.set_metadata("split", split);
    std::vector<CaptureInput> inputs;
    for (int idx : *ids) {
      const auto* pair = by_index.at(idx);
      for (const auto& lang : cfg.languages) {
        const std::string id = sample_id(idx, lang);
        w.add_sample(SampleInfo{id, lang, idx, split});
        inputs.push_back(CaptureInput{id, lang, pair->sentences.at(lang)});
      }
    }
    forward_capture(*model, inputs, cfg.capture_kinds, nullptr, [&](ActivationRecord&& r) { w.write(r); });
    w.finish();
    result.outputs.push_back(dir / (std::string(split) + ".xfrn"));
  }
  write_value_vectors(model->value_vectors(), dir / "values.xfrn");
  result.outputs.push_back(dir / "values.xfrn");

  const json split_json = {{"split_seed", cfg.split_seed},
                           {"config_hash", cfg.config_hash},
                           {"train_ids", s.plan.train_ids},
                           {"test_ids", s.plan.test_ids}};
  open_out(dir / "split.json") << split_json.dump(1) << '\n';
  result.outputs.push_back(dir / "split.json");
  return result;
}

// ---------------------------------------------------------------------------
// detect

CommandResult cmd_detect(const ExperimentConfig& cfg, const CommandOptions& o) {
  CommandResult result;
  Detections det(cfg);
  for (auto type : types_for(o))
    for (const auto& lang : languages_for(cfg, o)) det.detect(type, lang, result);
  return result;
}

// ---------------------------------------------------------------------------
// intervene

CommandResult cmd_intervene(const ExperimentConfig& cfg, const CommandOptions& o) {
  CommandResult result;
  const SplitState s = load_split(cfg, true);
  const auto model = load_adapter(cfg.model);
  Detections det(cfg);
  const fs::path dir = ensure_dir(cfg, "intervene");

  RemeasureOptions ropt;
  for (auto m : curve_metrics(cfg))
    if (kRemeasurable.count(m)) ropt.metrics.insert(m);
  ropt.metrics.insert(CurveMetric::hs_parallel);
  ropt.metrics.insert(CurveMetric::hs_nonparallel);
  ropt.knn_k = cfg.knn_k;
  ropt.cevr_threshold = cfg.cevr_threshold;

  const auto languages = languages_for(cfg, o);
  for (auto type : types_for(o)) {
    std::map<std::string, DeactivationMask> masks;
    for (const auto& lang : languages) {
      const auto detection = det.get(type, lang, result);
      check_split_hygiene(detection.pair_indices, s.plan.test_ids);
      const auto paired = paired_test(s, lang, cfg.seed);
      const DeactivationMask detected = mask_of(detection);
      const std::uint64_t bseed = sub_seed(cfg.seed, "baseline:" + stem_name(type, lang));
      const DeactivationMask baseline = baseline_for(detected, model->mlp_dim(), bseed);
      masks[lang] = detected;

      for (const auto& [tag, mask, condition] :
           {std::tuple{"detected", &detected, std::string(to_string(type))},
            std::tuple{"baseline", &baseline, std::string("baseline")}}) {
        auto report = remeasure_under_mask(*model, paired, *mask, condition, ropt);
        report.provenance = cfg.provenance();
        report.provenance["detection_split"] = detection.split;
        const std::string name = stem_name(type, lang) + "_" + tag;
        report.write_csv(dir / (name + ".csv"));
        report.write_json(dir / (name + ".json"));
        mask->write_csv(dir / (name + "_mask.csv"));
        result.outputs.push_back(dir / (name + ".csv"));
        result.outputs.push_back(dir / (name + ".json"));
      }
    }

    // Cross-lingual deactivation: another language's mask applied to L2.
    if (!o.language) {
      for (const auto& lang : languages) masks.emplace(lang, mask_of(det.get(type, lang, result)));
    }
    for (const auto& l2 : languages) {
      const auto inputs = test_inputs(s, l2);
      for (const auto& l1 : cfg.second_languages()) {
        if (l1 == l2) continue;
        if (!masks.count(l1)) masks.emplace(l1, mask_of(det.get(type, l1, result)));
        auto effect = cross_lingual_effect(*model, inputs, masks.at(l1), masks.at(l2));
        effect.cross.metadata["languages"] = l1 + "->" + l2;
        effect.own.metadata["languages"] = l2 + "->" + l2;
        const std::string name = "cross_" + std::string(to_string(type)) + "_" + l1 + "_on_" + l2;
        write_curves_csv({effect.cross, effect.own}, dir / (name + ".csv"), cfg.provenance());
        open_out(dir / (name + ".json")) << curves_to_json({effect.cross, effect.own}).dump(1) << '\n';
        result.outputs.push_back(dir / (name + ".csv"));
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// stats

CommandResult cmd_stats(const ExperimentConfig& cfg, const CommandOptions& o) {
  CommandResult result;
  const CaptureRun test = open_run(cfg, "test");
  const auto& m = test.manifest();
  const int L = m.num_layers;
  const fs::path dir = ensure_dir(cfg, "stats");
  const auto prov = cfg.provenance();
  const auto metrics = curve_metrics(cfg);
  const auto languages = languages_for(cfg, o);
  auto has = [&](CurveMetric c) { return metrics.count(c) > 0; };

  // Geometry over the test split.
  std::vector<SimilarityCurve> curves;
  const bool need_hs = m.capture_kinds.count(CaptureKind::hidden_state) > 0;
  const bool need_act = m.capture_kinds.count(CaptureKind::mlp_activation) > 0;
  for (const auto& lang : languages) {
    const std::string pair_tag = "en-" + lang;
    auto add_gap = [&](CaptureKind kind, GapKind gap, CurveMetric par_m, CurveMetric non_m) {
      if (!has(par_m) && !has(non_m)) return;
      PairedLayers par, non;
      std::vector<std::size_t> perm;
      for (int l = 1; l <= L; ++l) {
        const auto al = test.load_aligned(l, kind, "en", lang, "test");
        if (perm.empty()) perm = seeded_derangement(al.pair_indices.size(), sub_seed(cfg.seed, "nonparallel:" + lang));
        Matrix a = to_matrix(al.first), b = to_matrix(al.second);
        Matrix shuffled(b.rows(), b.cols());
        for (std::size_t k = 0; k < perm.size(); ++k)
          shuffled.row(static_cast<Eigen::Index>(k)) = b.row(static_cast<Eigen::Index>(perm[k]));
        par.first.push_back(a);
        par.second.push_back(b);
        non.first.push_back(a);
        non.second.push_back(shuffled);
      }
      auto [p, n] = similarity_gap_curve(par, non, gap);
      for (auto* c : {&p, &n}) {
        c->metadata["languages"] = pair_tag;
        c->metadata["split"] = "test";
        if (has(c->metric)) curves.push_back(*c);
      }
    };
    if (need_hs) add_gap(CaptureKind::hidden_state, GapKind::hidden_state, CurveMetric::hs_parallel, CurveMetric::hs_nonparallel);
    if (need_act) add_gap(CaptureKind::mlp_activation, GapKind::mlp_activation, CurveMetric::act_parallel, CurveMetric::act_nonparallel);

    if (need_hs && (has(CurveMetric::mutual_knn) || has(CurveMetric::centroid_cos) || has(CurveMetric::separability_acc))) {
      SimilarityCurve knn;
      knn.metric = CurveMetric::mutual_knn;
      knn.metadata = {{"languages", pair_tag}, {"k", std::to_string(cfg.knn_k)}, {"split", "test"}};
      std::vector<Vector> ca, cb;
      std::vector<Matrix> pos, neg;
      for (int l = 1; l <= L; ++l) {
        const auto al = test.load_aligned(l, CaptureKind::hidden_state, "en", lang, "test");
        const Matrix a = to_matrix(al.first), b = to_matrix(al.second);
        if (has(CurveMetric::mutual_knn)) {
          knn.values.push_back(a.rows() > cfg.knn_k ? mutual_knn_alignment(a, b, cfg.knn_k) : kUndefined);
        }
        ca.push_back(centroid(a));
        cb.push_back(centroid(b));
        if (has(CurveMetric::separability_acc)) {
          const auto perm = seeded_derangement(static_cast<std::size_t>(b.rows()), sub_seed(cfg.seed, "nonparallel:" + lang));
          Matrix shuffled(b.rows(), b.cols());
          for (std::size_t k = 0; k < perm.size(); ++k)
            shuffled.row(static_cast<Eigen::Index>(k)) = b.row(static_cast<Eigen::Index>(perm[k]));
          // Label 1: [en_k, l2_k]; label 0: [en_k, l2_perm(k)].
          pos.push_back(concat_pairs(a, b));
          neg.push_back(concat_pairs(a, shuffled));
        }
      }
      if (has(CurveMetric::mutual_knn)) curves.push_back(knn);
      if (has(CurveMetric::centroid_cos)) {
        auto c = centroid_distance_curve(ca, cb);
        c.metadata = {{"languages", pair_tag}, {"split", "test"}};
        curves.push_back(c);
      }
      if (has(CurveMetric::separability_acc)) {
        ProbeOptions po;
        po.folds = cfg.probe_folds;
        po.seed = sub_seed(cfg.seed, "probe:" + lang);
        auto c = separability_probe(pos, neg, po);
        c.metadata = {{"languages", pair_tag}, {"folds", std::to_string(cfg.probe_folds)}, {"split", "test"}};
        curves.push_back(c);
      }
    }
  }
  if (need_hs && (has(CurveMetric::cevr_dim) || has(CurveMetric::trajectory_cos))) {
    for (const auto& lang : cfg.languages) {
      SimilarityCurve cevr;
      cevr.metric = CurveMetric::cevr_dim;
      cevr.metadata = {{"language", lang}, {"threshold", fmt(cfg.cevr_threshold)}, {"split", "test"}};
      std::vector<Vector> centroids;
      for (int l = 1; l <= L; ++l) {
        const Matrix h = to_matrix(test.load_slice(l, CaptureKind::hidden_state, lang, "test").rows);
        try {
          cevr.values.push_back(cevr_dimensionality(h, cfg.cevr_threshold));
        } catch (const DataError&) {
          cevr.values.push_back(kUndefined);
        }
        centroids.push_back(centroid(h));
      }
      if (has(CurveMetric::cevr_dim)) curves.push_back(cevr);
      if (has(CurveMetric::trajectory_cos) && L >= 2) {
        auto t = trajectory_linearity(centroids, std::min(cfg.trajectory_m, L));
        t.metadata = {{"language", lang}, {"m", std::to_string(std::min(cfg.trajectory_m, L))}, {"split", "test"}};
        curves.push_back(t);
      }
    }
  }
  if (!curves.empty()) {
    write_curves_csv(curves, dir / "curves.csv", prov);
    open_out(dir / "curves.json") << curves_to_json(curves).dump(1) << '\n';
    result.outputs.push_back(dir / "curves.csv");
  }

  // PCA snapshots at the first layer, the type boundary and the last layer.
  if (need_hs) {
    for (int layer : std::set<int>{1, type_boundary(L), L}) {
      std::vector<std::pair<std::string, Matrix>> by_lang;
      for (const auto& lang : cfg.languages)
        by_lang.emplace_back(lang, to_matrix(test.load_slice(layer, CaptureKind::hidden_state, lang, "test").rows));
      const auto pca = pca_project(by_lang, layer);
      const fs::path p = dir / ("pca_layer" + std::to_string(layer) + ".csv");
      pca.write_csv(p);
      result.outputs.push_back(p);
    }
  }

  if (!need_act) {
    result.warnings.push_back("no mlp_activation captures; neuron statistics skipped");
    return result;
  }

  // Neuron statistics: language specificity of the detected neurons.
  Detections det(cfg);
  std::vector<Slice> act;
  for (int l = 1; l <= L; ++l) act.push_back(test.load_slice(l, CaptureKind::mlp_activation, std::nullopt, "test"));
  std::ofstream eta_csv = open_out(dir / "correlation_ratio.csv");
  write_header(eta_csv, prov);
  eta_csv << "type,language,neurons,mean_eta2\n";
  std::ofstream sig_csv = open_out(dir / "significance.csv");
  write_header(sig_csv, prov);
  sig_csv << "type,language,test,threshold,alpha,fraction\n";
  for (auto type : types_for(o)) {
    std::map<std::string, std::set<NeuronId>> selected;
    for (const auto& lang : languages) {
      const auto d = det.get(type, lang, result);
      selected[lang] = d.neurons();
      std::vector<EtaP> by_anova, by_mw;
      double eta_sum = 0;
      for (const auto& row : d.rows) {
        const auto& sl = act[static_cast<std::size_t>(row.neuron.layer - 1)];
        LabeledActivations la;
        std::vector<double> target, others;
        for (std::size_t k = 0; k < sl.sample_ids.size(); ++k) {
          const double v = sl.rows(static_cast<Eigen::Index>(k), row.neuron.index);
          const bool is_target = test.samples().at(sl.sample_ids[k]).language == lang;
          la.values.push_back(v);
          la.labels.push_back(is_target ? 1 : 0);
          (is_target ? target : others).push_back(v);
        }
        const double eta = correlation_ratio(la);
        eta_sum += eta;
        by_anova.push_back(EtaP{eta, anova_oneway({target, others}).p_value});
        by_mw.push_back(EtaP{eta, mann_whitney_u(target, others).p_value});
      }
      const std::string t = std::string(to_string(type));
      eta_csv << t << ',' << lang << ',' << d.rows.size() << ','
              << fmt(d.rows.empty() ? kUndefined : eta_sum / static_cast<double>(d.rows.size())) << '\n';
      if (!by_anova.empty()) {
        for (const auto& [name, scores] : {std::pair{"anova", &by_anova}, std::pair{"mann_whitney", &by_mw}}) {
          for (const auto& [thr, frac] : significant_fraction(*scores, cfg.eta_thresholds, cfg.alpha)) {
            sig_csv << t << ',' << lang << ',' << name << ',' << fmt(thr) << ',' << fmt(cfg.alpha) << ',' << fmt(frac)
                    << '\n';
          }
        }
      }
    }

    // Overlap between languages' selections.
    const std::string t = std::string(to_string(type));
    std::ofstream jac = open_out(dir / ("jaccard_" + t + ".csv"));
    write_header(jac, prov);
    jac << "language";
    for (const auto& b : languages) jac << ',' << b;
    jac << '\n';
    std::vector<SimilarityCurve> overlap;
    for (std::size_t i = 0; i < languages.size(); ++i) {
      jac << languages[i];
      for (std::size_t k = 0; k < languages.size(); ++k) {
        const auto& a = selected[languages[i]];
        const auto& b = selected[languages[k]];
        jac << ',' << (a.empty() && b.empty() ? std::string() : fmt(jaccard(a, b)));
        if (k > i) {
          auto c = overlap_by_layer(a, b, L);
          c.metadata = {{"languages", languages[i] + "-" + languages[k]}, {"type", t}};
          overlap.push_back(c);
        }
      }
      jac << '\n';
    }
    result.outputs.push_back(dir / ("jaccard_" + t + ".csv"));
    if (!overlap.empty()) {
      write_curves_csv(overlap, dir / ("overlap_" + t + ".csv"), prov);
      open_out(dir / ("overlap_" + t + ".json")) << curves_to_json(overlap).dump(1) << '\n';
      result.outputs.push_back(dir / ("overlap_" + t + ".csv"));
    }
  }
  result.outputs.push_back(dir / "correlation_ratio.csv");
  result.outputs.push_back(dir / "significance.csv");

  // Language-specific neurons by correlation ratio, and optional families.
  if (test.languages().size() >= 2) {
    for (const auto& lang : cfg.languages) {
      const auto ls = detect_language_specific_neurons(test, lang, cfg.language_specific_threshold, std::string("test"));
      const fs::path p = dir / ("language_specific_" + lang + ".csv");
      ls.write_csv(p);
      result.outputs.push_back(p);
    }
    if (!cfg.family_map.empty()) {
      std::map<std::string, std::string> representative;
      for (const auto& lang : cfg.languages) {
        auto it = cfg.family_map.find(lang);
        representative.emplace(it == cfg.family_map.end() ? lang : it->second, lang);
      }
      for (const auto& [group, lang] : representative) {
        auto ls = detect_language_specific_neurons(test, lang, cfg.language_specific_threshold, std::string("test"),
                                                   &cfg.family_map);
        ls.target = group;
        const fs::path p = dir / ("family_specific_" + group + ".csv");
        ls.write_csv(p);
        result.outputs.push_back(p);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

CommandResult cmd_evaluate(const ExperimentConfig& cfg, const CommandOptions& o) {
  CommandResult result;
  if (!cfg.qa) throw ConfigError("config has no 'qa' dataset; evaluate needs one");
  QaDataset all = load_qa_jsonl(*cfg.qa);
  const auto languages = languages_for(cfg, o);
  const std::set<std::string> wanted(languages.begin(), languages.end());
  QaDataset ds;
  for (auto& item : all.items)
    if (wanted.count(item.language)) ds.items.push_back(std::move(item));
  if (ds.items.empty()) throw DataError("no QA items for the selected languages");

  const auto model = load_adapter(cfg.model);
  Detections det(cfg);
  QaMasks masks;
  std::set<std::string> present;
  for (const auto& item : ds.items) present.insert(item.language);
  for (const auto& lang : present) {
    const DeactivationMask t1 = mask_of(det.get(TransferType::type1, lang, result));
    masks.type1[lang] = t1;
    masks.baseline[lang] = baseline_for(t1, model->mlp_dim(), sub_seed(cfg.seed, "baseline:qa:" + lang));
  }
  QaOptions qo;
  qo.max_new_tokens = cfg.max_new_tokens;
  qo.thresholds = cfg.qa_thresholds;
  auto report = run_qa_protocol(ds, *model, masks, qo);
  report.provenance = cfg.provenance();
  const fs::path dir = ensure_dir(cfg, "evaluate");
  report.write_json(dir / "delta.json");
  report.write_questions_csv(dir / "questions.csv");
  report.write_scatter_csv(dir / "scatter.csv");
  {
    std::ofstream out = open_out(dir / "delta.csv");
    write_header(out, report.provenance);
    out << "language,threshold,questions,mean_none,delta_type1,delta_baseline\n";
    for (const auto& r : report.rows) {
      out << r.language << ',' << (r.threshold < 0 ? std::string("all") : fmt(r.threshold)) << ',' << r.questions << ','
          << fmt(r.mean_none) << ',' << fmt(r.delta_type1) << ',' << fmt(r.delta_baseline) << '\n';
    }
  }
  for (const char* f : {"delta.json", "delta.csv", "questions.csv", "scatter.csv"}) result.outputs.push_back(dir / f);
  int errors = 0;
  for (const auto& r : report.results) errors += r.error.empty() ? 0 : 1;
  if (errors > 0) result.warnings.push_back(std::to_string(errors) + " generation(s) failed and were scored 0");
  return result;
}

// ---------------------------------------------------------------------------
// report

CommandResult cmd_report(const ExperimentConfig& cfg, const CommandOptions& o) {
  CommandResult result;
  if (cfg.metrics.empty()) return result;
  const fs::path dir = cfg.output_dir / "report";
  auto emit = [&](const Figure& f) {
    result.outputs.push_back(f.svg);
    result.outputs.push_back(f.csv);
  };
  auto missing = [&](const fs::path& p, const std::string& what) {
    result.warnings.push_back(what + ": '" + p.string() + "' not found, figure skipped");
  };

  // Geometry curves from stats.
  const fs::path curves_path = cfg.output_dir / "stats" / "curves.json";
  std::vector<SimilarityCurve> curves;
  if (fs::exists(curves_path)) {
    curves = curves_from_json(read_json_file(curves_path));
  }
  auto select = [&](const std::vector<CurveMetric>& ms, const std::string& key, const std::string& value) {
    std::vector<SimilarityCurve> out;
    for (const auto& c : curves) {
      if (std::find(ms.begin(), ms.end(), c.metric) == ms.end()) continue;
      if (!key.empty()) {
        auto it = c.metadata.find(key);
        if (it == c.metadata.end() || it->second != value) continue;
      }
      out.push_back(c);
    }
    return out;
  };
  const auto languages = languages_for(cfg, o);
  const std::pair<const char*, std::vector<CurveMetric>> gap_groups[] = {
      {"hs_similarity", {CurveMetric::hs_parallel, CurveMetric::hs_nonparallel}},
      {"act_similarity", {CurveMetric::act_parallel, CurveMetric::act_nonparallel}}};
  for (const auto& [name, ms] : gap_groups) {
    bool wanted = false;
    for (auto m : ms) wanted = wanted || cfg.wants(to_string(m));
    if (!wanted) continue;
    if (!fs::exists(curves_path)) {
      missing(curves_path, name);
      continue;
    }
    for (const auto& lang : languages) {
      auto sel = select(ms, "languages", "en-" + lang);
      sel.erase(std::remove_if(sel.begin(), sel.end(), [&](const auto& c) { return !cfg.wants(to_string(c.metric)); }),
                sel.end());
      if (sel.empty()) continue;
      emit(write_line_plot(curves_plot(sel, std::string(name) + " en-" + lang, "mean cosine"),
                           dir / (std::string(name) + "_en-" + lang)));
    }
  }
  const std::tuple<CurveMetric, const char*, const char*> single[] = {
      {CurveMetric::mutual_knn, "mutual_knn", "mutual k-NN alignment"},
      {CurveMetric::centroid_cos, "centroid_distance", "cos(C_en, C_L2)"},
      {CurveMetric::cevr_dim, "cevr", "components for CEVR threshold"},
      {CurveMetric::trajectory_cos, "trajectory", "cos(step, C^m - C^1)"},
      {CurveMetric::separability_acc, "separability", "held-out accuracy"}};
  for (const auto& [metric, name, ylabel] : single) {
    if (!cfg.wants(to_string(metric))) continue;
    if (!fs::exists(curves_path)) {
      missing(curves_path, name);
      continue;
    }
    const auto sel = select({metric}, "", "");
    if (sel.empty()) continue;
    emit(write_line_plot(curves_plot(sel, name, ylabel), dir / name));
  }

  // Intervention before/after curves.
  if (cfg.wants("hs_parallel") || cfg.wants("hs_nonparallel")) {
    for (auto type : types_for(o)) {
      for (const auto& lang : languages) {
        const std::string base = stem_name(type, lang);
        const fs::path dp = cfg.output_dir / "intervene" / (base + "_detected.json");
        const fs::path bp = cfg.output_dir / "intervene" / (base + "_baseline.json");
        if (!fs::exists(dp) || !fs::exists(bp)) {
          missing(dp, "intervention " + base);
          continue;
        }
        const json dj = read_json_file(dp), bj = read_json_file(bp);
        std::vector<SimilarityCurve> sel;
        for (const auto& c : curves_from_json(dj.at("before")))
          if (c.metric == CurveMetric::hs_parallel || c.metric == CurveMetric::hs_nonparallel) sel.push_back(c);
        for (const auto* j : {&dj, &bj})
          for (const auto& c : curves_from_json(j->at("after")))
            if (c.metric == CurveMetric::hs_parallel || c.metric == CurveMetric::hs_nonparallel) sel.push_back(c);
        emit(write_line_plot(curves_plot(sel, "hidden-state similarity under " + base + " deactivation", "mean cosine"),
                             dir / ("intervene_" + base)));
      }
    }
  }

  // Neuron overlap between languages.
  if (cfg.wants("neuron_overlap")) {
    for (auto type : types_for(o)) {
      const std::string t = std::string(to_string(type));
      const fs::path p = cfg.output_dir / "stats" / ("overlap_" + t + ".json");
      if (!fs::exists(p)) {
        missing(p, "overlap " + t);
        continue;
      }
      emit(write_line_plot(curves_plot(curves_from_json(read_json_file(p)), t + " neuron overlap by layer", "Jaccard"),
                           dir / ("overlap_" + t)));
    }
  }

  // Layer distribution of detected neurons.
  if (cfg.wants("neuron_distribution")) {
    for (auto type : types_for(o)) {
      HistogramPlot h;
      h.title = std::string(to_string(type)) + " neurons per layer";
      for (const auto& lang : languages) {
        const fs::path p = cfg.output_dir / "detect" / (stem_name(type, lang) + ".json");
        if (!fs::exists(p)) {
          missing(p, "distribution " + stem_name(type, lang));
          continue;
        }
        BarSeries s;
        s.label = lang;
        for (const auto& [layer, count] : DetectionResult::read_json(p).layer_histogram()) s.bars[layer] = count;
        h.series.push_back(std::move(s));
      }
      if (!h.series.empty()) emit(write_histogram(h, dir / ("distribution_" + std::string(to_string(type)))));
    }
  }

  // QA scatter: unmasked F1 against masked F1.
  if (cfg.wants("qa_scatter")) {
    const fs::path p = cfg.output_dir / "evaluate" / "scatter.csv";
    if (!fs::exists(p)) {
      missing(p, "qa_scatter");
    } else {
      ScatterPlot sp;
      sp.title = "QA F1 without vs with deactivation";
      sp.x_label = "F1 (no intervention)";
      sp.y_label = "F1 (deactivated)";
      std::map<std::string, PlotSeries> by_cond;
      for (const auto& row : read_csv_rows(p)) {
        if (row.size() < 5) throw DataError("malformed row in '" + p.string() + "'");
        auto& s = by_cond[row[2]];
        s.label = row[2];
        s.x.push_back(row[3].empty() ? kUndefined : std::stod(row[3]));
        s.y.push_back(row[4].empty() ? kUndefined : std::stod(row[4]));
      }
      for (auto& [_, s] : by_cond) sp.series.push_back(std::move(s));
      emit(write_scatter(sp, dir / "qa_scatter"));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

fs::path write_fixture_experiment(const fs::path& dir, const FixtureOptions& options, int n_pairs,
                                  std::uint64_t corpus_seed) {
  if (n_pairs < 4) throw ConfigError("a fixture experiment needs at least 4 sentence pairs");
  fs::create_directories(dir);
  const PlantedFixture fx = build_planted_fixture(options);
  const json model = {{"model_id", options.model_id},
                      {"family", "fixture"},
                      {"max_context", options.max_context},
                      {"fixture", json::parse(fixture_options_json(options))}};
  open_out(dir / "model.json") << model.dump(1) << '\n';
  write_parallel_tsv(fx.make_corpus(n_pairs, corpus_seed), dir / "corpus.tsv");
  write_qa_jsonl(fx.make_qa(), dir / "qa.jsonl");
  const json exp = {{"model", "model.json"},
                    {"corpus", "corpus.tsv"},
                    {"qa", "qa.jsonl"},
                    {"languages", options.languages},
                    {"split_seed", corpus_seed},
                    {"seed", options.seed},
                    {"top_n", options.planted_per_layer * options.num_layers},
                    {"output_dir", "out"}};
  open_out(dir / "experiment.json") << exp.dump(1) << '\n';
  return dir / "experiment.json";
}

int run_command(std::string_view command, const fs::path& config_path, const CommandOptions& options,
                std::ostream& out, std::ostream& err) {
  try {
    ExperimentConfig cfg = load_experiment_config(config_path);
    apply_overrides(cfg, options);
    CommandResult r;
    if (command == "extract") r = cmd_extract(cfg);
    else if (command == "detect") r = cmd_detect(cfg, options);
    else if (command == "intervene") r = cmd_intervene(cfg, options);
    else if (command == "stats") r = cmd_stats(cfg, options);
    else if (command == "evaluate") r = cmd_evaluate(cfg, options);
    else if (command == "report") r = cmd_report(cfg, options);
    else throw ConfigError("unknown command '" + std::string(command) + "'");
    for (const auto& w : r.warnings) err << "warning: " << w << '\n';
    for (const auto& p : r.outputs) out << p.string() << '\n';
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace xfrn
