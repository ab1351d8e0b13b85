#pragma once

// End-to-end commands behind the xfrn tool. Every command reads an
// experiment config, writes under its output directory and is deterministic
// given the config and seeds. Layout:
//   runs/{train,test}.xfrn  runs/values.xfrn  runs/split.json
//   detect/  intervene/  stats/  evaluate/  report/

#include "xfrn/model.hpp"
#include "xfrn/types.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace xfrn {

struct ExperimentConfig {
  std::filesystem::path source;
  AdapterConfig model;
  std::filesystem::path corpus;            // parallel TSV
  std::optional<std::filesystem::path> qa; // QA JSONL
  std::vector<std::string> languages;      // must include "en"
  std::uint64_t split_seed = 0;
  std::uint64_t seed = 0;
  int top_n = 1000;
  std::vector<double> eta_thresholds = {0.1, 0.25};
  double alpha = 0.05;
  double language_specific_threshold = 0.25;
  std::vector<double> qa_thresholds = {0.5, 0.8};
  // Curve metric names plus "neuron_distribution" and "qa_scatter".
  std::set<std::string> metrics;
  std::set<CaptureKind> capture_kinds = {CaptureKind::hidden_state, CaptureKind::pre_mlp,
                                         CaptureKind::mlp_activation};
  int knn_k = 5;
  double cevr_threshold = 0.9;
  int probe_folds = 10;
  int trajectory_m = 10;
  int max_new_tokens = 32;
  std::map<std::string, std::string> family_map;  // language -> group label
  std::filesystem::path output_dir;
  std::string config_hash;  // FNV-1a 64 of the config bytes, hex

  bool wants(std::string_view metric) const { return metrics.count(std::string(metric)) > 0; }
  std::vector<std::string> second_languages() const;  // languages other than en
  std::map<std::string, std::string> provenance() const;
};

// Unknown keys, missing required keys and missing referenced files are
// ConfigErrors naming the offending key or path.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(std::string_view json_text, const std::filesystem::path& source);

std::string fnv1a64_hex(std::string_view bytes);

struct CommandOptions {
  std::optional<TransferType> type;
  std::optional<std::string> language;
  std::optional<int> top_n;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

void apply_overrides(ExperimentConfig& config, const CommandOptions& options);

struct CommandResult {
  std::vector<std::filesystem::path> outputs;
  std::vector<std::string> warnings;
};

CommandResult cmd_extract(const ExperimentConfig& config);
CommandResult cmd_detect(const ExperimentConfig& config, const CommandOptions& options);
CommandResult cmd_intervene(const ExperimentConfig& config, const CommandOptions& options);
CommandResult cmd_stats(const ExperimentConfig& config, const CommandOptions& options);
CommandResult cmd_evaluate(const ExperimentConfig& config, const CommandOptions& options);
CommandResult cmd_report(const ExperimentConfig& config, const CommandOptions& options);

// Writes a self-contained fixture experiment into `dir`: model.json (with
// the fixture block), corpus.tsv, qa.jsonl and experiment.json, whose output
// directory is dir/out. Returns the experiment.json path.
struct FixtureOptions;
std::filesystem::path write_fixture_experiment(const std::filesystem::path& dir, const FixtureOptions& options,
                                               int n_pairs, std::uint64_t corpus_seed);

// Loads the config, applies overrides, runs one command and maps failures to
// exit codes (0 ok, 2 config, 3 data, 4 model, 1 anything else). Output paths
// go to `out`, warnings and errors to `err`.
int run_command(std::string_view command, const std::filesystem::path& config_path, const CommandOptions& options,
                std::ostream& out, std::ostream& err);

}  // namespace xfrn
