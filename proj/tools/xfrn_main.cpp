#include "CLI11.hpp"
#include "xfrn/error.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/pipeline.hpp"

#include <iostream>
#include <optional>
#include <string>
#include <utility>

namespace {

struct Flags {
  std::string config;
  std::string type;
  std::string lang;
  std::optional<int> top_n;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
  cmd->add_option("--type", f.type, "transfer type")->check(CLI::IsMember({"type1", "type2"}));
  cmd->add_option("--lang", f.lang, "language code");
  cmd->add_option("--top-n", f.top_n, "neurons kept per detection");
  cmd->add_option("--seed", f.seed, "seed for baselines and pairings");
  cmd->add_option("--out", f.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer-neuron detection and intervention toolkit"};
  app.require_subcommand(1);

  Flags flags;
  const std::pair<const char*, const char*> commands[] = {
      {"extract", "capture activations and split the corpus"},
      {"detect", "rank transfer neurons per language and type"},
      {"intervene", "deactivate detected neurons and re-measure"},
      {"stats", "layer statistics and language specificity"},
      {"evaluate", "question answering under deactivation"},
      {"report", "render figures from finished stages"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help), flags);

  std::string fx_dir;
  int fx_pairs = 200;
  xfrn::FixtureOptions fx;
  auto* make = app.add_subcommand("make-fixture", "write a synthetic fixture experiment");
  make->add_option("--out", fx_dir, "directory to create")->required();
  make->add_option("--seed", fx.seed, "fixture seed");
  make->add_option("--pairs", fx_pairs, "parallel sentence pairs");
  make->add_option("--layers", fx.num_layers, "decoder layers");
  make->add_option("--hidden-dim", fx.hidden_dim, "residual width");
  make->add_option("--mlp-dim", fx.mlp_dim, "neurons per layer");
  make->add_option("--languages", fx.languages, "comma-separated codes, en first")->delimiter(',');
  make->add_option("--planted", fx.planted_per_layer, "planted neurons per layer and language");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (make->parsed()) {
    try {
      std::cout << xfrn::write_fixture_experiment(fx_dir, fx, fx_pairs, fx.seed).string() << '\n';
      return 0;
    } catch (const xfrn::Error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return e.exit_code();
    }
  }

  xfrn::CommandOptions opts;
  try {
    if (!flags.type.empty()) opts.type = xfrn::parse_transfer_type(flags.type);
  } catch (const xfrn::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  }
  if (!flags.lang.empty()) opts.language = flags.lang;
  opts.top_n = flags.top_n;
  opts.seed = flags.seed;
  if (!flags.out.empty()) opts.out = flags.out;

  const std::string command = app.get_subcommands().front()->get_name();
  return xfrn::run_command(command, flags.config, opts, std::cout, std::cerr);
}
