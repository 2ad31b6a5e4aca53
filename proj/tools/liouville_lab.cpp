#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "liouville/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Liouville laboratory: flows, transport solutions and property checks"};
  app.require_subcommand(1, 1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
  bool quiet = false;

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "integrate one configuration and an ensemble, write CSV snapshots"},
      {"verify", "run the flow-axiom checks"},
      {"converge", "mollification levels: gradient error, Cauchy gaps, kernel independence, uniqueness"},
      {"residual", "weak-form residual suites"},
      {"scaling", "collision-cutoff term over a mu sweep"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "override the top-level seed");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "suppress the per-check summary");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : liouville::kExitConfigError;
  }

  liouville::RunOptions opts;
  opts.config = config;
  opts.quiet = quiet;
  for (auto* sub : subs) {
    if (!sub->parsed()) continue;
    opts.overrides.experiment = liouville::parse_experiment_kind(sub->get_name());
    if (sub->count("--out")) opts.overrides.out = out;
    if (sub->count("--seed")) opts.overrides.seed = seed;
    if (sub->count("--threads")) opts.overrides.threads = threads;
  }
  return liouville::run(opts, std::cout, std::cerr);
}
