// ctta: synthetic continual test-time adaptation benchmark.
//
//   ctta gen-data     --config run.cfg
//   ctta train-source --config run.cfg
//   ctta run-tta      --config run.cfg [--method tent,ours] [--seq night-1.0] [--parallel 4]
//   ctta compare      --summary out/summary.csv [--against other/summary.csv]
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctta/commands.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string methods;
  std::string sequences;
  std::string out;
  std::optional<std::size_t> parallel;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--method", o.methods, "comma-separated method variants or @suite names");
  cmd->add_option("--seq", o.sequences, "comma-separated sequence names");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--parallel", o.parallel, "worker threads for run-tta")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "base seed");
}

ctta::RunConfig load(const Overrides& o, bool out_is_data) {
  ctta::RunConfig c = o.config.empty() ? ctta::parse_config("") : ctta::load_config(o.config);
  if (!o.methods.empty()) c.methods = ctta::detail::split_list(o.methods);
  if (!o.sequences.empty()) c.sequences = ctta::detail::split_list(o.sequences);
  if (!o.out.empty()) (out_is_data ? c.data_dir : c.out_dir) = o.out;
  if (o.parallel) c.parallel = *o.parallel;
  if (o.seed) c.seed = *o.seed;
  ctta::finalize_config(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic continual test-time adaptation benchmark"};
  app.require_subcommand(1);

  Overrides gen, train, run, cmp;
  auto* gen_cmd = app.add_subcommand("gen-data", "render source frames and shifted sequences (--out sets the data directory)");
  add_common(gen_cmd, gen);
  auto* train_cmd = app.add_subcommand("train-source", "train the source model and write its checkpoint");
  add_common(train_cmd, train);
  auto* run_cmd = app.add_subcommand("run-tta", "stream every sequence through every method");
  add_common(run_cmd, run);
  auto* cmp_cmd = app.add_subcommand("compare", "mean scores per method and sweep grids from summary CSVs");
  add_common(cmp_cmd, cmp);
  std::vector<std::string> summaries;
  std::string against;
  cmp_cmd->add_option("--summary", summaries, "summary CSVs (default <out>/summary.csv)");
  cmp_cmd->add_option("--against", against, "baseline summary CSV for delta columns");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? ctta::kExitOk : ctta::kExitConfig;
  }

  try {
    if (*gen_cmd) return ctta::cmd_gen_data(load(gen, true));
    if (*train_cmd) return ctta::cmd_train_source(load(train, false));
    if (*run_cmd) return ctta::cmd_run_tta(load(run, false));
    const ctta::RunConfig c = load(cmp, false);
    std::vector<std::filesystem::path> paths(summaries.begin(), summaries.end());
    if (paths.empty()) paths.push_back(c.out_dir / "summary.csv");
    std::optional<std::filesystem::path> base;
    if (!against.empty()) base = against;
    return ctta::cmd_compare(paths, base, c.out_dir);
  } catch (const ctta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ctta::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ctta::kExitRuntime;
  }
}
