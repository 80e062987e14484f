// msrl <gen-data|pretrain|train-rl|sweep|gradcheck> --config PATH [options]

#include <CLI11.hpp>

#include "msrl/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Gated audio-visual expert mixing trained with N-best REINFORCE on a synthetic world"};
  app.set_version_flag("--version", std::string(msrl::kToolVersion));

  std::string command;
  msrl::CommandOptions opts;
  std::uint64_t seed = 0;
  int instances = 0;
  std::string systems;

  app.add_option("command", command, "gen-data | pretrain | train-rl | sweep | gradcheck")->required();
  app.add_option("--config", opts.config_path, "run configuration file (dotted.key = value)");
  app.add_flag("--trace", opts.trace, "train-rl: write per-episode traces");
  auto* systems_opt = app.add_option("--systems", systems, "sweep: comma-separated system names");
  auto* seed_opt = app.add_option("--seed", seed, "override the master seed (gradcheck: episode seed)");
  auto* inst_opt = app.add_option("--instances", instances, "gradcheck: number of random episodes");
  app.add_flag("--perturb", opts.perturb, "gradcheck: corrupt the analytic gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return msrl::kExitConfig;
  }

  if (*systems_opt) opts.systems = systems;
  if (*seed_opt) opts.seed = seed;
  if (*inst_opt) opts.instances = instances;
  return msrl::run_command(command, opts);
}
