#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>

#include "kbl/pipeline.hpp"

int main(int argc, char** argv)
{
  CLI::App app{"Steady Boltzmann half-space boundary-layer solver"};
  app.require_subcommand(1);
  std::string config_path;
  kbl::RunOverrides flags;
  std::string out_dir, cache_dir;
  int threads = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "YAML run configuration")->required();
    sub->add_option("--out", out_dir, "output directory (overrides KBL_OUT_DIR and outputs.dir)");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--cache", cache_dir, "operator cache directory (overrides KBL_CACHE_DIR and outputs.cache)");
  };
  add_common(app.add_subcommand("operator", "assemble, cache and check the collision operator"));
  add_common(app.add_subcommand("linear", "solve the linearized boundary-layer problem"));
  add_common(app.add_subcommand("nonlinear", "solve the nonlinear problem by Picard iteration"));
  add_common(app.add_subcommand("verify", "recheck stored artifacts"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kbl::kExitConfig;
  }
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--out")) flags.out_dir = out_dir;
  if (sub->count("--cache")) flags.cache_dir = cache_dir;
  if (sub->count("--threads")) flags.threads = threads;

  try {
    kbl::RunConfig cfg = kbl::load_config(config_path);
    kbl::apply_overrides(cfg, flags);
    return kbl::run_command(sub->get_name(), cfg, std::cout, std::cerr);
  } catch (const kbl::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kbl::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kbl::kExitFailed;
  }
}
