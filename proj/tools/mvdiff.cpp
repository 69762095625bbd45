// mvdiff: dataset generation, training, orbit rendering, evaluation and the
// ablation ladder. Settings come from --config (flat key=value), then from
// key=value arguments, then from --seed / --out.

#include <CLI11.hpp>

#include <iostream>

#include "mvdiff/cli.hpp"

namespace {

using namespace mvdiff;
using namespace mvdiff::cli;

KeyValues merged_settings(const std::string& config, const std::vector<std::string>& overrides,
                          const std::optional<std::uint64_t>& seed) {
  KeyValues kv = config.empty() ? KeyValues() : KeyValues::load(config);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("expected key=value, got '" + o + "'");
    kv.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  if (seed) kv.set_value("seed", *seed);
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view diffusion toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config, out;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config, "flat key=value settings file");
  app.add_option("--seed", seed, "run seed; every other seed is derived from it");
  app.add_option("--out", out, "output directory");

  std::vector<std::string> overrides;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("settings", overrides, "key=value overrides");
    return sub;
  };
  auto* dataset_gen = add("dataset-gen", "render a synthetic multi-view dataset");
  auto* train_cmd = add("train", "train a denoiser on a dataset");
  auto* render = add("render", "render an orbit from one source view");
  auto* eval = add("eval", "image metrics and PPLC for a frame directory");
  auto* ablate = add("ablate", "run the six-row ablation ladder");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    RunContext ctx{merged_settings(config, overrides, seed), out, &std::cout};
    if (dataset_gen->parsed()) cmd_dataset_gen(ctx);
    if (train_cmd->parsed()) cmd_train(ctx);
    if (render->parsed()) cmd_render(ctx);
    if (eval->parsed()) cmd_eval(ctx);
    if (ablate->parsed()) cmd_ablate(ctx);
    return exit_ok;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return exit_usage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_runtime;
  }
}
