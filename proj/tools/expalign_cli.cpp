#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "expalign/commands.hpp"

namespace {

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau_t, tau, lambda_sem, lambda_geo, clip, epsilon, k_ratio, lr, signal;
  std::optional<int> seeds, steps, gradient_configs;
  std::optional<std::string> std_mode;
  bool no_normalize = false;
  bool inject_fault = false;
};

void apply(const Overrides& o, expalign::RunConfig& c) {
  auto& obj = c.objective;
  if (o.seed) c.seed = *o.seed;
  if (o.tau_t) obj.token_temperature = *o.tau_t;
  if (o.tau) obj.temperature = *o.tau;
  if (o.lambda_sem) obj.lambda_sem = *o.lambda_sem;
  if (o.lambda_geo) obj.lambda_geo = *o.lambda_geo;
  if (o.clip) obj.gaco.clip = *o.clip;
  if (o.epsilon) obj.gaco.epsilon = *o.epsilon;
  if (o.k_ratio) obj.k_ratio = *o.k_ratio;
  if (o.std_mode) obj.gaco.std_mode = expalign::parse_std_mode(*o.std_mode);
  if (o.no_normalize) obj.gaco.normalize = false;
  if (o.inject_fault) obj.gaco.inject_sign_fault = true;
  if (o.seeds) c.seeds = *o.seeds;
  if (o.steps) c.steps = *o.steps;
  if (o.lr) c.learning_rate = *o.lr;
  if (o.signal) c.signal = *o.signal;
  if (o.gradient_configs) c.gradient_configs = *o.gradient_configs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expectation alignment and geometry-aware consistency: losses, checks and demos"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  Overrides o;
  expalign::RunConfig cfg;
  bool json = false;

  app.add_option("--config", o.config, "JSON file of hyperparameters; flags override it");
  app.add_option("--seed", o.seed, "Run seed (default 0)");
  auto* json_flag = app.add_flag("--json", json, "Emit the JSON report on stdout (the default)");
  app.add_flag("--text", cfg.text, "Emit a short text summary instead of JSON")->excludes(json_flag);
  app.add_option("--out", cfg.out_path, "Also write the JSON report to this file");
  app.add_option("--scene", cfg.scene_path, "Scene JSON for loss and heatmap (default: synthetic)");
  app.add_option("--heatmap", cfg.heatmap_dir, "Directory for PGM heatmaps and their sidecar");

  app.add_option("--tau-t", o.tau_t, "Token posterior temperature (default 1)");
  app.add_option("--tau", o.tau, "Contrastive temperature (default 0.25)");
  app.add_option("--lambda-sem", o.lambda_sem, "Semantic loss weight (default 0.5)");
  app.add_option("--lambda-geo", o.lambda_geo, "Consistency loss weight (default 1)");
  app.add_option("--clip", o.clip, "Advantage clip bound c (default 3)");
  app.add_option("--epsilon", o.epsilon, "Stabilizer epsilon (default 1e-6)");
  app.add_option("--k-ratio", o.k_ratio, "Top-k budget as a fraction of the fine grid (default 0.01)");
  app.add_option("--std-mode", o.std_mode, "Region spread: population (default) or sample")
      ->check(CLI::IsMember({"population", "sample"}));
  app.add_flag("--no-normalize", o.no_normalize, "Skip the max-abs normalization of fused maps");
  app.add_flag("--inject-fault", o.inject_fault, "Flip the sign of the consistency loss value");
  app.add_option("--seeds", o.seeds, "Demo scenes, one per consecutive seed (default 10)");
  app.add_option("--steps", o.steps, "Demo gradient steps (default 500)");
  app.add_option("--lr", o.lr, "Demo learning rate (default 10)");
  app.add_option("--signal", o.signal, "Planted signal strength of synthetic scenes (default 1)");
  app.add_option("--gradient-configs", o.gradient_configs, "Configurations per gradient check (default 20)");

  const std::pair<const char*, const char*> commands[] = {
      {"loss", "Evaluate the objective on a scene"},
      {"verify", "Run every property suite"},
      {"gibbs", "Free-energy minimizer against the closed form"},
      {"mil", "Instance-bag view against the expectation head"},
      {"gradcheck", "Analytic gradients against finite differences"},
      {"demo", "Train token offsets on the weak-signal benchmark"},
      {"heatmap", "Write fine fused maps of a scene as PGM"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return expalign::kExitBadInput;
  }
  cfg.command = app.get_subcommands().front()->get_name();

  try {
    if (o.config) cfg = expalign::load_config_file(cfg, *o.config);
    apply(o, cfg);
  } catch (const expalign::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return expalign::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return expalign::kExitBadInput;
  }

  std::string error;
  const auto outcome = expalign::execute(cfg, error);
  if (!error.empty()) {
    std::cerr << "error: " << error << "\n";
    return outcome.status;
  }
  std::cout << (cfg.text ? outcome.text : expalign::dump_report(outcome.report));
  return outcome.status;
}
