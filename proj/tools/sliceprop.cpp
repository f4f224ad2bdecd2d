// Command line front end of the staged pipeline.
//
//   sliceprop <subcommand> --config <path> [--seed N] [--out DIR] [--set key=value]...
//
// Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
// 3 missing or stale upstream stage, 4 numeric failure.

#include "sliceprop/errors.hpp"
#include "sliceprop/pipeline.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>

namespace {

using Stage = std::function<void(const sliceprop::PipelineConfig&, const std::filesystem::path&)>;

const std::vector<std::pair<std::string, std::pair<std::string, Stage>>>& stages() {
  using namespace sliceprop;
  static const std::vector<std::pair<std::string, std::pair<std::string, Stage>>> list{
      {"synth", {"generate synthetic train/test phantoms", cmd_synth}},
      {"train-bootstrap", {"train the single-path edge-profile model", cmd_train_bootstrap}},
      {"gen-pls", {"propagate the bootstrap model over the train volumes", cmd_gen_pls}},
      {"refine-pls", {"refine the pseudo-labels with the configured refiner", cmd_refine_pls}},
      {"train-oeg", {"train the dual-path model on pseudo-labels", cmd_train_oeg}},
      {"propagate", {"propagate the test annotations with a trained model", cmd_propagate}},
      {"eval", {"score propagation runs against ground truth", cmd_eval}},
      {"plot", {"tabulate and draw Dice versus distance", cmd_plot}},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised slice-to-slice mask propagation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  std::map<CLI::App*, Stage> handlers;

  for (const auto& [name, entry] : stages()) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", config_path, "JSON or key = value config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "overrides the `seed` key");
    sub->add_option("--out", out_dir, "output root")->capture_default_str();
    sub->add_option("--set", overrides, "key=value override, repeatable");
    handlers[sub] = entry.second;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    sliceprop::PipelineConfig cfg;
    cfg.merge_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw sliceprop::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    handlers.at(app.get_subcommands().front())(cfg, out_dir);
  } catch (const sliceprop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sliceprop::StageDependencyError& e) {
    std::cerr << "stage dependency: " << e.what() << "\n";
    return 3;
  } catch (const sliceprop::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
