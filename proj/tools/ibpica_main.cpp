// ibpica command-line driver. Thin layer over the C API: reads the JSON
// configuration, folds in flag overrides, runs the command and prints the
// report. Errors go to stderr as one JSON object; the exit code is the
// library status code.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ibpica/ibpica.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int report_error(ibpica_status status, const std::string& kind, const std::string& message) {
  json e;
  e["status"] = static_cast<int>(status);
  e["error"] = kind;
  e["message"] = message;
  std::cerr << e.dump() << "\n";
  return static_cast<int>(status);
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> updates;
  std::optional<std::size_t> layers;
};

int run(const std::string& command, const Options& opt) {
  std::ifstream in(opt.config, std::ios::binary);
  if (!in) return report_error(IBPICA_ERR_IO, "io", "cannot open config file " + opt.config);
  std::stringstream buf;
  buf << in.rdbuf();

  json config;
  try {
    config = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    return report_error(IBPICA_ERR_CONFIG, "config", std::string("config is not valid JSON: ") + e.what());
  }
  if (command != "train" && (opt.updates || opt.layers))
    std::cerr << "warning: --updates and --layers only affect the train command\n";
  if (config.is_object()) {
    if (opt.seed) config["seed"] = *opt.seed;
    if (command == "train") {
      if (opt.updates) config["updates"] = *opt.updates;
      if (opt.layers) config["network"]["n_layers"] = *opt.layers;
    }
  }

  // Paths inside the config are relative to the config file.
  const fs::path dir = fs::absolute(opt.config).parent_path();
  std::error_code ec;
  fs::current_path(dir, ec);
  if (ec) return report_error(IBPICA_ERR_IO, "io", "cannot enter " + dir.string() + ": " + ec.message());

  char* report = nullptr;
  const ibpica_status st = ibpica_run_command(command.c_str(), config.dump().c_str(), &report);
  if (st != IBPICA_OK) {
    std::cerr << ibpica_last_error() << "\n";
    return static_cast<int>(st);
  }
  std::cout << json::parse(report).dump(2) << "\n";
  ibpica_free_string(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonparametric sparse ICA and stacked convolutional video features"};
  app.set_version_flag("--version", std::string(ibpica_version()));
  app.require_subcommand(1);

  Options opt;
  std::string updates;
  std::uint64_t seed = 0;
  std::size_t layers = 0;
  const char* commands[][2] = {{"synth", "Generate a ground-truth bundle and optional synthetic clips"},
                               {"train", "Fit a model to a bundle or a network to video clips"},
                               {"extract", "Compute network features for video clips"},
                               {"quantize", "Fit or apply a k-means codebook and write histograms"}};
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c[0], c[1]);
    sub->add_option("--config", opt.config, "JSON configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--updates", updates, "Update forms")->check(CLI::IsMember({"exact", "as-printed"}));
    sub->add_option("--layers", layers, "Number of network layers")->check(CLI::Range(1, 2));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(IBPICA_ERR_INVALID_ARGUMENT, "usage", e.what());
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->count("--updates")) opt.updates = updates;
  if (sub->count("--layers")) opt.layers = layers;
  return run(sub->get_name(), opt);
}
