#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibpica/network.hpp"
#include "ibpica/synth.hpp"

namespace ibpica {

/// Parsed command configurations. Every parser validates the whole document
/// and throws ConfigError listing each offending field (dotted paths such as
/// "network.layers[1].rf"). Unknown keys are rejected.

struct SynthCommandConfig {
  std::uint64_t seed = 0;
  SynthConfig data;
  std::string bundle_path;
  std::optional<std::string> csv_path;  // observations as CSV
  VideoSynthConfig videos;              // count 0: no videos
  std::string video_dir = ".";
};

enum class InputKind { Bundle, Videos, FrameDirs };

struct InputSpec {
  InputKind kind = InputKind::Videos;
  std::vector<std::string> paths;
  bool whiten = false;             // bundle input only
  double variance_to_keep = 0.99;  // bundle input only
};

struct TrainCommandConfig {
  std::uint64_t seed = 0;
  UpdateMode mode = UpdateMode::Exact;
  InputSpec input;
  Hyperparameters hp;
  InferenceConfig inference;
  NetworkTrainConfig network;  // video inputs
  std::string model_path;
  std::optional<std::string> trace_csv;
};

struct ExtractCommandConfig {
  std::uint64_t seed = 0;
  std::string network_path;
  InputSpec input;
  std::string features_path;
  std::optional<std::string> csv_path;
};

struct QuantizeCommandConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> feature_paths;
  std::size_t codebook_size = 64;
  std::size_t max_iter = 100;
  std::optional<std::string> codebook_in;  // reuse instead of fitting
  std::string codebook_path;
  std::string histograms_csv;
};

/// Options for fitting a single model in memory: "seed", "updates",
/// "hyper" and "inference" with the same meaning as in the train command.
struct InferenceOptions {
  Hyperparameters hp;
  InferenceConfig inference;
};
InferenceOptions parse_inference_options(const nlohmann::json& options);

SynthCommandConfig parse_synth_config(const nlohmann::json& config);
TrainCommandConfig parse_train_config(const nlohmann::json& config);
ExtractCommandConfig parse_extract_config(const nlohmann::json& config);
QuantizeCommandConfig parse_quantize_config(const nlohmann::json& config);

}  // namespace ibpica
