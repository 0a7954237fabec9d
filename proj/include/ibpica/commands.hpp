#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibpica/config.hpp"
#include "ibpica/kmeans.hpp"
#include "ibpica/network.hpp"
#include "ibpica/synth.hpp"

namespace ibpica {

inline constexpr const char* kVersion = "1.0.0";

/// Command entry points. Each takes the effective JSON configuration (after
/// flag overrides), validates it fully, writes its artifacts and returns a
/// JSON report. Relative paths resolve against the working directory.
nlohmann::json cmd_synth(const nlohmann::json& config);
nlohmann::json cmd_train(const nlohmann::json& config);
nlohmann::json cmd_extract(const nlohmann::json& config);
nlohmann::json cmd_quantize(const nlohmann::json& config);
/// Dispatch on "synth", "train", "extract" or "quantize".
nlohmann::json run_command(const std::string& command, const nlohmann::json& config);

/// Provenance record embedded in every artifact: command, version and the
/// effective configuration.
std::string provenance(const std::string& command, const nlohmann::json& config);

// Ground-truth bundle: "IBPSYN1\0", provenance string, u32 array count, then
// named arrays (name string, u32 rows, u32 cols, f64 row-major).
struct SynthBundle {
  std::string provenance;
  Matrix X, loadings, sources, support;
  double noise_precision = 0.0;
};
std::string serialize_bundle(const SynthBundle& b);
SynthBundle deserialize_bundle(std::string_view bytes);
SynthBundle load_bundle(const std::string& path);

// Feature tensor: "IBPFEAT1", provenance string, u32 clip count, then per clip
// a label string, u32 nx, ny, nt, u32 rows, u32 cols and float32 row-major
// values.
struct ClipFeatures {
  std::string label;
  GridShape grid;
  Eigen::MatrixXf values;
};
struct FeatureFile {
  std::string provenance;
  std::vector<ClipFeatures> clips;
};
std::string serialize_features(const FeatureFile& f);
FeatureFile deserialize_features(std::string_view bytes);
FeatureFile load_features(const std::string& path);

// Codebook: "IBPCB1\0\0", provenance string, u32 C, u32 F, f64 centres.
std::string serialize_codebook(const Codebook& cb, const std::string& provenance);
Codebook deserialize_codebook(std::string_view bytes, std::string* provenance = nullptr);
Codebook load_codebook(const std::string& path);

/// RFC-4180 CSV (CRLF line ends, quoting only where needed).
std::string csv_field(std::string_view s);
std::string csv_row(const std::vector<std::string>& fields);
/// Shortest decimal text that round-trips the value.
std::string format_number(double v);
std::string format_number(float v);
/// Write a CSV file plus "<path>.json" carrying the provenance record.
void write_csv(const std::string& path, const std::string& contents, const std::string& provenance);

/// Load clips for an input spec (VIDT1 files or PGM/PPM frame directories).
std::vector<VideoTensor> load_videos(const InputSpec& input);

}  // namespace ibpica
