#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ibpica/inference.hpp"
#include "ibpica/video.hpp"
#include "ibpica/whitening.hpp"

namespace ibpica {

enum class PoolMode { L2, Max, Mean };
const char* to_string(PoolMode mode);
PoolMode pool_mode_from_string(const std::string& name);

struct PoolingSpec {
  std::size_t group_size = 2;
  PoolMode mode = PoolMode::L2;

  /// ceil(K / p): the last partial group is kept.
  std::size_t pooled_dim(std::size_t features) const;
  void validate() const;
};

/// Reduce consecutive blocks of `group_size` features.
Vector pool(const PoolingSpec& spec, const Vector& features);

/// Per-position vectors over a patch grid; row r holds grid cell r in
/// x-fastest, then y, then t order.
struct FeatureMap {
  GridShape grid;
  Matrix values;  // grid.count() x channels

  std::size_t channels() const noexcept { return static_cast<std::size_t>(values.cols()); }
  std::size_t index(std::size_t ix, std::size_t iy, std::size_t it) const { return ix + grid.nx * (iy + grid.ny * it); }
};

/// One trained IBP-ICA copy with its preprocessing.
struct LayerModel {
  ModelState ica;
  WhiteningTransform whitening;
  PoolingSpec pooling;
  /// Layer 1: field in pixels. Layer 2: the configured pixel field, kept for
  /// reference; the layer actually runs over `window`.
  ReceptiveField rf;
  /// Layer 2 only: window and stride in layer-1 grid cells.
  ReceptiveField window;
  bool contrast_normalize = true;

  /// Cached feedforward map, K x D'. Call freeze() after changing `ica`.
  Matrix forward;
  /// Frozen per-feature source precision sum_j mean_n(zeta_nkj) E[s_kj^-1].
  Vector source_precision;

  void freeze();
  std::size_t input_dim() const noexcept { return whitening.retained_dim(); }
  std::size_t feature_dim() const noexcept { return ica.features(); }
  std::size_t pooled_dim() const { return pooling.pooled_dim(feature_dim()); }
};

/// Feedforward features for a whitened input, a fixed linear map. Exact mode
/// solves the frozen source precision system; as-printed mode scales the
/// projection by the diagonal variance only.
Vector feature_forward(const LayerModel& layer, const Vector& x);
/// Same map, but with a caller-supplied per-feature source precision
/// (length K) in place of the frozen one.
Vector feature_forward(const ModelState& state, const Vector& x, const Vector& source_precision);
/// Frozen source precision derived from a trained state.
Vector frozen_source_precision(const ModelState& state);
/// Feedforward matrix (K x D) for a state and a source precision vector.
Matrix feedforward_matrix(const ModelState& state, const Vector& source_precision);

/// Preprocess (contrast normalisation when enabled, whitening) and map every
/// patch of a clip through a first-layer model.
FeatureMap convolve_layer(const LayerModel& layer, const VideoTensor& v);
/// Apply pooling at every grid position.
FeatureMap pool_map(const PoolingSpec& spec, const FeatureMap& map);

/// Window of layer-1 cells covered by a pixel field: floor((e2 - e1) / s1) + 1
/// cells per axis, stepped by max(1, cells / 2).
ReceptiveField layer2_window(const ReceptiveField& rf1, const ReceptiveField& rf2);
GridShape layer2_grid(const GridShape& layer1_grid, const ReceptiveField& window);
std::size_t layer2_input_dim(std::size_t pooled_features, const ReceptiveField& window);
/// Concatenated pooled vectors of one window (cells in x, y, t order).
Vector layer2_input(const FeatureMap& pooled, const ReceptiveField& window, std::size_t gx, std::size_t gy,
                    std::size_t gt);
Matrix layer2_inputs(const FeatureMap& pooled, const ReceptiveField& window);
/// Run a second-layer model over a pooled first-layer map.
FeatureMap convolve_feature_map(const LayerModel& layer2, const FeatureMap& pooled);

struct NetworkModel {
  std::vector<LayerModel> layers;
  bool combine_layers = true;
  std::string config_json = "{}";  // provenance, stored verbatim

  /// Length of the vectors returned by extract_features.
  std::size_t output_dim() const;
};

/// One-layer nets: the pooled layer-1 map. Two-layer nets: the layer-2 map,
/// prefixed when combine_layers by the mean pooled layer-1 vector over the
/// cells each layer-2 window covers. Clips smaller than the layer-1 field give
/// an empty map and a warning.
FeatureMap extract_features(const NetworkModel& net, const VideoTensor& v);

struct LayerTrainConfig {
  ReceptiveField rf = ReceptiveField::with_default_strides(16, 16, 10);
  PoolingSpec pooling;
  Hyperparameters hp;
  InferenceConfig inference;
  std::size_t n_train_patches = 200000;
  double variance_to_keep = 0.99;
};

struct NetworkTrainConfig {
  std::vector<LayerTrainConfig> layers;
  bool combine_layers = true;
  std::uint64_t seed = 0;
  std::string config_json = "{}";

  void validate() const;
};

struct NetworkTrainResult {
  NetworkModel network;
  std::vector<InferenceResult> inference;  // per layer
};

/// Greedy layerwise training; each layer is frozen before the next is fitted.
NetworkTrainResult train_network(const std::vector<VideoTensor>& videos, const NetworkTrainConfig& config);

/// "IBPNET1\0", u32 JSON length, JSON provenance, u32 layer count, then per
/// layer: u32 JSON length and layer JSON (geometry, pooling), whitening
/// (u32 D, u32 D', f64 floor, f64 mean, f64 projection), u64 model length,
/// model container.
std::string serialize_network(const NetworkModel& net);
NetworkModel deserialize_network(std::string_view bytes);
void save_network(const NetworkModel& net, const std::string& path);
NetworkModel load_network(const std::string& path);

}  // namespace ibpica
