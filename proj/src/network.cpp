#include "ibpica/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ibpica/binary_io.hpp"
#include "ibpica/errors.hpp"
#include "ibpica/parallel.hpp"
#include "ibpica/rng.hpp"
#include "ibpica/serialize.hpp"

namespace ibpica {

using nlohmann::json;

namespace {
constexpr std::string_view kNetMagic{"IBPNET1\0", 8};
}  // namespace

// ---------------------------------------------------------------------------
// Pooling

const char* to_string(PoolMode mode) {
  switch (mode) {
    case PoolMode::L2:
      return "l2";
    case PoolMode::Max:
      return "max";
    case PoolMode::Mean:
      return "mean";
  }
  return "l2";
}

PoolMode pool_mode_from_string(const std::string& name) {
  if (name == "l2") return PoolMode::L2;
  if (name == "max") return PoolMode::Max;
  if (name == "mean") return PoolMode::Mean;
  throw InvalidArgument("unknown pooling mode '" + name + "' (expected l2, max or mean)");
}

std::size_t PoolingSpec::pooled_dim(std::size_t features) const {
  validate();
  return (features + group_size - 1) / group_size;
}

void PoolingSpec::validate() const {
  if (group_size < 1) throw InvalidArgument("pooling: group size must be >= 1");
}

Vector pool(const PoolingSpec& spec, const Vector& features) {
  const std::size_t K = static_cast<std::size_t>(features.size());
  if (K < 1) throw InvalidArgument("pool: need at least one feature");
  const std::size_t P = spec.pooled_dim(K);
  Vector out(static_cast<Eigen::Index>(P));
  for (std::size_t g = 0; g < P; ++g) {
    const auto begin = static_cast<Eigen::Index>(g * spec.group_size);
    const auto len = static_cast<Eigen::Index>(std::min(spec.group_size, K - g * spec.group_size));
    const auto block = features.segment(begin, len);
    switch (spec.mode) {
      case PoolMode::L2:
        out(static_cast<Eigen::Index>(g)) = block.norm();
        break;
      case PoolMode::Max:
        out(static_cast<Eigen::Index>(g)) = block.maxCoeff();
        break;
      case PoolMode::Mean:
        out(static_cast<Eigen::Index>(g)) = block.mean();
        break;
    }
  }
  return out;
}

FeatureMap pool_map(const PoolingSpec& spec, const FeatureMap& map) {
  FeatureMap out;
  out.grid = map.grid;
  out.values.resize(map.values.rows(), static_cast<Eigen::Index>(spec.pooled_dim(map.channels())));
  for (Eigen::Index r = 0; r < map.values.rows(); ++r) out.values.row(r) = pool(spec, map.values.row(r).transpose()).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Feedforward map

Vector frozen_source_precision(const ModelState& state) {
  const Expectations e = compute_expectations(state);
  Vector prec = Vector::Zero(static_cast<Eigen::Index>(state.features()));
  for (std::size_t j = 0; j < state.components(); ++j) {
    const Vector mean_resp = state.sources.responsibilities[j].colwise().mean().transpose();
    prec += mean_resp.cwiseProduct(e.inv_scale.col(static_cast<Eigen::Index>(j)));
  }
  return prec;
}

Matrix feedforward_matrix(const ModelState& state, const Vector& source_precision) {
  const auto K = static_cast<Eigen::Index>(state.features());
  if (source_precision.size() != K) throw InvalidArgument("source precision must have length K");
  const Expectations e = compute_expectations(state);
  const Matrix proj = e.phi * e.loading.transpose();  // K x D
  if (state.mode == UpdateMode::AsPrinted) {
    const Vector diag = e.phi * e.loading_sq.colwise().sum().transpose() + source_precision;
    return diag.cwiseInverse().asDiagonal() * proj;
  }
  Matrix A = e.phi * e.loading.transpose() * e.loading;
  A.diagonal() = e.phi * e.loading_sq.colwise().sum().transpose() + source_precision;
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("feedforward: source precision is not positive definite");
  return llt.solve(proj);
}

Vector feature_forward(const ModelState& state, const Vector& x, const Vector& source_precision) {
  if (static_cast<std::size_t>(x.size()) != state.dims())
    throw InvalidArgument("feature_forward: input has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(state.dims()));
  return feedforward_matrix(state, source_precision) * x;
}

void LayerModel::freeze() {
  if (whitening.retained_dim() != ica.dims())
    throw InvalidArgument("layer: whitened dimension " + std::to_string(whitening.retained_dim()) +
                          " does not match model dimension " + std::to_string(ica.dims()));
  pooling.validate();
  source_precision = frozen_source_precision(ica);
  forward = feedforward_matrix(ica, source_precision);
}

Vector feature_forward(const LayerModel& layer, const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != layer.input_dim())
    throw InvalidArgument("feature_forward: input has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(layer.input_dim()));
  if (layer.forward.rows() != static_cast<Eigen::Index>(layer.feature_dim()) || layer.forward.cols() != x.size())
    throw InvalidArgument("feature_forward: layer is not frozen");
  return layer.forward * x;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

/// Whitening + feedforward for a batch of raw patch rows.
Matrix forward_rows(const LayerModel& layer, Matrix rows) {
  if (layer.contrast_normalize) contrast_normalize(rows);
  const Matrix white = layer.whitening.apply_rows(rows);
  if (layer.forward.cols() != white.cols()) throw InvalidArgument("layer is not frozen");
  return white * layer.forward.transpose();
}

}  // namespace

FeatureMap convolve_layer(const LayerModel& layer, const VideoTensor& v) {
  v.validate();
  FeatureMap map;
  map.grid = patch_grid(v.height, v.width, v.frames, layer.rf);
  if (map.grid.count() == 0) {
    warn("video is smaller than the layer receptive field; empty feature map");
    map.values.resize(0, static_cast<Eigen::Index>(layer.feature_dim()));
    return map;
  }
  const Matrix patches = extract_patches(v, layer.rf);
  map.values.resize(patches.rows(), static_cast<Eigen::Index>(layer.feature_dim()));
  parallel_for(static_cast<std::size_t>(patches.rows()), [&](std::size_t begin, std::size_t end) {
    const auto b = static_cast<Eigen::Index>(begin), n = static_cast<Eigen::Index>(end - begin);
    map.values.middleRows(b, n) = forward_rows(layer, patches.middleRows(b, n));
  });
  return map;
}

ReceptiveField layer2_window(const ReceptiveField& rf1, const ReceptiveField& rf2) {
  rf1.validate();
  const auto cells = [](std::size_t e2, std::size_t e1, std::size_t s1, const char* axis) {
    if (e2 < e1)
      throw InvalidArgument(std::string("layer-2 field is smaller than the layer-1 field along ") + axis);
    return (e2 - e1) / s1 + 1;
  };
  ReceptiveField w;
  w.sx = cells(rf2.sx, rf1.sx, rf1.stride_x, "x");
  w.sy = cells(rf2.sy, rf1.sy, rf1.stride_y, "y");
  w.st = cells(rf2.st, rf1.st, rf1.stride_t, "t");
  w.stride_x = std::max<std::size_t>(1, w.sx / 2);
  w.stride_y = std::max<std::size_t>(1, w.sy / 2);
  w.stride_t = std::max<std::size_t>(1, w.st / 2);
  return w;
}

GridShape layer2_grid(const GridShape& g1, const ReceptiveField& window) {
  window.validate();
  GridShape g{grid_count(g1.nx, window.sx, window.stride_x), grid_count(g1.ny, window.sy, window.stride_y),
              grid_count(g1.nt, window.st, window.stride_t)};
  if (g.count() == 0) g = {};
  return g;
}

std::size_t layer2_input_dim(std::size_t pooled_features, const ReceptiveField& window) {
  return pooled_features * window.volume();
}

Vector layer2_input(const FeatureMap& pooled, const ReceptiveField& window, std::size_t gx, std::size_t gy,
                    std::size_t gt) {
  const std::size_t C = pooled.channels();
  const std::size_t x0 = gx * window.stride_x, y0 = gy * window.stride_y, t0 = gt * window.stride_t;
  if (x0 + window.sx > pooled.grid.nx || y0 + window.sy > pooled.grid.ny || t0 + window.st > pooled.grid.nt)
    throw InvalidArgument("layer-2 window outside the layer-1 grid");
  Vector out(static_cast<Eigen::Index>(layer2_input_dim(C, window)));
  Eigen::Index off = 0;
  for (std::size_t t = 0; t < window.st; ++t)
    for (std::size_t y = 0; y < window.sy; ++y)
      for (std::size_t x = 0; x < window.sx; ++x) {
        const auto row = static_cast<Eigen::Index>(pooled.index(x0 + x, y0 + y, t0 + t));
        out.segment(off, static_cast<Eigen::Index>(C)) = pooled.values.row(row).transpose();
        off += static_cast<Eigen::Index>(C);
      }
  return out;
}

Matrix layer2_inputs(const FeatureMap& pooled, const ReceptiveField& window) {
  const GridShape g = layer2_grid(pooled.grid, window);
  Matrix out(static_cast<Eigen::Index>(g.count()), static_cast<Eigen::Index>(layer2_input_dim(pooled.channels(), window)));
  Eigen::Index r = 0;
  for (std::size_t t = 0; t < g.nt; ++t)
    for (std::size_t y = 0; y < g.ny; ++y)
      for (std::size_t x = 0; x < g.nx; ++x) out.row(r++) = layer2_input(pooled, window, x, y, t).transpose();
  return out;
}

FeatureMap convolve_feature_map(const LayerModel& layer2, const FeatureMap& pooled) {
  FeatureMap map;
  map.grid = layer2_grid(pooled.grid, layer2.window);
  if (map.grid.count() == 0) {
    map.values.resize(0, static_cast<Eigen::Index>(layer2.feature_dim()));
    return map;
  }
  const Matrix inputs = layer2_inputs(pooled, layer2.window);
  map.values = forward_rows(layer2, inputs);
  return map;
}

// ---------------------------------------------------------------------------
// Network

std::size_t NetworkModel::output_dim() const {
  if (layers.empty()) return 0;
  const std::size_t p1 = layers[0].pooled_dim();
  if (layers.size() == 1) return p1;
  const std::size_t k2 = layers[1].feature_dim();
  return combine_layers ? p1 + k2 : k2;
}

FeatureMap extract_features(const NetworkModel& net, const VideoTensor& v) {
  if (net.layers.empty() || net.layers.size() > 2) throw InvalidArgument("network must have one or two layers");
  const LayerModel& l1 = net.layers[0];
  FeatureMap empty;
  empty.values.resize(0, static_cast<Eigen::Index>(net.output_dim()));

  const FeatureMap map1 = convolve_layer(l1, v);
  if (map1.grid.count() == 0) return empty;
  FeatureMap pooled1 = pool_map(l1.pooling, map1);
  if (net.layers.size() == 1) return pooled1;

  const LayerModel& l2 = net.layers[1];
  FeatureMap map2 = convolve_feature_map(l2, pooled1);
  if (map2.grid.count() == 0) {
    warn("video is smaller than the layer-2 window; empty feature map");
    return empty;
  }
  if (!net.combine_layers) return map2;

  const auto P = static_cast<Eigen::Index>(pooled1.channels());
  const auto K2 = static_cast<Eigen::Index>(map2.channels());
  const ReceptiveField& w = l2.window;
  FeatureMap out;
  out.grid = map2.grid;
  out.values.resize(map2.values.rows(), P + K2);
  for (std::size_t gt = 0; gt < out.grid.nt; ++gt)
    for (std::size_t gy = 0; gy < out.grid.ny; ++gy)
      for (std::size_t gx = 0; gx < out.grid.nx; ++gx) {
        const auto r = static_cast<Eigen::Index>(out.index(gx, gy, gt));
        const Vector cat = layer2_input(pooled1, w, gx, gy, gt);
        Vector mean = Vector::Zero(P);
        for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(w.volume()); ++c) mean += cat.segment(c * P, P);
        mean /= static_cast<double>(w.volume());
        out.values.row(r).head(P) = mean.transpose();
        out.values.row(r).tail(K2) = map2.values.row(r);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Training

void NetworkTrainConfig::validate() const {
  if (layers.empty() || layers.size() > 2) throw InvalidArgument("network: one or two layers are supported");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lc = layers[l];
    lc.rf.validate();
    lc.pooling.validate();
    lc.hp.validate();
    lc.inference.validate();
    if (lc.n_train_patches < 1) throw InvalidArgument("network: n_train_patches must be >= 1");
    if (!(lc.variance_to_keep > 0.0 && lc.variance_to_keep <= 1.0))
      throw InvalidArgument("network: variance_to_keep must lie in (0, 1]");
  }
  if (layers.size() == 2) (void)layer2_window(layers[0].rf, layers[1].rf);
}

namespace {

/// n distinct indices from [0, available), ascending.
std::vector<std::size_t> sample_without_replacement(std::size_t available, std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(available - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Global sample index -> (video, cell) given per-video cell counts.
struct Locator {
  std::vector<std::size_t> offsets;  // prefix sums, size videos + 1

  explicit Locator(const std::vector<std::size_t>& counts) : offsets(counts.size() + 1, 0) {
    std::partial_sum(counts.begin(), counts.end(), offsets.begin() + 1);
  }
  std::size_t total() const { return offsets.back(); }
  std::pair<std::size_t, std::size_t> locate(std::size_t g) const {
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), g);
    const std::size_t v = static_cast<std::size_t>(it - offsets.begin()) - 1;
    return {v, g - offsets[v]};
  }
};

void require_patches(std::size_t layer, std::size_t required, std::size_t available) {
  if (available < required)
    throw InvalidArgument("layer " + std::to_string(layer + 1) + ": " + std::to_string(required) +
                          " training patches required but only " + std::to_string(available) + " available");
}

LayerModel fit_layer(Matrix samples, const LayerTrainConfig& lc, bool contrast, std::uint64_t seed,
                     InferenceResult& result) {
  LayerModel layer;
  layer.contrast_normalize = contrast;
  layer.pooling = lc.pooling;
  layer.rf = lc.rf;
  if (contrast) contrast_normalize(samples);
  layer.whitening = fit_whitening(samples, lc.variance_to_keep);
  InferenceConfig ic = lc.inference;
  ic.seed = seed;
  result = run_inference(ObservationMatrix(layer.whitening.apply_rows(samples)), lc.hp, ic);
  if (active_feature_count(result.state) == 0)
    warn("layer training ended with no active features: the whitened input is explained by the noise term alone; "
         "an informative noise prior (hyper.a, hyper.b with a large mean a/b) keeps features alive");
  layer.ica = result.state;
  layer.freeze();
  return layer;
}

}  // namespace

NetworkTrainResult train_network(const std::vector<VideoTensor>& videos, const NetworkTrainConfig& config) {
  config.validate();
  if (videos.empty()) throw InvalidArgument("train_network: empty video corpus");
  for (const auto& v : videos) v.validate();

  NetworkTrainResult out;
  out.network.combine_layers = config.combine_layers;
  out.network.config_json = config.config_json;
  out.inference.resize(config.layers.size());

  // Layer 1: raw patches.
  const LayerTrainConfig& c1 = config.layers[0];
  std::vector<std::size_t> counts;
  std::vector<GridShape> grids;
  for (const auto& v : videos) {
    grids.push_back(patch_grid(v.height, v.width, v.frames, c1.rf));
    counts.push_back(grids.back().count());
  }
  Locator loc1(counts);
  require_patches(0, c1.n_train_patches, loc1.total());
  RngStream pick1(derive_seed(config.seed, 1), 0);
  const auto chosen1 = sample_without_replacement(loc1.total(), c1.n_train_patches, pick1);
  Matrix samples1(static_cast<Eigen::Index>(chosen1.size()), static_cast<Eigen::Index>(c1.rf.volume()));
  for (std::size_t i = 0; i < chosen1.size(); ++i) {
    const auto [vi, cell] = loc1.locate(chosen1[i]);
    const GridShape& g = grids[vi];
    samples1.row(static_cast<Eigen::Index>(i)) =
        extract_patch(videos[vi], c1.rf, cell % g.nx, (cell / g.nx) % g.ny, cell / (g.nx * g.ny)).transpose();
  }
  out.network.layers.push_back(fit_layer(std::move(samples1), c1, true, derive_seed(config.seed, 101), out.inference[0]));
  if (config.layers.size() == 1) return out;

  // Layer 2: windows over the pooled layer-1 maps.
  const LayerTrainConfig& c2 = config.layers[1];
  const LayerModel& l1 = out.network.layers[0];
  const ReceptiveField window = layer2_window(c1.rf, c2.rf);
  std::vector<std::size_t> counts2;
  std::vector<GridShape> grids2;
  for (const auto& g : grids) {
    grids2.push_back(g.count() ? layer2_grid(g, window) : GridShape{});
    counts2.push_back(grids2.back().count());
  }
  Locator loc2(counts2);
  require_patches(1, c2.n_train_patches, loc2.total());
  RngStream pick2(derive_seed(config.seed, 2), 0);
  const auto chosen2 = sample_without_replacement(loc2.total(), c2.n_train_patches, pick2);
  Matrix samples2(static_cast<Eigen::Index>(chosen2.size()),
                  static_cast<Eigen::Index>(layer2_input_dim(l1.pooled_dim(), window)));
  std::size_t current_video = videos.size();
  FeatureMap pooled;
  for (std::size_t i = 0; i < chosen2.size(); ++i) {
    const auto [vi, cell] = loc2.locate(chosen2[i]);
    if (vi != current_video) {
      pooled = pool_map(l1.pooling, convolve_layer(l1, videos[vi]));
      current_video = vi;
    }
    const GridShape& g = grids2[vi];
    samples2.row(static_cast<Eigen::Index>(i)) =
        layer2_input(pooled, window, cell % g.nx, (cell / g.nx) % g.ny, cell / (g.nx * g.ny)).transpose();
  }
  LayerModel l2 = fit_layer(std::move(samples2), c2, false, derive_seed(config.seed, 102), out.inference[1]);
  l2.window = window;
  out.network.layers.push_back(std::move(l2));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json rf_json(const ReceptiveField& rf) {
  return json::array({rf.sx, rf.sy, rf.st, rf.stride_x, rf.stride_y, rf.stride_t});
}

ReceptiveField rf_from_json(const json& j) {
  if (!j.is_array() || j.size() != 6) throw FormatError("network: malformed receptive field");
  ReceptiveField rf;
  rf.sx = j[0].get<std::size_t>();
  rf.sy = j[1].get<std::size_t>();
  rf.st = j[2].get<std::size_t>();
  rf.stride_x = j[3].get<std::size_t>();
  rf.stride_y = j[4].get<std::size_t>();
  rf.stride_t = j[5].get<std::size_t>();
  rf.validate();
  return rf;
}

}  // namespace

std::string serialize_network(const NetworkModel& net) {
  ByteWriter w;
  w.magic(kNetMagic);
  w.str(net.config_json);
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& layer : net.layers) {
    json meta = {{"rf", rf_json(layer.rf)},
                 {"window", rf_json(layer.window)},
                 {"pooling", {{"group_size", layer.pooling.group_size}, {"mode", to_string(layer.pooling.mode)}}},
                 {"contrast_normalize", layer.contrast_normalize},
                 {"combine_layers", net.combine_layers}};
    w.str(meta.dump());
    const auto& wt = layer.whitening;
    w.u32(static_cast<std::uint32_t>(wt.input_dim()));
    w.u32(static_cast<std::uint32_t>(wt.retained_dim()));
    w.f64(wt.eig_floor);
    for (Eigen::Index i = 0; i < wt.mean.size(); ++i) w.f64(wt.mean(i));
    for (Eigen::Index r = 0; r < wt.projection.rows(); ++r)
      for (Eigen::Index c = 0; c < wt.projection.cols(); ++c) w.f64(wt.projection(r, c));
    const std::string blob = serialize_model(layer.ica);
    w.u64(blob.size());
    w.magic(blob);
  }
  return w.take();
}

NetworkModel deserialize_network(std::string_view bytes) {
  ByteReader r(bytes, "network container");
  r.expect_magic(kNetMagic);
  NetworkModel net;
  net.config_json = r.str();
  const std::uint32_t n_layers = r.u32();
  if (n_layers < 1 || n_layers > 2) r.fail("expected one or two layers");
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    LayerModel layer;
    try {
      const json meta = json::parse(r.str());
      layer.rf = rf_from_json(meta.at("rf"));
      layer.window = rf_from_json(meta.at("window"));
      layer.pooling.group_size = meta.at("pooling").at("group_size").get<std::size_t>();
      layer.pooling.mode = pool_mode_from_string(meta.at("pooling").at("mode").get<std::string>());
      layer.contrast_normalize = meta.at("contrast_normalize").get<bool>();
      net.combine_layers = meta.at("combine_layers").get<bool>();
    } catch (const json::exception& e) {
      r.fail(std::string("malformed layer metadata: ") + e.what());
    } catch (const InvalidArgument& e) {
      r.fail(std::string("malformed layer metadata: ") + e.what());
    }
    const std::size_t D = r.u32(), Dp = r.u32();
    if (D == 0 || Dp == 0 || Dp > D) r.fail("bad whitening dimensions");
    if (D * (Dp + 1) > r.remaining() / 8) r.fail("whitening arrays overrun the container");
    auto& wt = layer.whitening;
    wt.eig_floor = r.f64();
    wt.mean.resize(static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < wt.mean.size(); ++i) wt.mean(i) = r.f64();
    wt.projection.resize(static_cast<Eigen::Index>(Dp), static_cast<Eigen::Index>(D));
    for (Eigen::Index rr = 0; rr < wt.projection.rows(); ++rr)
      for (Eigen::Index c = 0; c < wt.projection.cols(); ++c) wt.projection(rr, c) = r.f64();
    const std::uint64_t blob_len = r.u64();
    if (blob_len > r.remaining()) r.fail("model blob overruns the container");
    layer.ica = deserialize_model(r.bytes(static_cast<std::size_t>(blob_len)));
    try {
      layer.freeze();
    } catch (const Error& e) {
      r.fail(std::string("inconsistent layer: ") + e.what());
    }
    net.layers.push_back(std::move(layer));
  }
  if (!r.done()) r.fail("trailing bytes after last layer");
  if (net.layers[0].whitening.input_dim() != net.layers[0].rf.volume())
    r.fail("layer-1 whitening does not match the receptive field volume");
  if (net.layers.size() == 2 &&
      net.layers[1].whitening.input_dim() != layer2_input_dim(net.layers[0].pooled_dim(), net.layers[1].window))
    r.fail("layer-2 whitening does not match the layer-1 output");
  return net;
}

void save_network(const NetworkModel& net, const std::string& path) { write_file(path, serialize_network(net)); }
NetworkModel load_network(const std::string& path) { return deserialize_network(read_file(path)); }

}  // namespace ibpica
