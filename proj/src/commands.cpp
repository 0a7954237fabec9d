#include "ibpica/commands.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>

#include "ibpica/binary_io.hpp"
#include "ibpica/errors.hpp"
#include "ibpica/inference.hpp"
#include "ibpica/serialize.hpp"
#include "ibpica/whitening.hpp"

namespace ibpica {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kBundleMagic{"IBPSYN1\0", 8};
constexpr std::string_view kFeatureMagic{"IBPFEAT1", 8};
constexpr std::string_view kCodebookMagic{"IBPCB1\0\0", 8};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw InvalidArgument(std::string(what) + " exceeds the 32-bit container limit");
  return static_cast<std::uint32_t>(v);
}

void put_matrix(ByteWriter& w, const std::string& name, const Matrix& m) {
  w.str(name);
  w.u32(checked_u32(m.rows(), "rows"));
  w.u32(checked_u32(m.cols(), "cols"));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

Matrix get_matrix(ByteReader& r, std::size_t& rows, std::size_t& cols) {
  rows = r.u32();
  cols = r.u32();
  if (rows * cols * 8 > r.remaining()) r.fail("array larger than the remaining data");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = r.f64();
  return m;
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
  }
}

void write_artifact(const std::string& path, std::string_view bytes) {
  ensure_parent(path);
  write_file(path, bytes);
}

void write_sidecar(const std::string& path, const std::string& prov) {
  write_artifact(path + ".json", json::parse(prov).dump(2) + "\n");
}

std::string clip_label(const InputSpec& in, std::size_t i) {
  return fs::path(in.paths[i]).filename().string();
}

json iteration_json(const InferenceResult& r) {
  json out;
  const std::size_t active = active_feature_count(r.state);
  out["features"] = r.state.features();
  out["inferred_K"] = active;
  out["iterations"] = r.trace.size();
  out["converged"] = r.converged;
  out["elbo"] = r.trace.empty() ? 0.0 : r.trace.back().elbo;
  std::size_t births = 0, pruned = 0;
  for (const auto& it : r.trace) {
    births += it.accepted;
    pruned += it.pruned;
  }
  out["births_accepted"] = births;
  out["pruned"] = pruned;
  return out;
}

void append_trace(std::string& csv, std::size_t layer, const InferenceResult& r) {
  for (const auto& it : r.trace)
    csv += csv_row({std::to_string(layer), std::to_string(it.iteration), format_number(it.elbo),
                    std::to_string(it.features), std::to_string(it.active), std::to_string(it.accepted),
                    std::to_string(it.pruned)});
}

}  // namespace

std::string provenance(const std::string& command, const json& config) {
  json p;
  p["command"] = command;
  p["version"] = kVersion;
  p["config"] = config;
  return p.dump();
}

// ---------------------------------------------------------------- containers

std::string serialize_bundle(const SynthBundle& b) {
  ByteWriter w;
  w.magic(kBundleMagic);
  w.str(b.provenance);
  w.f64(b.noise_precision);
  w.u32(4);
  put_matrix(w, "X", b.X);
  put_matrix(w, "loadings", b.loadings);
  put_matrix(w, "sources", b.sources);
  put_matrix(w, "support", b.support);
  return w.take();
}

SynthBundle deserialize_bundle(std::string_view bytes) {
  ByteReader r(bytes, "bundle");
  r.expect_magic(kBundleMagic);
  SynthBundle b;
  b.provenance = r.str();
  b.noise_precision = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    std::size_t rows = 0, cols = 0;
    Matrix m = get_matrix(r, rows, cols);
    if (name == "X") b.X = std::move(m);
    else if (name == "loadings") b.loadings = std::move(m);
    else if (name == "sources") b.sources = std::move(m);
    else if (name == "support") b.support = std::move(m);
    else r.fail("unknown array '" + name + "'");
  }
  if (!r.done()) r.fail("trailing bytes");
  if (b.X.size() == 0) r.fail("missing observation array X");
  if (b.loadings.size() && b.loadings.rows() != b.X.cols()) r.fail("loadings rows do not match D");
  if (!b.X.allFinite()) r.fail("non-finite observations");
  return b;
}

SynthBundle load_bundle(const std::string& path) { return deserialize_bundle(read_file(path)); }

std::string serialize_features(const FeatureFile& f) {
  ByteWriter w;
  w.magic(kFeatureMagic);
  w.str(f.provenance);
  w.u32(checked_u32(f.clips.size(), "clip count"));
  for (const auto& c : f.clips) {
    w.str(c.label);
    w.u32(checked_u32(c.grid.nx, "grid"));
    w.u32(checked_u32(c.grid.ny, "grid"));
    w.u32(checked_u32(c.grid.nt, "grid"));
    w.u32(checked_u32(c.values.rows(), "rows"));
    w.u32(checked_u32(c.values.cols(), "cols"));
    for (Eigen::Index r = 0; r < c.values.rows(); ++r)
      for (Eigen::Index k = 0; k < c.values.cols(); ++k) w.f32(c.values(r, k));
  }
  return w.take();
}

FeatureFile deserialize_features(std::string_view bytes) {
  ByteReader r(bytes, "feature file");
  r.expect_magic(kFeatureMagic);
  FeatureFile f;
  f.provenance = r.str();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    ClipFeatures c;
    c.label = r.str();
    c.grid.nx = r.u32();
    c.grid.ny = r.u32();
    c.grid.nt = r.u32();
    const std::size_t rows = r.u32(), cols = r.u32();
    if (rows != c.grid.count()) r.fail("row count does not match the grid");
    if (rows * cols * 4 > r.remaining()) r.fail("values larger than the remaining data");
    c.values.resize(rows, cols);
    for (std::size_t a = 0; a < rows; ++a)
      for (std::size_t k = 0; k < cols; ++k) c.values(a, k) = r.f32();
    f.clips.push_back(std::move(c));
  }
  if (!r.done()) r.fail("trailing bytes");
  return f;
}

FeatureFile load_features(const std::string& path) { return deserialize_features(read_file(path)); }

std::string serialize_codebook(const Codebook& cb, const std::string& prov) {
  ByteWriter w;
  w.magic(kCodebookMagic);
  w.str(prov);
  w.u32(checked_u32(cb.size(), "codebook size"));
  w.u32(checked_u32(cb.dims(), "codebook dims"));
  for (Eigen::Index r = 0; r < cb.centers.rows(); ++r)
    for (Eigen::Index c = 0; c < cb.centers.cols(); ++c) w.f64(cb.centers(r, c));
  return w.take();
}

Codebook deserialize_codebook(std::string_view bytes, std::string* prov) {
  ByteReader r(bytes, "codebook");
  r.expect_magic(kCodebookMagic);
  std::string p = r.str();
  if (prov) *prov = std::move(p);
  std::size_t rows = 0, cols = 0;
  Codebook cb;
  rows = r.u32();
  cols = r.u32();
  if (rows == 0) r.fail("empty codebook");
  if (rows * cols * 8 != r.remaining()) r.fail("size does not match the header");
  cb.centers.resize(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) cb.centers(i, j) = r.f64();
  if (!cb.centers.allFinite()) r.fail("non-finite centres");
  return cb;
}

Codebook load_codebook(const std::string& path) { return deserialize_codebook(read_file(path)); }

// ---------------------------------------------------------------------- CSV

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  out += "\r\n";
  return out;
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_number(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_csv(const std::string& path, const std::string& contents, const std::string& prov) {
  write_artifact(path, contents);
  write_sidecar(path, prov);
}

std::vector<VideoTensor> load_videos(const InputSpec& input) {
  std::vector<VideoTensor> out;
  out.reserve(input.paths.size());
  for (const auto& p : input.paths) {
    if (input.kind == InputKind::FrameDirs) out.push_back(load_frame_directory(p));
    else if (input.kind == InputKind::Videos) out.push_back(load_video(p));
    else throw InvalidArgument("bundle input cannot be loaded as video");
  }
  return out;
}

// ----------------------------------------------------------------- commands

json cmd_synth(const json& config) {
  const SynthCommandConfig c = parse_synth_config(config);
  const std::string prov = provenance("synth", config);
  const SynthData d = synth_generate(c.data);

  SynthBundle b{prov, d.X, d.loadings, d.sources, d.support, d.noise_precision};
  write_artifact(c.bundle_path, serialize_bundle(b));
  json report;
  report["command"] = "synth";
  report["seed"] = c.seed;
  report["bundle"] = c.bundle_path;
  report["N"] = d.X.rows();
  report["D"] = d.X.cols();
  report["K_true"] = d.loadings.cols();
  report["noise_precision"] = d.noise_precision;

  if (c.csv_path) {
    std::vector<std::string> header;
    for (Eigen::Index j = 0; j < d.X.cols(); ++j) header.push_back("x" + std::to_string(j));
    std::string csv = csv_row(header);
    std::vector<std::string> row(d.X.cols());
    for (Eigen::Index n = 0; n < d.X.rows(); ++n) {
      for (Eigen::Index j = 0; j < d.X.cols(); ++j) row[j] = format_number(d.X(n, j));
      csv += csv_row(row);
    }
    write_csv(*c.csv_path, csv, prov);
    report["csv"] = *c.csv_path;
  }

  if (c.videos.count > 0) {
    const auto clips = synth_videos(c.videos);
    json paths = json::array();
    for (std::size_t i = 0; i < clips.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "clip_%03zu.vidt", i);
      const std::string path = (fs::path(c.video_dir) / name).string();
      write_artifact(path, serialize_video(clips[i]));
      paths.push_back(path);
    }
    report["videos"] = paths;
  }
  return report;
}

json cmd_train(const json& config) {
  TrainCommandConfig c = parse_train_config(config);
  const std::string prov = provenance("train", config);
  json report;
  report["command"] = "train";
  report["seed"] = c.seed;
  report["updates"] = to_string(c.mode);
  report["model"] = c.model_path;
  std::string trace = csv_row({"layer", "iteration", "elbo", "features", "active", "accepted", "pruned"});

  if (c.input.kind == InputKind::Bundle) {
    const SynthBundle b = load_bundle(c.input.paths.at(0));
    Matrix X = b.X;
    if (c.input.whiten) {
      const WhiteningTransform w = fit_whitening(X, c.input.variance_to_keep);
      X = w.apply_rows(X);
      report["whitened_dim"] = w.retained_dim();
    }
    const InferenceResult r = run_inference(ObservationMatrix(std::move(X)), c.hp, c.inference);
    write_artifact(c.model_path, serialize_model(r.state));
    write_sidecar(c.model_path, prov);
    append_trace(trace, 1, r);
    report["layers"] = json::array({iteration_json(r)});
    report["inferred_K"] = active_feature_count(r.state);
  } else {
    const auto videos = load_videos(c.input);
    c.network.config_json = prov;
    for (auto& l : c.network.layers) l.inference.mode = c.mode;
    const NetworkTrainResult r = train_network(videos, c.network);
    write_artifact(c.model_path, serialize_network(r.network));
    json layers = json::array();
    for (std::size_t l = 0; l < r.inference.size(); ++l) {
      append_trace(trace, l + 1, r.inference[l]);
      json lj = iteration_json(r.inference[l]);
      lj["input_dim"] = r.network.layers[l].input_dim();
      layers.push_back(lj);
    }
    report["layers"] = layers;
    report["output_dim"] = r.network.output_dim();
  }
  if (c.trace_csv) {
    write_csv(*c.trace_csv, trace, prov);
    report["trace_csv"] = *c.trace_csv;
  }
  return report;
}

json cmd_extract(const json& config) {
  const ExtractCommandConfig c = parse_extract_config(config);
  const std::string prov = provenance("extract", config);
  const NetworkModel net = load_network(c.network_path);
  const auto videos = load_videos(c.input);

  FeatureFile out;
  out.provenance = prov;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const FeatureMap m = extract_features(net, videos[i]);
    out.clips.push_back({clip_label(c.input, i), m.grid, m.values.cast<float>()});
  }
  write_artifact(c.features_path, serialize_features(out));

  json report;
  report["command"] = "extract";
  report["seed"] = c.seed;
  report["features"] = c.features_path;
  report["feature_dim"] = net.output_dim();
  json rows = json::array();
  for (const auto& clip : out.clips) rows.push_back(clip.values.rows());
  report["rows_per_clip"] = rows;

  if (c.csv_path) {
    std::vector<std::string> header{"clip", "cell"};
    for (std::size_t k = 0; k < net.output_dim(); ++k) header.push_back("f" + std::to_string(k));
    std::string csv = csv_row(header);
    for (const auto& clip : out.clips) {
      std::vector<std::string> row(2 + clip.values.cols());
      row[0] = clip.label;
      for (Eigen::Index r = 0; r < clip.values.rows(); ++r) {
        row[1] = std::to_string(r);
        for (Eigen::Index k = 0; k < clip.values.cols(); ++k) row[2 + k] = format_number(clip.values(r, k));
        csv += csv_row(row);
      }
    }
    write_csv(*c.csv_path, csv, prov);
    report["csv"] = *c.csv_path;
  }
  return report;
}

json cmd_quantize(const json& config) {
  const QuantizeCommandConfig c = parse_quantize_config(config);
  const std::string prov = provenance("quantize", config);

  std::vector<std::pair<std::string, Matrix>> clips;
  std::size_t total = 0, dims = 0;
  for (const auto& path : c.feature_paths) {
    const FeatureFile f = load_features(path);
    for (const auto& clip : f.clips) {
      if (!clips.empty() && static_cast<std::size_t>(clip.values.cols()) != dims && clip.values.rows() > 0)
        throw InvalidArgument("feature files disagree on the feature dimension");
      if (clip.values.rows() > 0) dims = clip.values.cols();
      clips.emplace_back(fs::path(path).filename().string() + ":" + clip.label, clip.values.cast<double>());
      total += clip.values.rows();
    }
  }

  json report;
  report["command"] = "quantize";
  report["seed"] = c.seed;
  Codebook cb;
  if (c.codebook_in) {
    cb = load_codebook(*c.codebook_in);
    if (total > 0 && cb.dims() != dims)
      throw InvalidArgument("codebook dimension " + std::to_string(cb.dims()) + " does not match features " +
                            std::to_string(dims));
  } else {
    if (total == 0) throw InvalidArgument("no feature vectors to fit a codebook");
    Matrix all(total, dims);
    Eigen::Index row = 0;
    for (const auto& [label, m] : clips) {
      if (m.rows() == 0) continue;
      all.middleRows(row, m.rows()) = m;
      row += m.rows();
    }
    const KMeansResult km = kmeans_fit(all, c.codebook_size, c.seed, c.max_iter);
    cb = km.codebook;
    report["kmeans_iterations"] = km.iterations;
    report["kmeans_converged"] = km.converged;
    report["objective"] = km.objective.empty() ? 0.0 : km.objective.back();
  }
  write_artifact(c.codebook_path, serialize_codebook(cb, prov));

  std::vector<std::string> header{"clip"};
  for (std::size_t k = 0; k < cb.size(); ++k) header.push_back("h" + std::to_string(k));
  std::string csv = csv_row(header);
  for (const auto& [label, m] : clips) {
    const Vector h = quantize(cb, m);
    std::vector<std::string> row{label};
    for (Eigen::Index k = 0; k < h.size(); ++k) row.push_back(format_number(h(k)));
    csv += csv_row(row);
  }
  write_csv(c.histograms_csv, csv, prov);
  report["codebook"] = c.codebook_path;
  report["codebook_size"] = cb.size();
  report["histograms_csv"] = c.histograms_csv;
  report["clips"] = clips.size();
  return report;
}

json run_command(const std::string& command, const json& config) {
  if (command == "synth") return cmd_synth(config);
  if (command == "train") return cmd_train(config);
  if (command == "extract") return cmd_extract(config);
  if (command == "quantize") return cmd_quantize(config);
  throw InvalidArgument("unknown command '" + command + "'");
}

}  // namespace ibpica
