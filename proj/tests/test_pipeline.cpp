#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ibpica/commands.hpp"
#include "ibpica/config.hpp"
#include "ibpica/errors.hpp"
#include "ibpica/kmeans.hpp"
#include "ibpica/serialize.hpp"
#include "ibpica/synth.hpp"
#include "support.hpp"

using namespace ibpica;
using nlohmann::json;
using testing::max_abs_diff;
using testing::random_matrix;
using testing::TempDir;

namespace {

struct WarningCapture {
  std::vector<std::string> messages;
  WarningCapture() {
    set_warning_sink([](const char* m, void* self) { static_cast<WarningCapture*>(self)->messages.push_back(m); },
                     this);
  }
  ~WarningCapture() { set_warning_sink(nullptr, nullptr); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Field names flagged by a config parser, or an empty set if it accepted.
template <class Parser>
std::set<std::string> flagged(Parser parse, const json& j) {
  try {
    parse(j);
  } catch (const ConfigError& e) {
    std::set<std::string> out;
    for (const auto& d : e.diagnostics()) out.insert(d.field);
    return out;
  }
  return {};
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find("\r\n", pos);
    REQUIRE(end != std::string::npos);
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 2;
  }
  return lines;
}

}  // namespace

TEST_CASE("synthetic data: dense support and the noiseless limit") {
  SynthConfig c;
  c.dims = 8, c.features = 3, c.samples = 50, c.sparsity = 1.0, c.seed = 4;
  const SynthData d = synth_generate(c);
  CHECK((d.support.array() == 1.0).all());
  CHECK((d.loadings.array() != 0.0).all());

  c.sparsity = 0.3;
  c.snr = 0.0;
  const SynthData n = synth_generate(c);
  CHECK(n.noise_precision == 0.0);
  CHECK(max_abs_diff(n.X, n.sources * n.loadings.transpose()) < 1e-12);
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(n.support.col(k).sum() >= 1.0);
  CHECK(n.loadings.cwiseProduct(Matrix::Ones(8, 3) - n.support).isZero(0.0));
  CHECK_THROWS_AS(synth_generate(SynthConfig{8, 0, 50, 0.5, 1.0, 0}), InvalidArgument);
}

TEST_CASE("synthetic data covariance matches the model within 5%") {
  SynthConfig c;
  c.dims = 6, c.features = 3, c.samples = 20000, c.sparsity = 0.7, c.snr = 4.0, c.seed = 8;
  const SynthData d = synth_generate(c);
  REQUIRE(d.noise_precision > 0.0);
  const Matrix centred = d.X.rowwise() - d.X.colwise().mean();
  const Matrix emp = centred.transpose() * centred / static_cast<double>(c.samples);
  // Sources have unit second moment.
  const Matrix model = d.loadings * d.loadings.transpose() + Matrix::Identity(6, 6) / d.noise_precision;
  CHECK((emp - model).norm() / model.norm() < 0.05);
  // Source second moment, estimated from the drawn sources.
  CHECK(d.sources.array().square().mean() == doctest::Approx(1.0).epsilon(0.05));
  // The signal-to-noise ratio is as configured.
  const double signal = (d.loadings * d.loadings.transpose()).trace() / 6.0;
  CHECK(signal * d.noise_precision == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("k-means examples") {
  std::mt19937_64 rng(1);
  const Matrix X = random_matrix(rng, 200, 3);
  const KMeansResult one = kmeans_fit(X, 1, 7);
  CHECK(max_abs_diff(one.codebook.centers, X.colwise().mean()) < 1e-12);

  // Two blobs 10 sigma apart.
  Matrix B = random_matrix(rng, 400, 2, 0.1);
  B.topRows(200).col(0).array() += 1.0;
  B.bottomRows(200).col(0).array() -= 1.0;
  const KMeansResult two = kmeans_fit(B, 2, 3);
  Matrix c = two.codebook.centers;
  if (c(0, 0) < c(1, 0)) c.row(0).swap(c.row(1));
  CHECK((c.row(0) - B.topRows(200).colwise().mean()).norm() < 0.1);
  CHECK((c.row(1) - B.bottomRows(200).colwise().mean()).norm() < 0.1);
  CHECK(two.converged);

  const KMeansResult many = kmeans_fit(random_matrix(rng, 300, 4), 12, 5);
  for (std::size_t i = 1; i < many.objective.size(); ++i) CHECK(many.objective[i] <= many.objective[i - 1]);
  CHECK(serialize_codebook(kmeans_fit(X, 5, 9).codebook, "") == serialize_codebook(kmeans_fit(X, 5, 9).codebook, ""));
}

TEST_CASE("k-means on duplicate data reduces the codebook with a warning") {
  Matrix X(10, 2);
  for (int i = 0; i < 10; ++i) X.row(i) << (i % 3), 0.0;
  WarningCapture cap;
  const KMeansResult r = kmeans_fit(X, 5, 1);
  CHECK(r.codebook.size() == 3);
  CHECK(cap.messages.size() == 1);
  CHECK_THROWS_AS(kmeans_fit(Matrix(0, 2), 2, 1), InvalidArgument);
}

TEST_CASE("quantize examples") {
  Codebook cb;
  cb.centers.resize(4, 2);
  cb.centers << 0, 0, 1, 0, 0, 1, 5, 5;
  const Matrix at3 = Matrix::Constant(7, 2, 5.0);
  const Vector h = quantize(cb, at3);
  CHECK(h == (Vector(4) << 0, 0, 0, 1).finished());
  // Equidistant from centres 1 and 2: ties go to the lower index.
  Vector mid(2);
  mid << 0.5, 0.5;
  CHECK(nearest_center(cb, mid) == 0);
  Vector tie(2);
  tie << 1.0, 1.0;
  CHECK(nearest_center(cb, tie) == 1);

  WarningCapture cap;
  const Vector empty = quantize(cb, Matrix(0, 2));
  CHECK(empty.size() == 4);
  CHECK(empty.isZero(0.0));
  CHECK(cap.messages.size() == 1);
  CHECK_THROWS_AS(quantize(cb, Matrix::Zero(3, 3)), InvalidArgument);
}

TEST_CASE("quantize agrees with exhaustive nearest neighbours on 1000 points") {
  std::mt19937_64 rng(2);
  Codebook cb;
  cb.centers = random_matrix(rng, 17, 5);
  const Matrix X = random_matrix(rng, 1000, 5, 1.3);
  const auto got = assign(cb, X);
  Vector hist = Vector::Zero(17);
  for (Eigen::Index n = 0; n < 1000; ++n) {
    std::size_t best = 0;
    double bd = INFINITY;
    for (Eigen::Index c = 0; c < 17; ++c) {
      double d = 0.0;
      for (Eigen::Index f = 0; f < 5; ++f) d += (X(n, f) - cb.centers(c, f)) * (X(n, f) - cb.centers(c, f));
      if (d < bd) bd = d, best = static_cast<std::size_t>(c);
    }
    CHECK(got[static_cast<std::size_t>(n)] == best);
    hist(static_cast<Eigen::Index>(best)) += 1.0;
  }
  const Vector h = quantize(cb, X);
  CHECK(h.sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(max_abs_diff(h, hist / 1000.0) < 1e-15);
}

TEST_CASE("config diagnostics name every bad field") {
  const json bad = json::parse(R"({
    "seed": -1,
    "updates": "fast",
    "input": {"kind": "bundle"},
    "hyper": {"a": 0, "J": 3, "xi": [1, 2]},
    "inference": {"prune_threshold": 1.5, "K_init": 0},
    "network": {"layers": [{"rf": [8, 8, 4], "stride": [9, 1, 1]}, {"rf": [4, 4, 2]}]},
    "output": {},
    "extra": true
  })");
  const auto f = flagged(parse_train_config, bad);
  for (const char* field : {"seed", "updates", "input.path", "hyper.a", "hyper.xi", "inference.prune_threshold",
                            "inference.K_init", "network.layers[0].stride", "network.layers", "output.model", "extra"}) {
    INFO(field);
    CHECK(f.count(field) == 1);
  }
  CHECK(flagged(parse_synth_config, json::parse(R"({"sparsity": 0, "output": {"bundle": "b"}})")) ==
        std::set<std::string>{"sparsity"});
  CHECK(flagged(parse_synth_config, json::parse("[1, 2]")).size() == 1);
  CHECK(flagged(parse_extract_config, json::parse(R"({"network": "n", "input": {"kind": "bundle", "path": "x"},
                                                     "output": {"features": "f"}})"))
            .count("input.kind") == 1);
  CHECK(flagged(parse_quantize_config, json::parse(R"({"features": [], "output": {"codebook": "c",
                                                      "histograms_csv": "h"}})")) == std::set<std::string>{"features"});
  CHECK(flagged(parse_inference_options, json::parse(R"({"inference": {"max_iter": "ten"}})")) ==
        std::set<std::string>{"inference.max_iter"});
}

TEST_CASE("config defaults") {
  const TrainCommandConfig c = parse_train_config(json::parse(R"({
    "seed": 5, "input": {"kind": "videos", "paths": ["a.vidt"]}, "output": {"model": "m"}})"));
  REQUIRE(c.network.layers.size() == 2);
  CHECK(c.network.layers[0].rf.sx == 16);
  CHECK(c.network.layers[0].rf.st == 10);
  CHECK(c.network.layers[0].rf.stride_x == 8);
  CHECK(c.network.layers[1].rf.sx == 20);
  CHECK(c.network.layers[1].rf.st == 14);
  CHECK(c.network.layers[0].n_train_patches == 200000);
  CHECK(c.network.layers[0].pooling.group_size == 2);
  CHECK(c.network.layers[0].pooling.mode == PoolMode::L2);
  CHECK(c.network.combine_layers);
  CHECK(c.hp.xi == std::vector<double>{0.5, 0.5});
  CHECK(c.hp.a == 1.0);
  CHECK(c.inference.seed == 5);
  CHECK(c.mode == UpdateMode::Exact);

  const TrainCommandConfig one = parse_train_config(json::parse(R"({
    "input": {"kind": "videos", "paths": "a.vidt"}, "network": {"n_layers": 1}, "output": {"model": "m"},
    "hyper": {"J": 4}})"));
  CHECK(one.network.layers.size() == 1);
  CHECK(one.hp.xi == std::vector<double>(4, 0.25));
}

TEST_CASE("CSV quoting and number formatting") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
  CHECK(csv_row({"x", "y,z", ""}) == "x,\"y,z\",\r\n");
  CHECK(split_csv_line("x,\"y,z\",\"q\"\"\"") == std::vector<std::string>{"x", "y,z", "q\""});
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-2.0) == "-2");
  CHECK(format_number(0.1f) == "0.1");
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 100.0);
  for (int i = 0; i < 200; ++i) {
    const double v = n(rng);
    CHECK(std::stod(format_number(v)) == v);
    const float f = static_cast<float>(v);
    CHECK(std::stof(format_number(f)) == f);
  }
}

TEST_CASE("container round trips") {
  std::mt19937_64 rng(4);
  SynthBundle b;
  b.provenance = R"({"command":"synth"})";
  b.X = random_matrix(rng, 5, 3);
  b.loadings = random_matrix(rng, 3, 2);
  b.sources = random_matrix(rng, 5, 2);
  b.support = Matrix::Ones(3, 2);
  b.noise_precision = 2.5;
  const std::string bb = serialize_bundle(b);
  const SynthBundle b2 = deserialize_bundle(bb);
  CHECK(b2.X == b.X);
  CHECK(b2.noise_precision == 2.5);
  CHECK(serialize_bundle(b2) == bb);
  CHECK_THROWS_AS(deserialize_bundle(bb.substr(0, bb.size() - 2)), FormatError);

  FeatureFile f;
  f.provenance = "p";
  f.clips.push_back({"a", GridShape{2, 1, 1}, random_matrix(rng, 2, 3).cast<float>()});
  f.clips.push_back({"empty", GridShape{}, Eigen::MatrixXf(0, 3)});
  const std::string fb = serialize_features(f);
  const FeatureFile f2 = deserialize_features(fb);
  REQUIRE(f2.clips.size() == 2);
  CHECK(f2.clips[0].values == f.clips[0].values);
  CHECK(f2.clips[0].grid == f.clips[0].grid);
  CHECK(serialize_features(f2) == fb);
  CHECK_THROWS_AS(deserialize_features("IBPFEAT2"), FormatError);

  Codebook cb;
  cb.centers = random_matrix(rng, 3, 4);
  std::string prov;
  const Codebook cb2 = deserialize_codebook(serialize_codebook(cb, "q"), &prov);
  CHECK(cb2.centers == cb.centers);
  CHECK(prov == "q");
}

TEST_CASE("end-to-end commands in a scratch directory") {
  TempDir dir("pipeline");
  const auto p = [&](const std::string& name) { return dir.str(name); };

  // Bundle path: synth, then train on the bundle.
  const json synth = {{"seed", 3}, {"D", 6}, {"K_true", 2}, {"N", 300},
                      {"output", {{"bundle", p("b.bin")}, {"csv", p("b.csv")}}},
                      {"videos", {{"count", 2}, {"height", 12}, {"width", 12}, {"frames", 6}, {"directory", p("clips")}}}};
  const json sr = run_command("synth", synth);
  CHECK(sr["K_true"] == 2);
  const SynthBundle bundle = load_bundle(p("b.bin"));
  CHECK(bundle.X.rows() == 300);
  CHECK(json::parse(bundle.provenance)["config"] == synth);
  CHECK(json::parse(slurp(p("b.csv.json")))["command"] == "synth");
  const auto lines = csv_lines(slurp(p("b.csv")));
  CHECK(lines.size() == 301);
  CHECK(lines[0] == "x0,x1,x2,x3,x4,x5");
  CHECK(std::stod(split_csv_line(lines[1])[2]) == bundle.X(0, 2));

  const json train = {{"seed", 1}, {"input", {{"kind", "bundle"}, {"path", p("b.bin")}}},
                      {"inference", {{"max_iter", 20}, {"K_init", 3}}},
                      {"output", {{"model", p("m.bin")}, {"trace_csv", p("trace.csv")}}}};
  const json tr = run_command("train", train);
  CHECK(tr["inferred_K"].get<int>() >= 1);
  const ModelState m = load_model(p("m.bin"));
  CHECK(m.dims() == 6);
  CHECK(json::parse(slurp(p("m.bin.json")))["config"] == train);
  const auto trace = csv_lines(slurp(p("trace.csv")));
  CHECK(trace[0] == "layer,iteration,elbo,features,active,accepted,pruned");
  CHECK(trace.size() >= 2);

  // Video path: train a one-layer net, extract, quantize.
  const json vtrain = {
      {"seed", 2},
      {"input", {{"kind", "videos"}, {"paths", {p("clips/clip_000.vidt"), p("clips/clip_001.vidt")}}}},
      {"hyper", {{"a", 1e6}, {"b", 1e5}}},
      {"inference", {{"max_iter", 5}, {"K_init", 3}}},
      {"network", {{"layers", {{{"rf", {4, 4, 2}}, {"n_train_patches", 200}, {"variance_to_keep", 0.95}}}}}},
      {"output", {{"model", p("net.bin")}}}};
  const json vr = run_command("train", vtrain);
  CHECK(vr["layers"].size() == 1);
  const NetworkModel net = load_network(p("net.bin"));
  CHECK(json::parse(net.config_json)["config"] == vtrain);

  const json extract = {{"network", p("net.bin")},
                        {"input", {{"kind", "videos"}, {"paths", {p("clips/clip_000.vidt"), p("clips/clip_001.vidt")}}}},
                        {"output", {{"features", p("f.bin")}, {"csv", p("f.csv")}}}};
  run_command("extract", extract);
  const FeatureFile feats = load_features(p("f.bin"));
  REQUIRE(feats.clips.size() == 2);
  CHECK(feats.clips[0].label == "clip_000.vidt");
  CHECK(feats.clips[0].grid == GridShape{5, 5, 5});
  CHECK(static_cast<std::size_t>(feats.clips[0].values.cols()) == net.output_dim());

  // CSV and binary carry the same float32 values.
  const auto flines = csv_lines(slurp(p("f.csv")));
  CHECK(flines.size() == 1 + 2 * 125);
  for (std::size_t i = 1; i < flines.size(); ++i) {
    const auto cells = split_csv_line(flines[i]);
    const auto& clip = feats.clips[i <= 125 ? 0 : 1];
    const auto row = static_cast<Eigen::Index>(std::stoul(cells[1]));
    for (Eigen::Index k = 0; k < clip.values.cols(); ++k)
      CHECK(std::stof(cells[2 + static_cast<std::size_t>(k)]) == clip.values(row, k));
  }

  const json quant = {{"seed", 4}, {"features", p("f.bin")}, {"codebook_size", 6},
                      {"output", {{"codebook", p("cb.bin")}, {"histograms_csv", p("h.csv")}}}};
  const json qr = run_command("quantize", quant);
  CHECK(qr["codebook_size"] == 6);
  const auto hl = csv_lines(slurp(p("h.csv")));
  REQUIRE(hl.size() == 3);
  CHECK(split_csv_line(hl[1])[0] == "f.bin:clip_000.vidt");
  double total = 0.0;
  for (std::size_t k = 1; k < 7; ++k) total += std::stod(split_csv_line(hl[1])[k]);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  // Reruns reproduce every artifact byte for byte.
  const std::vector<std::string> artifacts{"b.bin", "b.csv", "m.bin", "trace.csv", "net.bin", "f.bin", "f.csv", "cb.bin", "h.csv"};
  std::vector<std::string> first;
  for (const auto& a : artifacts) first.push_back(slurp(p(a)));
  run_command("synth", synth);
  run_command("train", train);
  run_command("train", vtrain);
  run_command("extract", extract);
  run_command("quantize", quant);
  for (std::size_t i = 0; i < artifacts.size(); ++i) {
    INFO(artifacts[i]);
    CHECK(slurp(p(artifacts[i])) == first[i]);
  }

  // Reusing the codebook gives the same histograms.
  json reuse = quant;
  reuse["codebook"] = p("cb.bin");
  reuse["output"]["codebook"] = p("cb2.bin");
  reuse["output"]["histograms_csv"] = p("h2.csv");
  run_command("quantize", reuse);
  CHECK(csv_lines(slurp(p("h2.csv"))) == hl);

  CHECK_THROWS_AS(run_command("unknown", json::object()), InvalidArgument);
  CHECK_THROWS_AS(run_command("train", json{{"input", {{"kind", "bundle"}, {"path", p("missing.bin")}}},
                                            {"output", {{"model", p("x.bin")}}}}),
                  IoError);
}
