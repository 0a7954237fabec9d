#include "ibpica/config.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include "ibpica/errors.hpp"

namespace ibpica {

using nlohmann::json;

namespace {

/// Typed view of one JSON object that records a diagnostic per bad field
/// instead of stopping at the first.
class Fields {
 public:
  Fields(const json* obj, std::string prefix, std::vector<FieldDiagnostic>& diag)
      : obj_(obj), prefix_(std::move(prefix)), diag_(diag) {
    if (obj_ && !obj_->is_object()) {
      report("", "must be an object");
      obj_ = nullptr;
    }
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  void report(const std::string& key, const std::string& msg) {
    diag_.push_back({key.empty() ? (prefix_.empty() ? "<root>" : prefix_) : path(key), msg});
  }
  bool has(const std::string& key) {
    used_.insert(key);
    return obj_ && obj_->contains(key);
  }
  const json* raw(const std::string& key) {
    if (!has(key)) return nullptr;
    return &obj_->at(key);
  }

  double number(const std::string& key, double def, const std::function<bool(double)>& ok, const char* requirement) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number()) {
      report(key, "must be a number");
      return def;
    }
    const double x = v->get<double>();
    if (!std::isfinite(x) || !ok(x)) {
      report(key, requirement);
      return def;
    }
    return x;
  }
  double positive(const std::string& key, double def) {
    return number(key, def, [](double x) { return x > 0.0; }, "must be > 0");
  }

  std::uint64_t integer(const std::string& key, std::uint64_t def, std::uint64_t lo,
                        std::uint64_t hi = std::numeric_limits<std::uint64_t>::max()) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      report(key, "must be a non-negative integer");
      return def;
    }
    const auto x = v->get<std::uint64_t>();
    if (x < lo || x > hi) {
      report(key, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
      return def;
    }
    return x;
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_boolean()) {
      report(key, "must be true or false");
      return def;
    }
    return v->get<bool>();
  }

  std::optional<std::string> string(const std::string& key, bool required) {
    const json* v = raw(key);
    if (!v) {
      if (required) report(key, "is required");
      return std::nullopt;
    }
    if (!v->is_string() || v->get<std::string>().empty()) {
      report(key, "must be a non-empty string");
      return std::nullopt;
    }
    return v->get<std::string>();
  }

  std::vector<std::string> strings(const std::string& key, bool required) {
    std::vector<std::string> out;
    const json* v = raw(key);
    if (!v) {
      if (required) report(key, "is required");
      return out;
    }
    if (v->is_string()) {
      out.push_back(v->get<std::string>());
    } else if (v->is_array()) {
      for (const auto& s : *v) {
        if (!s.is_string() || s.get<std::string>().empty()) {
          report(key, "must contain only non-empty strings");
          return {};
        }
        out.push_back(s.get<std::string>());
      }
    } else {
      report(key, "must be a string or an array of strings");
      return out;
    }
    if (out.empty() && required) report(key, "must not be empty");
    return out;
  }

  std::vector<std::uint64_t> integers(const std::string& key, std::size_t count, std::uint64_t lo) {
    const json* v = raw(key);
    if (!v) return {};
    if (!v->is_array() || v->size() != count) {
      report(key, "must be an array of " + std::to_string(count) + " integers");
      return {};
    }
    std::vector<std::uint64_t> out;
    for (const auto& x : *v) {
      if (!x.is_number_integer() || (!x.is_number_unsigned() && x.get<std::int64_t>() < 0) ||
          x.get<std::uint64_t>() < lo) {
        report(key, "entries must be integers >= " + std::to_string(lo));
        return {};
      }
      out.push_back(x.get<std::uint64_t>());
    }
    return out;
  }

  Fields sub(const std::string& key) {
    const json* v = raw(key);
    return Fields(v, path(key), diag_);
  }

  /// Flag keys that were never consumed.
  void finish(std::initializer_list<const char*> also_allowed = {}) {
    if (!obj_) return;
    for (const char* k : also_allowed) used_.insert(k);
    for (auto it = obj_->begin(); it != obj_->end(); ++it)
      if (!used_.count(it.key())) diag_.push_back({path(it.key()), "unknown field"});
  }

  bool present() const { return obj_ != nullptr; }

 private:
  const json* obj_;
  std::string prefix_;
  std::vector<FieldDiagnostic>& diag_;
  std::set<std::string> used_;
};

void throw_if_any(std::vector<FieldDiagnostic>& diag) {
  if (!diag.empty()) throw ConfigError(std::move(diag));
}

std::uint64_t read_seed(Fields& f) { return f.integer("seed", 0, 0); }

void check_root(const json& config, std::vector<FieldDiagnostic>& diag) {
  if (!config.is_object()) diag.push_back({"<root>", "configuration must be a JSON object"});
}

Hyperparameters read_hyper(Fields f, const Hyperparameters& base) {
  Hyperparameters hp = base;
  hp.a = f.positive("a", base.a);
  hp.b = f.positive("b", base.b);
  hp.c = f.positive("c", base.c);
  hp.f = f.positive("f", base.f);
  hp.gamma1 = f.positive("gamma1", base.gamma1);
  hp.gamma2 = f.positive("gamma2", base.gamma2);
  hp.eta1 = f.positive("eta1", base.eta1);
  hp.eta2 = f.positive("eta2", base.eta2);
  const std::size_t J = f.integer("J", base.components(), 1, 64);
  if (J != base.components()) hp.xi.assign(J, 1.0 / static_cast<double>(J));
  if (const json* xi = f.raw("xi")) {
    bool ok = xi->is_array() && xi->size() == J;
    std::vector<double> vals;
    if (ok)
      for (const auto& x : *xi) {
        if (!x.is_number() || !(x.get<double>() > 0.0) || !std::isfinite(x.get<double>())) {
          ok = false;
          break;
        }
        vals.push_back(x.get<double>());
      }
    if (ok) {
      hp.xi = vals;
    } else {
      f.report("xi", "must be an array of J positive numbers");
    }
  }
  f.finish();
  return hp;
}

InferenceConfig read_inference(Fields f, const InferenceConfig& base) {
  InferenceConfig ic = base;
  ic.max_iter = f.integer("max_iter", base.max_iter, 0, 1000000);
  ic.tolerance = f.number("tolerance", base.tolerance, [](double x) { return x >= 0.0; }, "must be >= 0");
  ic.k_init = f.integer("K_init", base.k_init, 1, 100000);
  ic.prune_threshold =
      f.number("prune_threshold", base.prune_threshold, [](double x) { return x > 0.0 && x < 1.0; }, "must lie in (0, 1)");
  ic.sample_features = f.boolean("sample_features", base.sample_features);
  f.finish();
  return ic;
}

InputSpec read_input(Fields f, bool allow_bundle) {
  InputSpec in;
  const auto kind = f.string("kind", true);
  if (kind) {
    if (*kind == "bundle" && allow_bundle) {
      in.kind = InputKind::Bundle;
    } else if (*kind == "videos") {
      in.kind = InputKind::Videos;
    } else if (*kind == "pgm_dirs") {
      in.kind = InputKind::FrameDirs;
    } else {
      f.report("kind", allow_bundle ? "must be one of bundle, videos, pgm_dirs" : "must be one of videos, pgm_dirs");
    }
  }
  if (kind && *kind == "bundle" && allow_bundle) {
    if (auto p = f.string("path", true)) in.paths = {*p};
    in.whiten = f.boolean("whiten", false);
    in.variance_to_keep = f.number("variance_to_keep", 0.99, [](double x) { return x > 0.0 && x <= 1.0; },
                                   "must lie in (0, 1]");
  } else {
    in.paths = f.strings("paths", true);
  }
  f.finish();
  return in;
}

ReceptiveField read_rf(Fields& f, const ReceptiveField& def, bool strides_allowed) {
  ReceptiveField rf = def;
  const auto ext = f.integers("rf", 3, 1);
  if (ext.size() == 3) rf = ReceptiveField::with_default_strides(ext[0], ext[1], ext[2]);
  if (f.has("stride")) {
    if (!strides_allowed) {
      f.report("stride", "layer-2 strides are derived from the layer-1 grid and cannot be set");
    } else {
      const auto st = f.integers("stride", 3, 1);
      if (st.size() == 3) {
        rf.stride_x = st[0];
        rf.stride_y = st[1];
        rf.stride_t = st[2];
        if (rf.stride_x > rf.sx || rf.stride_y > rf.sy || rf.stride_t > rf.st) f.report("stride", "must not exceed rf");
      }
    }
  }
  return rf;
}

PoolingSpec read_pooling(Fields f) {
  PoolingSpec p;
  p.group_size = f.integer("group_size", p.group_size, 1, 1 << 20);
  if (auto m = f.string("mode", false)) {
    try {
      p.mode = pool_mode_from_string(*m);
    } catch (const InvalidArgument&) {
      f.report("mode", "must be one of l2, max, mean");
    }
  }
  f.finish();
  return p;
}

}  // namespace

InferenceOptions parse_inference_options(const json& options) {
  std::vector<FieldDiagnostic> diag;
  check_root(options, diag);
  throw_if_any(diag);
  InferenceOptions o;
  Fields root(&options, "", diag);
  const std::uint64_t seed = read_seed(root);
  UpdateMode mode = UpdateMode::Exact;
  if (auto u = root.string("updates", false)) {
    try {
      mode = update_mode_from_string(*u);
    } catch (const Error&) {
      root.report("updates", "must be exact or as-printed");
    }
  }
  o.hp = read_hyper(root.sub("hyper"), Hyperparameters::with_components(2));
  o.inference = read_inference(root.sub("inference"), InferenceConfig{});
  o.inference.seed = seed;
  o.inference.mode = mode;
  root.finish({"comment"});
  throw_if_any(diag);
  return o;
}

SynthCommandConfig parse_synth_config(const json& config) {
  std::vector<FieldDiagnostic> diag;
  check_root(config, diag);
  throw_if_any(diag);
  SynthCommandConfig c;
  Fields root(&config, "", diag);
  c.seed = read_seed(root);
  c.data.seed = c.seed;
  c.data.dims = root.integer("D", c.data.dims, 1, 1 << 20);
  c.data.features = root.integer("K_true", c.data.features, 1, 1 << 20);
  c.data.samples = root.integer("N", c.data.samples, 1, 1u << 31);
  c.data.sparsity = root.number("sparsity", c.data.sparsity, [](double x) { return x > 0.0 && x <= 1.0; },
                                "must lie in (0, 1]");
  c.data.snr = root.number("snr", c.data.snr, [](double x) { return x >= 0.0; }, "must be >= 0 (0 means noiseless)");
  {
    Fields out = root.sub("output");
    if (!out.present()) root.report("output", "is required");
    if (auto p = out.string("bundle", true)) c.bundle_path = *p;
    c.csv_path = out.string("csv", false);
    out.finish();
  }
  {
    Fields v = root.sub("videos");
    if (v.present()) {
      c.videos.count = v.integer("count", 1, 0, 100000);
      c.videos.height = v.integer("height", c.videos.height, 1, 1 << 16);
      c.videos.width = v.integer("width", c.videos.width, 1, 1 << 16);
      c.videos.frames = v.integer("frames", c.videos.frames, 1, 1 << 16);
      c.videos.noise = v.number("noise", c.videos.noise, [](double x) { return x >= 0.0; }, "must be >= 0");
      if (auto d = v.string("directory", false)) c.video_dir = *d;
      v.finish();
    }
    c.videos.seed = c.seed;
  }
  root.finish({"command", "comment"});
  throw_if_any(diag);
  return c;
}

TrainCommandConfig parse_train_config(const json& config) {
  std::vector<FieldDiagnostic> diag;
  check_root(config, diag);
  throw_if_any(diag);
  TrainCommandConfig c;
  Fields root(&config, "", diag);
  c.seed = read_seed(root);
  if (auto u = root.string("updates", false)) {
    try {
      c.mode = update_mode_from_string(*u);
    } catch (const Error&) {
      root.report("updates", "must be exact or as-printed");
    }
  }
  c.input = read_input(root.sub("input"), true);
  if (!config.contains("input")) root.report("input", "is required");
  c.hp = read_hyper(root.sub("hyper"), Hyperparameters::with_components(2));
  c.inference = read_inference(root.sub("inference"), InferenceConfig{});
  c.inference.seed = c.seed;
  c.inference.mode = c.mode;

  {
    Fields net = root.sub("network");
    std::vector<LayerTrainConfig> layers;
    const ReceptiveField defaults[2] = {ReceptiveField::with_default_strides(16, 16, 10),
                                        ReceptiveField::with_default_strides(20, 20, 14)};
    const json* list = net.raw("layers");
    std::size_t listed = 0;
    if (list && !list->is_array()) {
      net.report("layers", "must be an array of layer objects");
    } else if (list) {
      listed = list->size();
      if (listed < 1 || listed > 2) net.report("layers", "must list one or two layers");
    }
    const std::size_t n_layers = net.integer("n_layers", listed ? std::min<std::size_t>(listed, 2) : 2, 1, 2);
    for (std::size_t l = 0; l < n_layers; ++l) {
      LayerTrainConfig lc;
      lc.rf = defaults[l];
      lc.hp = c.hp;
      lc.inference = c.inference;
      if (list && list->is_array() && l < list->size()) {
        Fields lf(&(*list)[l], net.path("layers[" + std::to_string(l) + "]"), diag);
        lc.rf = read_rf(lf, defaults[l], l == 0);
        lc.pooling = read_pooling(lf.sub("pooling"));
        lc.n_train_patches = lf.integer("n_train_patches", lc.n_train_patches, 1, 1u << 31);
        lc.variance_to_keep = lf.number("variance_to_keep", lc.variance_to_keep,
                                        [](double x) { return x > 0.0 && x <= 1.0; }, "must lie in (0, 1]");
        lc.hp = read_hyper(lf.sub("hyper"), c.hp);
        lc.inference = read_inference(lf.sub("inference"), c.inference);
        lf.finish();
      }
      layers.push_back(lc);
    }
    if (layers.size() == 2) {
      const auto& r1 = layers[0].rf;
      const auto& r2 = layers[1].rf;
      if (r2.sx < r1.sx || r2.sy < r1.sy || r2.st < r1.st)
        net.report("layers", "the layer-2 receptive field must be at least as large as the layer-1 field");
    }
    c.network.layers = std::move(layers);
    c.network.combine_layers = net.boolean("combine_layers", true);
    c.network.seed = c.seed;
    net.finish();
  }
  {
    Fields out = root.sub("output");
    if (!out.present()) root.report("output", "is required");
    if (auto p = out.string("model", true)) c.model_path = *p;
    c.trace_csv = out.string("trace_csv", false);
    out.finish();
  }
  root.finish({"command", "comment"});
  throw_if_any(diag);
  return c;
}

ExtractCommandConfig parse_extract_config(const json& config) {
  std::vector<FieldDiagnostic> diag;
  check_root(config, diag);
  throw_if_any(diag);
  ExtractCommandConfig c;
  Fields root(&config, "", diag);
  c.seed = read_seed(root);
  if (auto p = root.string("network", true)) c.network_path = *p;
  c.input = read_input(root.sub("input"), false);
  if (!config.contains("input")) root.report("input", "is required");
  {
    Fields out = root.sub("output");
    if (!out.present()) root.report("output", "is required");
    if (auto p = out.string("features", true)) c.features_path = *p;
    c.csv_path = out.string("csv", false);
    out.finish();
  }
  root.finish({"command", "comment"});
  throw_if_any(diag);
  return c;
}

QuantizeCommandConfig parse_quantize_config(const json& config) {
  std::vector<FieldDiagnostic> diag;
  check_root(config, diag);
  throw_if_any(diag);
  QuantizeCommandConfig c;
  Fields root(&config, "", diag);
  c.seed = read_seed(root);
  c.feature_paths = root.strings("features", true);
  c.codebook_size = root.integer("codebook_size", c.codebook_size, 1, 1u << 24);
  c.max_iter = root.integer("max_iter", c.max_iter, 1, 1000000);
  c.codebook_in = root.string("codebook", false);
  {
    Fields out = root.sub("output");
    if (!out.present()) root.report("output", "is required");
    if (auto p = out.string("codebook", true)) c.codebook_path = *p;
    if (auto p = out.string("histograms_csv", true)) c.histograms_csv = *p;
    out.finish();
  }
  root.finish({"command", "comment"});
  throw_if_any(diag);
  return c;
}

}  // namespace ibpica
