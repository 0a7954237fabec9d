#include "ibpica/ibpica.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "ibpica/commands.hpp"
#include "ibpica/errors.hpp"
#include "ibpica/inference.hpp"
#include "ibpica/network.hpp"
#include "ibpica/serialize.hpp"

using nlohmann::json;

struct ibpica_model {
  ibpica::ModelState state;
  ibpica::Vector source_precision;
  ibpica::Matrix forward;

  void freeze() {
    source_precision = ibpica::frozen_source_precision(state);
    forward = ibpica::feedforward_matrix(state, source_precision);
  }
};

struct ibpica_network {
  ibpica::NetworkModel net;
};

namespace {

thread_local std::string g_last_error;

ibpica_status fail(ibpica_status status, const char* kind, const std::string& message, json diagnostics = nullptr) {
  json e;
  e["status"] = static_cast<int>(status);
  e["error"] = kind;
  e["message"] = message;
  if (!diagnostics.is_null()) e["diagnostics"] = std::move(diagnostics);
  g_last_error = e.dump();
  return status;
}

/// Run fn, mapping every exception onto a status code and error record.
template <typename Fn>
ibpica_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return IBPICA_OK;
  } catch (const ibpica::ConfigError& e) {
    json diags = json::array();
    for (const auto& d : e.diagnostics()) diags.push_back({{"field", d.field}, {"message", d.message}});
    return fail(IBPICA_ERR_CONFIG, "config", e.what(), std::move(diags));
  } catch (const json::exception& e) {
    return fail(IBPICA_ERR_CONFIG, "config", std::string("invalid JSON: ") + e.what());
  } catch (const ibpica::InvalidArgument& e) {
    return fail(IBPICA_ERR_INVALID_ARGUMENT, "invalid_argument", e.what());
  } catch (const ibpica::DomainError& e) {
    return fail(IBPICA_ERR_INVALID_ARGUMENT, "domain", e.what());
  } catch (const ibpica::NumericalError& e) {
    return fail(IBPICA_ERR_NUMERICAL, "numerical", e.what());
  } catch (const ibpica::IoError& e) {
    return fail(IBPICA_ERR_IO, "io", e.what());
  } catch (const ibpica::FormatError& e) {
    return fail(IBPICA_ERR_FORMAT, "format", e.what());
  } catch (const std::bad_alloc&) {
    return fail(IBPICA_ERR_INTERNAL, "internal", "out of memory");
  } catch (const std::exception& e) {
    return fail(IBPICA_ERR_INTERNAL, "internal", e.what());
  } catch (...) {
    return fail(IBPICA_ERR_INTERNAL, "internal", "unknown exception");
  }
}

void require(bool ok, const char* message) {
  if (!ok) throw ibpica::InvalidArgument(message);
}

char* copy_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

ibpica::Matrix row_major(const double* data, std::size_t rows, std::size_t cols) {
  require(data != nullptr, "data pointer is null");
  require(rows > 0 && cols > 0, "data must be non-empty");
  ibpica::Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = data[r * cols + c];
  return m;
}

void copy_out(const ibpica::Matrix& m, double* out, std::size_t capacity) {
  require(out != nullptr, "output pointer is null");
  require(capacity >= static_cast<std::size_t>(m.size()), "output buffer too small");
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r * m.cols() + c] = m(r, c);
}

}  // namespace

extern "C" {

const char* ibpica_version(void) { return ibpica::kVersion; }

const char* ibpica_status_string(ibpica_status status) {
  switch (status) {
    case IBPICA_OK: return "ok";
    case IBPICA_ERR_INVALID_ARGUMENT: return "invalid argument";
    case IBPICA_ERR_CONFIG: return "invalid configuration";
    case IBPICA_ERR_NUMERICAL: return "numerical failure";
    case IBPICA_ERR_IO: return "i/o error";
    case IBPICA_ERR_FORMAT: return "malformed file";
    case IBPICA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* ibpica_last_error(void) { return g_last_error.c_str(); }

void ibpica_free_string(char* s) { delete[] s; }

ibpica_status ibpica_run_command(const char* command, const char* config_json, char** report_json) {
  return guarded([&] {
    require(command && config_json && report_json, "null argument");
    *report_json = nullptr;
    const json config = json::parse(config_json);
    *report_json = copy_string(ibpica::run_command(command, config).dump());
  });
}

ibpica_status ibpica_model_train(const double* X, size_t n, size_t d, const char* options_json, ibpica_model** out) {
  return guarded([&] {
    require(out != nullptr, "output handle pointer is null");
    *out = nullptr;
    const json options = options_json ? json::parse(options_json) : json::object();
    const ibpica::InferenceOptions o = ibpica::parse_inference_options(options);
    ibpica::InferenceResult r = ibpica::run_inference(ibpica::ObservationMatrix(row_major(X, n, d)), o.hp, o.inference);
    auto* m = new ibpica_model{std::move(r.state), {}, {}};
    try {
      m->freeze();
    } catch (...) {
      delete m;
      throw;
    }
    *out = m;
  });
}

ibpica_status ibpica_model_load(const char* path, ibpica_model** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    auto* m = new ibpica_model{ibpica::load_model(path), {}, {}};
    try {
      m->freeze();
    } catch (...) {
      delete m;
      throw;
    }
    *out = m;
  });
}

ibpica_status ibpica_model_save(const ibpica_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    ibpica::save_model(model->state, path);
  });
}

void ibpica_model_free(ibpica_model* model) { delete model; }

ibpica_status ibpica_model_dims(const ibpica_model* model, size_t* n, size_t* d, size_t* k) {
  return guarded([&] {
    require(model != nullptr, "model handle is null");
    if (n) *n = model->state.samples();
    if (d) *d = model->state.dims();
    if (k) *k = model->state.features();
  });
}

ibpica_status ibpica_model_active_features(const ibpica_model* model, size_t* active) {
  return guarded([&] {
    require(model && active, "null argument");
    *active = ibpica::active_feature_count(model->state);
  });
}

ibpica_status ibpica_model_loading_mean(const ibpica_model* model, double* out, size_t capacity) {
  return guarded([&] {
    require(model != nullptr, "model handle is null");
    copy_out(model->state.loadings.expected(), out, capacity);
  });
}

ibpica_status ibpica_model_source_mean(const ibpica_model* model, double* out, size_t capacity) {
  return guarded([&] {
    require(model != nullptr, "model handle is null");
    copy_out(model->state.sources.mean, out, capacity);
  });
}

ibpica_status ibpica_model_elbo(const ibpica_model* model, const double* X, size_t n, size_t d, double* elbo) {
  return guarded([&] {
    require(model && elbo, "null argument");
    require(n == model->state.samples() && d == model->state.dims(), "data shape does not match the model");
    *elbo = ibpica::elbo(model->state, ibpica::ObservationMatrix(row_major(X, n, d)));
  });
}

ibpica_status ibpica_model_features(const ibpica_model* model, const double* x, size_t d, double* out, size_t k) {
  return guarded([&] {
    require(model && x && out, "null argument");
    require(d == model->state.dims(), "input length does not match the model");
    require(k >= model->state.features(), "output buffer too small");
    const ibpica::Vector in = Eigen::Map<const ibpica::Vector>(x, static_cast<Eigen::Index>(d));
    const ibpica::Vector y = model->forward * in;
    for (Eigen::Index i = 0; i < y.size(); ++i) out[i] = y(i);
  });
}

ibpica_status ibpica_network_load(const char* path, ibpica_network** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    *out = new ibpica_network{ibpica::load_network(path)};
  });
}

void ibpica_network_free(ibpica_network* net) { delete net; }

ibpica_status ibpica_network_feature_dim(const ibpica_network* net, size_t* dim) {
  return guarded([&] {
    require(net && dim, "null argument");
    *dim = net->net.output_dim();
  });
}

ibpica_status ibpica_network_extract(const ibpica_network* net, const double* voxels, size_t height, size_t width,
                                     size_t frames, double* out, size_t capacity, size_t* rows, size_t* cols) {
  return guarded([&] {
    require(net && voxels && rows && cols, "null argument");
    ibpica::VideoTensor v(height, width, frames);
    std::memcpy(v.voxels.data(), voxels, v.voxels.size() * sizeof(double));
    v.validate();
    const ibpica::FeatureMap m = ibpica::extract_features(net->net, v);
    *rows = static_cast<std::size_t>(m.values.rows());
    *cols = static_cast<std::size_t>(m.values.cols());
    if (out) copy_out(m.values, out, capacity);
  });
}

}  // extern "C"
