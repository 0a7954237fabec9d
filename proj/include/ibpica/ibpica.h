#ifndef IBPICA_H
#define IBPICA_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define IBPICA_API __attribute__((visibility("default")))
#else
#define IBPICA_API
#endif

/* Status codes double as CLI exit codes. */
typedef enum ibpica_status {
  IBPICA_OK = 0,
  IBPICA_ERR_INVALID_ARGUMENT = 1,
  IBPICA_ERR_CONFIG = 2,
  IBPICA_ERR_NUMERICAL = 3,
  IBPICA_ERR_IO = 4,
  IBPICA_ERR_FORMAT = 5,
  IBPICA_ERR_INTERNAL = 6
} ibpica_status;

typedef struct ibpica_model ibpica_model;
typedef struct ibpica_network ibpica_network;

IBPICA_API const char* ibpica_version(void);
IBPICA_API const char* ibpica_status_string(ibpica_status status);

/* JSON object {"status","error","message"[,"diagnostics"]} describing the last
 * failure on the calling thread; "" after a successful call. Valid until the
 * next call on the same thread. */
IBPICA_API const char* ibpica_last_error(void);

/* Strings returned through char** outputs are owned by the caller. */
IBPICA_API void ibpica_free_string(char* s);

/* Run "synth", "train", "extract" or "quantize" with a JSON configuration.
 * On success *report_json receives the JSON report. */
IBPICA_API ibpica_status ibpica_run_command(const char* command, const char* config_json, char** report_json);

/* ---- single models ------------------------------------------------------ */

/* Fit a model to X (n x d, row-major). options_json may be NULL or hold
 * "seed", "updates", "hyper" and "inference". */
IBPICA_API ibpica_status ibpica_model_train(const double* X, size_t n, size_t d, const char* options_json,
                                            ibpica_model** out);
IBPICA_API ibpica_status ibpica_model_load(const char* path, ibpica_model** out);
IBPICA_API ibpica_status ibpica_model_save(const ibpica_model* model, const char* path);
IBPICA_API void ibpica_model_free(ibpica_model* model);

IBPICA_API ibpica_status ibpica_model_dims(const ibpica_model* model, size_t* n, size_t* d, size_t* k);
/* Features active (q(z) > 0.5) in at least one input dimension. */
IBPICA_API ibpica_status ibpica_model_active_features(const ibpica_model* model, size_t* active);
/* E[G], d x k row-major; capacity is in elements. */
IBPICA_API ibpica_status ibpica_model_loading_mean(const ibpica_model* model, double* out, size_t capacity);
/* Posterior source means, n x k row-major. */
IBPICA_API ibpica_status ibpica_model_source_mean(const ibpica_model* model, double* out, size_t capacity);
/* Evidence lower bound of the model on X (n x d). */
IBPICA_API ibpica_status ibpica_model_elbo(const ibpica_model* model, const double* X, size_t n, size_t d,
                                           double* elbo);
/* Feedforward features of one input x (length d) into out (length k). */
IBPICA_API ibpica_status ibpica_model_features(const ibpica_model* model, const double* x, size_t d, double* out,
                                               size_t k);

/* ---- networks ------------------------------------------------------------ */

IBPICA_API ibpica_status ibpica_network_load(const char* path, ibpica_network** out);
IBPICA_API void ibpica_network_free(ibpica_network* net);
IBPICA_API ibpica_status ibpica_network_feature_dim(const ibpica_network* net, size_t* dim);
/* Features of one clip (voxels x-fastest, then y, then t). Sets *rows and
 * *cols; out may be NULL to query the size only. */
IBPICA_API ibpica_status ibpica_network_extract(const ibpica_network* net, const double* voxels, size_t height,
                                                size_t width, size_t frames, double* out, size_t capacity,
                                                size_t* rows, size_t* cols);

#ifdef __cplusplus
}
#endif

#endif
