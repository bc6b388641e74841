#ifndef CSGRU_H
#define CSGRU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CsgruStatus {
  CSGRU_STATUS_OK = 0,
  CSGRU_STATUS_NULL_POINTER = 1,
  CSGRU_STATUS_INVALID_ARGUMENT = 2,
  CSGRU_STATUS_CONFIG_ERROR = 3,
  CSGRU_STATUS_DATA_ERROR = 4,
  CSGRU_STATUS_IO_ERROR = 5,
  CSGRU_STATUS_DIVERGED = 6,
  CSGRU_STATUS_PANIC = 7,
} CsgruStatus;

/**
 * Surrogate gradient shapes.
 */
typedef enum CsgruSurrogate {
  CSGRU_SURROGATE_TRIANGULAR = 0,
  CSGRU_SURROGATE_ARCTAN = 1,
  CSGRU_SURROGATE_SCALED_TANH = 2,
} CsgruSurrogate;

/**
 * Opaque network handle.
 */
typedef struct CsgruNetwork CsgruNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *csgru_last_error(void);

/**
 * Builds a randomly initialised network from a JSON architecture.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsgruStatus csgru_network_new(const char *spec_json, uint64_t seed, struct CsgruNetwork **out);

/**
 * Loads a network from a checkpoint archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsgruStatus csgru_network_load(const char *path, struct CsgruNetwork **out);

/**
 * Writes a checkpoint archive.
 *
 * # Safety
 * `net` must come from this library and `path` be NUL-terminated.
 */
enum CsgruStatus csgru_network_save(const struct CsgruNetwork *net, const char *path);

/**
 * Releases a network. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void csgru_network_free(struct CsgruNetwork *net);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t csgru_network_classes(const struct CsgruNetwork *net);

/**
 * Values per input frame (`C·H·W`), or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t csgru_network_frame_len(const struct CsgruNetwork *net);

/**
 * Total number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t csgru_network_param_count(const struct CsgruNetwork *net);

/**
 * Runs `timesteps` frames of binary input (`timesteps × frame_len`
 * values, row-major) and writes the max-over-time logits. When
 * `activity_out` is non-null it receives the spikes per neuron per step
 * (0 for networks without spiking layers).
 *
 * # Safety
 * `spikes` must hold `timesteps · frame_len` values and `logits_out`
 * `logits_len` values.
 */
enum CsgruStatus csgru_network_forward(const struct CsgruNetwork *net,
                                       const double *spikes,
                                       size_t timesteps,
                                       double *logits_out,
                                       size_t logits_len,
                                       double *activity_out);

/**
 * Trains and evaluates one experiment described by a JSON config; the
 * metrics record is returned as a JSON string to free with
 * [`csgru_string_free`].
 *
 * # Safety
 * `config_json` must be NUL-terminated and `metrics_out` a valid pointer.
 */
enum CsgruStatus csgru_run_experiment(const char *config_json, char **metrics_out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void csgru_string_free(char *s);

/**
 * Surrogate derivative `ψ(u)` at `u = v - v_th`; NaN for a non-positive
 * scale.
 */
double csgru_surrogate_derivative(enum CsgruSurrogate kind, double scale, double u);

/**
 * Rate-codes `len` intensities in `[0, 1]` into `timesteps × len` binary
 * values written to `out`.
 *
 * # Safety
 * `image` must hold `len` values and `out` `timesteps · len` values.
 */
enum CsgruStatus csgru_rate_encode(const double *image,
                                   size_t len,
                                   size_t timesteps,
                                   uint64_t seed,
                                   uint64_t sample,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSGRU_H */
