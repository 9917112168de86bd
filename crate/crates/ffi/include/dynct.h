/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef DYNCT_H
#define DYNCT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DynctStatus {
  DYNCT_OK = 0,
  DYNCT_ERR_NULL_POINTER = 1,
  DYNCT_ERR_INVALID_ARGUMENT = 2,
  DYNCT_ERR_DIMENSION_MISMATCH = 3,
  DYNCT_ERR_NO_CONVERGENCE = 4,
  DYNCT_ERR_SOLVER_ABORT = 5,
  DYNCT_ERR_CORRUPT_FILE = 6,
  DYNCT_ERR_IO = 7,
  DYNCT_ERR_CONFIG = 8,
  DYNCT_ERR_BUFFER_TOO_SMALL = 9,
  DYNCT_ERR_PANIC = 10,
} DynctStatus;

// Data fidelity selector for [`dynct_reconstruct`].
typedef enum DynctFidelity {
  // Use the fidelity in the configuration.
  DYNCT_FIDELITY_CONFIG = 0,
  DYNCT_FIDELITY_L1 = 1,
  DYNCT_FIDELITY_L2 = 2,
} DynctFidelity;

// Run configuration.
typedef struct DynctConfig DynctConfig;

// Image sequence of `n_t` frames, each `n × n`, row-major.
typedef struct DynctImages DynctImages;

// Output of a joint reconstruction.
typedef struct DynctResult DynctResult;

// Measured sinogram with its geometry.
typedef struct DynctSinogram DynctSinogram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length in bytes
// excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dynct_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *dynct_version(void);

// Pinball configuration on an `n × n × n_t` grid with default settings.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum DynctStatus dynct_config_pinball(size_t n, size_t n_t, struct DynctConfig **out);

// Parses a TOML configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` a valid handle slot.
enum DynctStatus dynct_config_from_toml(const char *toml, struct DynctConfig **out);

// Sets the global seed.
//
// # Safety
// `cfg` must be a live handle.
enum DynctStatus dynct_config_set_seed(struct DynctConfig *cfg, uint64_t seed);

// # Safety
// `cfg` must be null or a handle not yet freed.
void dynct_config_free(struct DynctConfig *cfg);

// Creates an image sequence by copying `n_t·n·n` values from `data`.
//
// # Safety
// `data` must point to `n_t·n·n` doubles; `out` a valid handle slot.
enum DynctStatus dynct_images_new(size_t n_t,
                                  size_t n,
                                  const double *data,
                                  struct DynctImages **out);

// # Safety
// `img` must be a live handle; `n_t`, `n` valid pointers.
enum DynctStatus dynct_images_shape(const struct DynctImages *img, size_t *n_t, size_t *n);

// Copies all values into `buf`, which must hold `n_t·n·n` doubles.
//
// # Safety
// `img` must be a live handle; `buf` must point to `len` writable doubles.
enum DynctStatus dynct_images_copy(const struct DynctImages *img, double *buf, size_t len);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum DynctStatus dynct_images_read(const char *path, struct DynctImages **out);

// # Safety
// `img` must be a live handle; `path` a NUL-terminated string.
enum DynctStatus dynct_images_write(const struct DynctImages *img, const char *path);

// # Safety
// `img` must be null or a handle not yet freed.
void dynct_images_free(struct DynctImages *img);

// Renders the phantom and simulates its sinogram under `protocol` (null
// for the configured one). Either output slot may be null.
//
// # Safety
// `cfg` must be a live handle; `protocol` null or NUL-terminated; output
// slots null or valid.
enum DynctStatus dynct_simulate(const struct DynctConfig *cfg,
                                const char *protocol,
                                struct DynctSinogram **sinogram,
                                struct DynctImages **truth);

// Number of time steps and total measured rays.
//
// # Safety
// `s` must be a live handle; outputs valid pointers.
enum DynctStatus dynct_sinogram_size(const struct DynctSinogram *s,
                                     size_t *n_steps,
                                     size_t *total_rays);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum DynctStatus dynct_sinogram_read(const char *path, struct DynctSinogram **out);

// # Safety
// `s` must be a live handle; `path` a NUL-terminated string.
enum DynctStatus dynct_sinogram_write(const struct DynctSinogram *s, const char *path);

// # Safety
// `s` must be null or a handle not yet freed.
void dynct_sinogram_free(struct DynctSinogram *s);

// Runs the joint reconstruction with the solver settings of `cfg`.
//
// # Safety
// `s`, `cfg` must be live handles; `out` a valid handle slot.
enum DynctStatus dynct_reconstruct(const struct DynctSinogram *s,
                                   const struct DynctConfig *cfg,
                                   enum DynctFidelity fidelity,
                                   struct DynctResult **out);

// Copies the reconstructed image sequence into a new handle.
//
// # Safety
// `r` must be a live handle; `out` a valid handle slot.
enum DynctStatus dynct_result_images(const struct DynctResult *r, struct DynctImages **out);

// Outer iteration count and whether the outer tolerance was reached.
//
// # Safety
// `r` must be a live handle; outputs valid pointers.
enum DynctStatus dynct_result_status(const struct DynctResult *r,
                                     size_t *outer_iterations,
                                     bool *converged);

// Copies the joint energy after each outer iteration into `buf`.
//
// # Safety
// `r` must be a live handle; `buf` must point to `len` writable doubles.
enum DynctStatus dynct_result_energy_trace(const struct DynctResult *r, double *buf, size_t len);

// # Safety
// `r` must be null or a handle not yet freed.
void dynct_result_free(struct DynctResult *r);

// Relative ℓ₁ and ℓ₂ errors and mean per-frame SSIM of `recon` against
// `truth`.
//
// # Safety
// Handles must be live; outputs valid pointers.
enum DynctStatus dynct_evaluate(const struct DynctImages *recon,
                                const struct DynctImages *truth,
                                double *rel_l1,
                                double *rel_l2,
                                double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNCT_H */
