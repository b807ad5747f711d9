#ifndef TRAJMARK_H
#define TRAJMARK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum TmClassification {
  TM_CLASSIFICATION_BENIGN = 0,
  TM_CLASSIFICATION_REMOVAL_ATTACKED_OWNED = 1,
  TM_CLASSIFICATION_SPOOFED_REJECTED = 2,
  TM_CLASSIFICATION_INVALID_OR_NONWATERMARKED = 3,
} TmClassification;

// Status codes. Values match the command-line exit codes where one exists.
typedef enum TmStatus {
  TM_STATUS_OK = 0,
  TM_STATUS_ERROR = 1,
  TM_STATUS_CALIBRATION = 3,
  TM_STATUS_FORMAT = 4,
  TM_STATUS_PROVENANCE = 5,
  TM_STATUS_NOT_FOUND = 6,
  TM_STATUS_INVALID_ARGUMENT = 7,
  TM_STATUS_BUFFER_SIZE = 8,
  TM_STATUS_PANIC = 9,
} TmStatus;

typedef struct TmCalibration TmCalibration;

typedef struct TmKeyStore TmKeyStore;

typedef struct TmPipeline TmPipeline;

typedef struct TmVerdict {
  bool vanilla_pass;
  double second_moment;
  double tau_vanilla;
  double d2_detect;
  double d2_own;
  double tau_detect;
  double tau_own;
  enum TmClassification classification;
  bool owned;
} TmVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL.
// The pointer stays valid until the next trajmark call on the same thread.
const char *tm_last_error(void);

// Built-in 16×16 toy pipeline.
//
// # Safety
// `out` must be a valid pointer.
enum TmStatus tm_pipeline_new_toy(struct TmPipeline **out);

// Pipeline described by a TOML run configuration.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TmStatus tm_pipeline_from_config(const char *path, struct TmPipeline **out);

// Number of f64 elements in one latent image.
//
// # Safety
// `p` must be a live pipeline handle or NULL.
size_t tm_pipeline_latent_len(const struct TmPipeline *p);

// # Safety
// `p` must come from a `tm_pipeline_*` constructor and not be used afterwards.
void tm_pipeline_free(struct TmPipeline *p);

// Open a key store file, or an in-memory store when `path` is NULL.
//
// # Safety
// `path` must be NULL or NUL-terminated; `out` must be valid.
enum TmStatus tm_keystore_open(const char *path, struct TmKeyStore **out);

// Register a user with a key sized for `p`.
//
// # Safety
// Handles must be live and `user` NUL-terminated.
enum TmStatus tm_keystore_register(struct TmKeyStore *store,
                                   const struct TmPipeline *p,
                                   const char *user,
                                   uint64_t seed,
                                   uint64_t created_at);

// # Safety
// `s` must come from [`tm_keystore_open`] and not be used afterwards.
void tm_keystore_free(struct TmKeyStore *s);

// # Safety
// `path` must be NUL-terminated and `out` valid.
enum TmStatus tm_calibration_load(const char *path, struct TmCalibration **out);

// # Safety
// `c` must come from [`tm_calibration_load`] and not be used afterwards.
void tm_calibration_free(struct TmCalibration *c);

// Generate a watermarked latent for `user` at `timestamp` into `out`,
// which must hold exactly [`tm_pipeline_latent_len`] values.
//
// # Safety
// Handles must be live, `user` NUL-terminated, `out` valid for `len` writes.
enum TmStatus tm_generate(const struct TmPipeline *p,
                          const struct TmKeyStore *store,
                          const char *user,
                          uint64_t timestamp,
                          double *out,
                          size_t len);

// Verify a latent against `user`'s key. A rejection is reported through
// the verdict, not the status.
//
// # Safety
// Handles must be live, `user` NUL-terminated, `image` valid for `len`
// reads and `out` valid for one write.
enum TmStatus tm_verify(const struct TmPipeline *p,
                        const struct TmCalibration *cal,
                        const struct TmKeyStore *store,
                        const char *user,
                        uint64_t timestamp,
                        const double *image,
                        size_t len,
                        struct TmVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJMARK_H */
