#ifndef DUET_H
#define DUET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DuetStatus {
  DUET_STATUS_OK = 0,
  DUET_STATUS_NULL_ARGUMENT = 1,
  DUET_STATUS_CONFIG = 2,
  DUET_STATUS_NUMERIC = 3,
  DUET_STATUS_IO = 4,
  DUET_STATUS_INVALID_UTF8 = 5,
  DUET_STATUS_BUFFER_TOO_SMALL = 6,
  DUET_STATUS_TRUNCATED = 7,
  DUET_STATUS_FAILED = 8,
  DUET_STATUS_PANIC = 9,
} DuetStatus;

typedef enum DuetReplayMode {
  DUET_REPLAY_MODE_SEQUENTIAL = 0,
  DUET_REPLAY_MODE_UNIFIED = 1,
  DUET_REPLAY_MODE_OFF = 2,
} DuetReplayMode;

// A backbone together with one concept's learned tokens.
typedef struct DuetModel DuetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *duet_last_error(void);

// Load a backbone and a concept checkpoint trained against it.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum DuetStatus duet_model_open(const char *backbone_path,
                                const char *concept_path,
                                struct DuetModel **out);

// # Safety
// `m` must come from [`duet_model_open`] and not be used afterwards.
void duet_model_free(struct DuetModel *m);

// Length of a latent. Zero for a null model.
//
// # Safety
// `m` is null or a live model.
size_t duet_model_latent_dim(const struct DuetModel *m);

// Cap on decoded tokens per text call; 0 restores the default.
//
// # Safety
// `m` must be a live model.
enum DuetStatus duet_model_set_max_new_tokens(struct DuetModel *m, size_t n);

// Hex digest of the backbone weights.
//
// # Safety
// `buf` holds `cap` bytes; `len` is writable.
enum DuetStatus duet_model_fingerprint(const struct DuetModel *m,
                                       char *buf,
                                       size_t cap,
                                       size_t *len);

// Greedy answer to `prompt`, optionally about an image latent
// (`image` null and `image_len` 0 for none).
//
// # Safety
// Pointers must be valid for the given lengths.
enum DuetStatus duet_generate_text(const struct DuetModel *m,
                                   const double *image,
                                   size_t image_len,
                                   const char *prompt,
                                   char *buf,
                                   size_t cap,
                                   size_t *len);

// Sample one latent for `prompt`, editing `source` when given.
// `steps` 0 uses the default sampler.
//
// # Safety
// `out` holds `out_len` doubles, which must equal the latent length.
enum DuetStatus duet_sample(const struct DuetModel *m,
                            const char *prompt,
                            const double *source,
                            size_t source_len,
                            uint64_t seed,
                            uint32_t steps,
                            double *out,
                            size_t out_len);

// Replay a request and generate from the refined prompt, which is
// written to `refined`.
//
// # Safety
// `out` holds `out_len` doubles; `refined` holds `cap` bytes.
enum DuetStatus duet_replay(const struct DuetModel *m,
                            const char *request,
                            enum DuetReplayMode mode,
                            size_t exemplars,
                            uint64_t seed,
                            uint32_t steps,
                            double *out,
                            size_t out_len,
                            char *refined,
                            size_t cap,
                            size_t *len);

// Sentence BLEU of whitespace-tokenized strings.
//
// # Safety
// Both strings NUL-terminated; `out` writable.
enum DuetStatus duet_bleu(const char *candidate, const char *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUET_H */
