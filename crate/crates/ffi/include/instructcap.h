#ifndef INSTRUCTCAP_H
#define INSTRUCTCAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of the vectors written by [`ic_embedder_embed`].
 */
#define IC_EMBEDDING_DIM 384

/**
 * Result code of every exported function.
 */
typedef enum IcStatus {
  IC_STATUS_OK = 0,
  IC_STATUS_NULL_POINTER = 1,
  IC_STATUS_INVALID_ARGUMENT = 2,
  IC_STATUS_IO = 3,
  IC_STATUS_FORMAT = 4,
  IC_STATUS_RUNTIME = 5,
  IC_STATUS_PANIC = 6,
} IcStatus;

/**
 * A trained model with its vocabulary and knowledge providers.
 */
typedef struct IcCaptioner IcCaptioner;

/**
 * Sentence embedder producing unit-norm 384-dimensional vectors.
 */
typedef struct IcEmbedder IcEmbedder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ic_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated) and returns the full message length in bytes, or
 * 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ic_last_error_message(char *buf, size_t len);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library, not yet freed.
 */
void ic_string_free(char *s);

/**
 * Creates an embedder; equal seeds give equal embeddings.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IcStatus ic_embedder_new(uint64_t seed, struct IcEmbedder **out);

/**
 * Embeds `text` into `out[0..IC_EMBEDDING_DIM]`; `out_len` must equal
 * `IC_EMBEDDING_DIM`.
 *
 * # Safety
 * `handle` must come from [`ic_embedder_new`]; `text` must be a
 * NUL-terminated string; `out` must point to `out_len` writable floats.
 */
enum IcStatus ic_embedder_embed(const struct IcEmbedder *handle,
                                const char *text,
                                float *out,
                                size_t out_len);

/**
 * # Safety
 * `handle` must be null or come from [`ic_embedder_new`], not yet freed.
 */
void ic_embedder_free(struct IcEmbedder *handle);

/**
 * Loads a checkpoint directory written by `instructcap train`. Knowledge
 * comes from the vectors stored in the dataset.
 *
 * # Safety
 * `checkpoint_dir` must be a NUL-terminated string; `out` a valid pointer.
 */
enum IcStatus ic_captioner_open(const char *checkpoint_dir, struct IcCaptioner **out);

/**
 * Captions one video of a dataset split and returns its document as JSON
 * in `*out_json`. `mode` is `"free"` or `"gt_proposals"`.
 *
 * # Safety
 * `handle` must come from [`ic_captioner_open`]; string arguments must be
 * NUL-terminated; `out_json` must be a valid pointer.
 */
enum IcStatus ic_captioner_generate(const struct IcCaptioner *handle,
                                    const char *data_path,
                                    const char *video_id,
                                    const char *mode,
                                    char **out_json);

/**
 * # Safety
 * `handle` must be null or come from [`ic_captioner_open`], not yet freed.
 */
void ic_captioner_free(struct IcCaptioner *handle);

/**
 * Corpus BLEU of order `order` (1 to 4). `candidates_json` is a JSON array
 * of sentences, `references_json` a JSON array holding one array of
 * reference sentences per candidate. Sentences are lower-cased and
 * tokenized like the evaluator does.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be a valid pointer.
 */
enum IcStatus ic_bleu(const char *candidates_json,
                      const char *references_json,
                      uint32_t order,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INSTRUCTCAP_H */
