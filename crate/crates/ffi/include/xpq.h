#ifndef XPQ_H
#define XPQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum XpqStatus {
  XPQ_STATUS_OK = 0,
  XPQ_STATUS_NULL_POINTER = 1,
  XPQ_STATUS_INVALID_UTF8 = 2,
  XPQ_STATUS_BUFFER_TOO_SMALL = 3,
  XPQ_STATUS_OUT_OF_RANGE = 4,
  XPQ_STATUS_IO = 10,
  XPQ_STATUS_FORMAT = 11,
  XPQ_STATUS_TRUNCATION = 12,
  XPQ_STATUS_VALIDATION = 13,
  XPQ_STATUS_VOCABULARY = 14,
  XPQ_STATUS_CONFIG = 15,
  XPQ_STATUS_COVERAGE = 16,
  XPQ_STATUS_TASK = 17,
  XPQ_STATUS_ARGUMENT = 18,
  XPQ_STATUS_NUMERIC = 19,
  XPQ_STATUS_PANIC = 99,
} XpqStatus;

/*
 A loaded or generated corpus.
 */
typedef struct XpqCorpus XpqCorpus;

/*
 A generated phoneme embedding table and its attention weights.
 */
typedef struct XpqEmbedding XpqEmbedding;

/*
 A codebook together with its surrogate decoder.
 */
typedef struct XpqModel XpqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next call into this library on the same thread.
 */
const char *xpq_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *xpq_version(void);

/*
 Load a corpus from a directory or manifest path.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum XpqStatus xpq_corpus_load(const char *path, struct XpqCorpus **out);

/*
 Generate a synthetic corpus from the `synth` section of a JSON run
 configuration (defaults when `config_json` is null). When `out_dir` is
 not null the corpus and its ground truth are also written there.

 # Safety
 String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum XpqStatus xpq_corpus_generate(const char *config_json,
                                   const char *out_dir,
                                   struct XpqCorpus **out);

/*
 # Safety
 `corpus` must come from this library and not be used afterwards.
 */
void xpq_corpus_free(struct XpqCorpus *corpus);

/*
 # Safety
 `corpus` must be a live handle; `out` must be writable.
 */
enum XpqStatus xpq_corpus_utterance_count(const struct XpqCorpus *corpus, size_t *out);

/*
 # Safety
 `corpus` must be a live handle; `out` must be writable.
 */
enum XpqStatus xpq_corpus_language_count(const struct XpqCorpus *corpus, size_t *out);

/*
 Copy the id of language `index` into `buf` (NUL-terminated). `needed`,
 when not null, receives the required buffer size including the NUL.

 # Safety
 `corpus` must be a live handle; `buf` must hold `buf_len` bytes.
 */
enum XpqStatus xpq_corpus_language_id(const struct XpqCorpus *corpus,
                                      size_t index,
                                      char *buf,
                                      size_t buf_len,
                                      size_t *needed);

/*
 # Safety
 `corpus` must be a live handle; `language` NUL-terminated; `out` writable.
 */
enum XpqStatus xpq_corpus_phoneme_count(const struct XpqCorpus *corpus,
                                        const char *language,
                                        size_t *out);

/*
 Fresh, untrained model with the given codebook shape.

 # Safety
 `out` must be writable.
 */
enum XpqStatus xpq_model_init(size_t n,
                              size_t heads,
                              size_t d_k,
                              size_t d_v,
                              size_t dim,
                              uint64_t seed,
                              struct XpqModel **out);

/*
 Load a model from a checkpoint directory.

 # Safety
 `checkpoint_dir` must be NUL-terminated; `out` must be writable.
 */
enum XpqStatus xpq_model_load(const char *checkpoint_dir, struct XpqModel **out);

/*
 Write `codebook.bin` and `decoder.bin` into `dir`, creating it if needed.
 The result loads with [`xpq_model_load`].

 # Safety
 `model` must be live; `dir` NUL-terminated.
 */
enum XpqStatus xpq_model_save(const struct XpqModel *model, const char *dir);

/*
 # Safety
 `model` must come from this library and not be used afterwards.
 */
void xpq_model_free(struct XpqModel *model);

/*
 Width of generated embeddings (heads × d_v).

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum XpqStatus xpq_model_embedding_dim(const struct XpqModel *model, size_t *out);

/*
 Train on `corpus` with the JSON run configuration (defaults when null),
 writing logs and the checkpoint under `out_dir`. `final_loss`, when not
 null, receives the last step's loss (NaN if no step ran).

 # Safety
 `corpus` must be a live handle; strings NUL-terminated or null as noted.
 */
enum XpqStatus xpq_train(const struct XpqCorpus *corpus,
                         const char *config_json,
                         const char *out_dir,
                         bool resume,
                         double *final_loss);

/*
 Embedding table for `language`, with queries pooled over all of its
 utterances in the corpus.

 # Safety
 Handles must be live; `language` NUL-terminated; `out` writable.
 */
enum XpqStatus xpq_embed_language(const struct XpqModel *model,
                                  const struct XpqCorpus *corpus,
                                  const char *language,
                                  struct XpqEmbedding **out);

/*
 Embedding table for a caller-supplied `rows × cols` row-major query
 matrix. All-zero rows count as absent phonemes.

 # Safety
 `model` must be live; `queries` must hold `rows * cols` floats.
 */
enum XpqStatus xpq_embed_queries(const struct XpqModel *model,
                                 const float *queries,
                                 size_t rows,
                                 size_t cols,
                                 struct XpqEmbedding **out);

/*
 # Safety
 `embedding` must come from this library and not be used afterwards.
 */
void xpq_embedding_free(struct XpqEmbedding *embedding);

/*
 # Safety
 `embedding` must be live; `rows` and `cols` writable.
 */
enum XpqStatus xpq_embedding_shape(const struct XpqEmbedding *embedding,
                                   size_t *rows,
                                   size_t *cols);

/*
 Copy the table, row-major, into `buf` of `len` doubles.

 # Safety
 `embedding` must be live; `buf` must hold `len` doubles.
 */
enum XpqStatus xpq_embedding_copy(const struct XpqEmbedding *embedding, double *buf, size_t len);

/*
 Whether phoneme row `phoneme` had a nonzero query.

 # Safety
 `embedding` must be live; `out` writable.
 */
enum XpqStatus xpq_embedding_present(const struct XpqEmbedding *embedding,
                                     size_t phoneme,
                                     bool *out);

/*
 Copy head `head`'s attention row for `phoneme` (n doubles) into `buf`.

 # Safety
 `embedding` must be live; `buf` must hold `len` doubles.
 */
enum XpqStatus xpq_embedding_attention(const struct XpqEmbedding *embedding,
                                       size_t phoneme,
                                       size_t head,
                                       double *buf,
                                       size_t len);

/*
 Head-averaged cosine similarity between the attention rows of phoneme
 `p` in `a` and phoneme `q` in `b`.

 # Safety
 Both embeddings must be live; `out` writable.
 */
enum XpqStatus xpq_mapping_score(const struct XpqEmbedding *a,
                                 size_t p,
                                 const struct XpqEmbedding *b,
                                 size_t q,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XPQ_H */
