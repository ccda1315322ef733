#ifndef RESOFILTER_H
#define RESOFILTER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RfModule {
  RF_MODULE_WQ = 0,
  RF_MODULE_WK = 1,
  RF_MODULE_WV = 2,
  RF_MODULE_W_UP = 3,
  RF_MODULE_W_DOWN = 4,
} RfModule;

typedef enum RfOptimizer {
  RF_OPTIMIZER_ADAMW = 0,
  RF_OPTIMIZER_SGD = 1,
} RfOptimizer;

typedef enum RfStat {
  RF_STAT_MEAN_ABS = 0,
  RF_STAT_MEAN_SIGNED = 1,
  RF_STAT_STD = 2,
  RF_STAT_P90 = 3,
  RF_STAT_P95 = 4,
  RF_STAT_P99 = 5,
  RF_STAT_COSINE = 6,
  RF_STAT_PEARSON = 7,
} RfStat;

typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_ARGUMENT = 2,
  RF_STATUS_IO = 3,
  RF_STATUS_PARSE = 4,
  RF_STATUS_DOMAIN = 5,
  RF_STATUS_BUFFER_TOO_SMALL = 6,
  RF_STATUS_INTERNAL = 7,
} RfStatus;

// Loaded checkpoint plus its vocabulary.
typedef struct RfModel RfModel;

// Ordered list of per-sample scores.
typedef struct RfScores RfScores;

typedef struct RfScoreOptions {
  enum RfModule module;
  enum RfStat stat;
  // Number of final decoder blocks averaged over.
  uint32_t last_layers;
  enum RfOptimizer probe_optimizer;
  double probe_lr;
  uint32_t probe_steps;
  // Worker threads; 0 means one.
  uint32_t workers;
} RfScoreOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *rf_last_error(void);

// The library defaults: w_up, mean_abs, last 3 layers, one AdamW step at
// lr 1e-5, one worker.
struct RfScoreOptions rf_score_options_default(void);

// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum RfStatus rf_model_load(const char *checkpoint_path,
                            const char *vocab_path,
                            struct RfModel **out);

// Decoder blocks in the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle from [`rf_model_load`].
size_t rf_model_num_layers(const struct RfModel *model);

// # Safety
// `model` must be null or a handle from [`rf_model_load`] not freed before.
void rf_model_free(struct RfModel *model);

// Scores every sample of a JSONL dataset, rendered with the turn-marker
// template.
//
// # Safety
// `model` must be a live handle, `data_path` a NUL-terminated string,
// `options` readable and `out` writable.
enum RfStatus rf_score_dataset(const struct RfModel *model,
                               const char *data_path,
                               const struct RfScoreOptions *options,
                               struct RfScores **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum RfStatus rf_scores_load(const char *path, struct RfScores **out);

// Wraps raw values as scores with indices `0..n`.
//
// # Safety
// `values` must point to `n` doubles (or be null with `n == 0`); `out`
// must be writable.
enum RfStatus rf_scores_from_values(const double *values, size_t n, struct RfScores **out);

// # Safety
// `scores` must be a live handle and `path` a NUL-terminated string.
enum RfStatus rf_scores_save(const struct RfScores *scores, const char *path);

// Number of entries, or 0 for a null handle.
//
// # Safety
// `scores` must be null or a live handle.
size_t rf_scores_len(const struct RfScores *scores);

// Sample index and score of entry `i`.
//
// # Safety
// `scores` must be a live handle; `index` and `score` writable.
enum RfStatus rf_scores_get(const struct RfScores *scores, size_t i, size_t *index, double *score);

// # Safety
// `scores` must be null or a handle not freed before.
void rf_scores_free(struct RfScores *scores);

// Indices of the `⌊n·retain⌋` lowest scores in ascending order. `out_len`
// always receives the required count; if `capacity` is smaller, nothing is
// written to `out` and `BufferTooSmall` is returned.
//
// # Safety
// `scores` must be a live handle; `out` must hold `capacity` entries;
// `out_len` writable.
enum RfStatus rf_select(const struct RfScores *scores,
                        double retain,
                        size_t *out,
                        size_t capacity,
                        size_t *out_len);

// Linearly interpolated percentile, `q` in [0, 1].
//
// # Safety
// `values` must point to `n` doubles; `out` writable.
enum RfStatus rf_percentile(const double *values, size_t n, double q, double *out);

// `1 − e^(−λ·size)`.
//
// # Safety
// `out` must be writable.
enum RfStatus rf_richness(size_t size, double lambda, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESOFILTER_H */
