/* C interface to the cafe test-time adaptation engine. */

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call. `Ok` is zero; everything else maps
// one-to-one onto the engine's error taxonomy plus the boundary-only codes
// `NullPointer`, `InvalidUtf8`, and `Panic`.
typedef enum CafeStatus {
  CafeStatus_Ok = 0,
  CafeStatus_InvalidInput = 1,
  CafeStatus_NumericalError = 2,
  CafeStatus_DegenerateBatch = 3,
  CafeStatus_FormatError = 4,
  CafeStatus_VersionMismatch = 5,
  CafeStatus_Truncated = 6,
  CafeStatus_ChecksumFailure = 7,
  CafeStatus_Io = 8,
  CafeStatus_NullPointer = 9,
  CafeStatus_InvalidUtf8 = 10,
  CafeStatus_Panic = 11,
} CafeStatus;

// Opaque labeled dataset.
typedef struct CafeDataset CafeDataset;

// Opaque feature-extractor + classifier pair.
typedef struct CafeModel CafeModel;

// Opaque adaptation run report.
typedef struct CafeReport CafeReport;

// Opaque frozen source statistics.
typedef struct CafeStats CafeStats;

// Adaptation settings. `k = 0` means "use the group count frozen in the
// statistics object". Obtain defaults from [`cafe_tta_config_default`] and
// override selectively.
typedef struct CafeTtaConfig {
  double lr;
  double momentum;
  size_t batch_size;
  size_t k;
  double epsilon;
  bool use_align;
  bool use_infomax;
  bool online;
  uint64_t seed;
  size_t epochs;
} CafeTtaConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never freed.
const char *cafe_version(void);

// Message describing the most recent failure on the calling thread.
// Valid until the next failing call on the same thread; never freed by the
// caller.
const char *cafe_last_error_message(void);

// Frees a string returned by this library (currently only
// [`cafe_report_to_json`]). Null is a no-op.
void cafe_string_free(char *text);

// Builds a dataset from caller-owned buffers: `features` is row-major
// `n × dim`, `labels` has one entry per row in `[0, class_count)`. The
// buffers are copied; the caller keeps ownership.
enum CafeStatus cafe_dataset_from_raw(const double *features,
                                      const uint32_t *labels,
                                      size_t n,
                                      size_t dim,
                                      size_t class_count,
                                      struct CafeDataset **out);

enum CafeStatus cafe_dataset_load(const char *path, struct CafeDataset **out);

enum CafeStatus cafe_dataset_save(const struct CafeDataset *data, const char *path);

// Number of samples; 0 for a null handle.
size_t cafe_dataset_len(const struct CafeDataset *data);

// Input dimensionality; 0 for a null handle.
size_t cafe_dataset_dim(const struct CafeDataset *data);

void cafe_dataset_free(struct CafeDataset *data);

// Creates a freshly initialized (untrained) model.
enum CafeStatus cafe_model_new(size_t in_dim,
                               size_t hidden_dim,
                               size_t feature_dim,
                               size_t class_count,
                               uint64_t seed,
                               struct CafeModel **out);

enum CafeStatus cafe_model_load(const char *path, struct CafeModel **out);

enum CafeStatus cafe_model_save(const struct CafeModel *model, const char *path);

// Feature (penultimate-layer) dimensionality; 0 for a null handle.
size_t cafe_model_feature_dim(const struct CafeModel *model);

void cafe_model_free(struct CafeModel *model);

// Supervised source training, updating the model in place. Writes the final
// training accuracy through `out_accuracy` when non-null.
enum CafeStatus cafe_pretrain(struct CafeModel *model,
                              const struct CafeDataset *data,
                              size_t epochs,
                              double lr,
                              double momentum,
                              uint64_t seed,
                              double *out_accuracy);

// Predicts a label per sample into `out_labels`, which must hold
// `cafe_dataset_len(data)` entries.
enum CafeStatus cafe_predict(const struct CafeModel *model,
                             const struct CafeDataset *data,
                             uint32_t *out_labels);

// Freezes grouped source feature statistics from a trained model and source
// data: feature mean/covariance, the spectral feature partition into `k`
// groups, and the per-group eigendecompositions floored at `epsilon`.
enum CafeStatus cafe_stats_precompute(const struct CafeModel *model,
                                      const struct CafeDataset *data,
                                      size_t k,
                                      double epsilon,
                                      uint64_t seed,
                                      struct CafeStats **out);

enum CafeStatus cafe_stats_load(const char *path, struct CafeStats **out);

enum CafeStatus cafe_stats_save(const struct CafeStats *stats, const char *path);

// Number of feature groups; 0 for a null handle.
size_t cafe_stats_k(const struct CafeStats *stats);

// Feature dimensionality the statistics were computed over; 0 for null.
size_t cafe_stats_dim(const struct CafeStats *stats);

void cafe_stats_free(struct CafeStats *stats);

// Default adaptation settings: lr 1e-3, momentum 0.8, batch 256, frozen
// group count (`k = 0`), eigenvalue floor 1e-5, both losses on, offline,
// seed 0, one epoch.
struct CafeTtaConfig cafe_tta_config_default(void);

// Adapts `model` on unlabeled target `data` against frozen `stats`. On
// success writes the adapted model through `out_model` and, when non-null,
// the run report through `out_report`. The input model is untouched.
enum CafeStatus cafe_adapt(const struct CafeModel *model,
                           const struct CafeStats *stats,
                           const struct CafeDataset *data,
                           const struct CafeTtaConfig *config,
                           struct CafeModel **out_model,
                           struct CafeReport **out_report);

// Serializes the full report (config echo, loss traces, per-group KL values,
// accuracy, distribution-gap readings, degeneracy events) as JSON. Free the
// returned string with [`cafe_string_free`]. Returns null on failure.
char *cafe_report_to_json(const struct CafeReport *report);

// Post-adaptation accuracy, or NaN when labels were unavailable or the
// handle is null.
double cafe_report_accuracy(const struct CafeReport *report);

// Number of optimization steps taken; 0 for a null handle.
size_t cafe_report_batches_consumed(const struct CafeReport *report);

// Total loss at the final step, or NaN when no step ran / null handle.
double cafe_report_final_loss(const struct CafeReport *report);

// Feature-distribution gap to the source statistics before adaptation, or
// NaN when it was not computed / null handle.
double cafe_report_frechet_before(const struct CafeReport *report);

// Feature-distribution gap after adaptation, or NaN when it was not
// computed / null handle.
double cafe_report_frechet_after(const struct CafeReport *report);

void cafe_report_free(struct CafeReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
