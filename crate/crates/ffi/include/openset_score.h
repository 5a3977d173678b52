#ifndef OPENSET_SCORE_H
#define OPENSET_SCORE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum OsStatus {
  OS_STATUS_OK = 0,
  OS_STATUS_NULL_POINTER = 1,
  OS_STATUS_INVALID_ARGUMENT = 2,
  OS_STATUS_ZERO_NORM = 3,
  OS_STATUS_NON_FINITE = 4,
  OS_STATUS_DIMENSION_MISMATCH = 5,
  OS_STATUS_K_TOO_LARGE = 6,
  OS_STATUS_ZERO_K = 7,
  OS_STATUS_PARSE = 8,
  OS_STATUS_IO = 9,
  OS_STATUS_DOMAIN = 10,
  OS_STATUS_DEGENERATE_SAMPLE = 11,
  OS_STATUS_ZERO_SIGMA = 12,
  OS_STATUS_INVALID_CONFIG = 13,
  OS_STATUS_EMPTY = 14,
  OS_STATUS_BUFFER_TOO_SMALL = 15,
  OS_STATUS_PANIC = 16,
  OS_STATUS_OTHER = 17,
} OsStatus;

typedef enum OsFusionKind {
  OS_FUSION_KIND_LOCAL = 0,
  OS_FUSION_KIND_NAIVE_MEAN = 1,
  OS_FUSION_KIND_NONE = 2,
  OS_FUSION_KIND_MAX_POOL = 3,
  OS_FUSION_KIND_MIN_POOL = 4,
  OS_FUSION_KIND_MEAN_POOL = 5,
  OS_FUSION_KIND_ADD_CONST = 6,
  OS_FUSION_KIND_DOUBLE_MAX = 7,
  OS_FUSION_KIND_AVG_TOP_K = 8,
} OsFusionKind;

/**
 * Opaque gallery handle.
 */
typedef struct OsGallery OsGallery;

/**
 * Fusion rule. `k` is read by the k-NN kinds and `constant` by `AddConst`.
 */
typedef struct OsFusion {
  enum OsFusionKind kind;
  size_t k;
  double constant;
  bool clamp_k;
} OsFusion;

typedef struct OsScoreStats {
  double mu1;
  double sigma1;
  double mu2;
  double sigma2;
  double mu3;
  double sigma3;
  double mu4;
  double sigma4;
  uint64_t n1;
  uint64_t n2;
  uint64_t n3;
  uint64_t m;
  uint64_t r1;
  uint64_t r2;
} OsScoreStats;

typedef struct OsCondition {
  double lhs;
  double rhs;
  double gap;
  bool improves;
  bool at_boundary;
} OsCondition;

typedef struct OsVerdict {
  struct OsCondition open_set;
  struct OsCondition verification;
  double delta;
  double verification_quantile;
  double expected_fnir_without;
  double expected_fnir_with;
  double open_set_threshold_without;
  double open_set_threshold_with;
  double verification_threshold_without;
  double verification_threshold_with;
  double mu3_star;
} OsVerdict;

typedef struct OsOperatingPoint {
  double value;
  double threshold;
  double achieved_rate;
  bool target_unachievable;
} OsOperatingPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *os_last_error(void);

/**
 * Load a gallery CSV (`subject_id,media_id,f0,...`).
 */
enum OsStatus os_gallery_load(const char *path, struct OsGallery **out_gallery);

/**
 * Build a gallery from `num_media` row-major vectors of length `dim`.
 * `subject_of[i]` names the subject of row `i`; subjects are called by their
 * number and ordered by first appearance.
 */
enum OsStatus os_gallery_from_arrays(const double *features,
                                     size_t num_media,
                                     size_t dim,
                                     const uint32_t *subject_of,
                                     struct OsGallery **out_gallery);

/**
 * Release a gallery. Null is ignored.
 */
void os_gallery_free(struct OsGallery *gallery);

/**
 * Subject count, or 0 for a null handle.
 */
size_t os_gallery_num_subjects(const struct OsGallery *gallery);

/**
 * Total media count, or 0 for a null handle.
 */
size_t os_gallery_total_media(const struct OsGallery *gallery);

/**
 * Feature dimension, or 0 for a null handle.
 */
size_t os_gallery_dim(const struct OsGallery *gallery);

/**
 * k-means compress every subject to at most `clusters` prototypes
 * (0 keeps every medium). The input handle is left untouched.
 */
enum OsStatus os_gallery_cluster(const struct OsGallery *gallery,
                                 size_t clusters,
                                 size_t max_iterations,
                                 double convergence_tol,
                                 uint64_t seed,
                                 struct OsGallery **out_gallery);

/**
 * Fused per-subject scores of one probe. `out_scores` must hold
 * `os_gallery_num_subjects` values. `out_increment` (may be null) receives
 * the amount added to the top subject, or NaN when nothing was added.
 */
enum OsStatus os_score_probe(const struct OsGallery *gallery,
                             const double *probe,
                             size_t dim,
                             struct OsFusion fusion,
                             double *out_scores,
                             size_t out_len,
                             double *out_increment);

/**
 * The k-th largest of `row` (k = 1 is the maximum).
 */
enum OsStatus os_knn_score(const double *row,
                           size_t len,
                           size_t k,
                           bool clamp_k,
                           double *out_value);

/**
 * Add `knn` to every entry equal to the row maximum, writing `len` values.
 */
enum OsStatus os_local_score(const double *row, size_t len, double knn, double *out_row);

/**
 * Verification score of a probe against one subject (by index): mean
 * cosine plus the k-th largest cosine within that subject.
 */
enum OsStatus os_one_to_one(const struct OsGallery *gallery,
                            size_t subject,
                            const double *probe,
                            size_t dim,
                            size_t k,
                            bool clamp_k,
                            double *out_value);

/**
 * Evaluate both improvement conditions for `stats`.
 */
enum OsStatus os_predict(const struct OsScoreStats *stats, struct OsVerdict *out_verdict);

/**
 * Φ⁻¹(p).
 */
enum OsStatus os_normal_quantile(double p, double *out_value);

/**
 * Φ(x).
 */
double os_normal_cdf(double x);

/**
 * `−ln(−ln(1 − r1/n2))`.
 */
enum OsStatus os_gumbel_delta(uint64_t r1, uint64_t n2, double *out_value);

/**
 * FNIR at the threshold giving FPIR ≤ `target`. `rank1_correct` may be null
 * when `threshold_only` is set.
 */
enum OsStatus os_fnir_at_fpir(const double *genuine,
                              size_t num_genuine,
                              const double *nonmated_maxima,
                              size_t num_nonmated,
                              const bool *rank1_correct,
                              double target,
                              bool threshold_only,
                              struct OsOperatingPoint *out_point);

/**
 * TAR at the threshold giving FAR ≤ `target`.
 */
enum OsStatus os_tar_at_far(const double *genuine,
                            size_t num_genuine,
                            const double *imposter,
                            size_t num_imposter,
                            double target,
                            struct OsOperatingPoint *out_point);

/**
 * Library version as a static NUL-terminated string.
 */
const char *os_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPENSET_SCORE_H */
