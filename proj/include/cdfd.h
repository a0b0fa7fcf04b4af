/*
 * C API for the cross-domain fault diagnosis toolkit. All entry points
 * return a status code; the last error message for the calling thread is
 * available through cdfd_last_error(). Handles are opaque and must be
 * released with the matching *_free call.
 */
#ifndef CDFD_H
#define CDFD_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CDFD_API __declspec(dllexport)
#else
#define CDFD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cdfd_status {
  CDFD_OK = 0,
  CDFD_ERR_INVALID_ARGUMENT = 1,
  CDFD_ERR_UNSUPPORTED = 2,
  CDFD_ERR_IO = 3,
  CDFD_ERR_NUMERIC = 4,
  CDFD_ERR_INTERNAL = 5
} cdfd_status;

typedef struct cdfd_dataset cdfd_dataset;
typedef struct cdfd_plan cdfd_plan;

CDFD_API const char* cdfd_version(void);

/* Message describing the most recent failure on this thread. */
CDFD_API const char* cdfd_last_error(void);

/* ---- datasets ---- */

/* features: row-major rows x cols; labels: rows entries in [0, n_classes). */
CDFD_API cdfd_status cdfd_dataset_create(const double* features, int64_t rows,
                                         int64_t cols, const int32_t* labels,
                                         int32_t n_classes, const char* domain_id,
                                         cdfd_dataset** out);
CDFD_API void cdfd_dataset_free(cdfd_dataset* ds);
CDFD_API cdfd_status cdfd_dataset_rows(const cdfd_dataset* ds, int64_t* out);
CDFD_API cdfd_status cdfd_dataset_cols(const cdfd_dataset* ds, int64_t* out);
CDFD_API cdfd_status cdfd_dataset_classes(const cdfd_dataset* ds, int32_t* out);
CDFD_API cdfd_status cdfd_dataset_domain(const cdfd_dataset* ds, const char** out);
/* Copies into caller buffers sized rows*cols and rows respectively. */
CDFD_API cdfd_status cdfd_dataset_copy_features(const cdfd_dataset* ds, double* out);
CDFD_API cdfd_status cdfd_dataset_copy_labels(const cdfd_dataset* ds, int32_t* out);

/* Generates one dataset per mode from a synthetic spec (JSON text); see the
 * README for the schema. Caller frees each handle and the array via
 * cdfd_dataset_list_free. */
CDFD_API cdfd_status cdfd_synthetic_generate(const char* spec_json, int32_t n_per_mode,
                                             uint64_t seed, cdfd_dataset*** out,
                                             int64_t* n_out);
/* Ingests a directory (or single file) of TE-format CSVs into per-mode
 * feature datasets. balance_target <= 0 balances to the largest fault-class
 * count. */
CDFD_API cdfd_status cdfd_te_ingest(const char* path, uint64_t seed,
                                    int32_t balance_target, cdfd_dataset*** out,
                                    int64_t* n_out, int32_t* dropped_out);
CDFD_API void cdfd_dataset_list_free(cdfd_dataset** list, int64_t n);

/* ---- optimal transport ---- */

/* cost: row-major n_rows x n_cols, squared-distance scale. */
CDFD_API cdfd_status cdfd_ot_exact(const double* row_weights, int64_t n_rows,
                                   const double* col_weights, int64_t n_cols,
                                   const double* cost, cdfd_plan** out);
CDFD_API cdfd_status cdfd_ot_sinkhorn(const double* row_weights, int64_t n_rows,
                                      const double* col_weights, int64_t n_cols,
                                      const double* cost, double epsilon,
                                      int32_t max_iter, double tol, cdfd_plan** out);
CDFD_API void cdfd_plan_free(cdfd_plan* plan);
CDFD_API cdfd_status cdfd_plan_copy_values(const cdfd_plan* plan, double* out);
/* Frobenius inner product of the plan with a cost matrix of the same shape. */
CDFD_API cdfd_status cdfd_plan_cost(const cdfd_plan* plan, const double* cost,
                                    double* out);

/* Squared-Euclidean Wasserstein distance between two uniform point clouds. */
CDFD_API cdfd_status cdfd_wasserstein(const double* xs, int64_t ns, const double* xt,
                                      int64_t nt, int64_t dim, double* out);

/* ---- divergences ---- */

/* kernel: "linear", "rbf" (sigma > 0, or 0 for the median heuristic), or
 * "polynomial" (degree, offset via sigma/extra unused). */
CDFD_API cdfd_status cdfd_mmd(const double* xs, int64_t ns, const double* xt,
                              int64_t nt, int64_t dim, const char* kernel,
                              double sigma, double* out);

CDFD_API cdfd_status cdfd_h_distance(const double* xs, int64_t ns, const double* xt,
                                     int64_t nt, int64_t dim, uint64_t seed,
                                     double* proxy_a_out, double* paper_literal_out);

/* ---- experiments ---- */

/* Runs the benchmark described by a config JSON file. Optional overrides may
 * be NULL/0: protocol ("pairwise"/"multi_source"), out_dir, seeds as a
 * comma-separated list, jobs. Writes report.json, accuracy matrices, and
 * timings into the output directory; copies that directory path into
 * out_path_buf when provided. */
CDFD_API cdfd_status cdfd_run_experiment(const char* config_path,
                                         const char* protocol_override,
                                         const char* out_dir_override,
                                         const char* seeds_override, int32_t jobs,
                                         char* out_path_buf, size_t out_path_cap);

/* Re-emits a stored report (directory containing report.json, or the file
 * itself) in the requested format: "csv", "json", or "all". */
CDFD_API cdfd_status cdfd_emit_report(const char* report_path, const char* format,
                                      const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* CDFD_H */
