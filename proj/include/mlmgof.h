/* C interface for mixed-effects logistic regression with a grouping-based
 * Wald goodness-of-fit test.
 *
 * All functions that can fail return an mlmgof_status; on failure a
 * thread-local message is available through mlmgof_last_error(). Handles
 * returned through out-parameters are owned by the caller and released with
 * the matching _free function.
 */
#ifndef MLMGOF_H
#define MLMGOF_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  MLMGOF_OK = 0,
  MLMGOF_ERR_DATA = 1,       /* malformed or inconsistent input data */
  MLMGOF_ERR_ESTIMATION = 2, /* the optimizer could not produce a fit */
  MLMGOF_ERR_GOF = 3,        /* the test procedure failed */
  MLMGOF_ERR_INVALID = 4,    /* bad arguments (null handle, bad index, ...) */
  MLMGOF_ERR_IO = 5,
  MLMGOF_ERR_INTERNAL = 6
} mlmgof_status;

typedef struct mlmgof_dataset mlmgof_dataset;
typedef struct mlmgof_spec mlmgof_spec;
typedef struct mlmgof_fit mlmgof_fit;
typedef struct mlmgof_gof mlmgof_gof;

const char* mlmgof_version(void);

/* Message for the most recent failure on this thread; empty if none. */
const char* mlmgof_last_error(void);

/* ---- data ---- */

/* CSV with a header. Required columns: y (0/1) and id2; optional id3 for a
 * third nesting level; every other column is a numeric covariate. */
mlmgof_status mlmgof_dataset_read_csv(const char* path, mlmgof_dataset** out);
mlmgof_status mlmgof_dataset_parse_csv(const char* text, mlmgof_dataset** out);
void mlmgof_dataset_free(mlmgof_dataset* ds);

long mlmgof_dataset_rows(const mlmgof_dataset* ds);
int mlmgof_dataset_level2_count(const mlmgof_dataset* ds);
int mlmgof_dataset_level3_count(const mlmgof_dataset* ds);
long mlmgof_dataset_min_cluster_size(const mlmgof_dataset* ds);

/* ---- model specification ---- */

mlmgof_status mlmgof_spec_new(mlmgof_spec** out);
void mlmgof_spec_free(mlmgof_spec* spec);

mlmgof_status mlmgof_spec_add_fixed(mlmgof_spec* spec, const char* name);

/* level is 2 or 3; slopes_csv is a comma-separated covariate list or NULL;
 * unstructured selects a full covariance instead of independent effects. */
mlmgof_status mlmgof_spec_set_random(mlmgof_spec* spec, int level, int intercept,
                                     const char* slopes_csv, int unstructured);

/* ---- estimation ---- */

typedef struct {
  int nodes;       /* adaptive quadrature nodes per dimension */
  int max_iter;    /* optimizer iteration cap */
  double tol;      /* convergence tolerance */
  int compute_cov; /* nonzero: compute the fixed-effect covariance */
} mlmgof_fit_options;

void mlmgof_fit_options_default(mlmgof_fit_options* opts);

mlmgof_status mlmgof_fit_model(const mlmgof_dataset* ds, const mlmgof_spec* spec,
                               const mlmgof_fit_options* opts, mlmgof_fit** out);
void mlmgof_fit_free(mlmgof_fit* fit);

int mlmgof_fit_n_coef(const mlmgof_fit* fit);
const char* mlmgof_fit_coef_name(const mlmgof_fit* fit, int index);
double mlmgof_fit_coef(const mlmgof_fit* fit, int index);
double mlmgof_fit_coef_se(const mlmgof_fit* fit, int index);
double mlmgof_fit_loglik(const mlmgof_fit* fit);
int mlmgof_fit_converged(const mlmgof_fit* fit);

/* Random-effect summaries per level (2 or 3). dim is 0 when the level has no
 * random effects; sd/corr index within the level's effect vector. */
int mlmgof_fit_re_dim(const mlmgof_fit* fit, int level);
const char* mlmgof_fit_re_name(const mlmgof_fit* fit, int level, int index);
double mlmgof_fit_re_sd(const mlmgof_fit* fit, int level, int index);
double mlmgof_fit_re_corr(const mlmgof_fit* fit, int level, int i, int j);

/* Conditional predicted probabilities, one per dataset row. out must hold
 * mlmgof_dataset_rows(ds) doubles; ds/spec must match the fitted model. */
mlmgof_status mlmgof_fit_predict(const mlmgof_fit* fit, const mlmgof_dataset* ds,
                                 const mlmgof_spec* spec, double* out, long out_len);

/* ---- goodness of fit ---- */

/* forced_groups = 0 selects the data-driven rule G = min(10, smallest
 * level-2 cluster size); a positive value forces that group count. A test
 * that fails (degenerate grouping, estimation failure) still returns
 * MLMGOF_OK with mlmgof_gof_ok() == 0; only misuse returns an error. */
mlmgof_status mlmgof_gof_run(const mlmgof_dataset* ds, const mlmgof_spec* spec,
                             int forced_groups, const mlmgof_fit_options* opts,
                             mlmgof_gof** out);
void mlmgof_gof_free(mlmgof_gof* gof);

int mlmgof_gof_ok(const mlmgof_gof* gof);
const char* mlmgof_gof_failure(const mlmgof_gof* gof); /* "none" when ok */
int mlmgof_gof_groups(const mlmgof_gof* gof);
double mlmgof_gof_wald(const mlmgof_gof* gof);
int mlmgof_gof_df(const mlmgof_gof* gof);
double mlmgof_gof_pvalue(const mlmgof_gof* gof);
double mlmgof_gof_baseline_loglik(const mlmgof_gof* gof);
double mlmgof_gof_augmented_loglik(const mlmgof_gof* gof);

/* One-line CSV record of the result:
 * G_used,rule,W,df,p_value,status,baseline_loglik,augmented_loglik */
mlmgof_status mlmgof_gof_record_csv(const mlmgof_gof* gof, char* buf, long buf_len);

/* ---- simulation study ---- */

/* Number of predefined simulation design points. */
int mlmgof_catalog_size(void);

/* Identifier and study part (1..3) of the design point at index. */
mlmgof_status mlmgof_catalog_entry(int index, char* id_buf, long buf_len,
                                   int* part);

/* Header line matching the rows produced by mlmgof_simulate. */
mlmgof_status mlmgof_summary_header(char* buf, long buf_len);

/* Run one design point for `reps` replications and write its summary row
 * (no trailing newline) into row_buf. jobs > 1 runs replications on a
 * thread pool; results are independent of jobs. */
mlmgof_status mlmgof_simulate(const char* scenario_id, long reps,
                              uint64_t master_seed, int nodes, int jobs,
                              char* row_buf, long buf_len);

#ifdef __cplusplus
}
#endif

#endif /* MLMGOF_H */
