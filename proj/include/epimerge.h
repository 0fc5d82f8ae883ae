/* epimerge - curvature-aware model merging.
 *
 * C interface over the core library: opaque handles, status codes, and a
 * thread-local error message. All functions return EPM_OK on success; on
 * failure epm_last_error() describes what went wrong.
 */
#ifndef EPIMERGE_H
#define EPIMERGE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum epm_status {
    EPM_OK          = 0,
    EPM_ERR_USAGE   = 1, /* bad arguments or configuration */
    EPM_ERR_DATA    = 2, /* unreadable or inconsistent inputs */
    EPM_ERR_NUMERIC = 3, /* numerical failure */
} epm_status;

/* Message for the most recent failing call on this thread. */
const char * epm_last_error(void);

typedef struct epm_params    epm_params;    /* named tensor collection */
typedef struct epm_basis     epm_basis;     /* shared rank-one atom basis */
typedef struct epm_fisher    epm_fisher;    /* per-task curvature diagonal */
typedef struct epm_mlp_suite epm_mlp_suite; /* synthetic classification tasks */

/* ---- parameter sets ----------------------------------------------------- */

epm_status epm_params_read(const char * path, epm_params ** out);
epm_status epm_params_write(const epm_params * params, const char * path);
epm_status epm_params_clone(const epm_params * params, epm_params ** out);
void       epm_params_free(epm_params * params);

size_t       epm_params_count(const epm_params * params);
const char * epm_params_name(const epm_params * params, size_t index); /* NULL if out of range */
epm_status   epm_params_dims(const epm_params * params, const char * name,
                             uint64_t * dims, size_t capacity, size_t * ndim);
/* Borrowed pointer into the handle; valid until the handle is freed. */
epm_status   epm_params_values(const epm_params * params, const char * name,
                               const double ** values, size_t * count);

/* fine_tuned - base, layer by layer */
epm_status epm_task_vector(const epm_params * fine_tuned, const epm_params * base, epm_params ** out);

/* ---- subspace basis ----------------------------------------------------- */

epm_status epm_basis_build(const epm_params * base, const epm_params * const * models,
                           size_t task_count, int rank, epm_basis ** out);
epm_status epm_basis_save(const epm_basis * basis, const char * path); /* writes path and path.meta */
epm_status epm_basis_load(const char * path, epm_basis ** out);
void       epm_basis_free(epm_basis * basis);

int    epm_basis_rank(const epm_basis * basis);
int    epm_basis_task_count(const epm_basis * basis);
size_t epm_basis_layer_count(const epm_basis * basis);
/* Borrowed pointer; NULL if out of range. */
const char * epm_basis_layer_name(const epm_basis * basis, size_t index);

/* ---- curvature ---------------------------------------------------------- */

/* Mean squared gradient over a per-sample gradient stream file; fraction in
 * (0, 1] subsamples the stream deterministically under `seed`. */
epm_status epm_fisher_from_stream(const char * grad_stream_path, double fraction,
                                  uint64_t seed, epm_fisher ** out);
epm_status epm_fisher_save(const epm_fisher * fisher, const char * path);
epm_status epm_fisher_load(const char * path, epm_fisher ** out);
void       epm_fisher_free(epm_fisher * fisher);
uint64_t   epm_fisher_sample_count(const epm_fisher * fisher);

/* ---- merging ------------------------------------------------------------ */

typedef struct epm_merge_options {
    const char *   method;             /* am | ta | ties | fisher-avg | tsvm | epimer-mean | epimer-sum */
    const double * weights;            /* length task_count, NULL for uniform; must sum to 1 */
    int            rank;               /* basis rank per task when no basis handle is given; 0 -> 2 */
    double         alpha;              /* scale for sum-style aggregation; 0 -> 1/sqrt(T) */
    double         jitter;             /* added to projected curvature; negative -> 1e-8 */
    double         ties_keep_fraction; /* 0 -> 0.20 */
} epm_merge_options;

/* base may be NULL for am and fisher-avg; fishers are required for
 * fisher-avg, epimer-mean and epimer-sum; basis may be NULL, in which case
 * subspace methods build one from the task deltas at options->rank.
 * out_sidecar (optional) receives a key=value description of the merge;
 * release it with epm_string_free. */
epm_status epm_merge(const epm_merge_options * options,
                     const epm_params * base,
                     const epm_params * const * models, size_t task_count,
                     const epm_fisher * const * fishers,
                     const epm_basis * basis,
                     epm_params ** out_merged, char ** out_sidecar);

/* ---- diagnostics -------------------------------------------------------- */

/* JSON report: curvature-gap statistic eta, its identity partner, and the
 * loss-increase bound ingredients, fixed key order, 17 significant digits.
 * sum_aggregator selects which merged coefficients the subspace variance is
 * evaluated at. Release the string with epm_string_free. */
epm_status epm_diagnose(const epm_params * base,
                        const epm_params * const * models, size_t task_count,
                        const epm_fisher * const * fishers,
                        const epm_basis * basis,
                        const double * weights, double jitter,
                        int sum_aggregator, double alpha,
                        char ** out_json);

void epm_string_free(char * str);

/* ---- synthetic tasks ---------------------------------------------------- */

/* Gaussian-blob classification tasks for a two-layer MLP. The shared
 * initialization has a zero output head (uniform logits). */
epm_status epm_mlp_generate(uint64_t seed, int tasks, int input_dim, int hidden_dim,
                            int classes, int samples_per_task, epm_mlp_suite ** out);
void       epm_mlp_free(epm_mlp_suite * suite);
int        epm_mlp_task_count(const epm_mlp_suite * suite);

/* Backbone = fc1.*, head = fc2.*; merging operates on backbones while each
 * task keeps its own trained head. */
epm_status epm_mlp_base_backbone(const epm_mlp_suite * suite, epm_params ** out);
epm_status epm_mlp_base_head(const epm_mlp_suite * suite, epm_params ** out);

/* Minibatch gradient descent from the shared initialization; deterministic
 * for fixed seeds. Gradient norms are full-train-batch, before and after. */
epm_status epm_mlp_finetune(const epm_mlp_suite * suite, int task,
                            int steps, double lr, int batch_size, uint64_t seed,
                            epm_params ** out_backbone, epm_params ** out_head,
                            double * out_initial_grad_norm, double * out_final_grad_norm);

epm_status epm_mlp_write_dataset(const epm_mlp_suite * suite, int task, const char * path);

/* Per-sample backbone gradients at (backbone, head) over the task's train
 * split, written as a gradient stream container. */
epm_status epm_mlp_write_grad_stream(const epm_mlp_suite * suite, int task,
                                     const epm_params * backbone, const epm_params * head,
                                     const char * path);

/* Top-1 accuracy on the test split of a dataset file. */
epm_status epm_accuracy_eval(const char * dataset_path,
                             const epm_params * backbone, const epm_params * head,
                             double * out_accuracy);

/* Mean train loss at `points` evenly spaced parameters between backbone_a
 * and backbone_b (endpoints included), sharing `head`. out_losses must hold
 * `points` doubles. */
epm_status epm_loss_path(const char * dataset_path,
                         const epm_params * backbone_a, const epm_params * backbone_b,
                         const epm_params * head, int points, double * out_losses);

#ifdef __cplusplus
}
#endif

#endif /* EPIMERGE_H */
