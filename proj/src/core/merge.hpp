#pragma once

#include <optional>
#include <string>
#include <vector>

#include "core/curvature.hpp"
#include "core/subspace.hpp"
#include "core/tensor.hpp"

namespace epimerge {

enum class merge_method {
    am,           // weighted arithmetic mean of model parameters
    ta,           // base + scaled weighted sum of deltas
    ties,         // magnitude trim + sign election + disjoint mean
    fisher_avg,   // per-coordinate Fisher-weighted average of models
    tsvm,         // scaled sum of subspace coefficients
    epimer_mean,  // curvature-weighted subspace mean
    epimer_sum,   // sum-aggregated variant of the above
};

const char * method_name(merge_method m);
std::optional<merge_method> parse_method(const std::string & name);
bool method_uses_basis(merge_method m);
bool method_uses_fishers(merge_method m);
bool method_uses_base(merge_method m);

struct merge_config {
    merge_method        method = merge_method::epimer_mean;
    std::vector<double> weights;              // empty -> uniform 1/T
    int                 rank = 2;             // per-task basis rank when building on the fly
    double              alpha = 0.0;          // 0 -> default 1/sqrt(T)
    double              jitter = 1e-8;        // added to projected curvature blocks
    double              ties_keep_fraction = 0.20;
};

struct layer_solve_info {
    std::string layer;
    double      eps_used = 0.0;
    double      residual = 0.0;
};

struct merge_outcome {
    parameter_set merged;
    double              alpha_used = 0.0;
    std::vector<double> weights_used;
    // subspace methods only:
    int                           rank_used        = 0;
    bool                          has_coefficients = false;
    projected_vector              coefficients;      // aligned with the basis layers
    std::vector<layer_solve_info> solves;            // curvature-weighted methods only
};

// weights empty -> uniform; otherwise must have size T, be non-negative and
// sum to 1 within 1e-12
std::vector<double> resolve_weights(const std::vector<double> & weights, size_t task_count);
double              resolve_alpha(double alpha, size_t task_count);

// Central entry point. `base` may be null for methods that operate on model
// parameters directly (am, fisher-avg); `basis` may be null, in which case
// subspace methods build one from the deltas at cfg.rank; `fishers` are
// required only by fisher-avg and the curvature-weighted subspace methods.
merge_outcome run_merge(const merge_config & cfg,
                        const parameter_set * base,
                        const std::vector<const parameter_set *> & models,
                        const std::vector<const curvature_estimate *> & fishers,
                        const tagged_basis * basis);

// Deterministic key=value description of a finished merge (method, weights,
// alpha, jitter, per-layer eps actually used).
std::string merge_sidecar_text(const merge_config & cfg, const merge_outcome & outcome);

} // namespace epimerge
