#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace epimerge {

// Diagonal curvature proxy: mean squared gradient per parameter.
struct curvature_estimate {
    parameter_set values;        // same layout as the model, entries >= 0
    uint64_t      sample_count = 0;
    double        fraction     = 1.0;  // of the originating stream
    std::string   source;              // "stream", "exact", "file"
};

// v = (1/N) sum_i g_i .* g_i, accumulated in stream order.
curvature_estimate accumulate_fisher(const std::vector<parameter_set> & grads);

// Deterministic subsample: seeded shuffle of [0, n), then the first
// max(1, floor(fraction * n)) indices.
std::vector<size_t> subsample_indices(size_t n, double fraction, uint64_t seed);

// Per-sample gradient stream in a container: sample i stores each layer as
// "<layer>#<i>". Stream order is recovered from the numeric suffix.
void                       write_grad_stream(const std::vector<parameter_set> & grads, const std::string & path);
std::vector<parameter_set> read_grad_stream(const std::string & path);

curvature_estimate fisher_from_stream_file(const std::string & path, double fraction, uint64_t seed);

// Fisher file: container of the diagonal plus a sidecar with sample_count,
// fraction and source.
void               write_fisher(const curvature_estimate & est, const std::string & path);
curvature_estimate read_fisher(const std::string & path);

// H + eps I on a projected curvature block.
Eigen::MatrixXd ensure_psd(const Eigen::MatrixXd & h, double eps);

// Scales H so its trace equals its dimension; comparison-friendly form used
// by curvature-gap diagnostics.
Eigen::MatrixXd trace_normalize(const Eigen::MatrixXd & h);

} // namespace epimerge
