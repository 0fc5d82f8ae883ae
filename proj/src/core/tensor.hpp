#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace epimerge {

// Storage dtype of a tensor inside a container file. Arithmetic always runs
// in double; f32 tensors are widened on read and narrowed back on write.
enum class dtype : uint8_t { f32 = 0, f64 = 1 };

struct tensor {
    dtype                 stored = dtype::f64;
    std::vector<uint64_t> shape;
    std::vector<double>   data;   // row-major

    size_t numel() const {
        size_t n = 1;
        for (uint64_t d : shape) n *= static_cast<size_t>(d);
        return n;
    }
    bool same_layout(const tensor & other) const {
        return stored == other.stored && shape == other.shape;
    }
};

// A named collection of tensors; std::map keeps names sorted, matching the
// container format's record order.
struct parameter_set {
    std::map<std::string, tensor> entries;

    bool   empty() const { return entries.empty(); }
    size_t size() const { return entries.size(); }
    size_t total_params() const;

    tensor &       at(const std::string & name);
    const tensor & at(const std::string & name) const;
    bool           has(const std::string & name) const { return entries.count(name) != 0; }
};

// Task vectors (per-layer deltas) share the parameter_set representation.
using task_vector = parameter_set;

enum class layer_kind { matrix, auxiliary };

struct layer_class {
    std::string name;
    layer_kind  kind;
};

// A layer is a matrix iff it is 2-D with both dims >= 2; everything else
// (vectors, scalars, higher-rank tensors, degenerate 2-D) is auxiliary.
bool is_matrix_shape(const std::vector<uint64_t> & shape);
std::vector<layer_class> classify_layers(const parameter_set & params);
std::vector<std::string> matrix_layer_names(const parameter_set & params);

// throws errc::data with `context` in the message when the two sets do not
// share an identical name/shape/dtype table
void require_aligned(const parameter_set & a, const parameter_set & b, const std::string & context);

task_vector compute_task_vector(const parameter_set & fine_tuned, const parameter_set & base);
parameter_set apply_delta(const parameter_set & base, const task_vector & delta, double scale = 1.0);

// sum_t weights[t] * sets[t]; all sets must be aligned
parameter_set weighted_sum(const std::vector<const parameter_set *> & sets, const std::vector<double> & weights);

void scale_in_place(parameter_set & params, double factor);
double frobenius_norm(const parameter_set & params);
double dot(const parameter_set & a, const parameter_set & b);

// disjoint union of two sets (duplicate names are a data error)
parameter_set merge_disjoint(const parameter_set & a, const parameter_set & b);

} // namespace epimerge
