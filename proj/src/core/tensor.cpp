#include "core/tensor.hpp"

#include <cmath>

#include "core/errors.hpp"

namespace epimerge {

size_t parameter_set::total_params() const {
    size_t n = 0;
    for (const auto & [name, t] : entries) {
        (void) name;
        n += t.numel();
    }
    return n;
}

tensor & parameter_set::at(const std::string & name) {
    auto it = entries.find(name);
    if (it == entries.end()) fail_data("no tensor named '" + name + "'");
    return it->second;
}

const tensor & parameter_set::at(const std::string & name) const {
    auto it = entries.find(name);
    if (it == entries.end()) fail_data("no tensor named '" + name + "'");
    return it->second;
}

bool is_matrix_shape(const std::vector<uint64_t> & shape) {
    return shape.size() == 2 && shape[0] >= 2 && shape[1] >= 2;
}

std::vector<layer_class> classify_layers(const parameter_set & params) {
    std::vector<layer_class> out;
    out.reserve(params.size());
    for (const auto & [name, t] : params.entries) {
        out.push_back({name, is_matrix_shape(t.shape) ? layer_kind::matrix : layer_kind::auxiliary});
    }
    return out;
}

std::vector<std::string> matrix_layer_names(const parameter_set & params) {
    std::vector<std::string> out;
    for (const auto & [name, t] : params.entries) {
        if (is_matrix_shape(t.shape)) out.push_back(name);
    }
    return out;
}

void require_aligned(const parameter_set & a, const parameter_set & b, const std::string & context) {
    if (a.size() != b.size()) {
        fail_data(context + ": parameter sets differ in tensor count (" +
                  std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    }
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    for (; ia != a.entries.end(); ++ia, ++ib) {
        if (ia->first != ib->first) {
            fail_data(context + ": tensor name mismatch ('" + ia->first + "' vs '" + ib->first + "')");
        }
        if (ia->second.shape != ib->second.shape) {
            fail_data(context + ": shape mismatch for tensor '" + ia->first + "'");
        }
        if (ia->second.stored != ib->second.stored) {
            fail_data(context + ": dtype mismatch for tensor '" + ia->first + "'");
        }
    }
}

task_vector compute_task_vector(const parameter_set & fine_tuned, const parameter_set & base) {
    require_aligned(fine_tuned, base, "task vector");
    task_vector delta = fine_tuned;
    for (auto & [name, t] : delta.entries) {
        const tensor & b = base.at(name);
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= b.data[i];
    }
    return delta;
}

parameter_set apply_delta(const parameter_set & base, const task_vector & delta, double scale) {
    require_aligned(base, delta, "apply delta");
    parameter_set out = base;
    for (auto & [name, t] : out.entries) {
        const tensor & d = delta.at(name);
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += scale * d.data[i];
    }
    return out;
}

parameter_set weighted_sum(const std::vector<const parameter_set *> & sets, const std::vector<double> & weights) {
    if (sets.empty()) fail_usage("weighted sum over zero parameter sets");
    if (sets.size() != weights.size()) fail_usage("weighted sum: weight count does not match set count");
    for (size_t t = 1; t < sets.size(); ++t) {
        require_aligned(*sets[0], *sets[t], "weighted sum");
    }
    parameter_set out = *sets[0];
    for (auto & [name, tn] : out.entries) {
        for (double & x : tn.data) x *= weights[0];
        for (size_t t = 1; t < sets.size(); ++t) {
            const tensor & src = sets[t]->at(name);
            for (size_t i = 0; i < tn.data.size(); ++i) tn.data[i] += weights[t] * src.data[i];
        }
    }
    return out;
}

void scale_in_place(parameter_set & params, double factor) {
    for (auto & [name, t] : params.entries) {
        (void) name;
        for (double & x : t.data) x *= factor;
    }
}

double frobenius_norm(const parameter_set & params) {
    double s = 0.0;
    for (const auto & [name, t] : params.entries) {
        (void) name;
        for (double x : t.data) s += x * x;
    }
    return std::sqrt(s);
}

double dot(const parameter_set & a, const parameter_set & b) {
    require_aligned(a, b, "dot product");
    double s = 0.0;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    for (; ia != a.entries.end(); ++ia, ++ib) {
        const auto & da = ia->second.data;
        const auto & db = ib->second.data;
        for (size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
    }
    return s;
}

parameter_set merge_disjoint(const parameter_set & a, const parameter_set & b) {
    parameter_set out = a;
    for (const auto & [name, t] : b.entries) {
        if (out.has(name)) fail_data("duplicate tensor name '" + name + "' when joining parameter sets");
        out.entries.emplace(name, t);
    }
    return out;
}

} // namespace epimerge
