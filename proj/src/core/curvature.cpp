#include "core/curvature.hpp"

#include <algorithm>
#include <cmath>

#include "core/checkpoint.hpp"
#include "core/errors.hpp"
#include "core/rng.hpp"

namespace epimerge {

curvature_estimate accumulate_fisher(const std::vector<parameter_set> & grads) {
    if (grads.empty()) fail_usage("Fisher accumulation needs at least one gradient sample");
    for (size_t i = 1; i < grads.size(); ++i) {
        require_aligned(grads[0], grads[i], "Fisher accumulation");
    }
    curvature_estimate est;
    est.values = grads[0];
    for (auto & [name, t] : est.values.entries) {
        (void) name;
        std::fill(t.data.begin(), t.data.end(), 0.0);
    }
    for (const parameter_set & g : grads) {
        for (auto & [name, acc] : est.values.entries) {
            const tensor & gt = g.at(name);
            for (size_t i = 0; i < acc.data.size(); ++i) {
                acc.data[i] += gt.data[i] * gt.data[i];
            }
        }
    }
    const double inv_n = 1.0 / static_cast<double>(grads.size());
    for (auto & [name, t] : est.values.entries) {
        (void) name;
        for (double & x : t.data) x *= inv_n;
    }
    est.sample_count = grads.size();
    est.source       = "stream";
    return est;
}

std::vector<size_t> subsample_indices(size_t n, double fraction, uint64_t seed) {
    if (n == 0) fail_usage("subsample of an empty stream");
    if (!(fraction > 0.0) || fraction > 1.0) {
        fail_usage("subsample fraction must lie in (0, 1]");
    }
    rng r(seed);
    std::vector<size_t> perm = r.permutation(n);
    size_t keep = static_cast<size_t>(std::floor(fraction * static_cast<double>(n)));
    if (keep < 1) keep = 1;
    if (keep > n) keep = n;
    perm.resize(keep);
    return perm;
}

namespace {

// splits "fc1.weight#12" into name and sample index
bool split_stream_name(const std::string & full, std::string & layer, size_t & index) {
    const size_t hash = full.rfind('#');
    if (hash == std::string::npos || hash + 1 >= full.size()) return false;
    size_t idx = 0;
    for (size_t i = hash + 1; i < full.size(); ++i) {
        const char c = full[i];
        if (c < '0' || c > '9') return false;
        idx = idx * 10 + static_cast<size_t>(c - '0');
    }
    layer = full.substr(0, hash);
    index = idx;
    return true;
}

} // namespace

void write_grad_stream(const std::vector<parameter_set> & grads, const std::string & path) {
    if (grads.empty()) fail_usage("refusing to write an empty gradient stream");
    parameter_set container;
    for (size_t i = 0; i < grads.size(); ++i) {
        for (const auto & [name, t] : grads[i].entries) {
            if (name.find('#') != std::string::npos) {
                fail_data("layer name '" + name + "' contains '#', reserved for container suffixes");
            }
            container.entries.emplace(name + "#" + std::to_string(i), t);
        }
    }
    write_checkpoint(container, path);
}

std::vector<parameter_set> read_grad_stream(const std::string & path) {
    const parameter_set container = read_checkpoint(path);
    size_t max_index = 0;
    for (const auto & [full, t] : container.entries) {
        (void) t;
        std::string layer;
        size_t      index;
        if (!split_stream_name(full, layer, index)) {
            fail_data(path + ": tensor '" + full + "' lacks the '#<index>' stream suffix");
        }
        max_index = std::max(max_index, index);
    }
    std::vector<parameter_set> out(max_index + 1);
    for (const auto & [full, t] : container.entries) {
        std::string layer;
        size_t      index;
        split_stream_name(full, layer, index);
        if (!out[index].entries.emplace(layer, t).second) {
            fail_data(path + ": duplicate layer '" + layer + "' in sample " + std::to_string(index));
        }
    }
    for (size_t i = 0; i < out.size(); ++i) {
        if (out[i].empty()) {
            fail_data(path + ": gradient stream is missing sample " + std::to_string(i));
        }
        require_aligned(out[0], out[i], path + ": gradient stream sample " + std::to_string(i));
    }
    return out;
}

curvature_estimate fisher_from_stream_file(const std::string & path, double fraction, uint64_t seed) {
    const std::vector<parameter_set> stream = read_grad_stream(path);
    std::vector<size_t> idx = subsample_indices(stream.size(), fraction, seed);
    std::vector<parameter_set> picked;
    picked.reserve(idx.size());
    for (size_t i : idx) picked.push_back(stream[i]);
    curvature_estimate est = accumulate_fisher(picked);
    est.fraction           = fraction;
    return est;
}

void write_fisher(const curvature_estimate & est, const std::string & path) {
    write_checkpoint(est.values, path);
    char frac[64];
    std::snprintf(frac, sizeof(frac), "%.17g", est.fraction);
    metadata meta = {
        {"format", "epimerge-fisher"},
        {"sample_count", std::to_string(est.sample_count)},
        {"fraction", frac},
        {"source", est.source},
    };
    write_metadata(meta, path + ".meta");
}

curvature_estimate read_fisher(const std::string & path) {
    curvature_estimate est;
    est.values = read_checkpoint(path);
    for (const auto & [name, t] : est.values.entries) {
        for (double x : t.data) {
            if (!(x >= 0.0)) {
                fail_data(path + ": negative or non-finite Fisher entry in '" + name + "'");
            }
        }
    }
    est.source = "file";
    const metadata meta = read_metadata(path + ".meta");
    if (const std::string * v = find_meta(meta, "sample_count")) {
        est.sample_count = static_cast<uint64_t>(std::stoull(*v));
    }
    if (const std::string * v = find_meta(meta, "fraction")) {
        est.fraction = std::stod(*v);
    }
    return est;
}

Eigen::MatrixXd ensure_psd(const Eigen::MatrixXd & h, double eps) {
    if (h.rows() != h.cols()) fail_usage("ensure_psd: matrix is not square");
    if (eps < 0.0) fail_usage("ensure_psd: negative eps");
    Eigen::MatrixXd out = h;
    out.diagonal().array() += eps;
    return out;
}

Eigen::MatrixXd trace_normalize(const Eigen::MatrixXd & h) {
    if (h.rows() != h.cols()) fail_usage("trace_normalize: matrix is not square");
    const double tr = h.trace();
    if (!(tr > 0.0)) fail_numeric("trace_normalize: non-positive trace");
    return h * (static_cast<double>(h.rows()) / tr);
}

} // namespace epimerge
