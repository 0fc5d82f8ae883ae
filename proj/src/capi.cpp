#include "epimerge.h"

#include <cstring>
#include <string>

#include "core/checkpoint.hpp"
#include "core/curvature.hpp"
#include "core/diagnostics.hpp"
#include "core/errors.hpp"
#include "core/merge.hpp"
#include "core/subspace.hpp"
#include "core/synthetic.hpp"
#include "core/tensor.hpp"

struct epm_params {
    epimerge::parameter_set v;
};
struct epm_basis {
    epimerge::tagged_basis v;
};
struct epm_fisher {
    epimerge::curvature_estimate v;
};
struct epm_mlp_suite {
    epimerge::mlp_suite v;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
epm_status guarded(F && f) noexcept {
    try {
        f();
        return EPM_OK;
    } catch (const epimerge::error & e) {
        g_last_error = e.what();
        switch (e.code()) {
            case epimerge::errc::usage:   return EPM_ERR_USAGE;
            case epimerge::errc::data:    return EPM_ERR_DATA;
            case epimerge::errc::numeric: return EPM_ERR_NUMERIC;
        }
        return EPM_ERR_DATA;
    } catch (const std::exception & e) {
        g_last_error = e.what();
        return EPM_ERR_DATA;
    } catch (...) {
        g_last_error = "unknown error";
        return EPM_ERR_DATA;
    }
}

void require(bool ok, const char * msg) {
    if (!ok) epimerge::fail_usage(msg);
}

char * copy_string(const std::string & s) {
    char * out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

std::vector<const epimerge::parameter_set *> unwrap_models(const epm_params * const * models,
                                                           size_t count) {
    require(models != nullptr && count > 0, "expected at least one model");
    std::vector<const epimerge::parameter_set *> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        require(models[i] != nullptr, "null model handle");
        out.push_back(&models[i]->v);
    }
    return out;
}

std::vector<const epimerge::curvature_estimate *> unwrap_fishers(const epm_fisher * const * fishers,
                                                                 size_t count) {
    std::vector<const epimerge::curvature_estimate *> out;
    if (!fishers) return out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        require(fishers[i] != nullptr, "null Fisher handle");
        out.push_back(&fishers[i]->v);
    }
    return out;
}

const epimerge::mlp_dataset & task_data(const epm_mlp_suite * suite, int task) {
    require(suite != nullptr, "null suite handle");
    if (task < 0 || task >= static_cast<int>(suite->v.tasks.size())) {
        epimerge::fail_usage("task index out of range");
    }
    return suite->v.tasks[static_cast<size_t>(task)];
}

epimerge::parameter_set join_backbone_head(const epm_params * backbone, const epm_params * head) {
    require(backbone && head, "null backbone or head handle");
    return epimerge::merge_disjoint(backbone->v, head->v);
}

} // namespace

extern "C" {

const char * epm_last_error(void) { return g_last_error.c_str(); }

/* ---- parameter sets ----------------------------------------------------- */

epm_status epm_params_read(const char * path, epm_params ** out) {
    return guarded([&] {
        require(path && out, "epm_params_read: null argument");
        *out = new epm_params{epimerge::read_checkpoint(path)};
    });
}

epm_status epm_params_write(const epm_params * params, const char * path) {
    return guarded([&] {
        require(params && path, "epm_params_write: null argument");
        epimerge::write_checkpoint(params->v, path);
    });
}

epm_status epm_params_clone(const epm_params * params, epm_params ** out) {
    return guarded([&] {
        require(params && out, "epm_params_clone: null argument");
        *out = new epm_params{params->v};
    });
}

void epm_params_free(epm_params * params) { delete params; }

size_t epm_params_count(const epm_params * params) {
    return params ? params->v.size() : 0;
}

const char * epm_params_name(const epm_params * params, size_t index) {
    if (!params || index >= params->v.size()) return nullptr;
    auto it = params->v.entries.begin();
    std::advance(it, static_cast<ptrdiff_t>(index));
    return it->first.c_str();
}

epm_status epm_params_dims(const epm_params * params, const char * name,
                           uint64_t * dims, size_t capacity, size_t * ndim) {
    return guarded([&] {
        require(params && name && ndim, "epm_params_dims: null argument");
        const epimerge::tensor & t = params->v.at(name);
        *ndim = t.shape.size();
        require(dims == nullptr || capacity >= t.shape.size(),
                "epm_params_dims: capacity too small");
        if (dims) {
            for (size_t i = 0; i < t.shape.size(); ++i) dims[i] = t.shape[i];
        }
    });
}

epm_status epm_params_values(const epm_params * params, const char * name,
                             const double ** values, size_t * count) {
    return guarded([&] {
        require(params && name && values && count, "epm_params_values: null argument");
        const epimerge::tensor & t = params->v.at(name);
        *values = t.data.data();
        *count  = t.data.size();
    });
}

epm_status epm_task_vector(const epm_params * fine_tuned, const epm_params * base, epm_params ** out) {
    return guarded([&] {
        require(fine_tuned && base && out, "epm_task_vector: null argument");
        *out = new epm_params{epimerge::compute_task_vector(fine_tuned->v, base->v)};
    });
}

/* ---- subspace basis ----------------------------------------------------- */

epm_status epm_basis_build(const epm_params * base, const epm_params * const * models,
                           size_t task_count, int rank, epm_basis ** out) {
    return guarded([&] {
        require(base && out, "epm_basis_build: null argument");
        const auto mv = unwrap_models(models, task_count);
        std::vector<epimerge::task_vector> deltas;
        deltas.reserve(task_count);
        for (const epimerge::parameter_set * m : mv) {
            deltas.push_back(epimerge::compute_task_vector(*m, base->v));
        }
        std::vector<const epimerge::task_vector *> dptrs;
        for (const auto & d : deltas) dptrs.push_back(&d);
        *out = new epm_basis{epimerge::build_tagged_basis(dptrs, rank)};
    });
}

epm_status epm_basis_save(const epm_basis * basis, const char * path) {
    return guarded([&] {
        require(basis && path, "epm_basis_save: null argument");
        epimerge::save_basis(basis->v, path);
    });
}

epm_status epm_basis_load(const char * path, epm_basis ** out) {
    return guarded([&] {
        require(path && out, "epm_basis_load: null argument");
        *out = new epm_basis{epimerge::load_basis(path)};
    });
}

void epm_basis_free(epm_basis * basis) { delete basis; }

int epm_basis_rank(const epm_basis * basis) {
    return basis ? basis->v.rank_per_task : 0;
}

int epm_basis_task_count(const epm_basis * basis) {
    return basis ? basis->v.task_count : 0;
}

size_t epm_basis_layer_count(const epm_basis * basis) {
    return basis ? basis->v.layers.size() : 0;
}

const char * epm_basis_layer_name(const epm_basis * basis, size_t index) {
    if (!basis || index >= basis->v.layers.size()) return nullptr;
    return basis->v.layers[index].name.c_str();
}

/* ---- curvature ---------------------------------------------------------- */

epm_status epm_fisher_from_stream(const char * grad_stream_path, double fraction,
                                  uint64_t seed, epm_fisher ** out) {
    return guarded([&] {
        require(grad_stream_path && out, "epm_fisher_from_stream: null argument");
        *out = new epm_fisher{epimerge::fisher_from_stream_file(grad_stream_path, fraction, seed)};
    });
}

epm_status epm_fisher_save(const epm_fisher * fisher, const char * path) {
    return guarded([&] {
        require(fisher && path, "epm_fisher_save: null argument");
        epimerge::write_fisher(fisher->v, path);
    });
}

epm_status epm_fisher_load(const char * path, epm_fisher ** out) {
    return guarded([&] {
        require(path && out, "epm_fisher_load: null argument");
        *out = new epm_fisher{epimerge::read_fisher(path)};
    });
}

void epm_fisher_free(epm_fisher * fisher) { delete fisher; }

uint64_t epm_fisher_sample_count(const epm_fisher * fisher) {
    return fisher ? fisher->v.sample_count : 0;
}

/* ---- merging ------------------------------------------------------------ */

epm_status epm_merge(const epm_merge_options * options,
                     const epm_params * base,
                     const epm_params * const * models, size_t task_count,
                     const epm_fisher * const * fishers,
                     const epm_basis * basis,
                     epm_params ** out_merged, char ** out_sidecar) {
    return guarded([&] {
        require(options && out_merged, "epm_merge: null argument");
        require(options->method != nullptr, "epm_merge: method is required");

        epimerge::merge_config cfg;
        const auto method = epimerge::parse_method(options->method);
        if (!method) {
            epimerge::fail_usage(std::string("unknown merge method '") + options->method + "'");
        }
        cfg.method = *method;
        if (options->weights) {
            cfg.weights.assign(options->weights, options->weights + task_count);
        }
        cfg.rank   = options->rank > 0 ? options->rank : 2;
        cfg.alpha  = options->alpha;
        cfg.jitter = options->jitter < 0.0 ? 1e-8 : options->jitter;
        cfg.ties_keep_fraction =
            options->ties_keep_fraction > 0.0 ? options->ties_keep_fraction : 0.20;

        const auto mv = unwrap_models(models, task_count);
        const auto fv = unwrap_fishers(fishers, task_count);

        epimerge::merge_outcome outcome =
            epimerge::run_merge(cfg, base ? &base->v : nullptr, mv, fv, basis ? &basis->v : nullptr);

        *out_merged = new epm_params{std::move(outcome.merged)};
        if (out_sidecar) {
            *out_sidecar = copy_string(epimerge::merge_sidecar_text(cfg, outcome));
        }
    });
}

/* ---- diagnostics -------------------------------------------------------- */

epm_status epm_diagnose(const epm_params * base,
                        const epm_params * const * models, size_t task_count,
                        const epm_fisher * const * fishers,
                        const epm_basis * basis,
                        const double * weights, double jitter,
                        int sum_aggregator, double alpha,
                        char ** out_json) {
    return guarded([&] {
        require(base && basis && out_json, "epm_diagnose: null argument");
        require(fishers != nullptr, "epm_diagnose: Fisher estimates are required");
        const auto mv = unwrap_models(models, task_count);
        const auto fv = unwrap_fishers(fishers, task_count);
        std::vector<double> w;
        if (weights) w.assign(weights, weights + task_count);
        const epimerge::diagnostics_report rep =
            epimerge::diagnose(base->v, mv, fv, basis->v, w,
                               jitter < 0.0 ? 1e-8 : jitter, sum_aggregator != 0, alpha);
        *out_json = copy_string(epimerge::report_to_json(rep));
    });
}

void epm_string_free(char * str) { delete[] str; }

/* ---- synthetic tasks ---------------------------------------------------- */

epm_status epm_mlp_generate(uint64_t seed, int tasks, int input_dim, int hidden_dim,
                            int classes, int samples_per_task, epm_mlp_suite ** out) {
    return guarded([&] {
        require(out != nullptr, "epm_mlp_generate: null argument");
        epimerge::mlp_arch arch;
        arch.input   = input_dim;
        arch.hidden  = hidden_dim;
        arch.classes = classes;
        *out = new epm_mlp_suite{epimerge::gen_mlp_tasks(seed, tasks, arch, samples_per_task)};
    });
}

void epm_mlp_free(epm_mlp_suite * suite) { delete suite; }

int epm_mlp_task_count(const epm_mlp_suite * suite) {
    return suite ? static_cast<int>(suite->v.tasks.size()) : 0;
}

epm_status epm_mlp_base_backbone(const epm_mlp_suite * suite, epm_params ** out) {
    return guarded([&] {
        require(suite && out, "epm_mlp_base_backbone: null argument");
        *out = new epm_params{suite->v.backbone0};
    });
}

epm_status epm_mlp_base_head(const epm_mlp_suite * suite, epm_params ** out) {
    return guarded([&] {
        require(suite && out, "epm_mlp_base_head: null argument");
        *out = new epm_params{suite->v.head0};
    });
}

epm_status epm_mlp_finetune(const epm_mlp_suite * suite, int task,
                            int steps, double lr, int batch_size, uint64_t seed,
                            epm_params ** out_backbone, epm_params ** out_head,
                            double * out_initial_grad_norm, double * out_final_grad_norm) {
    return guarded([&] {
        require(out_backbone && out_head, "epm_mlp_finetune: null argument");
        const epimerge::mlp_dataset & data = task_data(suite, task);

        epimerge::finetune_options opt;
        opt.steps      = steps;
        opt.lr         = lr;
        opt.batch_size = batch_size;
        opt.seed       = seed;

        const epimerge::parameter_set init =
            epimerge::merge_disjoint(suite->v.backbone0, suite->v.head0);
        epimerge::finetune_result res =
            epimerge::finetune_mlp(init, suite->v.arch, data, opt);

        epimerge::parameter_set backbone, head;
        for (const auto & [name, t] : res.params.entries) {
            (name.rfind("fc1.", 0) == 0 ? backbone : head).entries.emplace(name, t);
        }
        *out_backbone = new epm_params{std::move(backbone)};
        *out_head     = new epm_params{std::move(head)};
        if (out_initial_grad_norm) *out_initial_grad_norm = res.initial_grad_norm;
        if (out_final_grad_norm) *out_final_grad_norm = res.final_grad_norm;
    });
}

epm_status epm_mlp_write_dataset(const epm_mlp_suite * suite, int task, const char * path) {
    return guarded([&] {
        require(path != nullptr, "epm_mlp_write_dataset: null path");
        epimerge::write_mlp_dataset(task_data(suite, task), suite->v.arch.classes, path);
    });
}

epm_status epm_mlp_write_grad_stream(const epm_mlp_suite * suite, int task,
                                     const epm_params * backbone, const epm_params * head,
                                     const char * path) {
    return guarded([&] {
        require(path != nullptr, "epm_mlp_write_grad_stream: null path");
        const epimerge::mlp_dataset & data = task_data(suite, task);
        const epimerge::parameter_set full = join_backbone_head(backbone, head);
        const epimerge::mlp_arch      arch = epimerge::infer_arch(full);
        epimerge::write_grad_stream(epimerge::per_sample_backbone_grads(full, arch, data), path);
    });
}

epm_status epm_accuracy_eval(const char * dataset_path,
                             const epm_params * backbone, const epm_params * head,
                             double * out_accuracy) {
    return guarded([&] {
        require(dataset_path && out_accuracy, "epm_accuracy_eval: null argument");
        int                           classes = 0;
        const epimerge::mlp_dataset   data    = epimerge::read_mlp_dataset(dataset_path, &classes);
        const epimerge::parameter_set full    = join_backbone_head(backbone, head);
        const epimerge::mlp_arch      arch    = epimerge::infer_arch(full);
        if (arch.classes != classes) {
            epimerge::fail_data("dataset class count does not match the model head");
        }
        *out_accuracy = epimerge::evaluate_accuracy(full, arch, data.test_x, data.test_y);
    });
}

epm_status epm_loss_path(const char * dataset_path,
                         const epm_params * backbone_a, const epm_params * backbone_b,
                         const epm_params * head, int points, double * out_losses) {
    return guarded([&] {
        require(dataset_path && backbone_a && backbone_b && head && out_losses,
                "epm_loss_path: null argument");
        int                         classes = 0;
        const epimerge::mlp_dataset data    = epimerge::read_mlp_dataset(dataset_path, &classes);
        const std::vector<double>   losses  =
            epimerge::loss_path_scan(backbone_a->v, backbone_b->v, head->v, data, points);
        for (size_t i = 0; i < losses.size(); ++i) out_losses[i] = losses[i];
    });
}

} // extern "C"
