// command-line front end over the shared library: artifact generation,
// basis/fisher builders, merging, diagnostics, sweeps, and loss-path scans.
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "epimerge.h"
#include "json.hpp"

namespace {

// ---- logging ----------------------------------------------------------------

int log_level() {
    static const int level = [] {
        const char * env = std::getenv("EPIMERGE_LOG");
        if (!env) return 0;
        const std::string v(env);
        if (v == "debug") return 2;
        if (v == "info") return 1;
        return 0;
    }();
    return level;
}

void log_info(const std::string & msg) {
    if (log_level() >= 1) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

void log_debug(const std::string & msg) {
    if (log_level() >= 2) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

// ---- handle lifetimes -------------------------------------------------------

struct params_deleter { void operator()(epm_params * p) const { epm_params_free(p); } };
struct basis_deleter  { void operator()(epm_basis * b) const { epm_basis_free(b); } };
struct fisher_deleter { void operator()(epm_fisher * f) const { epm_fisher_free(f); } };
struct suite_deleter  { void operator()(epm_mlp_suite * s) const { epm_mlp_free(s); } };
struct string_deleter { void operator()(char * s) const { epm_string_free(s); } };

using params_ptr = std::unique_ptr<epm_params, params_deleter>;
using basis_ptr  = std::unique_ptr<epm_basis, basis_deleter>;
using fisher_ptr = std::unique_ptr<epm_fisher, fisher_deleter>;
using suite_ptr  = std::unique_ptr<epm_mlp_suite, suite_deleter>;
using string_ptr = std::unique_ptr<char, string_deleter>;

int fail_status(epm_status st) {
    std::fprintf(stderr, "error: %s\n", epm_last_error());
    return static_cast<int>(st);
}

#define TRY(call)                                                  \
    do {                                                           \
        const epm_status try_st_ = (call);                         \
        if (try_st_ != EPM_OK) return fail_status(try_st_);        \
    } while (0)

// every referenced input must exist before any work starts
int check_inputs(const std::vector<std::string> & paths) {
    for (const std::string & p : paths) {
        if (!std::filesystem::exists(p)) {
            std::fprintf(stderr, "error: %s: no such file\n", p.c_str());
            return static_cast<int>(EPM_ERR_DATA);
        }
    }
    return 0;
}

std::string g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

int load_params_list(const std::vector<std::string> & paths, std::vector<params_ptr> & out) {
    for (const std::string & p : paths) {
        epm_params * h = nullptr;
        TRY(epm_params_read(p.c_str(), &h));
        out.emplace_back(h);
    }
    return 0;
}

int load_fisher_list(const std::vector<std::string> & paths, std::vector<fisher_ptr> & out) {
    for (const std::string & p : paths) {
        epm_fisher * h = nullptr;
        TRY(epm_fisher_load(p.c_str(), &h));
        out.emplace_back(h);
    }
    return 0;
}

std::vector<const epm_params *> raw(const std::vector<params_ptr> & v) {
    std::vector<const epm_params *> out;
    for (const auto & p : v) out.push_back(p.get());
    return out;
}

std::vector<const epm_fisher *> raw(const std::vector<fisher_ptr> & v) {
    std::vector<const epm_fisher *> out;
    for (const auto & p : v) out.push_back(p.get());
    return out;
}

int write_text(const std::string & path, const std::string & text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << text;
    f.close();
    if (!f) {
        std::fprintf(stderr, "error: cannot write %s\n", path.c_str());
        return static_cast<int>(EPM_ERR_DATA);
    }
    return 0;
}

// largest per-task rank the basis guard admits for these parameters
int max_feasible_rank(const epm_params * base, size_t task_count) {
    uint64_t minmin = UINT64_MAX;
    const size_t n = epm_params_count(base);
    for (size_t i = 0; i < n; ++i) {
        const char * name = epm_params_name(base, i);
        uint64_t     dims[8];
        size_t       ndim = 0;
        if (epm_params_dims(base, name, dims, 8, &ndim) != EPM_OK) continue;
        if (ndim == 2 && dims[0] >= 2 && dims[1] >= 2) {
            minmin = std::min(minmin, std::min(dims[0], dims[1]));
        }
    }
    if (minmin == UINT64_MAX) return 0;
    return static_cast<int>(minmin / task_count);
}

// ---- synth ------------------------------------------------------------------

struct synth_args {
    uint64_t    seed       = 1;
    int         tasks      = 4;
    int         samples    = 160;
    int         input      = 16;
    int         hidden     = 16;
    int         classes    = 4;
    int         steps      = 300;
    double      lr         = 0.05;
    int         batch_size = 32;
    std::string out_dir;
};

int cmd_synth(const synth_args & a) {
    std::error_code ec;
    std::filesystem::create_directories(a.out_dir, ec);
    if (ec) {
        std::fprintf(stderr, "error: cannot create %s\n", a.out_dir.c_str());
        return static_cast<int>(EPM_ERR_DATA);
    }
    const auto path = [&](const std::string & name) {
        return (std::filesystem::path(a.out_dir) / name).string();
    };

    epm_mlp_suite * sh = nullptr;
    TRY(epm_mlp_generate(a.seed, a.tasks, a.input, a.hidden, a.classes, a.samples, &sh));
    suite_ptr suite(sh);

    epm_params * bh = nullptr;
    TRY(epm_mlp_base_backbone(suite.get(), &bh));
    params_ptr base(bh);
    TRY(epm_params_write(base.get(), path("theta0.epmc").c_str()));
    int rc = write_text(path("theta0.epmc.meta"),
                        "format=epimerge-params\nrole=base-backbone\nseed=" +
                            std::to_string(a.seed) + "\n");
    if (rc) return rc;
    log_info("wrote " + path("theta0.epmc"));

    for (int t = 0; t < a.tasks; ++t) {
        const std::string tag      = std::to_string(t);
        const uint64_t    ft_seed  = a.seed + static_cast<uint64_t>(t) + 1;
        epm_params *      backbone = nullptr;
        epm_params *      head     = nullptr;
        double            g0 = 0.0, g1 = 0.0;
        TRY(epm_mlp_finetune(suite.get(), t, a.steps, a.lr, a.batch_size, ft_seed,
                             &backbone, &head, &g0, &g1));
        params_ptr pb(backbone), ph(head);

        TRY(epm_params_write(pb.get(), path("task_" + tag + ".epmc").c_str()));
        rc = write_text(path("task_" + tag + ".epmc.meta"),
                        "format=epimerge-params\nrole=finetuned-backbone\ntask=" + tag +
                            "\nsteps=" + std::to_string(a.steps) + "\nlr=" + g17(a.lr) +
                            "\nbatch_size=" + std::to_string(a.batch_size) + "\nseed=" +
                            std::to_string(ft_seed) + "\ninitial_grad_norm=" + g17(g0) +
                            "\nfinal_grad_norm=" + g17(g1) + "\n");
        if (rc) return rc;
        TRY(epm_params_write(ph.get(), path("head_" + tag + ".epmc").c_str()));
        rc = write_text(path("head_" + tag + ".epmc.meta"),
                        "format=epimerge-params\nrole=finetuned-head\ntask=" + tag + "\n");
        if (rc) return rc;

        TRY(epm_mlp_write_dataset(suite.get(), t, path("dataset_" + tag + ".epmc").c_str()));
        TRY(epm_mlp_write_grad_stream(suite.get(), t, pb.get(), ph.get(),
                                      path("grads_" + tag + ".epmc").c_str()));
        rc = write_text(path("grads_" + tag + ".epmc.meta"),
                        "format=epimerge-grad-stream\ntask=" + tag + "\nsamples=" +
                            std::to_string((a.samples * 4) / 5) + "\n");
        if (rc) return rc;

        epm_fisher * fh = nullptr;
        TRY(epm_fisher_from_stream(path("grads_" + tag + ".epmc").c_str(), 1.0, a.seed, &fh));
        fisher_ptr fisher(fh);
        TRY(epm_fisher_save(fisher.get(), path("fisher_" + tag + ".epmc").c_str()));

        log_info("task " + tag + ": grad norm " + g17(g0) + " -> " + g17(g1));
    }
    std::printf("wrote %d tasks under %s\n", a.tasks, a.out_dir.c_str());
    return 0;
}

// ---- build-basis ------------------------------------------------------------

struct basis_args {
    std::string              base;
    std::vector<std::string> models;
    int                      rank = 2;
    std::string              out;
};

int cmd_build_basis(const basis_args & a) {
    std::vector<std::string> inputs = a.models;
    inputs.push_back(a.base);
    if (int rc = check_inputs(inputs)) return rc;

    epm_params * bh = nullptr;
    TRY(epm_params_read(a.base.c_str(), &bh));
    params_ptr base(bh);
    std::vector<params_ptr> models;
    if (int rc = load_params_list(a.models, models)) return rc;

    epm_basis * out = nullptr;
    TRY(epm_basis_build(base.get(), raw(models).data(), models.size(), a.rank, &out));
    basis_ptr basis(out);
    TRY(epm_basis_save(basis.get(), a.out.c_str()));

    const size_t layers = epm_basis_layer_count(basis.get());
    const int    atoms  = epm_basis_rank(basis.get()) * epm_basis_task_count(basis.get());
    std::printf("layers=%zu rank=%d tasks=%d atoms_per_layer=%d\n", layers,
                epm_basis_rank(basis.get()), epm_basis_task_count(basis.get()), atoms);
    for (size_t l = 0; l < layers; ++l) {
        std::printf("%s: atoms=%d rank_guard=ok\n", epm_basis_layer_name(basis.get(), l), atoms);
    }
    return 0;
}

// ---- fisher -----------------------------------------------------------------

struct fisher_args {
    std::string grads;
    double      fraction = 1.0;
    uint64_t    seed     = 1;
    std::string out;
};

int cmd_fisher(const fisher_args & a) {
    if (int rc = check_inputs({a.grads})) return rc;
    epm_fisher * fh = nullptr;
    TRY(epm_fisher_from_stream(a.grads.c_str(), a.fraction, a.seed, &fh));
    fisher_ptr fisher(fh);
    TRY(epm_fisher_save(fisher.get(), a.out.c_str()));
    std::printf("samples=%llu\n",
                static_cast<unsigned long long>(epm_fisher_sample_count(fisher.get())));
    return 0;
}

// ---- merge ------------------------------------------------------------------

struct merge_args {
    std::string              method = "epimer-mean";
    std::string              base;
    std::vector<std::string> models;
    std::vector<std::string> fishers;
    std::string              basis;
    std::vector<double>      weights;
    int                      rank          = 2;
    double                   alpha         = 0.0;
    double                   jitter        = 1e-8;
    double                   keep_fraction = 0.20;
    std::string              out;
};

int cmd_merge(const merge_args & a) {
    std::vector<std::string> inputs = a.models;
    if (!a.base.empty()) inputs.push_back(a.base);
    for (const auto & f : a.fishers) inputs.push_back(f);
    if (!a.basis.empty()) inputs.push_back(a.basis);
    if (int rc = check_inputs(inputs)) return rc;

    params_ptr base;
    if (!a.base.empty()) {
        epm_params * bh = nullptr;
        TRY(epm_params_read(a.base.c_str(), &bh));
        base.reset(bh);
    }
    std::vector<params_ptr> models;
    if (int rc = load_params_list(a.models, models)) return rc;
    std::vector<fisher_ptr> fishers;
    if (int rc = load_fisher_list(a.fishers, fishers)) return rc;
    basis_ptr basis;
    if (!a.basis.empty()) {
        epm_basis * h = nullptr;
        TRY(epm_basis_load(a.basis.c_str(), &h));
        basis.reset(h);
    }

    epm_merge_options opt{};
    opt.method             = a.method.c_str();
    opt.weights            = a.weights.empty() ? nullptr : a.weights.data();
    opt.rank               = a.rank;
    opt.alpha              = a.alpha;
    opt.jitter             = a.jitter;
    opt.ties_keep_fraction = a.keep_fraction;

    if (!a.weights.empty() && a.weights.size() != models.size()) {
        std::fprintf(stderr, "error: got %zu weights for %zu models\n", a.weights.size(),
                     models.size());
        return static_cast<int>(EPM_ERR_USAGE);
    }

    epm_params * merged  = nullptr;
    char *       sidecar = nullptr;
    const auto   fr      = raw(fishers);
    TRY(epm_merge(&opt, base.get(), raw(models).data(), models.size(),
                  fishers.empty() ? nullptr : fr.data(), basis.get(), &merged, &sidecar));
    params_ptr mp(merged);
    string_ptr sp(sidecar);

    TRY(epm_params_write(mp.get(), a.out.c_str()));
    if (int rc = write_text(a.out + ".meta", sidecar)) return rc;
    log_info("merged " + std::to_string(models.size()) + " models with " + a.method);
    return 0;
}

// ---- diagnose ---------------------------------------------------------------

struct diagnose_args {
    std::string              base;
    std::vector<std::string> models;
    std::vector<std::string> fishers;
    std::string              basis;
    std::vector<double>      weights;
    int                      rank   = 2;
    double                   alpha  = 0.0;
    double                   jitter = 1e-8;
    bool                     sum    = false;
    std::string              out;
};

int cmd_diagnose(const diagnose_args & a) {
    std::vector<std::string> inputs = a.models;
    inputs.push_back(a.base);
    for (const auto & f : a.fishers) inputs.push_back(f);
    if (!a.basis.empty()) inputs.push_back(a.basis);
    if (int rc = check_inputs(inputs)) return rc;

    epm_params * bh = nullptr;
    TRY(epm_params_read(a.base.c_str(), &bh));
    params_ptr base(bh);
    std::vector<params_ptr> models;
    if (int rc = load_params_list(a.models, models)) return rc;
    std::vector<fisher_ptr> fishers;
    if (int rc = load_fisher_list(a.fishers, fishers)) return rc;

    basis_ptr basis;
    if (!a.basis.empty()) {
        epm_basis * h = nullptr;
        TRY(epm_basis_load(a.basis.c_str(), &h));
        basis.reset(h);
    } else {
        epm_basis * h = nullptr;
        TRY(epm_basis_build(base.get(), raw(models).data(), models.size(), a.rank, &h));
        basis.reset(h);
    }

    char *     json = nullptr;
    const auto fr   = raw(fishers);
    TRY(epm_diagnose(base.get(), raw(models).data(), models.size(), fr.data(), basis.get(),
                     a.weights.empty() ? nullptr : a.weights.data(), a.jitter,
                     a.sum ? 1 : 0, a.alpha, &json));
    string_ptr jp(json);

    std::fputs(json, stdout);
    if (!a.out.empty()) {
        if (int rc = write_text(a.out, json)) return rc;
    }
    return 0;
}

// ---- scan -------------------------------------------------------------------

struct scan_args {
    std::vector<std::string> models;  // exactly two backbones
    std::string              head;
    std::string              dataset;
    int                      points = 25;
    std::string              out;
};

int cmd_scan(const scan_args & a) {
    if (a.models.size() != 2) {
        std::fprintf(stderr, "error: scan needs exactly two --models backbones\n");
        return static_cast<int>(EPM_ERR_USAGE);
    }
    if (int rc = check_inputs({a.models[0], a.models[1], a.head, a.dataset})) return rc;

    std::vector<params_ptr> ends;
    if (int rc = load_params_list(a.models, ends)) return rc;
    epm_params * hh = nullptr;
    TRY(epm_params_read(a.head.c_str(), &hh));
    params_ptr head(hh);

    std::vector<double> losses(static_cast<size_t>(std::max(a.points, 0)));
    TRY(epm_loss_path(a.dataset.c_str(), ends[0].get(), ends[1].get(), head.get(), a.points,
                      losses.data()));

    std::string csv = "t,train_loss\n";
    for (int j = 0; j < a.points; ++j) {
        const double t = static_cast<double>(j) / static_cast<double>(a.points - 1);
        csv += g17(t) + "," + g17(losses[static_cast<size_t>(j)]) + "\n";
    }
    std::fputs(csv.c_str(), stdout);
    if (!a.out.empty()) {
        if (int rc = write_text(a.out, csv)) return rc;
    }
    return 0;
}

// ---- sweep ------------------------------------------------------------------

struct sweep_args {
    std::string              base;
    std::vector<std::string> models;
    std::vector<std::string> heads;
    std::vector<std::string> datasets;
    std::vector<std::string> grads;
    std::vector<std::string> methods = {"am", "ta", "ties", "fisher-avg",
                                        "tsvm", "epimer-mean", "epimer-sum"};
    std::vector<int>         ranks     = {2, 4, 8, 16, 32};
    std::vector<double>      alphas    = {0.20, 0.30, 0.40, 0.50, 0.70, 1.00};
    std::vector<double>      fractions = {0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0};
    double                   jitter    = 1e-8;
    double                   keep_fraction = 0.20;
    uint64_t                 seed          = 1;
    int                      jobs          = 1;
    std::string              out;
};

bool sweep_uses_basis(const std::string & m) {
    return m == "tsvm" || m == "epimer-mean" || m == "epimer-sum";
}

bool sweep_uses_fishers(const std::string & m) {
    return m == "fisher-avg" || m == "epimer-mean" || m == "epimer-sum";
}

struct sweep_row {
    std::string method;
    int         k        = 0;
    double      alpha    = 0.0;
    double      fraction = 1.0;
};

struct row_result {
    epm_status  st = EPM_OK;
    std::string err;
    std::string line;
};

int cmd_sweep(const sweep_args & a) {
    const size_t T = a.models.size();
    if (T == 0 || a.heads.size() != T || a.datasets.size() != T) {
        std::fprintf(stderr, "error: sweep needs matching --models, --heads and --datasets\n");
        return static_cast<int>(EPM_ERR_USAGE);
    }
    bool need_fishers = false;
    for (const std::string & m : a.methods) need_fishers |= sweep_uses_fishers(m);
    if (a.grads.empty() && need_fishers) {
        std::fprintf(stderr, "error: the selected methods need --grads streams\n");
        return static_cast<int>(EPM_ERR_USAGE);
    }
    if (!a.grads.empty() && a.grads.size() != T) {
        std::fprintf(stderr, "error: got %zu --grads for %zu tasks\n", a.grads.size(), T);
        return static_cast<int>(EPM_ERR_USAGE);
    }
    for (const std::string & m : a.methods) {
        if (m != "am" && m != "ta" && m != "ties" && m != "fisher-avg" && m != "tsvm" &&
            m != "epimer-mean" && m != "epimer-sum") {
            std::fprintf(stderr, "error: unknown method '%s'\n", m.c_str());
            return static_cast<int>(EPM_ERR_USAGE);
        }
    }

    std::vector<std::string> inputs = a.models;
    inputs.push_back(a.base);
    for (const auto & p : a.heads) inputs.push_back(p);
    for (const auto & p : a.datasets) inputs.push_back(p);
    for (const auto & p : a.grads) inputs.push_back(p);
    if (int rc = check_inputs(inputs)) return rc;

    epm_params * bh = nullptr;
    TRY(epm_params_read(a.base.c_str(), &bh));
    params_ptr base(bh);
    std::vector<params_ptr> models, heads;
    if (int rc = load_params_list(a.models, models)) return rc;
    if (int rc = load_params_list(a.heads, heads)) return rc;
    const auto model_raw = raw(models);

    // rank grid clipped by the guard
    const int        kmax = max_feasible_rank(base.get(), T);
    std::vector<int> ranks;
    for (int k : a.ranks) {
        if (k >= 1 && k <= kmax) {
            ranks.push_back(k);
        } else {
            log_info("dropping rank " + std::to_string(k) + " (guard: max " +
                     std::to_string(kmax) + ")");
        }
    }
    bool need_basis = false;
    for (const std::string & m : a.methods) need_basis |= sweep_uses_basis(m);
    if (need_basis && ranks.empty()) {
        std::fprintf(stderr, "error: no feasible rank in the grid (max %d)\n", kmax);
        return static_cast<int>(EPM_ERR_USAGE);
    }

    // shared read-only caches, built up front so workers stay lock-free
    std::map<int, basis_ptr> bases;
    for (const std::string & m : a.methods) {
        if (!sweep_uses_basis(m)) continue;
        for (int k : ranks) {
            if (bases.count(k)) continue;
            epm_basis * h = nullptr;
            TRY(epm_basis_build(base.get(), model_raw.data(), T, k, &h));
            bases[k].reset(h);
            log_debug("built basis k=" + std::to_string(k));
        }
        break;
    }
    std::map<double, std::vector<fisher_ptr>> fishers;
    if (!a.grads.empty()) {
        std::vector<double> wanted;
        for (const std::string & m : a.methods) {
            if (sweep_uses_fishers(m)) {
                wanted = a.fractions;
                break;
            }
        }
        if (std::find(wanted.begin(), wanted.end(), 1.0) == wanted.end()) wanted.push_back(1.0);
        for (double f : wanted) {
            std::vector<fisher_ptr> per_task;
            for (const std::string & g : a.grads) {
                epm_fisher * h = nullptr;
                TRY(epm_fisher_from_stream(g.c_str(), f, a.seed, &h));
                per_task.emplace_back(h);
            }
            fishers.emplace(f, std::move(per_task));
            log_debug("built fishers at fraction " + g17(f));
        }
    }

    // deterministic row order: method-major, then rank, alpha, fraction
    std::vector<sweep_row> rows;
    for (const std::string & m : a.methods) {
        const std::vector<int>    ks = sweep_uses_basis(m) ? ranks : std::vector<int>{0};
        const std::vector<double> fs =
            sweep_uses_fishers(m) ? a.fractions : std::vector<double>{1.0};
        for (int k : ks) {
            for (double alpha : a.alphas) {
                for (double f : fs) rows.push_back({m, k, alpha, f});
            }
        }
    }

    std::vector<row_result> results(rows.size());
    std::atomic<size_t>     next{0};
    const bool              have_fishers = !fishers.empty();

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= rows.size()) return;
            const sweep_row & row = rows[i];
            row_result &      res = results[i];

            epm_merge_options opt{};
            opt.method             = row.method.c_str();
            opt.rank               = row.k > 0 ? row.k : 2;
            opt.alpha              = row.alpha;
            opt.jitter             = a.jitter;
            opt.ties_keep_fraction = a.keep_fraction;

            const epm_basis * basis = row.k > 0 ? bases.at(row.k).get() : nullptr;
            std::vector<const epm_fisher *> fr;
            if (sweep_uses_fishers(row.method)) fr = raw(fishers.at(row.fraction));

            epm_params * merged = nullptr;
            res.st = epm_merge(&opt, base.get(), model_raw.data(), T,
                               fr.empty() ? nullptr : fr.data(), basis, &merged, nullptr);
            if (res.st != EPM_OK) {
                res.err = epm_last_error();
                return;
            }
            params_ptr mp(merged);

            double avg = 0.0, worst = 1.0;
            for (size_t t = 0; t < T; ++t) {
                double acc = 0.0;
                res.st = epm_accuracy_eval(a.datasets[t].c_str(), mp.get(), heads[t].get(), &acc);
                if (res.st != EPM_OK) {
                    res.err = epm_last_error();
                    return;
                }
                avg += acc / static_cast<double>(T);
                worst = std::min(worst, acc);
            }

            double eta = NAN, eta_tn = NAN, v_s = NAN, r_s = NAN;
            if (row.k > 0 && have_fishers) {
                const double df = sweep_uses_fishers(row.method) ? row.fraction : 1.0;
                const auto   dfr = raw(fishers.at(df));
                const bool   sum_agg =
                    row.method == "epimer-sum" || row.method == "tsvm";
                char * json = nullptr;
                res.st = epm_diagnose(base.get(), model_raw.data(), T, dfr.data(), basis,
                                      nullptr, a.jitter, sum_agg ? 1 : 0, row.alpha, &json);
                if (res.st != EPM_OK) {
                    res.err = epm_last_error();
                    return;
                }
                string_ptr jp(json);
                const nlohmann::json rep = nlohmann::json::parse(json);
                eta    = rep.at("eta").get<double>();
                eta_tn = rep.at("eta_trace_normalized").get<double>();
                v_s    = rep.at("v_s").get<double>();
                r_s    = rep.at("r_s").get<double>();
            }

            res.line = row.method + "," + std::to_string(row.k) + "," + g17(row.alpha) + "," +
                       g17(row.fraction) + "," + g17(avg) + "," + g17(worst) + "," + g17(eta) +
                       "," + g17(eta_tn) + "," + g17(v_s) + "," + g17(r_s) + "\n";
            log_debug("row " + std::to_string(i + 1) + "/" + std::to_string(rows.size()) + ": " +
                      row.method);
        }
    };

    const int jobs = std::max(1, a.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (std::thread & th : pool) th.join();
    }

    for (const row_result & res : results) {
        if (res.st != EPM_OK) {
            std::fprintf(stderr, "error: %s\n", res.err.c_str());
            return static_cast<int>(res.st);
        }
    }

    std::string csv = "method,k,alpha,fraction,avg_acc,worst_acc,eta,eta_tn,v_s,r_s\n";
    for (const row_result & res : results) csv += res.line;
    std::fputs(csv.c_str(), stdout);
    if (!a.out.empty()) {
        if (int rc = write_text(a.out, csv)) return rc;
    }
    return 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"curvature-aware model merging"};
    app.require_subcommand(1);

    synth_args sy;
    CLI::App * synth = app.add_subcommand("synth", "generate fine-tuned tasks and artifacts");
    synth->add_option("--seed", sy.seed);
    synth->add_option("--tasks", sy.tasks);
    synth->add_option("--samples", sy.samples, "samples per task");
    synth->add_option("--input", sy.input);
    synth->add_option("--hidden", sy.hidden);
    synth->add_option("--classes", sy.classes);
    synth->add_option("--steps", sy.steps);
    synth->add_option("--lr", sy.lr);
    synth->add_option("--batch-size", sy.batch_size);
    synth->add_option("--out", sy.out_dir, "output directory")->required();

    basis_args ba;
    CLI::App * basis = app.add_subcommand("build-basis", "build the shared rank-one atom basis");
    basis->add_option("--base", ba.base)->required();
    basis->add_option("--models", ba.models)->required()->expected(-1);
    basis->add_option("--rank", ba.rank, "atoms per task and layer");
    basis->add_option("--out", ba.out)->required();

    fisher_args fa;
    CLI::App *  fisher = app.add_subcommand("fisher", "curvature diagonal from a gradient stream");
    fisher->add_option("--grads", fa.grads)->required();
    fisher->add_option("--fraction", fa.fraction, "stream subsample fraction in (0,1]");
    fisher->add_option("--seed", fa.seed);
    fisher->add_option("--out", fa.out)->required();

    merge_args ma;
    CLI::App * merge = app.add_subcommand("merge", "merge fine-tuned models");
    merge->add_option("--method", ma.method,
                      "am | ta | ties | fisher-avg | tsvm | epimer-mean | epimer-sum");
    merge->add_option("--base", ma.base);
    merge->add_option("--models", ma.models)->required()->expected(-1);
    merge->add_option("--fishers", ma.fishers)->expected(-1);
    merge->add_option("--basis", ma.basis);
    merge->add_option("--weights", ma.weights)->delimiter(',');
    merge->add_option("--rank", ma.rank);
    merge->add_option("--alpha", ma.alpha, "0 selects 1/sqrt(T)");
    merge->add_option("--jitter", ma.jitter);
    merge->add_option("--keep-fraction", ma.keep_fraction);
    merge->add_option("--out", ma.out)->required();

    diagnose_args da;
    CLI::App *    diagnose = app.add_subcommand("diagnose", "curvature-gap and bound report");
    diagnose->add_option("--base", da.base)->required();
    diagnose->add_option("--models", da.models)->required()->expected(-1);
    diagnose->add_option("--fishers", da.fishers)->required()->expected(-1);
    diagnose->add_option("--basis", da.basis);
    diagnose->add_option("--weights", da.weights)->delimiter(',');
    diagnose->add_option("--rank", da.rank, "basis rank when no --basis is given");
    diagnose->add_option("--alpha", da.alpha);
    diagnose->add_option("--jitter", da.jitter);
    diagnose->add_flag("--sum", da.sum, "evaluate at the sum-aggregated coefficients");
    diagnose->add_option("--out", da.out);

    scan_args sa;
    CLI::App * scan = app.add_subcommand("scan", "train loss along a backbone segment");
    scan->add_option("--models", sa.models, "two backbone endpoints")->required()->expected(-1);
    scan->add_option("--head", sa.head)->required();
    scan->add_option("--dataset", sa.dataset)->required();
    scan->add_option("--points", sa.points);
    scan->add_option("--out", sa.out);

    sweep_args sw;
    CLI::App * sweep = app.add_subcommand("sweep", "grid evaluation across methods and settings");
    sweep->add_option("--base", sw.base)->required();
    sweep->add_option("--models", sw.models)->required()->expected(-1);
    sweep->add_option("--heads", sw.heads)->required()->expected(-1);
    sweep->add_option("--datasets", sw.datasets)->required()->expected(-1);
    sweep->add_option("--grads", sw.grads)->expected(-1);
    sweep->add_option("--methods", sw.methods)->delimiter(',');
    sweep->add_option("--ranks", sw.ranks)->delimiter(',');
    sweep->add_option("--alphas", sw.alphas)->delimiter(',');
    sweep->add_option("--fractions", sw.fractions)->delimiter(',');
    sweep->add_option("--jitter", sw.jitter);
    sweep->add_option("--keep-fraction", sw.keep_fraction);
    sweep->add_option("--seed", sw.seed, "fisher subsample seed");
    sweep->add_option("--jobs", sw.jobs, "parallel grid workers");
    sweep->add_option("--out", sw.out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(EPM_ERR_USAGE);
    }

    if (synth->parsed()) return cmd_synth(sy);
    if (basis->parsed()) return cmd_build_basis(ba);
    if (fisher->parsed()) return cmd_fisher(fa);
    if (merge->parsed()) return cmd_merge(ma);
    if (diagnose->parsed()) return cmd_diagnose(da);
    if (scan->parsed()) return cmd_scan(sa);
    if (sweep->parsed()) return cmd_sweep(sw);
    return static_cast<int>(EPM_ERR_USAGE);
}
