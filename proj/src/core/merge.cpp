#include "core/merge.hpp"

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"
#include "core/format.hpp"
#include "core/linalg.hpp"

namespace epimerge {

const char * method_name(merge_method m) {
    switch (m) {
        case merge_method::am:          return "am";
        case merge_method::ta:          return "ta";
        case merge_method::ties:        return "ties";
        case merge_method::fisher_avg:  return "fisher-avg";
        case merge_method::tsvm:        return "tsvm";
        case merge_method::epimer_mean: return "epimer-mean";
        case merge_method::epimer_sum:  return "epimer-sum";
    }
    return "?";
}

std::optional<merge_method> parse_method(const std::string & name) {
    for (merge_method m : {merge_method::am, merge_method::ta, merge_method::ties,
                            merge_method::fisher_avg, merge_method::tsvm,
                            merge_method::epimer_mean, merge_method::epimer_sum}) {
        if (name == method_name(m)) return m;
    }
    return std::nullopt;
}

bool method_uses_basis(merge_method m) {
    return m == merge_method::tsvm || m == merge_method::epimer_mean || m == merge_method::epimer_sum;
}

bool method_uses_fishers(merge_method m) {
    return m == merge_method::fisher_avg || m == merge_method::epimer_mean || m == merge_method::epimer_sum;
}

bool method_uses_base(merge_method m) {
    return m != merge_method::am && m != merge_method::fisher_avg;
}

std::vector<double> resolve_weights(const std::vector<double> & weights, size_t task_count) {
    if (task_count == 0) fail_usage("merge needs at least one task");
    if (weights.empty()) {
        return std::vector<double>(task_count, 1.0 / static_cast<double>(task_count));
    }
    if (weights.size() != task_count) {
        fail_usage("got " + std::to_string(weights.size()) + " weights for " +
                   std::to_string(task_count) + " tasks");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) fail_usage("task weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        fail_usage("task weights must sum to 1 (got " + to_g17(sum) + ")");
    }
    return weights;
}

double resolve_alpha(double alpha, size_t task_count) {
    if (alpha == 0.0) return 1.0 / std::sqrt(static_cast<double>(task_count));
    if (alpha < 0.0) fail_usage("alpha must be positive");
    return alpha;
}

namespace {

// alpha * T * sum_t w_t delta_t; with uniform weights this is the plain
// alpha-scaled delta sum. Also serves as the fallback for layers outside the
// subspace basis.
task_vector scaled_delta_sum(const std::vector<task_vector> & deltas,
                             const std::vector<double> & w, double alpha) {
    std::vector<const parameter_set *> ptrs;
    std::vector<double>                scaled(w.size());
    const double                       factor = alpha * static_cast<double>(w.size());
    for (size_t t = 0; t < deltas.size(); ++t) {
        ptrs.push_back(&deltas[t]);
        scaled[t] = factor * w[t];
    }
    return weighted_sum(ptrs, scaled);
}

parameter_set merge_fisher_avg(const std::vector<const parameter_set *> & models,
                               const std::vector<const curvature_estimate *> & fishers,
                               const std::vector<double> & w) {
    for (size_t t = 0; t < models.size(); ++t) {
        require_aligned(*models[0], fishers[t]->values, "fisher-avg");
    }
    parameter_set out = *models[0];
    for (auto & [name, tn] : out.entries) {
        for (size_t i = 0; i < tn.data.size(); ++i) {
            double num = 0.0, den = 0.0, plain = 0.0;
            for (size_t t = 0; t < models.size(); ++t) {
                const double th = models[t]->at(name).data[i];
                const double v  = fishers[t]->values.at(name).data[i];
                num   += w[t] * v * th;
                den   += w[t] * v;
                plain += w[t] * th;
            }
            // coordinates with no curvature mass anywhere fall back to the
            // weighted arithmetic mean
            tn.data[i] = (den <= 1e-12) ? plain : num / den;
        }
    }
    return out;
}

task_vector ties_delta(const std::vector<task_vector> & deltas,
                       const std::vector<double> & w, double keep_fraction) {
    const size_t T = deltas.size();
    const size_t n = deltas[0].total_params();
    if (n == 0) fail_data("ties: empty task vectors");

    // per-task global magnitude threshold: the ceil(keep * n)-th largest
    // magnitude survives, ties included
    std::vector<std::vector<uint8_t>> survives(T);
    for (size_t t = 0; t < T; ++t) {
        std::vector<double> mags;
        mags.reserve(n);
        for (const auto & [name, tn] : deltas[t].entries) {
            (void) name;
            for (double x : tn.data) mags.push_back(std::abs(x));
        }
        size_t m = static_cast<size_t>(std::ceil(keep_fraction * static_cast<double>(n)));
        if (m < 1) m = 1;
        if (m > n) m = n;
        std::nth_element(mags.begin(), mags.begin() + (m - 1), mags.end(), std::greater<double>());
        const double threshold = mags[m - 1];

        survives[t].reserve(n);
        for (const auto & [name, tn] : deltas[t].entries) {
            (void) name;
            for (double x : tn.data) {
                survives[t].push_back(x != 0.0 && std::abs(x) >= threshold ? 1 : 0);
            }
        }
    }

    task_vector out   = deltas[0];
    size_t      flat  = 0;
    const double Td   = static_cast<double>(T);
    for (auto & [name, tn] : out.entries) {
        for (size_t i = 0; i < tn.data.size(); ++i, ++flat) {
            int pos = 0, neg = 0;
            for (size_t t = 0; t < T; ++t) {
                if (!survives[t][flat]) continue;
                const double x = deltas[t].at(name).data[i];
                (x > 0.0 ? pos : neg)++;
            }
            const int elected = (pos >= neg) ? 1 : -1;
            double    sum     = 0.0;
            int       cnt     = 0;
            for (size_t t = 0; t < T; ++t) {
                if (!survives[t][flat]) continue;
                const double x = deltas[t].at(name).data[i];
                if ((x > 0.0 ? 1 : -1) != elected) continue;
                sum += Td * w[t] * x;
                ++cnt;
            }
            tn.data[i] = cnt ? sum / static_cast<double>(cnt) : 0.0;
        }
    }
    return out;
}

} // namespace

merge_outcome run_merge(const merge_config & cfg,
                        const parameter_set * base,
                        const std::vector<const parameter_set *> & models,
                        const std::vector<const curvature_estimate *> & fishers,
                        const tagged_basis * basis) {
    const size_t T = models.size();
    if (T == 0) fail_usage("merge needs at least one model");
    for (const parameter_set * m : models) {
        if (!m) fail_usage("null model passed to merge");
    }
    for (size_t t = 1; t < T; ++t) {
        require_aligned(*models[0], *models[t], "merge inputs");
    }
    const std::vector<double> w     = resolve_weights(cfg.weights, T);
    const double              alpha = resolve_alpha(cfg.alpha, T);
    if (cfg.jitter < 0.0) fail_usage("jitter must be non-negative");
    if (!(cfg.ties_keep_fraction > 0.0) || cfg.ties_keep_fraction > 1.0) {
        fail_usage("ties keep fraction must lie in (0, 1]");
    }
    if (method_uses_base(cfg.method)) {
        if (!base) fail_usage(std::string(method_name(cfg.method)) + " requires a base model");
        require_aligned(*base, *models[0], "merge base");
    }
    if (method_uses_fishers(cfg.method)) {
        if (fishers.size() != T) {
            fail_usage(std::string(method_name(cfg.method)) + " needs one Fisher estimate per task");
        }
        for (const curvature_estimate * f : fishers) {
            if (!f) fail_usage("null Fisher estimate passed to merge");
        }
    }

    merge_outcome out;
    out.alpha_used   = alpha;
    out.weights_used = w;

    switch (cfg.method) {
        case merge_method::am:
            out.merged = weighted_sum(models, w);
            return out;
        case merge_method::fisher_avg:
            out.merged = merge_fisher_avg(models, fishers, w);
            return out;
        default:
            break;
    }

    std::vector<task_vector> deltas;
    deltas.reserve(T);
    for (size_t t = 0; t < T; ++t) {
        deltas.push_back(compute_task_vector(*models[t], *base));
    }

    if (cfg.method == merge_method::ta) {
        out.merged = apply_delta(*base, scaled_delta_sum(deltas, w, alpha));
        return out;
    }
    if (cfg.method == merge_method::ties) {
        out.merged = apply_delta(*base, ties_delta(deltas, w, cfg.ties_keep_fraction), alpha);
        return out;
    }

    // subspace methods
    tagged_basis built;
    if (!basis) {
        std::vector<const task_vector *> dptrs;
        for (const task_vector & d : deltas) dptrs.push_back(&d);
        built = build_tagged_basis(dptrs, cfg.rank);
        basis = &built;
    }

    std::vector<projected_vector> coeffs;
    coeffs.reserve(T);
    for (size_t t = 0; t < T; ++t) {
        coeffs.push_back(project_vector(*basis, deltas[t]));
    }

    projected_vector merged_coeffs;
    merged_coeffs.layers.resize(basis->layers.size());

    if (cfg.method == merge_method::tsvm) {
        const double factor = alpha * static_cast<double>(T);
        for (size_t l = 0; l < basis->layers.size(); ++l) {
            Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(basis->atom_count()));
            for (size_t t = 0; t < T; ++t) c += w[t] * coeffs[t].layers[l];
            merged_coeffs.layers[l] = factor * c;
        }
    } else {
        std::vector<std::vector<Eigen::MatrixXd>> blocks;  // [task][layer]
        blocks.reserve(T);
        for (size_t t = 0; t < T; ++t) {
            std::vector<Eigen::MatrixXd> h = project_diag_curvature(*basis, fishers[t]->values);
            for (Eigen::MatrixXd & b : h) b = ensure_psd(b, cfg.jitter);
            blocks.push_back(std::move(h));
        }
        for (size_t l = 0; l < basis->layers.size(); ++l) {
            const Eigen::Index p = static_cast<Eigen::Index>(basis->atom_count());
            Eigen::MatrixXd    hbar = Eigen::MatrixXd::Zero(p, p);
            Eigen::VectorXd    rhs  = Eigen::VectorXd::Zero(p);
            for (size_t t = 0; t < T; ++t) {
                hbar += w[t] * blocks[t][l];
                rhs  += w[t] * (blocks[t][l] * coeffs[t].layers[l]);
            }
            const spd_solve_result sol  = spd_solve(hbar, rhs, 0.0);
            Eigen::VectorXd        xsol = sol.x.col(0);
            if (cfg.method == merge_method::epimer_sum) {
                xsol *= alpha * static_cast<double>(T);
            }
            merged_coeffs.layers[l] = std::move(xsol);
            out.solves.push_back({basis->layers[l].name, sol.eps_used, sol.residual});
        }
    }

    const task_vector in_span  = lift(*basis, merged_coeffs);
    const task_vector fallback = scaled_delta_sum(deltas, w, alpha);

    task_vector full_delta = fallback;
    for (const auto & [name, t] : in_span.entries) {
        full_delta.at(name).data = t.data;
    }
    out.merged           = apply_delta(*base, full_delta);
    out.has_coefficients = true;
    out.coefficients     = std::move(merged_coeffs);
    out.rank_used        = basis->rank_per_task;
    return out;
}

std::string merge_sidecar_text(const merge_config & cfg, const merge_outcome & outcome) {
    std::string s;
    s += "format=epimerge-merge\n";
    s += std::string("method=") + method_name(cfg.method) + "\n";
    s += "tasks=" + std::to_string(outcome.weights_used.size()) + "\n";
    s += "weights=" + join_g17(outcome.weights_used) + "\n";
    s += "alpha=" + to_g17(outcome.alpha_used) + "\n";
    if (cfg.method == merge_method::ties) {
        s += "keep_fraction=" + to_g17(cfg.ties_keep_fraction) + "\n";
    }
    if (method_uses_basis(cfg.method)) {
        s += "rank=" + std::to_string(outcome.rank_used) + "\n";
    }
    if (method_uses_fishers(cfg.method) && method_uses_basis(cfg.method)) {
        s += "jitter=" + to_g17(cfg.jitter) + "\n";
        for (const layer_solve_info & info : outcome.solves) {
            s += "eps_used." + info.layer + "=" + to_g17(info.eps_used) + "\n";
        }
    }
    return s;
}

} // namespace epimerge
