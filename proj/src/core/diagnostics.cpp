#include "core/diagnostics.hpp"

#include <cmath>

#include "core/errors.hpp"
#include "core/format.hpp"
#include "core/linalg.hpp"
#include "core/merge.hpp"

namespace epimerge {

correlation_result curvature_correlation(const std::vector<Eigen::MatrixXd> & blocks,
                                         const std::vector<Eigen::VectorXd> & coeffs,
                                         const std::vector<double> & w) {
    const size_t T = blocks.size();
    if (T == 0 || coeffs.size() != T || w.size() != T) {
        fail_usage("curvature correlation: inconsistent task counts");
    }
    const Eigen::Index p = blocks[0].rows();

    Eigen::MatrixXd h_bar = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd x_bar = Eigen::VectorXd::Zero(p);
    for (size_t t = 0; t < T; ++t) {
        h_bar += w[t] * blocks[t];
        x_bar += w[t] * coeffs[t];
    }
    Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
    for (size_t t = 0; t < T; ++t) {
        c += w[t] * ((blocks[t] - h_bar) * (coeffs[t] - x_bar));
    }
    return {std::move(c), std::move(h_bar)};
}

double frechet_variance(const std::vector<std::vector<Eigen::MatrixXd>> & blocks,
                        const std::vector<projected_vector> & coeffs,
                        const projected_vector & x,
                        const std::vector<double> & w) {
    const size_t T = blocks.size();
    if (T == 0 || coeffs.size() != T || w.size() != T) {
        fail_usage("frechet variance: inconsistent task counts");
    }
    double total = 0.0;
    for (size_t l = 0; l < x.layers.size(); ++l) {
        for (size_t t = 0; t < T; ++t) {
            const Eigen::VectorXd d = x.layers[l] - coeffs[t].layers[l];
            total += w[t] * d.dot(blocks[t][l] * d);
        }
    }
    return total;
}

double residual_energy(const tagged_basis & basis,
                       const std::vector<task_vector> & deltas,
                       const std::vector<const curvature_estimate *> & fishers,
                       const std::vector<double> & w) {
    const size_t T = deltas.size();
    if (fishers.size() != T || w.size() != T) {
        fail_usage("residual energy: inconsistent task counts");
    }
    double total = 0.0;
    for (size_t t = 0; t < T; ++t) {
        require_aligned(deltas[t], fishers[t]->values, "residual energy");
        const task_vector resid = residual_component(basis, deltas[t]);
        double            e     = 0.0;
        for (const auto & [name, tn] : resid.entries) {
            const tensor & v = fishers[t]->values.at(name);
            for (size_t i = 0; i < tn.data.size(); ++i) {
                e += v.data[i] * tn.data[i] * tn.data[i];
            }
        }
        total += w[t] * e;
    }
    return total;
}

namespace {

struct projected_state {
    std::vector<projected_vector>             coeffs;  // [task]
    std::vector<std::vector<Eigen::MatrixXd>> blocks;  // [task][layer]
};

projected_state project_all(const tagged_basis & basis,
                            const std::vector<task_vector> & deltas,
                            const std::vector<const curvature_estimate *> & fishers,
                            double jitter) {
    projected_state st;
    for (size_t t = 0; t < deltas.size(); ++t) {
        st.coeffs.push_back(project_vector(basis, deltas[t]));
        std::vector<Eigen::MatrixXd> h = project_diag_curvature(basis, fishers[t]->values);
        for (Eigen::MatrixXd & b : h) b = ensure_psd(b, jitter);
        st.blocks.push_back(std::move(h));
    }
    return st;
}

std::vector<Eigen::MatrixXd> blocks_at_layer(const std::vector<std::vector<Eigen::MatrixXd>> & blocks,
                                             size_t l) {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(blocks.size());
    for (const auto & per_task : blocks) out.push_back(per_task[l]);
    return out;
}

std::vector<Eigen::VectorXd> coeffs_at_layer(const std::vector<projected_vector> & coeffs, size_t l) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(coeffs.size());
    for (const auto & per_task : coeffs) out.push_back(per_task.layers[l]);
    return out;
}

} // namespace

diagnostics_report diagnose(const parameter_set & base,
                            const std::vector<const parameter_set *> & models,
                            const std::vector<const curvature_estimate *> & fishers,
                            const tagged_basis & basis,
                            const std::vector<double> & weights,
                            double jitter, bool sum_aggregator, double alpha) {
    const size_t T = models.size();
    if (T == 0) fail_usage("diagnostics need at least one model");
    if (fishers.size() != T) fail_usage("diagnostics need one Fisher estimate per task");
    const std::vector<double> w = resolve_weights(weights, T);
    const double              a = resolve_alpha(alpha, T);
    if (jitter < 0.0) fail_usage("jitter must be non-negative");

    std::vector<task_vector> deltas;
    deltas.reserve(T);
    for (size_t t = 0; t < T; ++t) {
        deltas.push_back(compute_task_vector(*models[t], base));
    }
    const projected_state st = project_all(basis, deltas, fishers, jitter);

    diagnostics_report rep;
    rep.aggregator = sum_aggregator ? "sum" : "mean";
    rep.alpha      = a;

    projected_vector x_mean;      // curvature-weighted mean coefficients
    projected_vector x_identity;  // identity-metric mean coefficients
    x_mean.layers.resize(basis.layers.size());
    x_identity.layers.resize(basis.layers.size());

    for (size_t l = 0; l < basis.layers.size(); ++l) {
        const std::vector<Eigen::MatrixXd> hb = blocks_at_layer(st.blocks, l);
        const std::vector<Eigen::VectorXd> cf = coeffs_at_layer(st.coeffs, l);

        const correlation_result corr = curvature_correlation(hb, cf, w);

        layer_diagnostics ld;
        ld.name  = basis.layers[l].name;
        ld.c     = corr.c;
        ld.h_bar = corr.h_bar;

        const spd_solve_result eta_sol = spd_solve(corr.h_bar, corr.c, 0.0);
        ld.eta            = corr.c.dot(eta_sol.x.col(0));
        ld.solve_eps_used = eta_sol.eps_used;
        ld.solve_residual = eta_sol.residual;
        rep.eta += ld.eta;

        Eigen::VectorXd b = Eigen::VectorXd::Zero(corr.c.size());
        Eigen::VectorXd x_bar = Eigen::VectorXd::Zero(corr.c.size());
        for (size_t t = 0; t < T; ++t) {
            b     += w[t] * (hb[t] * cf[t]);
            x_bar += w[t] * cf[t];
        }
        x_mean.layers[l]     = spd_solve(corr.h_bar, b, 0.0).x.col(0);
        x_identity.layers[l] = x_bar;

        // same eta with every block scaled to trace = dimension first
        std::vector<Eigen::MatrixXd> hn;
        hn.reserve(T);
        for (const Eigen::MatrixXd & h : hb) hn.push_back(trace_normalize(h));
        const correlation_result corr_n = curvature_correlation(hn, cf, w);
        rep.eta_trace_normalized += corr_n.c.dot(spd_solve(corr_n.h_bar, corr_n.c, 0.0).x.col(0));

        rep.layers.push_back(std::move(ld));
    }

    rep.advantage = frechet_variance(st.blocks, st.coeffs, x_identity, w) -
                    frechet_variance(st.blocks, st.coeffs, x_mean, w);

    projected_vector x_agg = x_mean;
    if (sum_aggregator) {
        const double factor = a * static_cast<double>(T);
        for (Eigen::VectorXd & v : x_agg.layers) v *= factor;
    }
    rep.v_s         = frechet_variance(st.blocks, st.coeffs, x_agg, w);
    rep.r_s         = residual_energy(basis, deltas, fishers, w);
    const double sv = std::sqrt(rep.v_s), sr = std::sqrt(rep.r_s);
    rep.bound_value = 0.5 * (sv + sr) * (sv + sr);
    return rep;
}

diagnostics_report certify_bound(const quadratic_suite & suite,
                                 const tagged_basis & basis,
                                 const projected_vector & x,
                                 const std::vector<double> & weights) {
    const size_t T = suite.tasks.size();
    if (T == 0) fail_usage("bound certificate needs at least one task");
    const std::vector<double> w = resolve_weights(weights, T);

    std::vector<curvature_estimate> exact;
    std::vector<const curvature_estimate *> fishers;
    exact.reserve(T);
    for (const quadratic_task & t : suite.tasks) exact.push_back(t.curvature());
    for (const curvature_estimate & e : exact) fishers.push_back(&e);

    std::vector<task_vector> deltas;
    deltas.reserve(T);
    for (const quadratic_task & t : suite.tasks) {
        deltas.push_back(compute_task_vector(t.optimum, suite.theta0));
    }
    const projected_state st = project_all(basis, deltas, fishers, 0.0);

    diagnostics_report rep;
    rep.aggregator  = "mean";
    rep.alpha       = resolve_alpha(0.0, T);
    rep.v_s         = frechet_variance(st.blocks, st.coeffs, x, w);
    rep.r_s         = residual_energy(basis, deltas, fishers, w);
    const double sv = std::sqrt(rep.v_s), sr = std::sqrt(rep.r_s);
    rep.bound_value = 0.5 * (sv + sr) * (sv + sr);

    // merged point of the certificate: theta0 + lift(x), auxiliary layers untouched
    parameter_set     merged = suite.theta0;
    const task_vector span   = lift(basis, x);
    for (const auto & [name, t] : span.entries) {
        tensor & dst = merged.at(name);
        for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += t.data[i];
    }
    rep.has_actual = true;
    for (size_t t = 0; t < T; ++t) {
        rep.actual_excess_loss += w[t] * (suite.tasks[t].loss(merged) - suite.tasks[t].loss_floor);
    }
    rep.has_r3  = true;
    rep.r3_note = 0.0;  // third-order remainder vanishes for quadratics
    return rep;
}

namespace {

std::string json_number(double x) {
    if (!std::isfinite(x)) return "null";
    return to_g17(x);
}

} // namespace

std::string report_to_json(const diagnostics_report & report) {
    std::string s;
    s += "{\n";
    s += "  \"aggregator\": \"" + report.aggregator + "\",\n";
    s += "  \"alpha\": " + json_number(report.alpha) + ",\n";
    s += "  \"eta\": " + json_number(report.eta) + ",\n";
    s += "  \"eta_trace_normalized\": " + json_number(report.eta_trace_normalized) + ",\n";
    s += "  \"advantage\": " + json_number(report.advantage) + ",\n";
    s += "  \"v_s\": " + json_number(report.v_s) + ",\n";
    s += "  \"r_s\": " + json_number(report.r_s) + ",\n";
    s += "  \"bound_value\": " + json_number(report.bound_value) + ",\n";
    s += "  \"actual_excess_loss\": " + (report.has_actual ? json_number(report.actual_excess_loss) : "null") + ",\n";
    s += "  \"r3_note\": " + (report.has_r3 ? json_number(report.r3_note) : "null") + ",\n";
    s += "  \"layers\": [";
    for (size_t l = 0; l < report.layers.size(); ++l) {
        const layer_diagnostics & ld = report.layers[l];
        s += (l ? ",\n" : "\n");
        s += "    {\n";
        s += "      \"name\": \"" + ld.name + "\",\n";
        s += "      \"atoms\": " + std::to_string(ld.c.size()) + ",\n";
        s += "      \"eta\": " + json_number(ld.eta) + ",\n";
        s += "      \"solve_eps_used\": " + json_number(ld.solve_eps_used) + ",\n";
        s += "      \"solve_residual\": " + json_number(ld.solve_residual) + ",\n";
        s += "      \"c\": [";
        for (Eigen::Index i = 0; i < ld.c.size(); ++i) {
            s += (i ? ", " : "") + json_number(ld.c(i));
        }
        s += "],\n";
        s += "      \"h_bar\": [";
        for (Eigen::Index i = 0; i < ld.h_bar.rows(); ++i) {
            s += (i ? ", [" : "[");
            for (Eigen::Index j = 0; j < ld.h_bar.cols(); ++j) {
                s += (j ? ", " : "") + json_number(ld.h_bar(i, j));
            }
            s += "]";
        }
        s += "]\n";
        s += "    }";
    }
    s += report.layers.empty() ? "]\n" : "\n  ]\n";
    s += "}\n";
    return s;
}

} // namespace epimerge
