#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "core/curvature.hpp"
#include "core/subspace.hpp"
#include "core/synthetic.hpp"
#include "core/tensor.hpp"

namespace epimerge {

struct layer_diagnostics {
    std::string     name;
    Eigen::VectorXd c;       // curvature-delta correlation
    Eigen::MatrixXd h_bar;   // weighted mean projected curvature
    double          eta            = 0.0;  // c^T h_bar^{-1} c
    double          solve_eps_used = 0.0;
    double          solve_residual = 0.0;
};

struct diagnostics_report {
    std::string aggregator;  // "mean" or "sum"
    double      alpha = 0.0;

    double eta                  = 0.0;  // summed over layers
    double eta_trace_normalized = 0.0;  // same, blocks scaled to trace = dim first
    double advantage            = 0.0;  // F(identity-metric mean) - F(curvature mean)
    double v_s                  = 0.0;  // subspace variance at the merged coefficients
    double r_s                  = 0.0;  // curvature-weighted residual energy
    double bound_value          = 0.0;  // (sqrt(v_s) + sqrt(r_s))^2 / 2

    bool   has_actual         = false;  // only for synthetic quadratic suites
    double actual_excess_loss = 0.0;
    bool   has_r3             = false;
    double r3_note            = 0.0;    // exactly zero for quadratic tasks

    std::vector<layer_diagnostics> layers;
};

// Correlation between per-task curvature and task coefficients:
//   c = sum_t w_t (H_t - H_bar)(x_t - x_bar)
// An algebraically equal form is b - H_bar x_bar with b = sum_t w_t H_t x_t.
struct correlation_result {
    Eigen::VectorXd c;
    Eigen::MatrixXd h_bar;
};
correlation_result curvature_correlation(const std::vector<Eigen::MatrixXd> & blocks,
                                         const std::vector<Eigen::VectorXd> & coeffs,
                                         const std::vector<double> & w);

// Weighted quadratic spread of `x` around the task coefficients,
// sum_t w_t (x - x_t)^T H_t (x - x_t), summed across layers.
double frechet_variance(const std::vector<std::vector<Eigen::MatrixXd>> & blocks,
                        const std::vector<projected_vector> & coeffs,
                        const projected_vector & x,
                        const std::vector<double> & w);

// Energy of the task deltas outside the basis span under each task's ambient
// curvature diagonal; auxiliary layers count in full.
double residual_energy(const tagged_basis & basis,
                       const std::vector<task_vector> & deltas,
                       const std::vector<const curvature_estimate *> & fishers,
                       const std::vector<double> & w);

// Full report for a set of fine-tuned models around a base: eta and the
// advantage identity partners, plus the loss-increase bound ingredients.
diagnostics_report diagnose(const parameter_set & base,
                            const std::vector<const parameter_set *> & models,
                            const std::vector<const curvature_estimate *> & fishers,
                            const tagged_basis & basis,
                            const std::vector<double> & weights,
                            double jitter, bool sum_aggregator, double alpha);

// Certificate on a synthetic quadratic suite: the merged point is
// theta0 + lift(x) (auxiliary layers untouched), curvature blocks are exact,
// and actual_excess_loss is evaluated in closed form.
diagnostics_report certify_bound(const quadratic_suite & suite,
                                 const tagged_basis & basis,
                                 const projected_vector & x,
                                 const std::vector<double> & weights);

// Fixed key order, 17 significant digits; byte-stable across runs.
std::string report_to_json(const diagnostics_report & report);

} // namespace epimerge
