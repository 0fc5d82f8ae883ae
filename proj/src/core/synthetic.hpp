#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "core/curvature.hpp"
#include "core/tensor.hpp"

namespace epimerge {

// --- diagonal quadratic tasks ------------------------------------------------

// L_t(theta) = 0.5 * sum_i v_i (theta_i - opt_i)^2 + floor
struct quadratic_task {
    parameter_set optimum;
    parameter_set hessian_diag;  // entries > 0, aligned with optimum
    double        loss_floor = 0.0;

    double             loss(const parameter_set & theta) const;
    parameter_set      gradient(const parameter_set & theta) const;
    curvature_estimate curvature() const;  // exact diagonal, usable wherever a Fisher is
};

struct quadratic_suite {
    parameter_set               theta0;
    std::vector<quadratic_task> tasks;
};

struct quad_gen_options {
    int                                tasks = 4;
    std::vector<std::vector<uint64_t>> layer_shapes = {{8, 8}, {8, 8}};
    double                             heterogeneity = 1.0;  // curvature spread exp(h * z)
    double                             radius        = 1.0;  // optima in this ball around theta0
};

// Optima uniform in the shared ball, Hessian diagonals exp(h * z) with
// standard normal z; h = 0 gives exactly identity curvature for every task.
quadratic_suite gen_quadratic_suite(uint64_t seed, const quad_gen_options & opt);

// --- two-layer MLP classification tasks --------------------------------------

struct mlp_arch {
    int input   = 16;
    int hidden  = 16;
    int classes = 4;
};

struct mlp_dataset {
    Eigen::MatrixXd  train_x;  // rows = samples
    std::vector<int> train_y;
    Eigen::MatrixXd  test_x;
    std::vector<int> test_y;
};

struct mlp_suite {
    mlp_arch                 arch;
    parameter_set            backbone0;  // fc1.weight, fc1.bias
    parameter_set            head0;      // fc2.weight, fc2.bias (zero init: uniform logits)
    std::vector<mlp_dataset> tasks;      // Gaussian class blobs, balanced labels
};

mlp_suite gen_mlp_tasks(uint64_t seed, int tasks, const mlp_arch & arch, int samples_per_task);

// shapes of fc1/fc2 tensors determine the architecture
mlp_arch infer_arch(const parameter_set & full_params);

// Cross-entropy loss of ReLU(W1 x + b1) -> softmax(W2 a + b2); gradient is
// optional and covers all four tensors.
double mlp_loss_grad(const parameter_set & full_params, const mlp_arch & arch,
                     const Eigen::VectorXd & x, int label, parameter_set * grad);

double mlp_batch_loss(const parameter_set & full_params, const mlp_arch & arch,
                      const Eigen::MatrixXd & xs, const std::vector<int> & ys);

struct finetune_options {
    int      steps      = 600;
    double   lr         = 0.05;
    int      batch_size = 32;
    uint64_t seed       = 1;
};

struct finetune_result {
    parameter_set params;  // backbone + head, fine-tuned
    double        initial_grad_norm = 0.0;
    double        final_grad_norm   = 0.0;  // full train batch, at the returned params
};

// Minibatch gradient descent with a seeded epoch shuffle; deterministic for
// fixed inputs. Non-finite losses abort with a numeric error.
finetune_result finetune_mlp(const parameter_set & init_full, const mlp_arch & arch,
                             const mlp_dataset & data, const finetune_options & opt);

double evaluate_accuracy(const parameter_set & full_params, const mlp_arch & arch,
                         const Eigen::MatrixXd & xs, const std::vector<int> & ys);

// Per-sample gradients over the train split restricted to fc1.*, in dataset
// order; feeds the Fisher accumulator.
std::vector<parameter_set> per_sample_backbone_grads(const parameter_set & full_params,
                                                     const mlp_arch & arch,
                                                     const mlp_dataset & data);

// Mean train loss at evenly spaced points on the segment between two
// backbones (shared head), endpoints included.
std::vector<double> loss_path_scan(const parameter_set & backbone_a,
                                   const parameter_set & backbone_b,
                                   const parameter_set & head,
                                   const mlp_dataset & data, int points);

// Dataset container: train_x/train_y/test_x/test_y tensors plus a sidecar
// with counts and label range.
void        write_mlp_dataset(const mlp_dataset & data, int classes, const std::string & path);
mlp_dataset read_mlp_dataset(const std::string & path, int * classes_out);

} // namespace epimerge
