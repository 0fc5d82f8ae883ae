#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace epimerge {

// Per matrix layer: kT rank-one atoms u_i v_i^T with orthonormalized factor
// stacks, so the atoms are orthonormal under the Frobenius inner product.
struct basis_layer {
    std::string     name;
    Eigen::MatrixXd u_atoms;  // rows x kT
    Eigen::MatrixXd v_atoms;  // cols x kT
};

// Atom i is tagged with the task whose delta contributed it; order is
// task-major, singular values descending within a task. The tag list is
// shared by every layer.
struct tagged_basis {
    int                      rank_per_task = 0;  // k
    int                      task_count    = 0;  // T
    std::vector<int>         atom_tags;          // length k*T
    std::vector<basis_layer> layers;             // sorted by name

    size_t atom_count() const { return atom_tags.size(); }
    const basis_layer * find(const std::string & name) const;
};

// Coefficients of a task vector in the basis, one length-kT vector per layer
// (aligned with tagged_basis::layers).
struct projected_vector {
    std::vector<Eigen::VectorXd> layers;
};

// Builds the shared basis from the task deltas: per layer, rank-k SVD of each
// task's delta, factor stacks orthonormalized by the Procrustes polar step.
// Fails with a per-layer report when k*T exceeds min(rows, cols) anywhere.
tagged_basis build_tagged_basis(const std::vector<const task_vector *> & deltas, int k);

projected_vector project_vector(const tagged_basis & basis, const task_vector & delta);

// Expands coefficients back to a task vector over the basis's matrix layers.
task_vector lift(const tagged_basis & basis, const projected_vector & coeffs);

// delta - lift(project(delta)); auxiliary layers pass through whole.
task_vector residual_component(const tagged_basis & basis, const task_vector & delta);

// S^T diag(v) S for a diagonal ambient curvature, one dense kT x kT block per
// layer. Entries follow H[i,j] = (u_i . u_j)^T V (v_i . v_j) with V the
// curvature reshaped to the layer's matrix.
std::vector<Eigen::MatrixXd> project_diag_curvature(const tagged_basis & basis, const parameter_set & curvature);

// Container + sidecar round trip; the sidecar records k, task count and tags.
void         save_basis(const tagged_basis & basis, const std::string & path);
tagged_basis load_basis(const std::string & path);

} // namespace epimerge
