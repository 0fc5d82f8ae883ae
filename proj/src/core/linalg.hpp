#pragma once

#include <Eigen/Dense>

namespace epimerge {

struct thin_svd_result {
    Eigen::MatrixXd u;      // rows x rank, orthonormal columns
    Eigen::VectorXd sigma;  // descending, non-negative
    Eigen::MatrixXd v;      // cols x rank, orthonormal columns
};

// Rank-truncated SVD with a fixed sign convention: each U column is flipped
// (together with its V column) so that its largest-magnitude entry is
// positive, making the factors unique up to degenerate singular values.
thin_svd_result thin_svd(const Eigen::MatrixXd & m, Eigen::Index rank);

// Closest column-orthonormal matrix in Frobenius norm (polar factor U*V^T of
// the thin SVD). Rank-deficient inputs are completed from the SVD factors and
// still come back orthonormal.
Eigen::MatrixXd procrustes_orthonormalize(const Eigen::MatrixXd & a);

struct spd_solve_result {
    Eigen::MatrixXd x;
    double          eps_used = 0.0;
    double          residual = 0.0;  // ||(A + eps I) X - B||_F
};

// Solve (A + eps I) X = B for symmetric positive (semi-)definite A via
// Cholesky. If factorization fails or the solution residual is poor, eps is
// escalated x10, at most 6 times, before giving up with a numeric error.
// Exactly diagonal A takes an elementwise path.
spd_solve_result spd_solve(const Eigen::MatrixXd & a, const Eigen::MatrixXd & b, double eps);

} // namespace epimerge
