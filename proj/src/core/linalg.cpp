#include "core/linalg.hpp"

#include <cmath>
#include <string>

#include "core/errors.hpp"

namespace epimerge {

namespace {

void require_finite(const Eigen::MatrixXd & m, const char * what) {
    if (!m.allFinite()) {
        fail_numeric(std::string(what) + ": input contains non-finite values");
    }
}

bool is_exactly_diagonal(const Eigen::MatrixXd & a) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            if (i != j && a(i, j) != 0.0) return false;
        }
    }
    return true;
}

} // namespace

thin_svd_result thin_svd(const Eigen::MatrixXd & m, Eigen::Index rank) {
    require_finite(m, "thin_svd");
    const Eigen::Index full = std::min(m.rows(), m.cols());
    if (rank < 1 || rank > full) {
        fail_usage("thin_svd: rank " + std::to_string(rank) + " outside [1, " + std::to_string(full) + "]");
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);

    thin_svd_result r;
    r.u     = svd.matrixU().leftCols(rank);
    r.v     = svd.matrixV().leftCols(rank);
    r.sigma = svd.singularValues().head(rank);

    // sign convention: the largest-magnitude entry of each U column is positive
    for (Eigen::Index j = 0; j < rank; ++j) {
        Eigen::Index imax = 0;
        double       best = -1.0;
        for (Eigen::Index i = 0; i < r.u.rows(); ++i) {
            const double a = std::abs(r.u(i, j));
            if (a > best) {
                best = a;
                imax = i;
            }
        }
        if (r.u(imax, j) < 0.0) {
            r.u.col(j) = -r.u.col(j);
            r.v.col(j) = -r.v.col(j);
        }
    }
    return r;
}

Eigen::MatrixXd procrustes_orthonormalize(const Eigen::MatrixXd & a) {
    require_finite(a, "procrustes_orthonormalize");
    if (a.cols() > a.rows()) {
        fail_usage("procrustes_orthonormalize: more columns (" + std::to_string(a.cols()) +
                   ") than rows (" + std::to_string(a.rows()) + ")");
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return svd.matrixU() * svd.matrixV().transpose();
}

spd_solve_result spd_solve(const Eigen::MatrixXd & a, const Eigen::MatrixXd & b, double eps) {
    require_finite(a, "spd_solve");
    require_finite(b, "spd_solve");
    if (a.rows() != a.cols()) fail_usage("spd_solve: A is not square");
    if (b.rows() != a.rows()) fail_usage("spd_solve: B row count does not match A");
    if (eps < 0.0) fail_usage("spd_solve: negative eps");

    const double max_abs = a.cwiseAbs().maxCoeff();
    const double sym_err = (a - a.transpose()).cwiseAbs().maxCoeff();
    if (sym_err > 1e-10 * std::max(1.0, max_abs)) {
        fail_numeric("spd_solve: A is not symmetric (max asymmetry " + std::to_string(sym_err) + ")");
    }

    const double a_norm   = a.norm();
    const bool   diagonal = is_exactly_diagonal(a);

    double eps_used = eps;
    for (int attempt = 0; attempt <= 6; ++attempt) {
        if (attempt > 0) {
            eps_used = (eps_used == 0.0) ? 1e-12 * std::max(1.0, max_abs) : eps_used * 10.0;
        }
        spd_solve_result r;
        r.eps_used = eps_used;
        if (diagonal) {
            // single elementwise division keeps the result correctly rounded
            Eigen::VectorXd d = a.diagonal().array() + eps_used;
            if ((d.array() <= 0.0).any()) continue;
            r.x = b.array().colwise() / d.array();
        } else {
            Eigen::MatrixXd damped = a;
            damped.diagonal().array() += eps_used;
            Eigen::LLT<Eigen::MatrixXd> llt(damped);
            if (llt.info() != Eigen::Success) continue;
            r.x = llt.solve(b);
        }
        if (!r.x.allFinite()) continue;
        Eigen::MatrixXd damped_check = a;
        damped_check.diagonal().array() += eps_used;
        r.residual = (damped_check * r.x - b).norm();
        if (r.residual <= 1e-10 * (a_norm * r.x.norm() + b.norm())) {
            return r;
        }
    }
    fail_numeric("spd_solve: no acceptable factorization after jitter escalation (eps reached " +
                 std::to_string(eps_used) + ")");
}

} // namespace epimerge
