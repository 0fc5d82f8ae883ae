#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "core/rng.hpp"
#include "core/subspace.hpp"
#include "core/tensor.hpp"
#include "doctest.h"

namespace testsup {

// scratch directory under the build tree, fresh per construction
class temp_dir {
public:
    explicit temp_dir(const std::string & tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("epimerge-" + tag + "-" + std::to_string(++counter) + "-" + std::to_string(getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~temp_dir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string & name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline epimerge::tensor random_tensor(epimerge::rng & r, std::vector<uint64_t> shape,
                                      epimerge::dtype d = epimerge::dtype::f64) {
    epimerge::tensor t;
    t.stored = d;
    t.shape  = std::move(shape);
    t.data.resize(t.numel());
    for (double & x : t.data) {
        x = r.next_normal();
        if (d == epimerge::dtype::f32) x = static_cast<double>(static_cast<float>(x));
    }
    return t;
}

inline epimerge::parameter_set random_params(epimerge::rng & r,
                                             const std::vector<std::pair<std::string, std::vector<uint64_t>>> & spec) {
    epimerge::parameter_set ps;
    for (const auto & [name, shape] : spec) {
        ps.entries.emplace(name, random_tensor(r, shape));
    }
    return ps;
}

// Explicit projection matrix for one basis layer: column i = vec(u_i v_i^T),
// row-major flattening. Independent route for checking the implicit per-atom
// formulas.
inline Eigen::MatrixXd materialize_s(const epimerge::basis_layer & bl) {
    const Eigen::Index rows = bl.u_atoms.rows();
    const Eigen::Index cols = bl.v_atoms.rows();
    const Eigen::Index p    = bl.u_atoms.cols();
    Eigen::MatrixXd    s(rows * cols, p);
    for (Eigen::Index i = 0; i < p; ++i) {
        for (Eigen::Index a = 0; a < rows; ++a) {
            for (Eigen::Index b = 0; b < cols; ++b) {
                s(a * cols + b, i) = bl.u_atoms(a, i) * bl.v_atoms(b, i);
            }
        }
    }
    return s;
}

inline Eigen::VectorXd vec_rowmajor(const epimerge::tensor & t) {
    return Eigen::Map<const Eigen::VectorXd>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
}

inline double max_abs_diff(const epimerge::parameter_set & a, const epimerge::parameter_set & b) {
    double m   = 0.0;
    auto   ia  = a.entries.begin();
    auto   ib  = b.entries.begin();
    for (; ia != a.entries.end() && ib != b.entries.end(); ++ia, ++ib) {
        for (size_t i = 0; i < ia->second.data.size(); ++i) {
            m = std::max(m, std::abs(ia->second.data[i] - ib->second.data[i]));
        }
    }
    return m;
}

inline std::vector<uint8_t> slurp(const std::string & path) {
    std::FILE * f = std::fopen(path.c_str(), "rb");
    REQUIRE(f != nullptr);
    std::vector<uint8_t> bytes;
    uint8_t              buf[4096];
    size_t               n;
    while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) {
        bytes.insert(bytes.end(), buf, buf + n);
    }
    std::fclose(f);
    return bytes;
}

} // namespace testsup
