#include "core/subspace.hpp"

#include <algorithm>
#include <sstream>

#include "core/checkpoint.hpp"
#include "core/errors.hpp"
#include "core/linalg.hpp"

namespace epimerge {

namespace {

Eigen::MatrixXd layer_matrix(const tensor & t) {
    using row_major = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    return Eigen::Map<const row_major>(t.data.data(),
                                       static_cast<Eigen::Index>(t.shape[0]),
                                       static_cast<Eigen::Index>(t.shape[1]));
}

void store_matrix(tensor & t, const Eigen::MatrixXd & m) {
    t.shape = {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())};
    t.data.resize(static_cast<size_t>(m.size()));
    using row_major = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<row_major>(t.data.data(), m.rows(), m.cols()) = m;
}

const tensor & matching_layer(const parameter_set & params, const basis_layer & bl, const char * what) {
    const tensor & t = params.at(bl.name);
    if (t.shape.size() != 2 ||
        static_cast<Eigen::Index>(t.shape[0]) != bl.u_atoms.rows() ||
        static_cast<Eigen::Index>(t.shape[1]) != bl.v_atoms.rows()) {
        fail_data(std::string(what) + ": tensor '" + bl.name + "' does not match the basis layer shape");
    }
    return t;
}

} // namespace

const basis_layer * tagged_basis::find(const std::string & name) const {
    for (const basis_layer & l : layers) {
        if (l.name == name) return &l;
    }
    return nullptr;
}

tagged_basis build_tagged_basis(const std::vector<const task_vector *> & deltas, int k) {
    if (deltas.empty()) fail_usage("basis construction needs at least one task delta");
    if (k < 1) fail_usage("basis rank must be >= 1");
    const int T = static_cast<int>(deltas.size());
    for (int t = 1; t < T; ++t) {
        require_aligned(*deltas[0], *deltas[t], "basis construction");
    }

    const std::vector<std::string> names = matrix_layer_names(*deltas[0]);
    const Eigen::Index             kt    = static_cast<Eigen::Index>(k) * T;

    std::ostringstream violations;
    for (const std::string & name : names) {
        const tensor & t   = deltas[0]->at(name);
        const uint64_t mn  = std::min(t.shape[0], t.shape[1]);
        if (static_cast<uint64_t>(kt) > mn) {
            violations << "  layer '" << name << "' (" << t.shape[0] << "x" << t.shape[1]
                       << "): k*T = " << kt << " exceeds min dim " << mn << "\n";
        }
    }
    const std::string report = violations.str();
    if (!report.empty()) {
        fail_usage("basis rank guard failed, reduce the rank or the task count:\n" + report);
    }

    tagged_basis basis;
    basis.rank_per_task = k;
    basis.task_count    = T;
    basis.atom_tags.reserve(static_cast<size_t>(kt));
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < k; ++j) basis.atom_tags.push_back(t);
    }

    for (const std::string & name : names) {
        const tensor &    t0   = deltas[0]->at(name);
        const Eigen::Index rows = static_cast<Eigen::Index>(t0.shape[0]);
        const Eigen::Index cols = static_cast<Eigen::Index>(t0.shape[1]);

        Eigen::MatrixXd u_stack(rows, kt);
        Eigen::MatrixXd v_stack(cols, kt);
        for (int t = 0; t < T; ++t) {
            const thin_svd_result svd = thin_svd(layer_matrix(deltas[t]->at(name)), k);
            u_stack.middleCols(t * k, k) = svd.u;
            v_stack.middleCols(t * k, k) = svd.v;
        }

        basis_layer bl;
        bl.name    = name;
        bl.u_atoms = procrustes_orthonormalize(u_stack);
        bl.v_atoms = procrustes_orthonormalize(v_stack);
        basis.layers.push_back(std::move(bl));
    }
    return basis;
}

projected_vector project_vector(const tagged_basis & basis, const task_vector & delta) {
    projected_vector out;
    out.layers.reserve(basis.layers.size());
    for (const basis_layer & bl : basis.layers) {
        const Eigen::MatrixXd m = layer_matrix(matching_layer(delta, bl, "projection"));
        const Eigen::Index    p = bl.u_atoms.cols();
        Eigen::VectorXd       c(p);
        for (Eigen::Index i = 0; i < p; ++i) {
            c(i) = bl.u_atoms.col(i).dot(m * bl.v_atoms.col(i));
        }
        out.layers.push_back(std::move(c));
    }
    return out;
}

task_vector lift(const tagged_basis & basis, const projected_vector & coeffs) {
    if (coeffs.layers.size() != basis.layers.size()) {
        fail_usage("lift: coefficient blocks do not match the basis layer count");
    }
    task_vector out;
    for (size_t l = 0; l < basis.layers.size(); ++l) {
        const basis_layer &    bl = basis.layers[l];
        const Eigen::VectorXd & c  = coeffs.layers[l];
        if (c.size() != bl.u_atoms.cols()) {
            fail_usage("lift: coefficient length mismatch on layer '" + bl.name + "'");
        }
        const Eigen::MatrixXd m = bl.u_atoms * c.asDiagonal() * bl.v_atoms.transpose();
        tensor t;
        t.stored = dtype::f64;
        store_matrix(t, m);
        out.entries.emplace(bl.name, std::move(t));
    }
    return out;
}

task_vector residual_component(const tagged_basis & basis, const task_vector & delta) {
    task_vector            out    = delta;
    const projected_vector coeffs = project_vector(basis, delta);
    const task_vector      span   = lift(basis, coeffs);
    for (const auto & [name, t] : span.entries) {
        tensor & dst = out.at(name);
        for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] -= t.data[i];
    }
    return out;
}

std::vector<Eigen::MatrixXd> project_diag_curvature(const tagged_basis & basis, const parameter_set & curvature) {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(basis.layers.size());
    for (const basis_layer & bl : basis.layers) {
        const tensor & t = matching_layer(curvature, bl, "curvature projection");
        for (double x : t.data) {
            if (x < 0.0) {
                fail_data("curvature projection: negative Fisher entry in layer '" + bl.name + "'");
            }
        }
        const Eigen::MatrixXd v = layer_matrix(t);
        const Eigen::Index    p = bl.u_atoms.cols();
        Eigen::MatrixXd       h(p, p);
        for (Eigen::Index i = 0; i < p; ++i) {
            for (Eigen::Index j = i; j < p; ++j) {
                const Eigen::VectorXd wu = bl.u_atoms.col(i).cwiseProduct(bl.u_atoms.col(j));
                const Eigen::VectorXd wv = bl.v_atoms.col(i).cwiseProduct(bl.v_atoms.col(j));
                const double          val = wu.dot(v * wv);
                h(i, j) = val;
                h(j, i) = val;
            }
        }
        out.push_back(std::move(h));
    }
    return out;
}

void save_basis(const tagged_basis & basis, const std::string & path) {
    parameter_set container;
    for (const basis_layer & bl : basis.layers) {
        if (bl.name.find('#') != std::string::npos) {
            fail_data("layer name '" + bl.name + "' contains '#', reserved for container suffixes");
        }
        tensor u, v;
        u.stored = dtype::f64;
        v.stored = dtype::f64;
        store_matrix(u, bl.u_atoms);
        store_matrix(v, bl.v_atoms);
        container.entries.emplace(bl.name + "#u", std::move(u));
        container.entries.emplace(bl.name + "#v", std::move(v));
    }
    write_checkpoint(container, path);

    std::ostringstream tags, layers;
    for (size_t i = 0; i < basis.atom_tags.size(); ++i) {
        if (i) tags << ',';
        tags << basis.atom_tags[i];
    }
    for (size_t i = 0; i < basis.layers.size(); ++i) {
        if (i) layers << ',';
        layers << basis.layers[i].name;
    }
    metadata meta = {
        {"format", "epimerge-basis"},
        {"k", std::to_string(basis.rank_per_task)},
        {"tasks", std::to_string(basis.task_count)},
        {"tags", tags.str()},
        {"layers", layers.str()},
    };
    write_metadata(meta, path + ".meta");
}

namespace {

std::vector<std::string> split_csv(const std::string & s) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    size_t start = 0;
    while (true) {
        const size_t comma = s.find(',', start);
        out.push_back(s.substr(start, comma == std::string::npos ? comma : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int parse_int_meta(const metadata & meta, const std::string & key, const std::string & path) {
    const std::string * v = find_meta(meta, key);
    if (!v) fail_data(path + ": missing '" + key + "' in basis sidecar");
    try {
        return std::stoi(*v);
    } catch (const std::exception &) {
        fail_data(path + ": bad integer for '" + key + "' in basis sidecar");
    }
}

} // namespace

tagged_basis load_basis(const std::string & path) {
    const parameter_set container = read_checkpoint(path);
    const metadata      meta      = read_metadata(path + ".meta");

    const std::string * fmt = find_meta(meta, "format");
    if (!fmt || *fmt != "epimerge-basis") {
        fail_data(path + ": sidecar does not describe a basis file");
    }
    tagged_basis basis;
    basis.rank_per_task = parse_int_meta(meta, "k", path);
    basis.task_count    = parse_int_meta(meta, "tasks", path);
    if (basis.rank_per_task < 1 || basis.task_count < 1) {
        fail_data(path + ": non-positive rank or task count in basis sidecar");
    }
    const size_t kt = static_cast<size_t>(basis.rank_per_task) * basis.task_count;

    const std::string * tags = find_meta(meta, "tags");
    if (!tags) fail_data(path + ": missing 'tags' in basis sidecar");
    for (const std::string & tok : split_csv(*tags)) {
        try {
            basis.atom_tags.push_back(std::stoi(tok));
        } catch (const std::exception &) {
            fail_data(path + ": bad atom tag '" + tok + "'");
        }
    }
    if (basis.atom_tags.size() != kt) {
        fail_data(path + ": tag list length does not match k*T");
    }
    for (size_t i = 0; i < kt; ++i) {
        if (basis.atom_tags[i] != static_cast<int>(i) / basis.rank_per_task) {
            fail_data(path + ": atom tags are not task-major");
        }
    }

    const std::string * layer_list = find_meta(meta, "layers");
    if (!layer_list) fail_data(path + ": missing 'layers' in basis sidecar");
    for (const std::string & name : split_csv(*layer_list)) {
        if (!container.has(name + "#u") || !container.has(name + "#v")) {
            fail_data(path + ": missing factor tensors for layer '" + name + "'");
        }
        const tensor & ut = container.at(name + "#u");
        const tensor & vt = container.at(name + "#v");
        if (ut.shape.size() != 2 || vt.shape.size() != 2 ||
            ut.shape[1] != kt || vt.shape[1] != kt) {
            fail_data(path + ": factor tensor shapes inconsistent for layer '" + name + "'");
        }
        basis_layer bl;
        bl.name    = name;
        bl.u_atoms = layer_matrix(ut);
        bl.v_atoms = layer_matrix(vt);

        // orthonormality is a structural invariant of basis files
        const Eigen::MatrixXd gu = bl.u_atoms.transpose() * bl.u_atoms;
        const Eigen::MatrixXd gv = bl.v_atoms.transpose() * bl.v_atoms;
        const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(kt),
                                                             static_cast<Eigen::Index>(kt));
        if ((gu - id).cwiseAbs().maxCoeff() > 1e-10 || (gv - id).cwiseAbs().maxCoeff() > 1e-10) {
            fail_data(path + ": factor stacks for layer '" + name + "' are not orthonormal");
        }
        basis.layers.push_back(std::move(bl));
    }
    if (2 * basis.layers.size() != container.size()) {
        fail_data(path + ": container holds tensors not referenced by the sidecar");
    }
    std::sort(basis.layers.begin(), basis.layers.end(),
              [](const basis_layer & a, const basis_layer & b) { return a.name < b.name; });
    return basis;
}

} // namespace epimerge
