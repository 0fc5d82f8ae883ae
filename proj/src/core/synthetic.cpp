#include "core/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "core/checkpoint.hpp"
#include "core/errors.hpp"
#include "core/rng.hpp"

namespace epimerge {

namespace {

using row_major = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const row_major> mat_view(const tensor & t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1])};
}

Eigen::Map<const Eigen::VectorXd> vec_view(const tensor & t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
}

tensor make_tensor(std::vector<uint64_t> shape) {
    tensor t;
    t.stored = dtype::f64;
    t.shape  = std::move(shape);
    t.data.assign(t.numel(), 0.0);
    return t;
}

} // namespace

// --- quadratic tasks ---------------------------------------------------------

double quadratic_task::loss(const parameter_set & theta) const {
    require_aligned(theta, optimum, "quadratic loss");
    double s = 0.0;
    auto   io = optimum.entries.begin();
    auto   ih = hessian_diag.entries.begin();
    auto   it = theta.entries.begin();
    for (; io != optimum.entries.end(); ++io, ++ih, ++it) {
        const auto & o = io->second.data;
        const auto & h = ih->second.data;
        const auto & x = it->second.data;
        for (size_t i = 0; i < o.size(); ++i) {
            const double d = x[i] - o[i];
            s += h[i] * d * d;
        }
    }
    return 0.5 * s + loss_floor;
}

parameter_set quadratic_task::gradient(const parameter_set & theta) const {
    require_aligned(theta, optimum, "quadratic gradient");
    parameter_set g = theta;
    for (auto & [name, t] : g.entries) {
        const auto & o = optimum.at(name).data;
        const auto & h = hessian_diag.at(name).data;
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = h[i] * (t.data[i] - o[i]);
        }
    }
    return g;
}

curvature_estimate quadratic_task::curvature() const {
    curvature_estimate est;
    est.values       = hessian_diag;
    est.sample_count = 0;
    est.fraction     = 1.0;
    est.source       = "exact";
    return est;
}

quadratic_suite gen_quadratic_suite(uint64_t seed, const quad_gen_options & opt) {
    if (opt.tasks < 1) fail_usage("quadratic suite needs at least one task");
    if (opt.layer_shapes.empty()) fail_usage("quadratic suite needs at least one layer");
    if (!(opt.radius > 0.0)) fail_usage("quadratic suite radius must be positive");

    rng r(seed);

    parameter_set proto;
    for (size_t l = 0; l < opt.layer_shapes.size(); ++l) {
        char name[32];
        std::snprintf(name, sizeof(name), "layer%02zu", l);
        proto.entries.emplace(name, make_tensor(opt.layer_shapes[l]));
    }
    const size_t m = proto.total_params();
    if (m == 0) fail_usage("quadratic suite with zero parameters");

    quadratic_suite suite;
    suite.theta0 = proto;
    for (auto & [name, t] : suite.theta0.entries) {
        (void) name;
        for (double & x : t.data) x = r.next_normal();
    }

    for (int task = 0; task < opt.tasks; ++task) {
        quadratic_task qt;

        // optimum uniform in the ball of `radius` around theta0
        std::vector<double> dir(m);
        double              norm2 = 0.0;
        for (double & x : dir) {
            x = r.next_normal();
            norm2 += x * x;
        }
        const double norm  = std::sqrt(norm2);
        const double rad   = opt.radius * std::pow(r.next_double(), 1.0 / static_cast<double>(m));
        const double scale = (norm > 0.0) ? rad / norm : 0.0;

        qt.optimum   = suite.theta0;
        size_t flat  = 0;
        for (auto & [name, t] : qt.optimum.entries) {
            (void) name;
            for (double & x : t.data) x += scale * dir[flat++];
        }

        qt.hessian_diag = proto;
        for (auto & [name, t] : qt.hessian_diag.entries) {
            (void) name;
            for (double & x : t.data) x = std::exp(opt.heterogeneity * r.next_normal());
        }
        qt.loss_floor = 0.05 * std::abs(r.next_normal());
        suite.tasks.push_back(std::move(qt));
    }
    return suite;
}

// --- MLP tasks ---------------------------------------------------------------

mlp_suite gen_mlp_tasks(uint64_t seed, int tasks, const mlp_arch & arch, int samples_per_task) {
    if (tasks < 1) fail_usage("MLP suite needs at least one task");
    if (arch.input < 1 || arch.hidden < 1 || arch.classes < 2) {
        fail_usage("MLP architecture must have positive dims and >= 2 classes");
    }
    if (samples_per_task < 2 * arch.classes) {
        fail_usage("too few samples per task for a train/test split");
    }

    rng r(seed);

    mlp_suite suite;
    suite.arch = arch;

    tensor w1 = make_tensor({static_cast<uint64_t>(arch.hidden), static_cast<uint64_t>(arch.input)});
    const double w1_scale = std::sqrt(2.0 / arch.input);
    for (double & x : w1.data) x = w1_scale * r.next_normal();
    suite.backbone0.entries.emplace("fc1.weight", std::move(w1));
    suite.backbone0.entries.emplace("fc1.bias", make_tensor({static_cast<uint64_t>(arch.hidden)}));

    // zero head: exactly uniform logits at the shared initialization
    suite.head0.entries.emplace("fc2.weight",
                                make_tensor({static_cast<uint64_t>(arch.classes), static_cast<uint64_t>(arch.hidden)}));
    suite.head0.entries.emplace("fc2.bias", make_tensor({static_cast<uint64_t>(arch.classes)}));

    const int n = samples_per_task;
    for (int task = 0; task < tasks; ++task) {
        Eigen::MatrixXd means(arch.classes, arch.input);
        for (int c = 0; c < arch.classes; ++c) {
            for (int j = 0; j < arch.input; ++j) means(c, j) = 3.0 * r.next_normal();
        }

        // balanced labels (counts within 1), then a seeded joint shuffle
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = i % arch.classes;

        Eigen::MatrixXd xs(n, arch.input);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < arch.input; ++j) {
                xs(i, j) = means(labels[i], j) + r.next_normal();
            }
        }
        const std::vector<size_t> perm = r.permutation(static_cast<size_t>(n));

        const int n_train = (n * 4) / 5;
        mlp_dataset data;
        data.train_x.resize(n_train, arch.input);
        data.test_x.resize(n - n_train, arch.input);
        for (int i = 0; i < n; ++i) {
            const size_t src = perm[static_cast<size_t>(i)];
            if (i < n_train) {
                data.train_x.row(i) = xs.row(static_cast<Eigen::Index>(src));
                data.train_y.push_back(labels[src]);
            } else {
                data.test_x.row(i - n_train) = xs.row(static_cast<Eigen::Index>(src));
                data.test_y.push_back(labels[src]);
            }
        }
        suite.tasks.push_back(std::move(data));
    }
    return suite;
}

mlp_arch infer_arch(const parameter_set & full_params) {
    const tensor & w1 = full_params.at("fc1.weight");
    const tensor & b1 = full_params.at("fc1.bias");
    const tensor & w2 = full_params.at("fc2.weight");
    const tensor & b2 = full_params.at("fc2.bias");
    if (w1.shape.size() != 2 || w2.shape.size() != 2 || b1.shape.size() != 1 || b2.shape.size() != 1) {
        fail_data("MLP parameter tensors have unexpected ranks");
    }
    mlp_arch arch;
    arch.hidden  = static_cast<int>(w1.shape[0]);
    arch.input   = static_cast<int>(w1.shape[1]);
    arch.classes = static_cast<int>(w2.shape[0]);
    if (w2.shape[1] != w1.shape[0] || b1.shape[0] != w1.shape[0] || b2.shape[0] != w2.shape[0]) {
        fail_data("MLP parameter tensor shapes are inconsistent");
    }
    return arch;
}

double mlp_loss_grad(const parameter_set & full_params, const mlp_arch & arch,
                     const Eigen::VectorXd & x, int label, parameter_set * grad) {
    if (label < 0 || label >= arch.classes) fail_data("MLP label out of range");
    if (x.size() != arch.input) fail_data("MLP input size mismatch");

    const auto w1 = mat_view(full_params.at("fc1.weight"));
    const auto b1 = vec_view(full_params.at("fc1.bias"));
    const auto w2 = mat_view(full_params.at("fc2.weight"));
    const auto b2 = vec_view(full_params.at("fc2.bias"));

    const Eigen::VectorXd z1 = w1 * x + b1;
    const Eigen::VectorXd a1 = z1.cwiseMax(0.0);
    const Eigen::VectorXd z2 = w2 * a1 + b2;

    const double zmax = z2.maxCoeff();
    const double lse  = zmax + std::log((z2.array() - zmax).exp().sum());
    const double loss = lse - z2(label);

    if (grad) {
        Eigen::VectorXd dz2 = (z2.array() - lse).exp();
        dz2(label) -= 1.0;

        Eigen::VectorXd dz1 = w2.transpose() * dz2;
        for (Eigen::Index i = 0; i < dz1.size(); ++i) {
            if (z1(i) <= 0.0) dz1(i) = 0.0;
        }

        auto accumulate_outer = [](tensor & t, const Eigen::VectorXd & rows, const Eigen::VectorXd & cols) {
            const Eigen::Index nc = cols.size();
            for (Eigen::Index i = 0; i < rows.size(); ++i) {
                double * row = t.data.data() + i * nc;
                for (Eigen::Index j = 0; j < nc; ++j) row[j] += rows(i) * cols(j);
            }
        };
        accumulate_outer(grad->at("fc2.weight"), dz2, a1);
        accumulate_outer(grad->at("fc1.weight"), dz1, x);
        tensor & gb2 = grad->at("fc2.bias");
        tensor & gb1 = grad->at("fc1.bias");
        for (Eigen::Index i = 0; i < dz2.size(); ++i) gb2.data[static_cast<size_t>(i)] += dz2(i);
        for (Eigen::Index i = 0; i < dz1.size(); ++i) gb1.data[static_cast<size_t>(i)] += dz1(i);
    }
    return loss;
}

double mlp_batch_loss(const parameter_set & full_params, const mlp_arch & arch,
                      const Eigen::MatrixXd & xs, const std::vector<int> & ys) {
    if (xs.rows() != static_cast<Eigen::Index>(ys.size()) || ys.empty()) {
        fail_data("MLP batch size mismatch");
    }
    double s = 0.0;
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
        s += mlp_loss_grad(full_params, arch, xs.row(i).transpose(), ys[static_cast<size_t>(i)], nullptr);
    }
    return s / static_cast<double>(xs.rows());
}

namespace {

parameter_set zeros_like(const parameter_set & proto) {
    parameter_set z = proto;
    for (auto & [name, t] : z.entries) {
        (void) name;
        std::fill(t.data.begin(), t.data.end(), 0.0);
    }
    return z;
}

// mean gradient over an index subset; returns mean loss
double mean_grad(const parameter_set & params, const mlp_arch & arch,
                 const Eigen::MatrixXd & xs, const std::vector<int> & ys,
                 const size_t * idx, size_t count, parameter_set & grad_out) {
    for (auto & [name, t] : grad_out.entries) {
        (void) name;
        std::fill(t.data.begin(), t.data.end(), 0.0);
    }
    double s = 0.0;
    for (size_t k = 0; k < count; ++k) {
        const Eigen::Index i = static_cast<Eigen::Index>(idx[k]);
        s += mlp_loss_grad(params, arch, xs.row(i).transpose(), ys[idx[k]], &grad_out);
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (auto & [name, t] : grad_out.entries) {
        (void) name;
        for (double & x : t.data) x *= inv;
    }
    return s * inv;
}

} // namespace

finetune_result finetune_mlp(const parameter_set & init_full, const mlp_arch & arch,
                             const mlp_dataset & data, const finetune_options & opt) {
    if (opt.steps < 1 || opt.batch_size < 1) fail_usage("fine-tune needs positive steps and batch size");
    if (!(opt.lr > 0.0)) fail_usage("fine-tune learning rate must be positive");
    const size_t n = data.train_y.size();
    if (n == 0 || data.train_x.rows() != static_cast<Eigen::Index>(n)) {
        fail_data("fine-tune: empty or inconsistent train split");
    }

    finetune_result res;
    res.params = init_full;

    parameter_set       grad = zeros_like(init_full);
    std::vector<size_t> all(n);
    for (size_t i = 0; i < n; ++i) all[i] = i;

    mean_grad(res.params, arch, data.train_x, data.train_y, all.data(), n, grad);
    res.initial_grad_norm = frobenius_norm(grad);

    rng r(opt.seed);
    int done = 0;
    while (done < opt.steps) {
        const std::vector<size_t> order = r.permutation(n);
        for (size_t start = 0; start < n && done < opt.steps; start += static_cast<size_t>(opt.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(opt.batch_size), n - start);
            const double loss  = mean_grad(res.params, arch, data.train_x, data.train_y,
                                           order.data() + start, count, grad);
            if (!std::isfinite(loss)) fail_numeric("fine-tune diverged: non-finite loss");
            for (auto & [name, t] : res.params.entries) {
                const tensor & g = grad.at(name);
                for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= opt.lr * g.data[i];
            }
            ++done;
        }
    }

    mean_grad(res.params, arch, data.train_x, data.train_y, all.data(), n, grad);
    res.final_grad_norm = frobenius_norm(grad);
    return res;
}

double evaluate_accuracy(const parameter_set & full_params, const mlp_arch & arch,
                         const Eigen::MatrixXd & xs, const std::vector<int> & ys) {
    if (xs.rows() != static_cast<Eigen::Index>(ys.size()) || ys.empty()) {
        fail_data("accuracy: batch size mismatch");
    }
    const auto w1 = mat_view(full_params.at("fc1.weight"));
    const auto b1 = vec_view(full_params.at("fc1.bias"));
    const auto w2 = mat_view(full_params.at("fc2.weight"));
    const auto b2 = vec_view(full_params.at("fc2.bias"));

    size_t hits = 0;
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
        const Eigen::VectorXd a1 = (w1 * xs.row(i).transpose() + b1).cwiseMax(0.0);
        const Eigen::VectorXd z2 = w2 * a1 + b2;
        Eigen::Index          best = 0;
        for (Eigen::Index c = 1; c < z2.size(); ++c) {
            if (z2(c) > z2(best)) best = c;  // ties keep the smaller class index
        }
        if (best == ys[static_cast<size_t>(i)]) ++hits;
    }
    (void) arch;
    return static_cast<double>(hits) / static_cast<double>(ys.size());
}

std::vector<parameter_set> per_sample_backbone_grads(const parameter_set & full_params,
                                                     const mlp_arch & arch,
                                                     const mlp_dataset & data) {
    std::vector<parameter_set> out;
    out.reserve(data.train_y.size());
    parameter_set grad = zeros_like(full_params);
    for (size_t i = 0; i < data.train_y.size(); ++i) {
        for (auto & [name, t] : grad.entries) {
            (void) name;
            std::fill(t.data.begin(), t.data.end(), 0.0);
        }
        mlp_loss_grad(full_params, arch, data.train_x.row(static_cast<Eigen::Index>(i)).transpose(),
                      data.train_y[i], &grad);
        parameter_set backbone;
        backbone.entries.emplace("fc1.weight", grad.at("fc1.weight"));
        backbone.entries.emplace("fc1.bias", grad.at("fc1.bias"));
        out.push_back(std::move(backbone));
    }
    return out;
}

std::vector<double> loss_path_scan(const parameter_set & backbone_a,
                                   const parameter_set & backbone_b,
                                   const parameter_set & head,
                                   const mlp_dataset & data, int points) {
    if (points < 2) fail_usage("loss path scan needs at least two points");
    require_aligned(backbone_a, backbone_b, "loss path scan");

    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(points));
    for (int j = 0; j < points; ++j) {
        const double  t     = static_cast<double>(j) / static_cast<double>(points - 1);
        parameter_set mixed = backbone_a;
        for (auto & [name, tn] : mixed.entries) {
            const tensor & other = backbone_b.at(name);
            for (size_t i = 0; i < tn.data.size(); ++i) {
                tn.data[i] = (1.0 - t) * tn.data[i] + t * other.data[i];
            }
        }
        const parameter_set full = merge_disjoint(mixed, head);
        const mlp_arch      arch = infer_arch(full);
        losses.push_back(mlp_batch_loss(full, arch, data.train_x, data.train_y));
    }
    return losses;
}

void write_mlp_dataset(const mlp_dataset & data, int classes, const std::string & path) {
    auto pack_matrix = [](const Eigen::MatrixXd & m) {
        tensor t = make_tensor({static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())});
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                t.data[static_cast<size_t>(i * m.cols() + j)] = m(i, j);
            }
        }
        return t;
    };
    auto pack_labels = [](const std::vector<int> & ys) {
        tensor t = make_tensor({static_cast<uint64_t>(ys.size())});
        for (size_t i = 0; i < ys.size(); ++i) t.data[i] = static_cast<double>(ys[i]);
        return t;
    };
    parameter_set container;
    container.entries.emplace("test_x", pack_matrix(data.test_x));
    container.entries.emplace("test_y", pack_labels(data.test_y));
    container.entries.emplace("train_x", pack_matrix(data.train_x));
    container.entries.emplace("train_y", pack_labels(data.train_y));
    write_checkpoint(container, path);

    metadata meta = {
        {"format", "epimerge-dataset"},
        {"classes", std::to_string(classes)},
        {"input", std::to_string(data.train_x.cols())},
        {"train_count", std::to_string(data.train_y.size())},
        {"test_count", std::to_string(data.test_y.size())},
    };
    write_metadata(meta, path + ".meta");
}

mlp_dataset read_mlp_dataset(const std::string & path, int * classes_out) {
    const parameter_set container = read_checkpoint(path);
    const metadata      meta      = read_metadata(path + ".meta");
    const std::string * fmt       = find_meta(meta, "format");
    if (!fmt || *fmt != "epimerge-dataset") {
        fail_data(path + ": sidecar does not describe a dataset file");
    }
    const std::string * cls = find_meta(meta, "classes");
    if (!cls) fail_data(path + ": missing 'classes' in dataset sidecar");
    const int classes = std::stoi(*cls);
    if (classes < 2) fail_data(path + ": dataset needs at least two classes");

    auto unpack_matrix = [&](const char * name) {
        const tensor & t = container.at(name);
        if (t.shape.size() != 2) fail_data(path + ": '" + name + "' is not 2-D");
        Eigen::MatrixXd m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                m(i, j) = t.data[static_cast<size_t>(i * m.cols() + j)];
            }
        }
        return m;
    };
    auto unpack_labels = [&](const char * name, size_t expect) {
        const tensor &   t = container.at(name);
        std::vector<int> ys(t.data.size());
        for (size_t i = 0; i < t.data.size(); ++i) {
            const double v = t.data[i];
            if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(classes)) {
                fail_data(path + ": label out of range in '" + std::string(name) + "'");
            }
            ys[i] = static_cast<int>(v);
        }
        if (ys.size() != expect) fail_data(path + ": label count mismatch in '" + std::string(name) + "'");
        return ys;
    };

    mlp_dataset data;
    data.train_x = unpack_matrix("train_x");
    data.test_x  = unpack_matrix("test_x");
    data.train_y = unpack_labels("train_y", static_cast<size_t>(data.train_x.rows()));
    data.test_y  = unpack_labels("test_y", static_cast<size_t>(data.test_x.rows()));
    if (data.train_x.cols() != data.test_x.cols()) {
        fail_data(path + ": train/test feature dims differ");
    }
    if (classes_out) *classes_out = classes;
    return data;
}

} // namespace epimerge
