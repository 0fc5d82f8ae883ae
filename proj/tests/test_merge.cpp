#include "doctest.h"

#include "core/errors.hpp"
#include "core/merge.hpp"
#include "support.hpp"

using namespace epimerge;

namespace {

struct fixture {
    parameter_set                   base;
    std::vector<parameter_set>      models;
    std::vector<curvature_estimate> fishers;

    std::vector<const parameter_set *> model_ptrs() const {
        std::vector<const parameter_set *> out;
        for (const auto & m : models) out.push_back(&m);
        return out;
    }
    std::vector<const curvature_estimate *> fisher_ptrs() const {
        std::vector<const curvature_estimate *> out;
        for (const auto & f : fishers) out.push_back(&f);
        return out;
    }
};

fixture make_fixture(uint64_t seed, int T, bool unit_fisher = false) {
    epimerge::rng r(seed);
    const std::vector<std::pair<std::string, std::vector<uint64_t>>> spec = {
        {"w1", {8, 8}}, {"w2", {8, 12}}, {"b", {5}}};

    fixture f;
    f.base = testsup::random_params(r, spec);
    for (int t = 0; t < T; ++t) {
        f.models.push_back(testsup::random_params(r, spec));
        curvature_estimate est;
        est.values = testsup::random_params(r, spec);
        for (auto & [name, tn] : est.values.entries) {
            (void) name;
            for (double & x : tn.data) x = unit_fisher ? 1.0 : x * x + 0.01;
        }
        est.sample_count = 100;
        est.source       = "stream";
        f.fishers.push_back(std::move(est));
    }
    return f;
}

std::vector<double> random_weights(epimerge::rng & r, size_t T) {
    std::vector<double> w(T);
    double              sum = 0.0;
    for (double & x : w) {
        x = 0.1 + r.next_double();
        sum += x;
    }
    for (double & x : w) x /= sum;
    return w;
}

} // namespace

TEST_CASE("arithmetic mean matches the direct formula") {
    const fixture f = make_fixture(401, 3);
    merge_config  cfg;
    cfg.method = merge_method::am;

    const merge_outcome out = run_merge(cfg, nullptr, f.model_ptrs(), {}, nullptr);
    for (const auto & [name, t] : out.merged.entries) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            double expect = 0.0;
            for (const auto & m : f.models) expect += m.at(name).data[i] / 3.0;
            CHECK(t.data[i] == doctest::Approx(expect).epsilon(1e-14));
        }
    }
}

TEST_CASE("task arithmetic applies the scaled weighted delta sum") {
    const fixture f = make_fixture(403, 3);
    epimerge::rng r(404);
    merge_config  cfg;
    cfg.method  = merge_method::ta;
    cfg.weights = random_weights(r, 3);
    cfg.alpha   = 0.4;

    const merge_outcome out = run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr);
    for (const auto & [name, t] : out.merged.entries) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            double expect = f.base.at(name).data[i];
            for (size_t k = 0; k < 3; ++k) {
                expect += 0.4 * 3.0 * cfg.weights[k] *
                          (f.models[k].at(name).data[i] - f.base.at(name).data[i]);
            }
            CHECK(t.data[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("weight and option validation") {
    const fixture f = make_fixture(407, 2);
    merge_config  cfg;
    cfg.method = merge_method::ta;

    cfg.weights = {0.5};
    CHECK_THROWS_AS(run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr), error);
    cfg.weights = {0.7, 0.4};
    CHECK_THROWS_AS(run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr), error);
    cfg.weights = {1.3, -0.3};
    CHECK_THROWS_AS(run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr), error);
    cfg.weights.clear();
    cfg.alpha = -0.5;
    CHECK_THROWS_AS(run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr), error);

    cfg.alpha = 0.0;
    const merge_outcome out = run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr);
    CHECK(out.alpha_used == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));

    // missing base / missing fishers are usage errors
    CHECK_THROWS_AS(run_merge(cfg, nullptr, f.model_ptrs(), {}, nullptr), error);
    merge_config cfg2;
    cfg2.method = merge_method::epimer_mean;
    CHECK_THROWS_AS(run_merge(cfg2, &f.base, f.model_ptrs(), {}, nullptr), error);
}

TEST_CASE("trim-elect-mean against a hand-computed instance") {
    // one 2x2 matrix + one aux scalar-ish vector, two tasks, uniform weights
    auto make = [](std::vector<double> w, std::vector<double> b) {
        parameter_set ps;
        tensor        tw;
        tw.stored = dtype::f64;
        tw.shape  = {2, 2};
        tw.data   = std::move(w);
        tensor tb;
        tb.stored = dtype::f64;
        tb.shape  = {1};
        tb.data   = std::move(b);
        ps.entries.emplace("w", std::move(tw));
        ps.entries.emplace("z", std::move(tb));
        return ps;
    };
    const parameter_set base = make({0, 0, 0, 0}, {0});
    // deltas (flattened w then z):
    //   task 0: [ 5, -1, 0.5, 4 | 0.2 ]
    //   task 1: [-6,  2, 0.1, 3 | 0.1 ]
    const parameter_set m0 = make({5, -1, 0.5, 4}, {0.2});
    const parameter_set m1 = make({-6, 2, 0.1, 3}, {0.1});

    merge_config cfg;
    cfg.method             = merge_method::ties;
    cfg.alpha              = 1.0;
    cfg.ties_keep_fraction = 0.4;  // ceil(0.4 * 5) = 2 entries per task

    // survivors task 0: |5|, |4|; task 1: |-6|, |3|
    // coord 0: signs {+5, -6} -> tie on count -> positive elected -> mean(5) = 5
    // coord 3: signs {+4, +3} -> mean(4, 3) = 3.5
    // all other coords: no survivors -> 0
    const merge_outcome out = run_merge(cfg, &base, {&m0, &m1}, {}, nullptr);
    const auto & w = out.merged.at("w").data;
    CHECK(w[0] == doctest::Approx(5.0).epsilon(1e-14));
    CHECK(w[1] == 0.0);
    CHECK(w[2] == 0.0);
    CHECK(w[3] == doctest::Approx(3.5).epsilon(1e-14));
    CHECK(out.merged.at("z").data[0] == 0.0);
}

TEST_CASE("trim keeps at least one entry per task") {
    const fixture f = make_fixture(409, 2);
    merge_config  cfg;
    cfg.method             = merge_method::ties;
    cfg.ties_keep_fraction = 1e-9;
    cfg.alpha              = 1.0;

    const merge_outcome out   = run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr);
    const task_vector   delta = compute_task_vector(out.merged, f.base);
    CHECK(frobenius_norm(delta) > 0.0);
}

TEST_CASE("fisher-weighted averaging matches the per-coordinate quotient") {
    const fixture f = make_fixture(411, 3);
    epimerge::rng r(412);
    merge_config  cfg;
    cfg.method  = merge_method::fisher_avg;
    cfg.weights = random_weights(r, 3);

    const merge_outcome out = run_merge(cfg, nullptr, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    for (const auto & [name, t] : out.merged.entries) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            double num = 0.0, den = 0.0;
            for (size_t k = 0; k < 3; ++k) {
                const double v = f.fishers[k].values.at(name).data[i];
                num += cfg.weights[k] * v * f.models[k].at(name).data[i];
                den += cfg.weights[k] * v;
            }
            CHECK(t.data[i] == doctest::Approx(num / den).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero curvature mass falls back to the weighted mean") {
    fixture f = make_fixture(413, 2);
    for (auto & est : f.fishers) {
        est.values.at("b").data[2] = 0.0;  // kill one coordinate everywhere
    }
    merge_config cfg;
    cfg.method = merge_method::fisher_avg;

    const merge_outcome out    = run_merge(cfg, nullptr, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    const double        expect = 0.5 * (f.models[0].at("b").data[2] + f.models[1].at("b").data[2]);
    CHECK(out.merged.at("b").data[2] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("identity projected curvature collapses the curvature merge onto the coefficient sum") {
    // unit Fisher diagonals make S^T diag(1) S the identity
    const fixture f = make_fixture(417, 3, /*unit_fisher=*/true);
    epimerge::rng r(418);
    merge_config  cfg;
    cfg.method  = merge_method::epimer_sum;
    cfg.weights = random_weights(r, 3);
    cfg.alpha   = 0.35;
    cfg.rank    = 2;

    const merge_outcome curv = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    cfg.method              = merge_method::tsvm;
    const merge_outcome sum = run_merge(cfg, &f.base, f.model_ptrs(), {}, nullptr);

    CHECK(testsup::max_abs_diff(curv.merged, sum.merged) <= 1e-12);
}

TEST_CASE("sum aggregation is alpha*T times the mean aggregation") {
    const fixture f = make_fixture(419, 4);
    epimerge::rng r(420);
    merge_config  cfg;
    cfg.method  = merge_method::epimer_mean;
    cfg.weights = random_weights(r, 4);
    cfg.alpha   = 0.7;
    cfg.rank    = 2;

    const merge_outcome mean = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    cfg.method               = merge_method::epimer_sum;
    const merge_outcome sum  = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), nullptr);

    REQUIRE(mean.has_coefficients);
    REQUIRE(sum.has_coefficients);
    const double factor = 0.7 * 4.0;
    for (size_t l = 0; l < mean.coefficients.layers.size(); ++l) {
        const Eigen::VectorXd diff =
            sum.coefficients.layers[l] - factor * mean.coefficients.layers[l];
        CHECK(diff.cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("a single task at full rank is reproduced by the mean merge") {
    epimerge::rng r(421);
    const std::vector<std::pair<std::string, std::vector<uint64_t>>> spec = {
        {"w", {6, 9}}, {"b", {4}}};
    const parameter_set base  = testsup::random_params(r, spec);
    const parameter_set model = testsup::random_params(r, spec);

    curvature_estimate est;
    est.values = testsup::random_params(r, spec);
    for (auto & [name, tn] : est.values.entries) {
        (void) name;
        for (double & x : tn.data) x = x * x + 0.1;
    }

    merge_config cfg;
    cfg.method = merge_method::epimer_mean;
    cfg.rank   = 6;  // = min dim: captures any delta exactly
    cfg.alpha  = 1.0;

    const merge_outcome out = run_merge(cfg, &base, {&model}, {&est}, nullptr);
    CHECK(testsup::max_abs_diff(out.merged, model) <= 1e-10);
}

TEST_CASE("task permutation leaves every method unchanged") {
    const fixture f = make_fixture(431, 3);
    epimerge::rng r(432);
    const std::vector<double> w    = random_weights(r, 3);
    const std::vector<size_t> perm = {2, 0, 1};

    std::vector<const parameter_set *>      pm;
    std::vector<const curvature_estimate *> pf;
    std::vector<double>                     pw;
    for (size_t i : perm) {
        pm.push_back(&f.models[i]);
        pf.push_back(&f.fishers[i]);
        pw.push_back(w[i]);
    }

    for (merge_method m : {merge_method::am, merge_method::ta, merge_method::ties,
                            merge_method::fisher_avg, merge_method::tsvm,
                            merge_method::epimer_mean, merge_method::epimer_sum}) {
        merge_config cfg;
        cfg.method  = m;
        cfg.weights = w;
        cfg.alpha   = 0.5;
        cfg.rank    = 2;
        const parameter_set * base = method_uses_base(m) ? &f.base : nullptr;
        const auto fishers         = method_uses_fishers(m) ? f.fisher_ptrs()
                                                            : std::vector<const curvature_estimate *>{};
        std::vector<const curvature_estimate *> fishers_p;
        if (method_uses_fishers(m)) fishers_p = pf;

        merge_config cfg_p = cfg;
        cfg_p.weights      = pw;

        const merge_outcome a = run_merge(cfg, base, f.model_ptrs(), fishers, nullptr);
        const merge_outcome b = run_merge(cfg_p, base, pm, fishers_p, nullptr);
        CHECK(testsup::max_abs_diff(a.merged, b.merged) <= 1e-12);
    }
}

TEST_CASE("passing a prebuilt basis reproduces the on-the-fly result") {
    const fixture f = make_fixture(433, 3);
    merge_config  cfg;
    cfg.method = merge_method::epimer_sum;
    cfg.rank   = 2;

    std::vector<task_vector> deltas;
    for (const auto & m : f.models) deltas.push_back(compute_task_vector(m, f.base));
    std::vector<const task_vector *> dptrs;
    for (const auto & d : deltas) dptrs.push_back(&d);
    const tagged_basis basis = build_tagged_basis(dptrs, 2);

    const merge_outcome a = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    const merge_outcome b = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), &basis);
    CHECK(testsup::max_abs_diff(a.merged, b.merged) == 0.0);
}

TEST_CASE("merge description text records the solve jitter per layer") {
    const fixture f = make_fixture(437, 2);
    merge_config  cfg;
    cfg.method = merge_method::epimer_mean;
    cfg.rank   = 2;

    const merge_outcome out  = run_merge(cfg, &f.base, f.model_ptrs(), f.fisher_ptrs(), nullptr);
    const std::string   text = merge_sidecar_text(cfg, out);
    CHECK(text.find("method=epimer-mean\n") != std::string::npos);
    CHECK(text.find("tasks=2\n") != std::string::npos);
    CHECK(text.find("jitter=") != std::string::npos);
    CHECK(text.find("eps_used.w1=") != std::string::npos);
    CHECK(text.find("eps_used.w2=") != std::string::npos);
    CHECK(text.find("rank=2\n") != std::string::npos);
}

TEST_CASE("misaligned models are refused with a data error") {
    const fixture f = make_fixture(439, 2);
    epimerge::rng r(440);
    parameter_set odd = testsup::random_params(r, {{"w1", {8, 8}}, {"w2", {8, 12}}, {"b", {6}}});

    merge_config cfg;
    cfg.method = merge_method::am;
    try {
        run_merge(cfg, nullptr, {&f.models[0], &odd}, {}, nullptr);
        FAIL_CHECK("expected a data error");
    } catch (const error & e) {
        CHECK(e.code() == errc::data);
    }
}
