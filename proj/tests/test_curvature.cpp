#include "doctest.h"

#include <set>

#include "core/checkpoint.hpp"
#include "core/curvature.hpp"
#include "core/errors.hpp"
#include "support.hpp"

using namespace epimerge;

namespace {

std::vector<parameter_set> random_stream(uint64_t seed, size_t n) {
    epimerge::rng              r(seed);
    std::vector<parameter_set> out;
    for (size_t i = 0; i < n; ++i) {
        out.push_back(testsup::random_params(r, {{"w", {3, 4}}, {"b", {3}}}));
    }
    return out;
}

} // namespace

TEST_CASE("fisher accumulation matches a reversed-order two-pass oracle") {
    const std::vector<parameter_set> grads = random_stream(301, 17);
    const curvature_estimate         est   = accumulate_fisher(grads);

    CHECK(est.sample_count == 17);
    for (const auto & [name, t] : est.values.entries) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            // reversed order, divide-then-add: independent arithmetic path
            double oracle = 0.0;
            for (size_t s = grads.size(); s-- > 0;) {
                const double g = grads[s].at(name).data[i];
                oracle += g * g / static_cast<double>(grads.size());
            }
            CHECK(std::abs(t.data[i] - oracle) <= 1e-12 * std::max(1.0, std::abs(oracle)));
            CHECK(t.data[i] >= 0.0);
        }
    }
}

TEST_CASE("subsampling is a deterministic seeded prefix") {
    const std::vector<size_t> a = subsample_indices(40, 0.25, 7);
    const std::vector<size_t> b = subsample_indices(40, 0.25, 7);
    const std::vector<size_t> c = subsample_indices(40, 0.25, 8);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(a.size() == 10);

    std::set<size_t> uniq(a.begin(), a.end());
    CHECK(uniq.size() == a.size());
    for (size_t i : a) CHECK(i < 40);

    CHECK(subsample_indices(7, 0.5, 1).size() == 3);   // floor
    CHECK(subsample_indices(9, 0.001, 1).size() == 1); // never empty
    CHECK(subsample_indices(5, 1.0, 1).size() == 5);

    CHECK_THROWS_AS(subsample_indices(0, 0.5, 1), error);
    CHECK_THROWS_AS(subsample_indices(5, 0.0, 1), error);
    CHECK_THROWS_AS(subsample_indices(5, 1.5, 1), error);
}

TEST_CASE("gradient streams round trip with stream order intact") {
    testsup::temp_dir dir("stream");
    // 12 samples so '#10' vs '#2' exercises numeric suffix ordering
    const std::vector<parameter_set> grads = random_stream(307, 12);
    write_grad_stream(grads, dir.file("g.epmc"));
    const std::vector<parameter_set> back = read_grad_stream(dir.file("g.epmc"));

    REQUIRE(back.size() == grads.size());
    for (size_t i = 0; i < grads.size(); ++i) {
        CHECK(testsup::max_abs_diff(back[i], grads[i]) == 0.0);
    }
}

TEST_CASE("gradient stream reader rejects gaps") {
    testsup::temp_dir dir("streambad");
    std::vector<parameter_set> grads = random_stream(311, 3);
    write_grad_stream(grads, dir.file("g.epmc"));

    parameter_set container = read_checkpoint(dir.file("g.epmc"));
    // drop sample 1 entirely -> indices 0 and 2 remain
    std::erase_if(container.entries, [](const auto & kv) {
        return kv.first.ends_with("#1");
    });
    write_checkpoint(container, dir.file("g.epmc"));

    CHECK_THROWS_WITH_AS(read_grad_stream(dir.file("g.epmc")), doctest::Contains("missing sample"), error);
}

TEST_CASE("fisher files carry their sidecar and refuse negatives") {
    testsup::temp_dir  dir("fish");
    curvature_estimate est = accumulate_fisher(random_stream(313, 9));
    est.fraction           = 0.25;
    write_fisher(est, dir.file("f.epmc"));

    const curvature_estimate back = read_fisher(dir.file("f.epmc"));
    CHECK(back.sample_count == 9);
    CHECK(back.fraction == 0.25);
    CHECK(testsup::max_abs_diff(back.values, est.values) == 0.0);

    parameter_set tampered = back.values;
    tampered.at("b").data[0] = -1e-9;
    write_checkpoint(tampered, dir.file("f.epmc"));
    CHECK_THROWS_WITH_AS(read_fisher(dir.file("f.epmc")), doctest::Contains("negative"), error);
}

TEST_CASE("stream subsampling composes with accumulation") {
    testsup::temp_dir dir("fsub");
    const std::vector<parameter_set> grads = random_stream(317, 20);
    write_grad_stream(grads, dir.file("g.epmc"));

    const curvature_estimate est = fisher_from_stream_file(dir.file("g.epmc"), 0.5, 42);
    CHECK(est.sample_count == 10);
    CHECK(est.fraction == 0.5);

    // oracle: same subsample rule applied by hand
    const std::vector<size_t>  idx = subsample_indices(20, 0.5, 42);
    std::vector<parameter_set> picked;
    for (size_t i : idx) picked.push_back(grads[i]);
    const curvature_estimate oracle = accumulate_fisher(picked);
    CHECK(testsup::max_abs_diff(est.values, oracle.values) == 0.0);
}

TEST_CASE("ensure_psd shifts the diagonal exactly") {
    epimerge::rng   r(331);
    Eigen::MatrixXd h(3, 3);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) h(i, j) = r.next_normal();
    }
    const Eigen::MatrixXd out = ensure_psd(h, 0.5);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            CHECK(out(i, j) == (i == j ? h(i, j) + 0.5 : h(i, j)));
        }
    }
    CHECK_THROWS_AS(ensure_psd(h, -1.0), error);
}

TEST_CASE("trace normalization scales to trace = dimension") {
    Eigen::MatrixXd h(2, 2);
    h << 3.0, 1.0, 1.0, 5.0;
    const Eigen::MatrixXd out = trace_normalize(h);
    CHECK(out.trace() == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(out(0, 1) == doctest::Approx(1.0 * 2.0 / 8.0).epsilon(1e-15));

    CHECK_THROWS_AS(trace_normalize(Eigen::MatrixXd::Zero(2, 2)), error);
}
