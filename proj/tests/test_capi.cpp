#include "doctest.h"

#include <cstring>

#include "core/checkpoint.hpp"
#include "core/curvature.hpp"
#include "core/merge.hpp"
#include "epimerge.h"
#include "json.hpp"
#include "support.hpp"

using epimerge::parameter_set;

namespace {

parameter_set sample_params(uint64_t seed) {
    epimerge::rng r(seed);
    return testsup::random_params(r, {{"fc1.weight", {6, 8}}, {"fc1.bias", {6}}});
}

struct handle_set {
    epm_params *              base = nullptr;
    std::vector<epm_params *> models;
    std::vector<epm_fisher *> fishers;

    ~handle_set() {
        epm_params_free(base);
        for (epm_params * m : models) epm_params_free(m);
        for (epm_fisher * f : fishers) epm_fisher_free(f);
    }
};

// materialize base/models/fishers on disk and load them through the C surface
void load_handles(const testsup::temp_dir & dir, uint64_t seed, int T, handle_set & hs) {
    epimerge::write_checkpoint(sample_params(seed), dir.file("base.epmc"));
    REQUIRE(epm_params_read(dir.file("base.epmc").c_str(), &hs.base) == EPM_OK);
    for (int t = 0; t < T; ++t) {
        const std::string mp = dir.file("m" + std::to_string(t) + ".epmc");
        epimerge::write_checkpoint(sample_params(seed + 10 + static_cast<uint64_t>(t)), mp);
        epm_params * h = nullptr;
        REQUIRE(epm_params_read(mp.c_str(), &h) == EPM_OK);
        hs.models.push_back(h);

        epimerge::curvature_estimate est;
        est.values = sample_params(seed + 50 + static_cast<uint64_t>(t));
        for (auto & [name, tn] : est.values.entries) {
            (void) name;
            for (double & x : tn.data) x = x * x + 0.05;
        }
        est.sample_count  = 8;
        const std::string fp = dir.file("f" + std::to_string(t) + ".epmc");
        epimerge::write_fisher(est, fp);
        epm_fisher * fh = nullptr;
        REQUIRE(epm_fisher_load(fp.c_str(), &fh) == EPM_OK);
        hs.fishers.push_back(fh);
    }
}

} // namespace

TEST_CASE("parameter handles round-trip through the C surface") {
    testsup::temp_dir   dir("capi-params");
    const parameter_set original = sample_params(701);
    epimerge::write_checkpoint(original, dir.file("p.epmc"));

    epm_params * h = nullptr;
    REQUIRE(epm_params_read(dir.file("p.epmc").c_str(), &h) == EPM_OK);
    CHECK(epm_params_count(h) == 2);
    CHECK(std::strcmp(epm_params_name(h, 0), "fc1.bias") == 0);
    CHECK(std::strcmp(epm_params_name(h, 1), "fc1.weight") == 0);
    CHECK(epm_params_name(h, 2) == nullptr);

    uint64_t dims[4];
    size_t   ndim = 0;
    REQUIRE(epm_params_dims(h, "fc1.weight", dims, 4, &ndim) == EPM_OK);
    CHECK(ndim == 2);
    CHECK(dims[0] == 6);
    CHECK(dims[1] == 8);
    CHECK(epm_params_dims(h, "fc1.weight", dims, 1, &ndim) == EPM_ERR_USAGE);
    CHECK(epm_params_dims(h, "absent", dims, 4, &ndim) == EPM_ERR_DATA);

    const double * values = nullptr;
    size_t         count  = 0;
    REQUIRE(epm_params_values(h, "fc1.bias", &values, &count) == EPM_OK);
    REQUIRE(count == 6);
    for (size_t i = 0; i < 6; ++i) CHECK(values[i] == original.at("fc1.bias").data[i]);

    epm_params * copy = nullptr;
    REQUIRE(epm_params_clone(h, &copy) == EPM_OK);
    REQUIRE(epm_params_write(copy, dir.file("q.epmc").c_str()) == EPM_OK);
    CHECK(testsup::slurp(dir.file("p.epmc")) == testsup::slurp(dir.file("q.epmc")));

    epm_params * delta = nullptr;
    REQUIRE(epm_task_vector(h, copy, &delta) == EPM_OK);
    const double * dv = nullptr;
    REQUIRE(epm_params_values(delta, "fc1.bias", &dv, &count) == EPM_OK);
    for (size_t i = 0; i < count; ++i) CHECK(dv[i] == 0.0);

    epm_params_free(delta);
    epm_params_free(copy);
    epm_params_free(h);
}

TEST_CASE("null arguments and missing files map to statuses") {
    epm_params * h = nullptr;
    CHECK(epm_params_read(nullptr, &h) == EPM_ERR_USAGE);
    CHECK(std::strlen(epm_last_error()) > 0);
    CHECK(epm_params_read("/nonexistent/x.epmc", &h) == EPM_ERR_DATA);
    CHECK(epm_params_read("/nonexistent/x.epmc", nullptr) == EPM_ERR_USAGE);

    epm_basis * b = nullptr;
    CHECK(epm_basis_build(nullptr, nullptr, 0, 2, &b) == EPM_ERR_USAGE);
    epm_fisher * f = nullptr;
    CHECK(epm_fisher_from_stream(nullptr, 1.0, 1, &f) == EPM_ERR_USAGE);
    CHECK(epm_diagnose(nullptr, nullptr, 0, nullptr, nullptr, nullptr, 0.0, 0, 0.0, nullptr) ==
          EPM_ERR_USAGE);

    // frees tolerate NULL
    epm_params_free(nullptr);
    epm_basis_free(nullptr);
    epm_fisher_free(nullptr);
    epm_mlp_free(nullptr);
    epm_string_free(nullptr);
    CHECK(epm_params_count(nullptr) == 0);
    CHECK(epm_basis_layer_name(nullptr, 0) == nullptr);
}

TEST_CASE("basis handles expose structure and survive save/load") {
    testsup::temp_dir dir("capi-basis");
    handle_set        hs;
    load_handles(dir, 703, 2, hs);

    epm_basis * basis = nullptr;
    REQUIRE(epm_basis_build(hs.base, hs.models.data(), 2, 3, &basis) == EPM_OK);
    CHECK(epm_basis_rank(basis) == 3);
    CHECK(epm_basis_task_count(basis) == 2);
    CHECK(epm_basis_layer_count(basis) == 1);
    CHECK(std::strcmp(epm_basis_layer_name(basis, 0), "fc1.weight") == 0);
    CHECK(epm_basis_layer_name(basis, 1) == nullptr);

    REQUIRE(epm_basis_save(basis, dir.file("b.epmc").c_str()) == EPM_OK);
    epm_basis * back = nullptr;
    REQUIRE(epm_basis_load(dir.file("b.epmc").c_str(), &back) == EPM_OK);
    CHECK(epm_basis_rank(back) == 3);
    epm_basis_free(back);

    // the guard refuses ranks past min(dims)/T with a usage status
    epm_basis * too_big = nullptr;
    CHECK(epm_basis_build(hs.base, hs.models.data(), 2, 4, &too_big) == EPM_ERR_USAGE);
    CHECK(std::string(epm_last_error()).find("fc1.weight") != std::string::npos);
    epm_basis_free(basis);
}

TEST_CASE("merging through the C surface matches the library") {
    testsup::temp_dir dir("capi-merge");
    handle_set        hs;
    load_handles(dir, 707, 3, hs);

    epm_merge_options opt{};
    opt.method = "epimer-sum";
    opt.rank   = 2;
    opt.alpha  = 0.4;
    opt.jitter = -1.0;  // sentinel: default 1e-8

    epm_params * merged  = nullptr;
    char *       sidecar = nullptr;
    REQUIRE(epm_merge(&opt, hs.base, hs.models.data(), 3, hs.fishers.data(), nullptr, &merged,
                      &sidecar) == EPM_OK);
    REQUIRE(sidecar != nullptr);
    CHECK(std::string(sidecar).find("method=epimer-sum\n") != std::string::npos);

    // same computation straight through the core
    epimerge::merge_config cfg;
    cfg.method = epimerge::merge_method::epimer_sum;
    cfg.rank   = 2;
    cfg.alpha  = 0.4;
    parameter_set base_v = sample_params(707);
    std::vector<parameter_set> model_v;
    std::vector<epimerge::curvature_estimate> fisher_v;
    for (int t = 0; t < 3; ++t) {
        model_v.push_back(sample_params(707 + 10 + static_cast<uint64_t>(t)));
        epimerge::curvature_estimate est;
        est.values = sample_params(707 + 50 + static_cast<uint64_t>(t));
        for (auto & [name, tn] : est.values.entries) {
            (void) name;
            for (double & x : tn.data) x = x * x + 0.05;
        }
        fisher_v.push_back(std::move(est));
    }
    std::vector<const parameter_set *>                 mp;
    std::vector<const epimerge::curvature_estimate *> fp;
    for (auto & m : model_v) mp.push_back(&m);
    for (auto & f : fisher_v) fp.push_back(&f);
    const epimerge::merge_outcome expect = run_merge(cfg, &base_v, mp, fp, nullptr);

    const double * values = nullptr;
    size_t         count  = 0;
    REQUIRE(epm_params_values(merged, "fc1.weight", &values, &count) == EPM_OK);
    const auto & ev = expect.merged.at("fc1.weight").data;
    REQUIRE(count == ev.size());
    for (size_t i = 0; i < count; ++i) CHECK(values[i] == ev[i]);

    // curvature methods without fishers are a usage error
    epm_params * bad = nullptr;
    CHECK(epm_merge(&opt, hs.base, hs.models.data(), 3, nullptr, nullptr, &bad, nullptr) ==
          EPM_ERR_USAGE);
    opt.method = "no-such-method";
    CHECK(epm_merge(&opt, hs.base, hs.models.data(), 3, hs.fishers.data(), nullptr, &bad,
                    nullptr) == EPM_ERR_USAGE);

    epm_string_free(sidecar);
    epm_params_free(merged);
}

TEST_CASE("diagnose emits parseable JSON with the identity intact") {
    testsup::temp_dir dir("capi-diag");
    handle_set        hs;
    load_handles(dir, 711, 3, hs);

    epm_basis * basis = nullptr;
    REQUIRE(epm_basis_build(hs.base, hs.models.data(), 3, 2, &basis) == EPM_OK);

    char * json = nullptr;
    REQUIRE(epm_diagnose(hs.base, hs.models.data(), 3, hs.fishers.data(), basis, nullptr, 0.0, 0,
                         0.0, &json) == EPM_OK);
    REQUIRE(json != nullptr);
    const nlohmann::json rep = nlohmann::json::parse(json);
    const double eta = rep.at("eta").get<double>();
    const double adv = rep.at("advantage").get<double>();
    CHECK(eta >= -1e-12);
    CHECK(eta == doctest::Approx(adv).epsilon(1e-8));
    epm_string_free(json);
    epm_basis_free(basis);
}

TEST_CASE("the MLP task surface drives the full loop") {
    testsup::temp_dir dir("capi-mlp");

    epm_mlp_suite * suite = nullptr;
    REQUIRE(epm_mlp_generate(3, 2, 8, 8, 3, 60, &suite) == EPM_OK);
    CHECK(epm_mlp_task_count(suite) == 2);

    epm_params *base_bb = nullptr, *base_head = nullptr;
    REQUIRE(epm_mlp_base_backbone(suite, &base_bb) == EPM_OK);
    REQUIRE(epm_mlp_base_head(suite, &base_head) == EPM_OK);
    CHECK(epm_params_count(base_bb) == 2);
    CHECK(epm_params_count(base_head) == 2);

    epm_params *bb0 = nullptr, *hd0 = nullptr, *bb0_again = nullptr, *hd0_again = nullptr;
    double      g0 = 0.0, g1 = 0.0, g0b = 0.0, g1b = 0.0;
    REQUIRE(epm_mlp_finetune(suite, 0, 120, 0.05, 16, 9, &bb0, &hd0, &g0, &g1) == EPM_OK);
    REQUIRE(epm_mlp_finetune(suite, 0, 120, 0.05, 16, 9, &bb0_again, &hd0_again, &g0b, &g1b) ==
            EPM_OK);
    CHECK(g0 == g0b);
    CHECK(g1 == g1b);
    CHECK(g1 < g0);
    const double *va = nullptr, *vb = nullptr;
    size_t        ca = 0, cb = 0;
    REQUIRE(epm_params_values(bb0, "fc1.weight", &va, &ca) == EPM_OK);
    REQUIRE(epm_params_values(bb0_again, "fc1.weight", &vb, &cb) == EPM_OK);
    REQUIRE(ca == cb);
    for (size_t i = 0; i < ca; ++i) CHECK(va[i] == vb[i]);

    const std::string ds = dir.file("d0.epmc");
    REQUIRE(epm_mlp_write_dataset(suite, 0, ds.c_str()) == EPM_OK);
    double acc = 0.0;
    REQUIRE(epm_accuracy_eval(ds.c_str(), bb0, hd0, &acc) == EPM_OK);
    CHECK(acc >= 0.5);  // trained on this task
    CHECK(acc <= 1.0);

    const std::string gs = dir.file("g0.epmc");
    REQUIRE(epm_mlp_write_grad_stream(suite, 0, bb0, hd0, gs.c_str()) == EPM_OK);
    epm_fisher * fisher = nullptr;
    REQUIRE(epm_fisher_from_stream(gs.c_str(), 0.5, 1, &fisher) == EPM_OK);
    CHECK(epm_fisher_sample_count(fisher) == 24);  // half of the 48 train samples

    double losses[3];
    REQUIRE(epm_loss_path(ds.c_str(), base_bb, bb0, hd0, 3, losses) == EPM_OK);
    for (double l : losses) CHECK(l >= 0.0);

    CHECK(epm_mlp_finetune(suite, 5, 10, 0.05, 16, 1, &bb0, &hd0, &g0, &g1) == EPM_ERR_USAGE);

    epm_fisher_free(fisher);
    epm_params_free(bb0);
    epm_params_free(hd0);
    epm_params_free(bb0_again);
    epm_params_free(hd0_again);
    epm_params_free(base_bb);
    epm_params_free(base_head);
    epm_mlp_free(suite);
}
