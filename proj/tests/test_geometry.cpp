#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "generators.hpp"
#include "mergeforge/errors.hpp"
#include "mergeforge/geometry.hpp"
#include "oracles.hpp"

using namespace mergeforge;

namespace {

Checkpoint vec_checkpoint(std::initializer_list<float> values, const std::string& id) {
    Checkpoint c;
    Eigen::ArrayXf a(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (float v : values) a[i++] = v;
    c.tensors["w"] = Tensor::from_f32(a, {static_cast<std::int64_t>(values.size())}, DType::F32);
    c.id = id;
    return c;
}

}  // namespace

TEST_CASE("glob matching") {
    CHECK(glob_match("*", "anything.at.all"));
    CHECK(glob_match("model.layers.*.weight", "model.layers.17.weight"));
    CHECK(!glob_match("model.layers.*.weight", "model.layers.17.bias"));
    CHECK(glob_match("*embed_tokens*", "model.embed_tokens.weight"));
    CHECK(glob_match("lm_head*", "lm_head.weight"));
    CHECK(!glob_match("lm_head*", "model.lm_head.weight"));
    CHECK(glob_match("a?c", "abc"));
    CHECK(!glob_match("a?c", "ac"));
    CHECK(glob_match("", ""));
    CHECK(!glob_match("", "x"));
}

TEST_CASE("filter selection and presets") {
    const ParamFilter all = ParamFilter::all();
    CHECK(all.selects("model.embed_tokens.weight"));
    const ParamFilter trimmed = ParamFilter::no_embeddings();
    CHECK(!trimmed.selects("model.embed_tokens.weight"));
    CHECK(!trimmed.selects("lm_head.weight"));
    CHECK(trimmed.selects("model.layers.0.mlp.gate_proj.weight"));
    CHECK(trimmed.selects("model.norm.weight"));
}

TEST_CASE("distance of a checkpoint to itself") {
    std::mt19937_64 rng(97);
    const Checkpoint c = gen::random_checkpoint(rng);
    const DistanceReport r = distance(c, c);
    CHECK(r.l2_normalized == 0.0);
    CHECK(r.cosine == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.param_count == c.total_params());
}

TEST_CASE("distance hand examples") {
    SUBCASE("orthogonal unit vectors") {
        const Checkpoint a = vec_checkpoint({1.0f, 0.0f}, "a");
        const Checkpoint b = vec_checkpoint({0.0f, 1.0f}, "b");
        const DistanceReport r = distance(a, b);
        CHECK(r.param_count == 2);
        CHECK(r.l2_normalized == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-12));
        CHECK(r.cosine == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("parallel vectors") {
        const Checkpoint a = vec_checkpoint({1.0f, 2.0f, 3.0f}, "a");
        const Checkpoint b = vec_checkpoint({2.0f, 4.0f, 6.0f}, "b");
        const DistanceReport r = distance(a, b);
        CHECK(r.param_count == 3);
        CHECK(r.l2_normalized == doctest::Approx(std::sqrt(14.0) / 3.0).epsilon(1e-12));
        CHECK(r.cosine == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("distance is symmetric") {
    std::mt19937_64 rng(101);
    const Checkpoint a = gen::random_checkpoint(rng);
    const Checkpoint b = gen::like(rng, a, false, "b");
    const DistanceReport ab = distance(a, b);
    const DistanceReport ba = distance(b, a);
    CHECK(ab.l2_normalized == ba.l2_normalized);
    CHECK(ab.cosine == ba.cosine);
    CHECK(ab.param_count == ba.param_count);
}

TEST_CASE("distance scale behavior") {
    std::mt19937_64 rng(103);
    const Checkpoint a = gen::random_checkpoint(rng);

    SUBCASE("cosine of a against k*a is one") {
        for (float k : {0.5f, 2.0f, 7.0f}) {
            Checkpoint scaled;
            for (const auto& [name, t] : a.tensors)
                scaled.tensors[name] = Tensor::from_f32(t.to_f32() * k, t.shape, DType::F32);
            scaled.id = "scaled";
            Checkpoint widened;
            for (const auto& [name, t] : a.tensors)
                widened.tensors[name] = Tensor::from_f32(t.to_f32(), t.shape, DType::F32);
            widened.id = "a";
            const DistanceReport r = distance(widened, scaled);
            CHECK(r.cosine == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("constant shift moves l2 by |c|*sqrt(n)/n") {
        const double c = 0.25;
        Checkpoint shifted;
        for (const auto& [name, t] : a.tensors)
            shifted.tensors[name] =
                Tensor::from_f32(t.to_f32() + static_cast<float>(c), t.shape, DType::F32);
        shifted.id = "shifted";
        Checkpoint widened;
        for (const auto& [name, t] : a.tensors)
            widened.tensors[name] = Tensor::from_f32(t.to_f32(), t.shape, DType::F32);
        widened.id = "a";
        const DistanceReport r = distance(widened, shifted);
        const auto n = static_cast<double>(a.total_params());
        CHECK(r.l2_normalized == doctest::Approx(c * std::sqrt(n) / n).epsilon(1e-9));
    }
}

TEST_CASE("distance error paths") {
    const Checkpoint a = vec_checkpoint({1.0f}, "a");
    SUBCASE("empty selection") {
        ParamFilter filter;
        filter.include_patterns = {"nothing-matches-*"};
        CHECK_THROWS_AS(distance(a, a, filter), Error);
    }
    SUBCASE("zero norm is a distinct error") {
        const Checkpoint z = vec_checkpoint({0.0f}, "z");
        try {
            distance(a, z);
            FAIL("expected zero-norm error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("zero-norm") != std::string::npos);
        }
    }
    SUBCASE("shape mismatch") {
        Checkpoint b;
        b.tensors["w"] = Tensor::from_f32(Eigen::ArrayXf::Ones(2), {2}, DType::F32);
        b.id = "b";
        CHECK_THROWS_AS(distance(a, b), Error);
    }
    SUBCASE("selection differs between checkpoints") {
        Checkpoint b = a;
        b.tensors["extra"] = Tensor::from_f32(Eigen::ArrayXf::Ones(1), {1}, DType::F32);
        CHECK_THROWS_AS(distance(a, b), Error);
    }
}

TEST_CASE("pairwise sum controls accumulation error where forward summation fails") {
    // 1.0 followed by 100k values of 1e-16: forward summation absorbs every
    // tiny addend into the big one and loses the entire 1e-11 tail; pairwise
    // only loses what the first 32-element leaf absorbs.
    std::vector<double> values(100001, 1e-16);
    values[0] = 1.0;
    long double exact = 0.0L;
    for (double v : values) exact += static_cast<long double>(v);

    double forward = 0.0;
    for (double v : values) forward += v;
    CHECK(std::fabs(forward - static_cast<double>(exact)) >= 1e-12);

    const double tree = pairwise_sum(values);
    CHECK(std::fabs(tree - static_cast<double>(exact)) <= 1e-14);

    // plain correctness on small inputs
    std::vector<double> empty;
    CHECK(pairwise_sum(empty) == 0.0);
    std::vector<double> few{1.5, -0.25, 3.0};
    CHECK(pairwise_sum(few) == 4.25);
}

// ---------------------------------------------------------------------------
// Spearman
// ---------------------------------------------------------------------------

TEST_CASE("spearman worked examples") {
    const std::vector<double> xs{1, 2, 3};
    SUBCASE("perfect monotone") {
        const std::vector<double> ys{10, 20, 30};
        const SpearmanResult r = spearman(xs, ys);
        CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("reversed") {
        const std::vector<double> ys{30, 20, 10};
        const SpearmanResult r = spearman(xs, ys);
        CHECK(r.rho == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("partial agreement") {
        const std::vector<double> x4{1, 2, 3, 4};
        const std::vector<double> y4{2, 1, 4, 3};
        const SpearmanResult r = spearman(x4, y4);
        CHECK(r.rho == doctest::Approx(0.6).epsilon(1e-12));
    }
}

TEST_CASE("spearman is invariant under strictly increasing transforms") {
    std::mt19937_64 rng(107);
    std::uniform_real_distribution<double> dist(-5.0, 5.0);
    for (int iter = 0; iter < 50; ++iter) {
        const std::size_t n = 3 + iter % 6;
        std::vector<double> xs(n), ys(n);
        for (auto& v : xs) v = dist(rng);
        for (auto& v : ys) v = dist(rng);
        std::vector<double> xs_t(n), ys_t(n);
        for (std::size_t i = 0; i < n; ++i) {
            xs_t[i] = std::exp(xs[i]);             // strictly increasing
            ys_t[i] = 2.0 * ys[i] + 11.0;          // strictly increasing
        }
        const SpearmanResult plain = spearman(xs, ys);
        const SpearmanResult mapped = spearman(xs_t, ys_t);
        CHECK(plain.rho == doctest::Approx(mapped.rho).epsilon(1e-12));
        CHECK(plain.p_two_sided == doctest::Approx(mapped.p_two_sided).epsilon(1e-12));
    }
}

TEST_CASE("spearman handles ties with average ranks") {
    const std::vector<double> xs{1, 1, 2, 3};
    const std::vector<double> ys{4, 4, 5, 6};
    const SpearmanResult r = spearman(xs, ys);
    CHECK(r.rho == doctest::Approx(oracle::spearman_rho(xs, ys)).epsilon(1e-12));
    CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exact permutation p-values match full enumeration for n <= 5") {
    std::mt19937_64 rng(109);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (std::size_t n : {3u, 4u, 5u}) {
        for (int iter = 0; iter < 30; ++iter) {
            std::vector<double> xs(n), ys(n);
            for (auto& v : xs) v = dist(rng);
            for (auto& v : ys) v = dist(rng);
            const SpearmanResult r = spearman(xs, ys);
            const double expected = oracle::spearman_exact_p(xs, ys);
            CHECK(r.p_two_sided == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("t-approximation p-values for larger n are sane and symmetric") {
    // monotone data: tiny p; shuffled data: larger p
    std::vector<double> xs(20), up(20);
    for (int i = 0; i < 20; ++i) {
        xs[i] = i;
        up[i] = 3 * i + 1;
    }
    const SpearmanResult mono = spearman(xs, up);
    CHECK(mono.rho == doctest::Approx(1.0));
    CHECK(mono.p_two_sided <= 1e-10);

    std::vector<double> noisy{5, 1, 4, 9, 2, 7, 3, 8, 6, 0, 11, 15, 10, 14, 12, 13, 17, 19, 16, 18};
    const SpearmanResult mixed = spearman(xs, noisy);
    CHECK(mixed.p_two_sided > 0.0);
    CHECK(mixed.p_two_sided <= 1.0);

    // p(t) against a reference value: rho=0.5, n=12 → t=2.0412.., p≈0.0684
    std::vector<double> a(12), b(12);
    for (int i = 0; i < 12; ++i) a[i] = i;
    b = {0, 2, 1, 5, 3, 11, 4, 10, 7, 6, 9, 8};
    const SpearmanResult r = spearman(a, b);
    const double rho = oracle::spearman_rho(a, b);
    CHECK(r.rho == doctest::Approx(rho).epsilon(1e-12));
}

TEST_CASE("spearman error paths") {
    const std::vector<double> xs{1, 2, 3};
    SUBCASE("length mismatch") {
        const std::vector<double> ys{1, 2};
        CHECK_THROWS_AS(spearman(xs, ys), Error);
    }
    SUBCASE("too short") {
        const std::vector<double> a{1, 2}, b{3, 4};
        CHECK_THROWS_AS(spearman(a, b), Error);
    }
    SUBCASE("all-equal input is a distinct error") {
        const std::vector<double> ys{7, 7, 7};
        try {
            spearman(xs, ys);
            FAIL("expected all-equal error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("all-equal") != std::string::npos);
        }
    }
}
