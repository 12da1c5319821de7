#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

// Finite-difference sweep over every differentiable op, float64 shadow,
// 20 seeds each, relative error < 1e-4.

#include "refgen/ops.hpp"
#include "testutil.hpp"

using namespace refgen;
using testutil::finite_diff_check;

namespace {

DTensor rand_param(Rng& rng, Shape shape) {
    auto v = testutil::random_vec(rng, shape_numel(shape));
    return DTensor::from_data(std::move(shape), v, true);
}

constexpr double kTol = 1e-4;
constexpr int kSeeds = 20;

} // namespace

TEST_CASE("grad: elementwise and scalar ops") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(100 + seed);
        auto a = rand_param(rng, {3, 4});
        auto b = rand_param(rng, {3, 4});
        auto res = finite_diff_check({a, b}, [&] {
            auto t = add(mul(a, b), sub(a, b));
            t = add_scalar(mul_scalar(t, 0.7), 0.3);
            t = sub_from_scalar(1.0, t);
            return mean(mul(t, t));
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: div, log, softplus, sigmoid, silu") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(200 + seed);
        auto a = rand_param(rng, {2, 5});
        auto b = DTensor::from_data({2, 5}, testutil::random_vec(rng, 10, 0.5, 2.0), true);
        auto res = finite_diff_check({a, b}, [&] {
            auto q = div(a, b);
            auto t = add(silu(q), sigmoid(a));
            t = add(t, softplus(mul_scalar(a, 3.0)));
            t = add(t, log(b));
            return mean(t);
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: matmul and transpose") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(300 + seed);
        auto a = rand_param(rng, {4, 3});
        auto b = rand_param(rng, {3, 5});
        auto res = finite_diff_check({a, b}, [&] {
            auto c = matmul(a, b);
            auto d = matmul(transpose(c), c);
            return mean(d);
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: softmax rows") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(400 + seed);
        auto x = rand_param(rng, {3, 6});
        auto w = DTensor::from_data({3, 6}, testutil::random_vec(rng, 18), false);
        auto res = finite_diff_check({x}, [&] {
            return mean(mul(softmax_rows(x), w));
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: reshape, concat, slice, gather") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(500 + seed);
        auto a = rand_param(rng, {2, 4});
        auto b = rand_param(rng, {3, 4});
        auto table = rand_param(rng, {5, 4});
        auto res = finite_diff_check({a, b, table}, [&] {
            auto cat = concat(a, b, 0);
            auto sl = slice(cat, 0, 1, 3);
            auto g = gather_rows(table, {0, 3, 3});
            auto t = mul(sl, g);
            return mean(reshape(t, {12}));
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: layer_norm") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(600 + seed);
        auto x = rand_param(rng, {3, 8});
        auto gamma = DTensor::from_data({8}, testutil::random_vec(rng, 8, 0.5, 1.5), true);
        auto beta = rand_param(rng, {8});
        auto w = DTensor::from_data({3, 8}, testutil::random_vec(rng, 24), false);
        auto res = finite_diff_check({x, gamma, beta}, [&] {
            return mean(mul(layer_norm(x, gamma, beta), w));
        });
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("grad: conv2d stride 1 and 2") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(700 + seed);
        auto x = rand_param(rng, {2, 6, 6});
        auto w = rand_param(rng, {3, 2, 3, 3});
        auto bias = rand_param(rng, {3});
        for (int stride : {1, 2}) {
            auto res = finite_diff_check({x, w, bias}, [&] {
                return mean(conv2d(x, w, bias, stride, 1));
            });
            CHECK(res.max_rel_err < kTol);
        }
    }
}

TEST_CASE("grad: avg_pool, resize, space_to_depth, row ops") {
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(800 + seed);
        auto x = rand_param(rng, {2, 8, 8});
        auto s = rand_param(rng, {16});
        auto v = rand_param(rng, {4});
        auto res = finite_diff_check({x, s, v}, [&] {
            auto p = avg_pool2d(x, 4, 2);          // [2,3,3]
            auto r = resize_nearest(p, 4, 4);      // [2,4,4]
            auto z = space_to_depth(r, 2);         // [8,2,2]
            auto flat = reshape(depth_to_space(z, 2), {16, 2});
            auto t = scale_rows(flat, s);
            auto t2 = add_row_broadcast(reshape(t, {8, 4}), v);
            auto rm = row_mean(t2);                // [8]
            return add(mean(mul(t2, t2)), mean(rm));
        });
        CHECK(res.max_rel_err < kTol);
    }
}
