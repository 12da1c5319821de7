#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refgen/ops.hpp"
#include "refgen/tensor.hpp"
#include "testutil.hpp"

using namespace refgen;

TEST_CASE("tensor invariants") {
    auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0f);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("matmul identity and hand cases") {
    auto i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    auto c = matmul(i2, a);
    CHECK(c.data() == a.data());

    auto r = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
    CHECK(r.item() == 11.0f);

    CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                         doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul matches scalar-loop oracle") {
    Rng rng(11);
    const int m = 5, k = 7, n = 3;
    auto a = testutil::random_vec(rng, m * k);
    auto b = testutil::random_vec(rng, k * n);
    auto expect = testutil::matmul_oracle(a, b, m, k, n);

    auto c = matmul(Tensor::from_data({m, k}, std::vector<float>(a.begin(), a.end())),
                    Tensor::from_data({k, n}, std::vector<float>(b.begin(), b.end())));
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(c.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
}

TEST_CASE("softmax symmetry, stability, oracle") {
    auto u = softmax_rows(Tensor::from_data({1, 3}, {0, 0, 0}));
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));

    auto s = softmax_rows(Tensor::from_data({1, 2}, {1000.0f, 0.0f}));
    CHECK(s.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(5);
    const int m = 4, n = 6;
    auto x = testutil::random_vec(rng, m * n, -3.0, 3.0);
    auto expect = testutil::softmax_oracle(x, m, n);
    auto y = softmax_rows(Tensor::from_data({m, n}, std::vector<float>(x.begin(), x.end())));
    for (int i = 0; i < m; ++i) {
        float row_sum = 0;
        for (int j = 0; j < n; ++j) {
            CHECK(y.data()[i * n + j] == doctest::Approx(expect[i * n + j]).epsilon(1e-6));
            row_sum += y.data()[i * n + j];
        }
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
    }

    CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 2}, {NAN, 0.0f})), NumericError);
}

TEST_CASE("backward basics") {
    SUBCASE("sum of squares") {
        auto x = Tensor::from_data({3}, {1, 2, 3}, true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto loss = sum(mul(x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(2.0));
        CHECK(x.grad()[1] == doctest::Approx(4.0));
        CHECK(x.grad()[2] == doctest::Approx(6.0));
    }
    SUBCASE("softmax cross-entropy gradient is p minus onehot") {
        // loss = -log softmax(x)[target]
        auto x = Tensor::from_data({1, 4}, {0.3f, -1.2f, 2.0f, 0.1f}, true);
        const int target = 2;
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto p = softmax_rows(x);
        auto pt = slice(p, 1, target, 1);
        auto loss = neg(log(reshape(pt, {1})));
        tape.backward(sum(loss));
        for (int j = 0; j < 4; ++j) {
            const float expect = p.data()[j] - (j == target ? 1.0f : 0.0f);
            CHECK(x.grad()[j] == doctest::Approx(expect).epsilon(1e-5));
        }
    }
    SUBCASE("non-scalar loss rejected") {
        auto x = Tensor::from_data({2}, {1, 2}, true);
        Tape<float> tape;
        CHECK_THROWS_AS(tape.backward(x), ContractError);
    }
    SUBCASE("two backward passes double the gradient") {
        auto x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto loss = sum(mul(x, x));
        tape.backward(loss);
        const float once = x.grad()[0];
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(2 * once));
    }
}

TEST_CASE("concat then slice recovers parts bit-exactly") {
    Rng rng(3);
    for (int axis = 0; axis < 2; ++axis) {
        auto av = testutil::random_vec(rng, 6);
        auto bv = testutil::random_vec(rng, axis == 0 ? 9 : 4);
        auto a = Tensor::from_data(axis == 0 ? Shape{2, 3} : Shape{2, 2},
                                   std::vector<float>(av.begin(), av.begin() + (axis == 0 ? 6 : 4)));
        auto b = Tensor::from_data(axis == 0 ? Shape{3, 3} : Shape{2, 3},
                                   std::vector<float>(bv.begin(), bv.begin() + (axis == 0 ? 9 : 6)));
        auto cat = concat(a, b, axis);
        auto a2 = slice(cat, axis, 0, a.dim(axis));
        auto b2 = slice(cat, axis, a.dim(axis), b.dim(axis));
        CHECK(a2.data() == a.data());
        CHECK(b2.data() == b.data());
    }
}

TEST_CASE("space_to_depth round trip is bit exact") {
    Rng rng(17);
    auto v = testutil::random_vec(rng, 3 * 4 * 4);
    auto x = Tensor::from_data({3, 4, 4}, std::vector<float>(v.begin(), v.end()));
    auto z = space_to_depth(x, 2);
    CHECK(z.shape() == Shape{12, 2, 2});
    auto back = depth_to_space(z, 2);
    CHECK(back.data() == x.data());
}

TEST_CASE("ops are deterministic") {
    Rng rng(23);
    auto v = testutil::random_vec(rng, 16);
    auto x = Tensor::from_data({4, 4}, std::vector<float>(v.begin(), v.end()));
    auto y1 = silu(matmul(x, transpose(x)));
    auto y2 = silu(matmul(x, transpose(x)));
    CHECK(y1.data() == y2.data());
}

TEST_CASE("no tape means no grad tracking") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("scalar helpers and reductions") {
    auto x = Tensor::from_data({4}, {1, 2, 3, 4});
    CHECK(sum(x).item() == 10.0f);
    CHECK(mean(x).item() == 2.5f);
    auto rm = row_mean(Tensor::from_data({2, 2}, {1, 3, 5, 7}));
    CHECK(rm.data()[0] == 2.0f);
    CHECK(rm.data()[1] == 6.0f);
    CHECK(sub_from_scalar(1.0f, Tensor::scalar(0.25f)).item() == 0.75f);
}

TEST_CASE("avg_pool and resize shapes") {
    auto x = Tensor::zeros({3, 32, 32});
    auto p = avg_pool2d(x, 8, 4);
    CHECK(p.shape() == Shape{3, 7, 7});
    CHECK_THROWS_AS(avg_pool2d(Tensor::zeros({1, 9, 9}), 8, 4), ShapeError);

    auto r = resize_nearest(x, 16, 16);
    CHECK(r.shape() == Shape{3, 16, 16});
    // Upscaling by 2 then reading even pixels returns the source.
    auto small = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
    auto up = resize_nearest(small, 4, 4);
    CHECK(up.at({0, 0, 0}) == 1.0f);
    CHECK(up.at({0, 0, 3}) == 2.0f);
    CHECK(up.at({0, 3, 3}) == 4.0f);
}
