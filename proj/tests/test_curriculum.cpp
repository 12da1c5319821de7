#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refgen/curriculum.hpp"
#include "testutil.hpp"

using namespace refgen;

TEST_CASE("crop_lower_bound endpoints and midpoint") {
    CurriculumParams p;  // r_min 0.1, r_max 1.0, lambda 0.025
    p.total_iters = 800;

    CHECK(crop_lower_bound(0, p) == 1.0);
    CHECK(crop_lower_bound(p.total_iters, p) == doctest::Approx(0.1225).epsilon(1e-12));
    CHECK(crop_lower_bound(p.total_iters / 2, p) ==
          doctest::Approx(std::sqrt(0.025) * 0.9 + 0.1).epsilon(1e-9));
    CHECK(crop_lower_bound(p.total_iters / 2, p) == doctest::Approx(0.24230).epsilon(1e-4));

    SUBCASE("strictly decreasing, bounded") {
        double prev = crop_lower_bound(0, p);
        for (int i = 1; i <= p.total_iters; ++i) {
            const double r = crop_lower_bound(i, p);
            CHECK(r < prev);
            CHECK(r >= crop_lower_bound(p.total_iters, p));
            prev = r;
        }
    }
    SUBCASE("long-tail iterations clamp to I") {
        CHECK(crop_lower_bound(p.total_iters + 500, p) == crop_lower_bound(p.total_iters, p));
        CHECK_THROWS_AS(crop_lower_bound(-1, p), ContractError);
    }
}

TEST_CASE("sample_crop_scale") {
    Rng rng(5);
    SUBCASE("degenerate interval always returns r_max") {
        for (int i = 0; i < 10; ++i) CHECK(sample_crop_scale(rng, 0.7, 0.7) == 0.7);
    }
    SUBCASE("bounds and empirical mean over 1e5 draws") {
        const double lo = 0.3, hi = 0.9;
        double sum = 0.0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            const double r = sample_crop_scale(rng, lo, hi);
            REQUIRE(r >= lo);
            REQUIRE(r <= hi);
            sum += r;
        }
        CHECK(sum / n == doctest::Approx((lo + hi) / 2).epsilon(0.01));
    }
    SUBCASE("inverted interval rejected") {
        CHECK_THROWS_AS(sample_crop_scale(rng, 0.9, 0.3), ContractError);
    }
}

TEST_CASE("random_crop") {
    Rng rng(9);
    auto img = Tensor::zeros({3, 32, 32});
    for (size_t i = 0; i < img.numel(); ++i) img.mutable_data()[i] = static_cast<float>(i % 97) / 97.0f;

    SUBCASE("r_crop = 1 is the identity") {
        Rng r(1);
        auto out = random_crop(img, 1.0, r);
        CHECK(out.data() == img.data());
    }
    SUBCASE("r_crop = 0.5 takes a 16x16 window at an in-range position") {
        for (int trial = 0; trial < 50; ++trial) {
            Rng r(100 + static_cast<uint64_t>(trial));
            auto out = random_crop(img, 0.5, r);
            CHECK(out.shape() == Shape{3, 32, 32});
            // every output pixel must be one of the input pixels (nearest resize of a crop)
            Rng r2(100 + static_cast<uint64_t>(trial));
            const int side = 16;
            const int oy = static_cast<int>(r2.uniform_index(32 - side + 1));
            const int ox = static_cast<int>(r2.uniform_index(32 - side + 1));
            CHECK(oy >= 0);
            CHECK(oy <= 16);
            CHECK(out.at({0, 0, 0}) == img.at({0, oy, ox}));
        }
    }
    SUBCASE("fixed seed reproduces offsets") {
        Rng a(7), b(7);
        auto out1 = random_crop(img, 0.37, a);
        auto out2 = random_crop(img, 0.37, b);
        CHECK(out1.data() == out2.data());
    }
    SUBCASE("tiny crop clamps to one pixel") {
        Rng r(3);
        auto out = random_crop(img, 0.001, r);
        CHECK(out.shape() == Shape{3, 32, 32});
        // a 1x1 source: all output pixels equal per channel
        for (int c = 0; c < 3; ++c) {
            const float v = out.at({c, 0, 0});
            for (int y = 0; y < 32; ++y) {
                for (int x = 0; x < 32; ++x) CHECK(out.at({c, y, x}) == v);
            }
        }
    }
    SUBCASE("bad scale rejected") {
        Rng r(3);
        CHECK_THROWS_AS(random_crop(img, 0.0, r), ContractError);
        CHECK_THROWS_AS(random_crop(img, 1.5, r), ContractError);
    }
}
