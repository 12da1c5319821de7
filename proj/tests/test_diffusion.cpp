#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refgen/diffusion.hpp"
#include "testutil.hpp"

using namespace refgen;

TEST_CASE("schedule is variance preserving and monotone") {
    NoiseSchedule sched(1000);
    for (int t = 0; t <= 1000; ++t) {
        const double a = sched.alpha(t), s = sched.sigma(t);
        CHECK(a * a + s * s == doctest::Approx(1.0).epsilon(1e-6));
        if (t > 0) {
            CHECK(sched.alpha(t) <= sched.alpha(t - 1));
            CHECK(sched.sigma(t) >= sched.sigma(t - 1));
        }
    }
    CHECK(sched.alpha(0) == 1.0);
    CHECK(sched.sigma(0) == 0.0);
    CHECK(sched.sigma(1000) == doctest::Approx(1.0).epsilon(1e-3));
    CHECK_THROWS_AS(sched.alpha(1001), ContractError);
    CHECK_THROWS_AS(sched.alpha(-1), ContractError);
}

TEST_CASE("forward_perturb at t=0 returns z bit-exactly") {
    NoiseSchedule sched(1000);
    Rng rng(3);
    auto z = DTensor::randn({4, 4}, rng);
    auto eps = DTensor::randn({4, 4}, rng);
    auto out = forward_perturb(z, 0, eps, sched);
    CHECK(out.data() == z.data());
}

TEST_CASE("forward_perturb is deterministic and matches the variance identity") {
    NoiseSchedule sched(1000);
    Rng rng(5);
    const int t = 400;
    auto z = DTensor::randn({8, 8}, rng);
    auto eps = DTensor::randn({8, 8}, rng);
    auto a = forward_perturb(z, t, eps, sched);
    auto b = forward_perturb(z, t, eps, sched);
    CHECK(a.data() == b.data());

    // Var(alpha z + sigma eps) over fresh draws of z and eps with Var(z)=1.
    Rng mc(17);
    const int n = 10000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = sched.alpha(t) * mc.normal() + sched.sigma(t) * mc.normal();
        sum += v;
        sum2 += v * v;
    }
    const double mean_v = sum / n;
    const double var = sum2 / n - mean_v * mean_v;
    const double expect = sched.alpha(t) * sched.alpha(t) + sched.sigma(t) * sched.sigma(t);
    CHECK(var == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("variance at t=T is within 5% of 1 over 1e4 samples") {
    NoiseSchedule sched(1000);
    Rng mc(23);
    const int n = 10000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = sched.alpha(1000) * mc.normal() + sched.sigma(1000) * mc.normal();
        sum += v;
        sum2 += v * v;
    }
    const double mean_v = sum / n;
    const double var = sum2 / n - mean_v * mean_v;
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("gradient of forward_perturb w.r.t. z equals alpha(t)") {
    NoiseSchedule sched(1000);
    Rng rng(7);
    for (int t : {1, 250, 1000}) {
        auto z = DTensor::randn({3, 3}, rng, 1.0, true);
        auto eps = DTensor::randn({3, 3}, rng);
        auto res = testutil::finite_diff_check({z}, [&] {
            return sum(forward_perturb(z, t, eps, sched));
        });
        CHECK(res.max_rel_err < 1e-4);

        Tape<double> tape;
        {
            TapeScope<double> scope(tape);
            tape.backward(sum(forward_perturb(z, t, eps, sched)));
        }
        for (double g : z.grad()) CHECK(g == doctest::Approx(sched.alpha(t)).epsilon(1e-9));
        z.zero_grad();
    }
}

TEST_CASE("out-of-range timestep rejected") {
    NoiseSchedule sched(10);
    auto z = DTensor::zeros({2, 2});
    CHECK_THROWS_AS(forward_perturb(z, 11, z, sched), ContractError);
    CHECK_THROWS_AS(forward_perturb(z, -1, z, sched), ContractError);
}
