#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refgen/attention.hpp"
#include "testutil.hpp"

using namespace refgen;

namespace {

DTensor rand_mat(Rng& rng, int r, int c, double scale = 0.5, bool rg = false) {
    auto v = testutil::random_vec(rng, static_cast<size_t>(r) * c, -scale, scale);
    return DTensor::from_data({r, c}, v, rg);
}

AttentionParams<double> rand_attn(Rng& rng, int hidden, int cond, int d) {
    AttentionParams<double> p;
    p.wq.w = rand_mat(rng, hidden, d);
    p.wk.w = rand_mat(rng, cond, d);
    p.wv.w = rand_mat(rng, cond, d);
    p.wout.w = rand_mat(rng, d, hidden);
    p.d = d;
    return p;
}

DecoupledAdapterParams<double> rand_adapter(Rng& rng, int img_w, int d, double s_x) {
    DecoupledAdapterParams<double> a;
    a.wkx = rand_mat(rng, img_w, d);
    a.wvx = rand_mat(rng, img_w, d);
    a.s_x = s_x;
    return a;
}

} // namespace

TEST_CASE("attend: single key returns its value row") {
    Rng rng(1);
    auto q = rand_mat(rng, 3, 2);
    auto k = rand_mat(rng, 1, 2);
    auto v = DTensor::from_data({1, 2}, {7.0, 7.0});
    auto out = attend(q, k, v, 2);
    for (double x : out.data()) CHECK(x == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("attend: identical keys average the values") {
    Rng rng(2);
    auto q = rand_mat(rng, 4, 3);
    auto krow = testutil::random_vec(rng, 3);
    std::vector<double> kd(krow);
    kd.insert(kd.end(), krow.begin(), krow.end());
    auto k = DTensor::from_data({2, 3}, kd);
    auto v = rand_mat(rng, 2, 3);
    auto out = attend(q, k, v, 3);
    for (int i = 0; i < 4; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double expect = 0.5 * (v.data()[c] + v.data()[3 + c]);
            CHECK(out.data()[i * 3 + c] == doctest::Approx(expect).epsilon(1e-9));
        }
    }
}

TEST_CASE("attend matches scalar oracle") {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(40 + seed);
        const int m = 3, n = 5, d = 4;
        auto q = testutil::random_vec(rng, m * d);
        auto k = testutil::random_vec(rng, n * d);
        auto v = testutil::random_vec(rng, n * d);
        auto expect = testutil::attend_oracle(q, k, v, m, n, d);
        auto out = attend(testutil::dtensor({m, d}, q), testutil::dtensor({n, d}, k),
                          testutil::dtensor({n, d}, v), d);
        for (size_t i = 0; i < expect.size(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("attend rejects width mismatch") {
    CHECK_THROWS_AS(attend(DTensor::zeros({2, 3}), DTensor::zeros({2, 4}), DTensor::zeros({2, 4}), 4),
                    ShapeError);
}

TEST_CASE("self_attention single token reduces to value path") {
    Rng rng(7);
    auto p = rand_attn(rng, 5, 5, 4);
    auto h = rand_mat(rng, 1, 5);
    auto out = self_attention(h, p);
    auto expect = p.wout.forward(p.wv.forward(h));
    for (size_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
    }

    auto zero_out = self_attention(DTensor::zeros({3, 5}), p);
    for (double v : zero_out.data()) CHECK(v == 0.0);
}

TEST_CASE("self_attention matches composed oracle") {
    Rng rng(8);
    const int hw = 5, d = 4, m = 6;
    auto p = rand_attn(rng, hw, hw, d);
    auto h = rand_mat(rng, m, hw);

    auto q = testutil::matmul_oracle(h.data(), p.wq.w.data(), m, hw, d);
    auto k = testutil::matmul_oracle(h.data(), p.wk.w.data(), m, hw, d);
    auto v = testutil::matmul_oracle(h.data(), p.wv.w.data(), m, hw, d);
    auto att = testutil::attend_oracle(q, k, v, m, m, d);
    auto expect = testutil::matmul_oracle(att, p.wout.w.data(), m, d, hw);

    auto out = self_attention(h, p);
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
}

TEST_CASE("decoupled cross-attention") {
    Rng rng(9);
    const int hw = 5, cond = 4, imgw = 6, d = 4, m = 3;
    auto p = rand_attn(rng, hw, cond, d);
    auto h = rand_mat(rng, m, hw);
    auto cy = rand_mat(rng, 3, cond);
    auto cx = rand_mat(rng, 2, imgw);

    SUBCASE("s_x = 0 equals text-only bit-exactly") {
        auto a = rand_adapter(rng, imgw, d, 0.0);
        auto out = decoupled_cross_attention(h, cy, cx, p, a);
        auto text = cross_attention_text(h, cy, p);
        CHECK(out.data() == text.data());
    }
    SUBCASE("single image token contributes s_x * (Wvx t) to every query") {
        auto a = rand_adapter(rng, imgw, d, 1.3);
        auto one_tok = rand_mat(rng, 1, imgw);
        auto out = decoupled_cross_attention(h, cy, one_tok, p, a);
        auto text = cross_attention_text(h, cy, p);
        auto vx = matmul(one_tok, a.wvx);
        for (int i = 0; i < m; ++i) {
            for (int c = 0; c < d; ++c) {
                const double expect = text.data()[i * d + c] + 1.3 * vx.data()[c];
                CHECK(out.data()[i * d + c] == doctest::Approx(expect).epsilon(1e-9));
            }
        }
    }
    SUBCASE("random case equals sum of two attend oracles") {
        auto a = rand_adapter(rng, imgw, d, 0.8);
        auto out = decoupled_cross_attention(h, cy, cx, p, a);

        auto q = testutil::matmul_oracle(h.data(), p.wq.w.data(), m, hw, d);
        auto ky = testutil::matmul_oracle(cy.data(), p.wk.w.data(), 3, cond, d);
        auto vy = testutil::matmul_oracle(cy.data(), p.wv.w.data(), 3, cond, d);
        auto kx = testutil::matmul_oracle(cx.data(), a.wkx.data(), 2, imgw, d);
        auto vx = testutil::matmul_oracle(cx.data(), a.wvx.data(), 2, imgw, d);
        auto text = testutil::attend_oracle(q, ky, vy, m, 3, d);
        auto img = testutil::attend_oracle(q, kx, vx, m, 2, d);
        for (size_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(text[i] + 0.8 * img[i]).epsilon(1e-6));
        }
    }
    SUBCASE("empty text conditioning is rejected") {
        auto a = rand_adapter(rng, imgw, d, 1.0);
        CHECK_THROWS_AS(decoupled_cross_attention(h, DTensor::zeros({0, cond}), cx, p, a),
                        ContractError);
    }
}

TEST_CASE("inject_self_attention") {
    Rng rng(10);
    const int hw = 5, d = 4, m = 4, n_ref = 3;
    auto p = rand_attn(rng, hw, hw, d);
    auto h = rand_mat(rng, m, hw);

    SUBCASE("empty reference equals plain self-attention bit-exactly") {
        typename ReferenceKV<double>::LayerKV empty;
        auto out = inject_self_attention(h, p, empty);
        auto plain = self_attention(h, p);
        CHECK(out.data() == plain.data());

        typename ReferenceKV<double>::LayerKV zero_rows{DTensor::zeros({0, d}), DTensor::zeros({0, d})};
        auto out2 = inject_self_attention(h, p, zero_rows);
        CHECK(out2.data() == plain.data());
    }
    SUBCASE("mixture identity with partition masses") {
        typename ReferenceKV<double>::LayerKV ref{rand_mat(rng, n_ref, d), rand_mat(rng, n_ref, d)};
        auto out = inject_self_attention(h, p, ref);

        auto q = testutil::matmul_oracle(h.data(), p.wq.w.data(), m, hw, d);
        auto k1 = testutil::matmul_oracle(h.data(), p.wk.w.data(), m, hw, d);
        auto v1 = testutil::matmul_oracle(h.data(), p.wv.w.data(), m, hw, d);
        auto [z1, z2] = testutil::block_partition_masses(q, k1, ref.k.data(), m, m, n_ref, d);
        auto own = testutil::attend_oracle(q, k1, v1, m, m, d);
        auto inj = testutil::attend_oracle(q, ref.k.data(), ref.v.data(), m, n_ref, d);
        std::vector<double> mix(static_cast<size_t>(m) * d);
        for (int i = 0; i < m; ++i) {
            const double w1 = z1[i] / (z1[i] + z2[i]);
            const double w2 = z2[i] / (z1[i] + z2[i]);
            for (int c = 0; c < d; ++c) mix[i * d + c] = w1 * own[i * d + c] + w2 * inj[i * d + c];
        }
        auto expect = testutil::matmul_oracle(mix, p.wout.w.data(), m, d, hw);
        for (size_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
        }
    }
    SUBCASE("duplicating all keys and values leaves the output unchanged") {
        auto k1 = matmul(h, p.wk.w);
        auto v1 = matmul(h, p.wv.w);
        typename ReferenceKV<double>::LayerKV dup{k1, v1};
        auto out = inject_self_attention(h, p, dup);
        auto plain = self_attention(h, p);
        for (size_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-6));
        }
    }
    SUBCASE("reference width mismatch rejected") {
        typename ReferenceKV<double>::LayerKV bad{DTensor::zeros({2, d + 1}), DTensor::zeros({2, d + 1})};
        CHECK_THROWS_AS(inject_self_attention(h, p, bad), ShapeError);
    }
}

TEST_CASE("masked decoupled cross-attention") {
    Rng rng(11);
    const int hw = 5, cond = 4, imgw = 6, d = 4, m = 4;
    auto p = rand_attn(rng, hw, cond, d);
    auto h = rand_mat(rng, m, hw);
    auto cy = rand_mat(rng, 3, cond);
    auto cx = rand_mat(rng, 2, imgw);
    auto a = rand_adapter(rng, imgw, d, 1.1);

    LayerMask ones{std::vector<uint8_t>(m, 1), 2, 2};
    LayerMask zeros{std::vector<uint8_t>(m, 0), 2, 2};
    LayerMask checker{{1, 0, 0, 1}, 2, 2};

    SUBCASE("all-ones mask equals unmasked bit-exactly") {
        auto out = masked_decoupled_cross_attention(h, cy, cx, p, a, ones);
        auto plain = decoupled_cross_attention(h, cy, cx, p, a);
        CHECK(out.data() == plain.data());
    }
    SUBCASE("all-zero mask equals text-only bit-exactly") {
        auto out = masked_decoupled_cross_attention(h, cy, cx, p, a, zeros);
        auto text = cross_attention_text(h, cy, p);
        CHECK(out.data() == text.data());
    }
    SUBCASE("checkerboard selects per token") {
        auto out = masked_decoupled_cross_attention(h, cy, cx, p, a, checker);
        auto with_img = decoupled_cross_attention(h, cy, cx, p, a);
        auto text = cross_attention_text(h, cy, p);
        for (int i = 0; i < m; ++i) {
            const auto& expect = checker.m[static_cast<size_t>(i)] ? with_img : text;
            for (int c = 0; c < d; ++c) {
                CHECK(out.data()[i * d + c] == doctest::Approx(expect.data()[i * d + c]).epsilon(1e-12));
            }
        }
    }
    SUBCASE("mask size mismatch rejected") {
        LayerMask bad{std::vector<uint8_t>(m + 1, 1), 1, m + 1};
        CHECK_THROWS_AS(masked_decoupled_cross_attention(h, cy, cx, p, a, bad), ShapeError);
    }
}

TEST_CASE("extract_subject_mask") {
    const double tau = 0.6;
    SUBCASE("single peak yields single-pixel mask") {
        std::vector<double> map(16 * 2, 0.0);
        for (int i = 0; i < 16; ++i) {
            map[i * 2 + 0] = 1.0;  // column 0: uniform
            map[i * 2 + 1] = (i == 5) ? 1.0 : 0.0;
        }
        auto masks = extract_subject_mask<double>({testutil::dtensor({16, 2}, map)}, 1, tau, 4, 4,
                                                  {{4, 4}});
        int count = 0;
        for (int i = 0; i < 16; ++i) count += masks[0].m[static_cast<size_t>(i)];
        CHECK(count == 1);
        CHECK(masks[0].m[5] == 1);
    }
    SUBCASE("two-level map keeps only the high region") {
        std::vector<double> map(4 * 1);
        map[0] = 1.0;
        map[1] = 0.5;
        map[2] = 0.5;
        map[3] = 0.0;
        auto masks = extract_subject_mask<double>({testutil::dtensor({4, 1}, map)}, 0, tau, 2, 2,
                                                  {{2, 2}});
        CHECK(masks[0].m == std::vector<uint8_t>{1, 0, 0, 0});
    }
    SUBCASE("random map matches per-pixel oracle and affine invariance") {
        Rng rng(21);
        auto vals = testutil::random_vec(rng, 16, 0.0, 1.0);
        std::vector<double> map(16 * 3);
        for (int i = 0; i < 16; ++i) {
            map[i * 3 + 0] = 0.1;
            map[i * 3 + 1] = vals[static_cast<size_t>(i)];
            map[i * 3 + 2] = 0.2;
        }
        auto masks = extract_subject_mask<double>({testutil::dtensor({16, 3}, map)}, 1, tau, 4, 4,
                                                  {{4, 4}, {8, 8}});
        double lo = vals[0], hi = vals[0];
        for (double v : vals) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (int i = 0; i < 16; ++i) {
            const uint8_t expect = ((vals[static_cast<size_t>(i)] - lo) / (hi - lo)) >= tau ? 1 : 0;
            CHECK(masks[0].m[static_cast<size_t>(i)] == expect);
        }
        CHECK(masks[1].h == 8);
        CHECK(masks[1].m.size() == 64);

        // positive affine rescale of the raw map leaves the mask unchanged
        std::vector<double> scaled(map);
        for (auto& v : scaled) v = 3.7 * v + 0.4;
        auto masks2 = extract_subject_mask<double>({testutil::dtensor({16, 3}, scaled)}, 1, tau, 4, 4,
                                                   {{4, 4}});
        CHECK(masks2[0].m == masks[0].m);

        // idempotence: re-threshold the binarized mask
        std::vector<double> again(16 * 1);
        for (int i = 0; i < 16; ++i) again[static_cast<size_t>(i)] = masks[0].m[static_cast<size_t>(i)];
        auto masks3 = extract_subject_mask<double>({testutil::dtensor({16, 1}, again)}, 0, tau, 4, 4,
                                                   {{4, 4}});
        CHECK(masks3[0].m == masks[0].m);
    }
    SUBCASE("constant map defaults to all-ones") {
        auto masks = extract_subject_mask<double>({DTensor::filled({9, 2}, 0.5)}, 1, tau, 3, 3,
                                                  {{3, 3}});
        CHECK(masks[0].all_of(1));
    }
}

TEST_CASE("attention variants pass finite-difference gradient checks") {
    for (int seed = 0; seed < 5; ++seed) {
        Rng rng(900 + seed);
        const int hw = 4, cond = 3, imgw = 5, d = 4, m = 3;
        AttentionParams<double> p;
        p.wq.w = rand_mat(rng, hw, d, 0.5, true);
        p.wk.w = rand_mat(rng, cond, d, 0.5, true);
        p.wv.w = rand_mat(rng, cond, d, 0.5, true);
        p.wout.w = rand_mat(rng, d, hw, 0.5, true);
        p.d = d;
        auto a = rand_adapter(rng, imgw, d, 1.2);
        a.wkx.set_requires_grad(true);
        a.wvx.set_requires_grad(true);
        auto h = rand_mat(rng, m, hw, 0.5, true);
        auto cy = rand_mat(rng, 2, cond);
        auto cx = rand_mat(rng, 2, imgw);

        auto res = testutil::finite_diff_check(
            {p.wq.w, p.wk.w, p.wv.w, p.wout.w, a.wkx, a.wvx, h},
            [&] {
                auto t = decoupled_cross_attention(h, cy, cx, p, a);
                return mean(mul(t, t));
            });
        CHECK(res.max_rel_err < 1e-4);

        AttentionParams<double> ps;
        ps.wq.w = rand_mat(rng, hw, d, 0.5, true);
        ps.wk.w = rand_mat(rng, hw, d, 0.5, true);
        ps.wv.w = rand_mat(rng, hw, d, 0.5, true);
        ps.wout.w = rand_mat(rng, d, hw, 0.5, true);
        ps.d = d;
        typename ReferenceKV<double>::LayerKV ref{rand_mat(rng, 2, d), rand_mat(rng, 2, d)};
        auto res2 = testutil::finite_diff_check(
            {ps.wq.w, ps.wk.w, ps.wv.w, ps.wout.w},
            [&] {
                auto t = inject_self_attention(h, ps, ref);
                return mean(mul(t, t));
            });
        CHECK(res2.max_rel_err < 1e-4);
    }
}

TEST_CASE("concatenation mixture law on random instances") {
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        const int m = 3, n1 = 4, n2 = 3, d = 5;
        auto q = testutil::random_vec(rng, m * d);
        auto k1 = testutil::random_vec(rng, n1 * d);
        auto v1 = testutil::random_vec(rng, n1 * d);
        auto k2 = testutil::random_vec(rng, n2 * d);
        auto v2 = testutil::random_vec(rng, n2 * d);

        auto qk = testutil::dtensor({m, d}, q);
        auto cat_out = attend(qk, concat(testutil::dtensor({n1, d}, k1), testutil::dtensor({n2, d}, k2), 0),
                              concat(testutil::dtensor({n1, d}, v1), testutil::dtensor({n2, d}, v2), 0), d);

        auto [z1, z2] = testutil::block_partition_masses(q, k1, k2, m, n1, n2, d);
        auto o1 = testutil::attend_oracle(q, k1, v1, m, n1, d);
        auto o2 = testutil::attend_oracle(q, k2, v2, m, n2, d);
        for (int i = 0; i < m; ++i) {
            const double w1 = z1[i] / (z1[i] + z2[i]);
            const double w2 = z2[i] / (z1[i] + z2[i]);
            for (int c = 0; c < d; ++c) {
                const double expect = w1 * o1[i * d + c] + w2 * o2[i * d + c];
                CHECK(cat_out.data()[i * d + c] == doctest::Approx(expect).epsilon(1e-6));
            }
        }
    }
}
