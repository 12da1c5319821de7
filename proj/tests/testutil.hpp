#pragma once

// Shared test oracles. Everything here is written independently of the ops
// being checked: scalar loops, float64, no tape.

#include <cmath>
#include <functional>
#include <vector>

#include "refgen/rng.hpp"
#include "refgen/tensor.hpp"

namespace testutil {

using refgen::BasicTensor;
using refgen::Rng;
using refgen::Shape;

// Triple-loop matmul oracle.
inline std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                         int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    }
    return c;
}

// Naive exp / sum-exp row softmax at float64.
inline std::vector<double> softmax_oracle(const std::vector<double>& x, int m, int n) {
    std::vector<double> y(x.size());
    for (int i = 0; i < m; ++i) {
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(x[i * n + j]);
        for (int j = 0; j < n; ++j) y[i * n + j] = std::exp(x[i * n + j]) / z;
    }
    return y;
}

// Per-element attention oracle: softmax(Q K^T / sqrt(d)) V, scalar loops.
inline std::vector<double> attend_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                         const std::vector<double>& v, int m, int n, int d) {
    std::vector<double> out(static_cast<size_t>(m) * d, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < m; ++i) {
        std::vector<double> scores(n);
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
            scores[j] = s * scale;
            mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(scores[j] - mx);
        for (int j = 0; j < n; ++j) {
            const double p = std::exp(scores[j] - mx) / z;
            for (int c = 0; c < d; ++c) out[i * d + c] += p * v[j * d + c];
        }
    }
    return out;
}

// Per-query unnormalized partition masses of softmax(Q K^T / sqrt(d)) for two
// key blocks, with the max taken over the union so the masses are comparable:
// attend(Q, K1+K2, V1+V2) = w1*attend(Q,K1,V1) + w2*attend(Q,K2,V2) with
// w_i = z_i / (z_1 + z_2).
inline std::pair<std::vector<double>, std::vector<double>> block_partition_masses(
    const std::vector<double>& q, const std::vector<double>& k1, const std::vector<double>& k2,
    int m, int n1, int n2, int d) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> z1(m, 0.0), z2(m, 0.0);
    for (int i = 0; i < m; ++i) {
        auto score = [&](const std::vector<double>& keys, int j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += q[i * d + c] * keys[j * d + c];
            return s * scale;
        };
        double mx = -1e300;
        for (int j = 0; j < n1; ++j) mx = std::max(mx, score(k1, j));
        for (int j = 0; j < n2; ++j) mx = std::max(mx, score(k2, j));
        for (int j = 0; j < n1; ++j) z1[i] += std::exp(score(k1, j) - mx);
        for (int j = 0; j < n2; ++j) z2[i] += std::exp(score(k2, j) - mx);
    }
    return {z1, z2};
}

template <class T>
std::vector<double> to_double(const std::vector<T>& v) {
    return std::vector<double>(v.begin(), v.end());
}

inline refgen::DTensor dtensor(Shape shape, const std::vector<double>& data, bool rg = false) {
    return refgen::DTensor::from_data(std::move(shape), data, rg);
}

// Central finite differences against tape gradients, float64. Returns the
// worst relative error over all checked parameters.
//
//   rel = |analytic - fd| / max(|analytic|, |fd|, floor)
//
// The floor keeps near-zero gradients from blowing up the ratio. The base
// step is 1e-3; a coordinate whose error exceeds `refine_threshold` there is
// re-measured at step/100, which shrinks FD truncation error on strongly
// curved coordinates while leaving a genuinely wrong gradient failing.
struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t checked = 0;
};

inline GradCheckResult finite_diff_check(
    const std::vector<refgen::DTensor>& params,
    const std::function<refgen::DTensor()>& loss_fn,
    double step = 1e-3, double floor_val = 1e-6, double refine_threshold = 1e-4) {
    using refgen::DTensor;
    using refgen::Tape;
    using refgen::TapeScope;

    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        DTensor loss = loss_fn();
        tape.backward(loss);
    }

    GradCheckResult res;
    for (const auto& p : params) {
        std::vector<double> analytic = p.grad();
        auto& data = const_cast<DTensor&>(p).mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            auto fd_at = [&](double h) {
                data[i] = orig + h;
                const double up = loss_fn().item();
                data[i] = orig - h;
                const double dn = loss_fn().item();
                data[i] = orig;
                return (up - dn) / (2.0 * h);
            };
            auto rel_of = [&](double fd) {
                const double denom = std::max({std::abs(analytic[i]), std::abs(fd), floor_val});
                return std::abs(analytic[i] - fd) / denom;
            };
            double rel = rel_of(fd_at(step));
            if (rel >= refine_threshold) rel = rel_of(fd_at(step / 100.0));
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
    }
    // Leave no residue on shared parameters.
    for (const auto& p : params) const_cast<DTensor&>(p).zero_grad();
    return res;
}

inline std::vector<double> random_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

} // namespace testutil
