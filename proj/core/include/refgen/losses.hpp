#pragma once

#include <string>
#include <vector>

#include "refgen/networks.hpp"
#include "refgen/ops.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

template <class T>
struct LossWeights {
    T lambda1 = T(1);    // DIST weight
    T lambda2 = T(0.2);  // SSIM weight
    T lambda3 = T(0.1);  // adversarial weight
};

// The generator objective consists of exactly these terms; there is no L2
// reconstruction term anywhere.
inline const std::vector<std::string>& generator_loss_registry() {
    static const std::vector<std::string> terms = {"dist", "ssim", "adv_g"};
    return terms;
}

enum class SsimWindow { kUniform, kGaussian };

namespace detail {

// Windowed mean; uniform uses plain average pooling, gaussian a fixed
// normalized kernel (sigma 1.5) applied per channel.
template <class T>
BasicTensor<T> window_mean(const BasicTensor<T>& x, int window, int stride, SsimWindow kind) {
    if (kind == SsimWindow::kUniform) return avg_pool2d(x, window, stride);
    static thread_local std::vector<T> kernel;
    if (static_cast<int>(kernel.size()) != window * window) {
        kernel.resize(static_cast<size_t>(window) * window);
        const double sigma = 1.5;
        double total = 0.0;
        for (int y = 0; y < window; ++y) {
            for (int x2 = 0; x2 < window; ++x2) {
                const double dy = y - (window - 1) / 2.0;
                const double dx = x2 - (window - 1) / 2.0;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                kernel[static_cast<size_t>(y) * window + x2] = static_cast<T>(v);
                total += v;
            }
        }
        for (auto& v : kernel) v = static_cast<T>(v / total);
    }
    auto w = BasicTensor<T>::from_data({1, 1, window, window}, kernel);
    std::vector<BasicTensor<T>> per_channel;
    for (int c = 0; c < x.dim(0); ++c) {
        auto xc = slice(x, 0, c, 1);
        per_channel.push_back(conv2d(xc, w, stride, 0));
    }
    return concat(per_channel, 0);
}

} // namespace detail

// Mean structural similarity over sliding windows (default 8x8, stride 4),
// dynamic range L=1: C1=(0.01)^2, C2=(0.03)^2. Returns a differentiable
// scalar in [-1,1]; ssim(x,x) is exactly 1.
template <class T>
BasicTensor<T> ssim(const BasicTensor<T>& x, const BasicTensor<T>& y, int window = 8, int stride = 4,
                    SsimWindow kind = SsimWindow::kUniform) {
    if (x.shape() != y.shape()) {
        throw ShapeError("ssim: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
    }
    const T c1 = T(0.01) * T(0.01);
    const T c2 = T(0.03) * T(0.03);
    auto mx = detail::window_mean(x, window, stride, kind);
    auto my = detail::window_mean(y, window, stride, kind);
    auto ex2 = detail::window_mean(mul(x, x), window, stride, kind);
    auto ey2 = detail::window_mean(mul(y, y), window, stride, kind);
    auto exy = detail::window_mean(mul(x, y), window, stride, kind);
    auto mx2 = mul(mx, mx);
    auto my2 = mul(my, my);
    auto var_x = sub(ex2, mx2);
    auto var_y = sub(ey2, my2);
    auto cov = sub(exy, mul(mx, my));

    auto num = mul(add_scalar(mul_scalar(mul(mx, my), T(2)), c1),
                   add_scalar(mul_scalar(cov, T(2)), c2));
    auto den = mul(add_scalar(add(mx2, my2), c1), add_scalar(add(var_x, var_y), c2));
    return mean(div(num, den));
}

// DISTS-style perceptual distance over the raw image plus the three frozen
// pyramid stages. Per stage and channel, spatial statistics feed a texture
// term (2 mu_x mu_y + c1) / (mu_x^2 + mu_y^2 + c1) and a structure term
// (2 cov + c2) / (var_x + var_y + c2); similarity is their equally weighted
// mean over all channels of all stages. Returns 1 - similarity, 0 iff the
// inputs agree on every tested statistic.
template <class T>
BasicTensor<T> dist_loss(const BasicTensor<T>& x, const BasicTensor<T>& y,
                         const FeaturePyramid<T>& pyramid) {
    if (x.shape() != y.shape()) {
        throw ShapeError("dist_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
    }
    const T c1 = T(1e-6);
    const T c2 = T(1e-6);

    std::vector<BasicTensor<T>> xs{x}, ys{y};
    for (auto& s : pyramid.stages(x)) xs.push_back(s);
    for (auto& s : pyramid.stages(y)) ys.push_back(s);

    std::vector<BasicTensor<T>> terms;
    for (size_t s = 0; s < xs.size(); ++s) {
        const int c = xs[s].dim(0);
        const int hw = xs[s].dim(1) * xs[s].dim(2);
        auto xf = reshape(xs[s], {c, hw});
        auto yf = reshape(ys[s], {c, hw});
        auto mx = row_mean(xf);
        auto my = row_mean(yf);
        auto ex2 = row_mean(mul(xf, xf));
        auto ey2 = row_mean(mul(yf, yf));
        auto exy = row_mean(mul(xf, yf));
        auto mx2 = mul(mx, mx);
        auto my2 = mul(my, my);
        auto var_x = sub(ex2, mx2);
        auto var_y = sub(ey2, my2);
        auto cov = sub(exy, mul(mx, my));

        auto texture = div(add_scalar(mul_scalar(mul(mx, my), T(2)), c1),
                           add_scalar(add(mx2, my2), c1));
        auto structure = div(add_scalar(mul_scalar(cov, T(2)), c2),
                             add_scalar(add(var_x, var_y), c2));
        terms.push_back(add(mul_scalar(texture, T(0.5)), mul_scalar(structure, T(0.5))));
    }
    auto similarity = mean(concat(terms, 0));
    return sub_from_scalar(T(1), similarity);
}

// lambda1 * DIST + lambda2 * (1 - SSIM).
template <class T>
BasicTensor<T> perceptual_loss(const BasicTensor<T>& x_ref, const BasicTensor<T>& x_rec,
                               const LossWeights<T>& w, const FeaturePyramid<T>& pyramid) {
    auto d = dist_loss(x_rec, x_ref, pyramid);
    auto s = sub_from_scalar(T(1), ssim(x_rec, x_ref));
    return add(mul_scalar(d, w.lambda1), mul_scalar(s, w.lambda2));
}

namespace detail {

template <class T>
void check_finite_logit(const BasicTensor<T>& logit, const char* who) {
    if (logit.numel() != 1) {
        throw ContractError(std::string(who) + ": logit must be scalar, got " +
                            shape_str(logit.shape()));
    }
    if (!std::isfinite(logit.data()[0])) throw NumericError(std::string(who) + ": non-finite logit");
}

} // namespace detail

// -[log D(real) + log(1 - D(fake))] with D = sigmoid, in log-sigmoid form:
// softplus(-l_real) + softplus(l_fake). Stable for any finite logit.
template <class T>
BasicTensor<T> adv_d(const BasicTensor<T>& logit_real, const BasicTensor<T>& logit_fake) {
    detail::check_finite_logit(logit_real, "adv_d");
    detail::check_finite_logit(logit_fake, "adv_d");
    return reshape(add(softplus(neg(logit_real)), softplus(logit_fake)), {1});
}

// -log D(fake) = softplus(-l_fake).
template <class T>
BasicTensor<T> adv_g(const BasicTensor<T>& logit_fake) {
    detail::check_finite_logit(logit_fake, "adv_g");
    return softplus(neg(logit_fake));
}

// Eq. objective for the generator: perceptual + lambda3 * adv_g.
template <class T>
BasicTensor<T> total_generator_loss(const BasicTensor<T>& x_ref, const BasicTensor<T>& x_rec,
                                    const BasicTensor<T>& logit_fake, const LossWeights<T>& w,
                                    const FeaturePyramid<T>& pyramid) {
    return add(perceptual_loss(x_ref, x_rec, w, pyramid), mul_scalar(adv_g(logit_fake), w.lambda3));
}

} // namespace refgen
