#pragma once

#include <cmath>

#include "refgen/ops.hpp"
#include "refgen/rng.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

// Easy-to-hard crop schedule for the adapter-branch input during stage 2.
struct CurriculumParams {
    double r_min = 0.1;
    double r_max = 1.0;
    double lambda = 0.025;
    int total_iters = 800;  // I
};

// r_i = lambda^(i/I) * (r_max - r_min) + r_min, decaying from r_max at i=0
// to lambda*(r_max-r_min)+r_min at i=I. Iterations past I clamp to I.
inline double crop_lower_bound(int i, const CurriculumParams& p) {
    if (i < 0) throw ContractError("crop_lower_bound: negative iteration");
    if (i > p.total_iters) i = p.total_iters;
    const double exponent = static_cast<double>(i) / static_cast<double>(p.total_iters);
    return std::pow(p.lambda, exponent) * (p.r_max - p.r_min) + p.r_min;
}

// r_crop ~ U(r_i, r_max).
inline double sample_crop_scale(Rng& rng, double r_i, double r_max) {
    if (r_i > r_max) throw ContractError("sample_crop_scale: r_i > r_max");
    if (r_i == r_max) return r_max;
    return rng.uniform(r_i, r_max);
}

// Axis-aligned square crop of side ceil(r_crop * min(H,W)) at a uniform
// position, resized back to the input size with nearest neighbor.
template <class T>
BasicTensor<T> random_crop(const BasicTensor<T>& image, double r_crop, Rng& rng) {
    if (image.ndim() != 3) {
        throw ShapeError("random_crop: need [C,H,W], got " + shape_str(image.shape()));
    }
    if (r_crop <= 0.0 || r_crop > 1.0) {
        throw ContractError("random_crop: r_crop must be in (0,1], got " + std::to_string(r_crop));
    }
    const int h = image.dim(1), w = image.dim(2);
    int side = static_cast<int>(std::ceil(r_crop * std::min(h, w)));
    if (side < 1) side = 1;
    const int oy = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(h - side + 1)));
    const int ox = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(w - side + 1)));
    auto cropped = slice(slice(image, 1, oy, side), 2, ox, side);
    return resize_nearest(cropped, h, w);
}

} // namespace refgen
