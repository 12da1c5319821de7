#pragma once

#include <cmath>
#include <vector>

#include "refgen/ops.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

// Variance-preserving cosine schedule: alpha(t)^2 + sigma(t)^2 = 1 with
// alpha(0) = 1 exactly, alpha decreasing, sigma increasing. Coefficients are
// tabulated in double at construction.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int max_t = 1000) : max_t_(max_t) {
        if (max_t < 1) throw ContractError("NoiseSchedule: T must be >= 1");
        alpha_.resize(static_cast<size_t>(max_t) + 1);
        sigma_.resize(static_cast<size_t>(max_t) + 1);
        const double s = 0.008;
        auto f = [&](double t) {
            const double u = (t / max_t + s) / (1.0 + s) * (M_PI / 2.0);
            const double c = std::cos(u);
            return c * c;
        };
        const double f0 = f(0.0);
        for (int t = 0; t <= max_t; ++t) {
            double abar = f(static_cast<double>(t)) / f0;
            abar = std::min(1.0, std::max(0.0, abar));
            alpha_[static_cast<size_t>(t)] = std::sqrt(abar);
            sigma_[static_cast<size_t>(t)] = std::sqrt(1.0 - abar);
        }
    }

    int max_t() const { return max_t_; }
    double alpha(int t) const {
        check_t(t);
        return alpha_[static_cast<size_t>(t)];
    }
    double sigma(int t) const {
        check_t(t);
        return sigma_[static_cast<size_t>(t)];
    }

private:
    void check_t(int t) const {
        if (t < 0 || t > max_t_) {
            throw ContractError("NoiseSchedule: t=" + std::to_string(t) + " outside [0," +
                                std::to_string(max_t_) + "]");
        }
    }

    int max_t_;
    std::vector<double> alpha_;
    std::vector<double> sigma_;
};

// alpha(t) * z + sigma(t) * eps. Differentiable in z with gradient alpha(t).
// t = 0 returns z unchanged (alpha(0)=1, sigma(0)=0).
template <class T>
BasicTensor<T> forward_perturb(const BasicTensor<T>& z, int t, const BasicTensor<T>& eps,
                               const NoiseSchedule& schedule) {
    if (t < 0 || t > schedule.max_t()) {
        throw ContractError("forward_perturb: t=" + std::to_string(t) + " outside [0," +
                            std::to_string(schedule.max_t()) + "]");
    }
    if (t == 0) return z;
    if (eps.shape() != z.shape()) {
        throw ShapeError("forward_perturb: noise " + shape_str(eps.shape()) + " vs latent " +
                         shape_str(z.shape()));
    }
    return add(mul_scalar(z, static_cast<T>(schedule.alpha(t))),
               mul_scalar(eps, static_cast<T>(schedule.sigma(t))));
}

} // namespace refgen
