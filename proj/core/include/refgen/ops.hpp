#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "refgen/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes explicitly (the only
// implicit broadcast anywhere is scalar-with-tensor), runs the forward in
// plain loops, and records its adjoint onto the active tape when an input
// requires grad. Backward closures accumulate additively into `grad`.

namespace refgen {

namespace detail {

template <class T>
inline bool tape_wants(std::initializer_list<BasicTensor<T>> inputs) {
    if (!Tape<T>::current()) return false;
    for (const auto& t : inputs) {
        if (t.requires_grad()) return true;
    }
    return false;
}

template <class T, class Fn>
inline void record(BasicTensor<T>& out, Fn&& backward) {
    out.set_requires_grad(true);
    auto os = out.state();
    Tape<T>::current()->record(
        [os, fn = std::forward<Fn>(backward)] {
            if (!os->grad_allocated()) return;
            fn();
        },
        os);
}

template <class T>
inline void check_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] + b.data()[i];
    if (detail::tape_wants<T>({a, b})) {
        auto as = a.state(), bs = b.state(), os = out.state();
        detail::record(out, [as, bs, os] {
            const size_t m = os->numel();
            if (as->requires_grad) {
                as->ensure_grad();
                for (size_t i = 0; i < m; ++i) as->grad[i] += os->grad[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (size_t i = 0; i < m; ++i) bs->grad[i] += os->grad[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] - b.data()[i];
    if (detail::tape_wants<T>({a, b})) {
        auto as = a.state(), bs = b.state(), os = out.state();
        detail::record(out, [as, bs, os] {
            const size_t m = os->numel();
            if (as->requires_grad) {
                as->ensure_grad();
                for (size_t i = 0; i < m; ++i) as->grad[i] += os->grad[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (size_t i = 0; i < m; ++i) bs->grad[i] -= os->grad[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];
    if (detail::tape_wants<T>({a, b})) {
        auto as = a.state(), bs = b.state(), os = out.state();
        detail::record(out, [as, bs, os] {
            const size_t m = os->numel();
            if (as->requires_grad) {
                as->ensure_grad();
                for (size_t i = 0; i < m; ++i) as->grad[i] += os->grad[i] * bs->data[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (size_t i = 0; i < m; ++i) bs->grad[i] += os->grad[i] * as->data[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] / b.data()[i];
    if (detail::tape_wants<T>({a, b})) {
        auto as = a.state(), bs = b.state(), os = out.state();
        detail::record(out, [as, bs, os] {
            const size_t m = os->numel();
            if (as->requires_grad) {
                as->ensure_grad();
                for (size_t i = 0; i < m; ++i) as->grad[i] += os->grad[i] / bs->data[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (size_t i = 0; i < m; ++i) {
                    bs->grad[i] -= os->grad[i] * as->data[i] / (bs->data[i] * bs->data[i]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// scalar-with-tensor
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T c) {
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] + c;
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os] {
            as->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) as->grad[i] += os->grad[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T c) {
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * c;
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os, c] {
            as->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) as->grad[i] += os->grad[i] * c;
        });
    }
    return out;
}

// c - a
template <class T>
BasicTensor<T> sub_from_scalar(T c, const BasicTensor<T>& a) {
    auto out = BasicTensor<T>::zeros(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = c - a.data()[i];
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os] {
            as->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) as->grad[i] -= os->grad[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
    return sub_from_scalar(T(0), a);
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = BasicTensor<T>::zeros({m, n});
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const T aik = A[i * k + kk];
            const T* Brow = B + kk * n;
            T* Crow = C + i * n;
            for (int j = 0; j < n; ++j) Crow[j] += aik * Brow[j];
        }
    }
    if (detail::tape_wants<T>({a, b})) {
        auto as = a.state(), bs = b.state(), os = out.state();
        detail::record(out, [as, bs, os, m, k, n] {
            const T* dC = os->grad.data();
            if (as->requires_grad) {
                as->ensure_grad();
                // dA = dC . B^T
                for (int i = 0; i < m; ++i) {
                    for (int kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        const T* dCrow = dC + i * n;
                        const T* Brow = bs->data.data() + kk * n;
                        for (int j = 0; j < n; ++j) acc += dCrow[j] * Brow[j];
                        as->grad[i * k + kk] += acc;
                    }
                }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                // dB = A^T . dC
                for (int i = 0; i < m; ++i) {
                    const T* dCrow = dC + i * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const T aik = as->data[i * k + kk];
                        T* dBrow = bs->grad.data() + kk * n;
                        for (int j = 0; j < n; ++j) dBrow[j] += aik * dCrow[j];
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: need 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = BasicTensor<T>::zeros({n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.mutable_data()[j * m + i] = a.data()[i * n + j];
    }
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os, m, n] {
            as->ensure_grad();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) as->grad[i * n + j] += os->grad[j * m + i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    }
    auto out = BasicTensor<T>::from_data(std::move(shape), a.data());
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os] {
            as->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) as->grad[i] += os->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat / slice
// ---------------------------------------------------------------------------

namespace detail {

inline void split_at_axis(const Shape& s, int axis, size_t& outer, size_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= static_cast<size_t>(s[i]);
}

} // namespace detail

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(ref.size())) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    }
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(ref.size())) {
            throw ShapeError("concat: rank mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
        }
        for (int i = 0; i < p.ndim(); ++i) {
            if (i != axis && p.dim(i) != ref[static_cast<size_t>(i)]) {
                throw ShapeError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
            }
        }
        total += p.dim(axis);
    }
    Shape out_shape = ref;
    out_shape[static_cast<size_t>(axis)] = total;
    auto out = BasicTensor<T>::zeros(out_shape);

    size_t outer, inner;
    detail::split_at_axis(out_shape, axis, outer, inner);
    size_t at = 0;  // element offset along axis
    for (const auto& p : parts) {
        const size_t len = static_cast<size_t>(p.dim(axis));
        for (size_t o = 0; o < outer; ++o) {
            const T* src = p.data().data() + o * len * inner;
            T* dst = out.mutable_data().data() + (o * static_cast<size_t>(total) + at) * inner;
            std::copy(src, src + len * inner, dst);
        }
        at += len;
    }

    bool want = false;
    for (const auto& p : parts) want = want || p.requires_grad();
    if (Tape<T>::current() && want) {
        std::vector<std::shared_ptr<typename BasicTensor<T>::Storage>> states;
        states.reserve(parts.size());
        for (const auto& p : parts) states.push_back(p.state());
        auto os = out.state();
        detail::record(out, [states, os, outer, inner, total, axis] {
            size_t pos = 0;
            for (const auto& ps : states) {
                const size_t len = static_cast<size_t>(ps->shape[static_cast<size_t>(axis)]);
                if (ps->requires_grad) {
                    ps->ensure_grad();
                    for (size_t o = 0; o < outer; ++o) {
                        const T* g = os->grad.data() + (o * static_cast<size_t>(total) + pos) * inner;
                        T* dst = ps->grad.data() + o * len * inner;
                        for (size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                    }
                }
                pos += len;
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b, int axis) {
    return concat(std::vector<BasicTensor<T>>{a, b}, axis);
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, int start, int len) {
    if (axis < 0 || axis >= a.ndim()) {
        throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
    }
    if (start < 0 || len < 0 || start + len > a.dim(axis)) {
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    auto out = BasicTensor<T>::zeros(out_shape);
    size_t outer, inner;
    detail::split_at_axis(a.shape(), axis, outer, inner);
    const size_t full = static_cast<size_t>(a.dim(axis));
    for (size_t o = 0; o < outer; ++o) {
        const T* src = a.data().data() + (o * full + static_cast<size_t>(start)) * inner;
        T* dst = out.mutable_data().data() + o * static_cast<size_t>(len) * inner;
        std::copy(src, src + static_cast<size_t>(len) * inner, dst);
    }
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os, outer, inner, full, start, len] {
            as->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                const T* g = os->grad.data() + o * static_cast<size_t>(len) * inner;
                T* dst = as->grad.data() + (o * full + static_cast<size_t>(start)) * inner;
                for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / reductions
// ---------------------------------------------------------------------------

// Row softmax with per-row max subtraction.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
    if (x.ndim() != 2) throw ShapeError("softmax_rows: need 2-D, got " + shape_str(x.shape()));
    for (T v : x.data()) {
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
    }
    const int m = x.dim(0), n = x.dim(1);
    auto out = BasicTensor<T>::zeros(x.shape());
    for (int i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        T* orow = out.mutable_data().data() + i * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T z = T(0);
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os, m, n] {
            xs->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const T* y = os->data.data() + i * n;
                const T* dy = os->grad.data() + i * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
                T* dx = xs->grad.data() + i * n;
                for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    auto out = BasicTensor<T>::scalar(acc);
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os] {
            as->ensure_grad();
            const T g = os->grad[0];
            for (auto& d : as->grad) d += g;
        });
    }
    return out;
}

// Sum-then-single-divide so that the mean of n equal values is exact.
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    const T n = static_cast<T>(a.numel());
    auto out = BasicTensor<T>::scalar(acc / n);
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os, n] {
            as->ensure_grad();
            const T g = os->grad[0] / n;
            for (auto& d : as->grad) d += g;
        });
    }
    return out;
}

// [m,n] -> [m], mean along the last axis.
template <class T>
BasicTensor<T> row_mean(const BasicTensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("row_mean: need 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = BasicTensor<T>::zeros({m});
    for (int i = 0; i < m; ++i) {
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += a.data()[i * n + j];
        out.mutable_data()[i] = acc / static_cast<T>(n);
    }
    if (detail::tape_wants<T>({a})) {
        auto as = a.state(), os = out.state();
        detail::record(out, [as, os, m, n] {
            as->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const T g = os->grad[i] / static_cast<T>(n);
                for (int j = 0; j < n; ++j) as->grad[i * n + j] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization / nonlinearities
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
    if (x.ndim() != 2) throw ShapeError("layer_norm: need 2-D, got " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    if (gamma.ndim() != 1 || gamma.dim(0) != n || beta.ndim() != 1 || beta.dim(0) != n) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width of " + shape_str(x.shape()));
    }
    auto out = BasicTensor<T>::zeros(x.shape());
    std::vector<T> xhat(static_cast<size_t>(m) * n);
    std::vector<T> inv_std(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int j = 0; j < n; ++j) {
            const T xh = (row[j] - mu) * is;
            xhat[static_cast<size_t>(i) * n + j] = xh;
            out.mutable_data()[i * n + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    if (detail::tape_wants<T>({x, gamma, beta})) {
        auto xs = x.state(), gs = gamma.state(), bs = beta.state(), os = out.state();
        detail::record(out, [xs, gs, bs, os, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) bs->grad[j] += os->grad[i * n + j];
                }
            }
            if (gs->requires_grad) {
                gs->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) {
                        gs->grad[j] += os->grad[i * n + j] * xhat[static_cast<size_t>(i) * n + j];
                    }
                }
            }
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const T* dy = os->grad.data() + i * n;
                    const T* xh = xhat.data() + static_cast<size_t>(i) * n;
                    T mean_dxh = T(0), mean_dxh_xh = T(0);
                    for (int j = 0; j < n; ++j) {
                        const T dxh = dy[j] * gs->data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= static_cast<T>(n);
                    mean_dxh_xh /= static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        const T dxh = dy[j] * gs->data[j];
                        xs->grad[i * n + j] += inv_std[static_cast<size_t>(i)] *
                                               (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
    auto out = BasicTensor<T>::zeros(x.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) {
        const T v = x.data()[i];
        out.mutable_data()[i] = v / (T(1) + std::exp(-v));
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os] {
            xs->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) {
                const T v = xs->data[i];
                const T s = T(1) / (T(1) + std::exp(-v));
                xs->grad[i] += os->grad[i] * s * (T(1) + v * (T(1) - s));
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    auto out = BasicTensor<T>::zeros(x.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os] {
            xs->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) {
                const T y = os->data[i];
                xs->grad[i] += os->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// log(1 + e^x), computed without overflow for any finite x.
template <class T>
BasicTensor<T> softplus(const BasicTensor<T>& x) {
    auto out = BasicTensor<T>::zeros(x.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) {
        const T v = x.data()[i];
        out.mutable_data()[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os] {
            xs->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) {
                xs->grad[i] += os->grad[i] / (T(1) + std::exp(-xs->data[i]));
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
    auto out = BasicTensor<T>::zeros(x.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = std::log(x.data()[i]);
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os] {
            xs->ensure_grad();
            for (size_t i = 0; i < os->numel(); ++i) xs->grad[i] += os->grad[i] / xs->data[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// spatial ops on [C,H,W]
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias, int stride, int pad) {
    if (x.ndim() != 3 || w.ndim() != 4 || x.dim(0) != w.dim(1)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
    }
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != co)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs kernel " + shape_str(w.shape()));
    }
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    }
    auto out = BasicTensor<T>::zeros({co, oh, ow});
    for (int c = 0; c < co; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = has_bias ? bias.data()[c] : T(0);
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            acc += x.data()[(ic * h + iy) * wd + ix] *
                                   w.data()[((c * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.mutable_data()[(c * oh + oy) * ow + ox] = acc;
            }
        }
    }
    const bool want = has_bias ? detail::tape_wants<T>({x, w, bias}) : detail::tape_wants<T>({x, w});
    if (want) {
        auto xs = x.state(), ws = w.state(), os = out.state();
        auto bs = has_bias ? bias.state() : nullptr;
        detail::record(out, [xs, ws, bs, os, ci, h, wd, co, kh, kw, oh, ow, stride, pad] {
            if (bs && bs->requires_grad) bs->ensure_grad();
            if (xs->requires_grad) xs->ensure_grad();
            if (ws->requires_grad) ws->ensure_grad();
            for (int c = 0; c < co; ++c) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const T g = os->grad[(c * oh + oy) * ow + ox];
                        if (g == T(0)) continue;
                        if (bs && bs->requires_grad) bs->grad[c] += g;
                        for (int ic = 0; ic < ci; ++ic) {
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    const size_t xi = (static_cast<size_t>(ic) * h + iy) * wd + ix;
                                    const size_t wi = ((static_cast<size_t>(c) * ci + ic) * kh + ky) * kw + kx;
                                    if (xs->requires_grad) xs->grad[xi] += g * ws->data[wi];
                                    if (ws->requires_grad) ws->grad[wi] += g * xs->data[xi];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, int stride, int pad) {
    return conv2d(x, w, BasicTensor<T>(), stride, pad);
}

// Non-overlapping-grid average pooling; windows must tile exactly.
template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, int k, int stride) {
    if (x.ndim() != 3) throw ShapeError("avg_pool2d: need [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0) {
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " stride " +
                         std::to_string(stride) + " does not tile " + shape_str(x.shape()));
    }
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    const T inv = T(1) / static_cast<T>(k * k);
    auto out = BasicTensor<T>::zeros({c, oh, ow});
    for (int ic = 0; ic < c; ++ic) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = T(0);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        acc += x.data()[(ic * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.mutable_data()[(ic * oh + oy) * ow + ox] = acc / static_cast<T>(k * k);
            }
        }
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os, c, h, w, oh, ow, k, stride, inv] {
            xs->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const T g = os->grad[(ic * oh + oy) * ow + ox] * inv;
                        for (int ky = 0; ky < k; ++ky) {
                            for (int kx = 0; kx < k; ++kx) {
                                xs->grad[(ic * h + oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Nearest-neighbor resize; source index is floor(out_index * in / out).
template <class T>
BasicTensor<T> resize_nearest(const BasicTensor<T>& x, int h2, int w2) {
    if (x.ndim() != 3) throw ShapeError("resize_nearest: need [C,H,W], got " + shape_str(x.shape()));
    if (h2 < 1 || w2 < 1) throw ContractError("resize_nearest: target size must be positive");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto out = BasicTensor<T>::zeros({c, h2, w2});
    for (int ic = 0; ic < c; ++ic) {
        for (int oy = 0; oy < h2; ++oy) {
            const int sy = static_cast<int>(static_cast<int64_t>(oy) * h / h2);
            for (int ox = 0; ox < w2; ++ox) {
                const int sx = static_cast<int>(static_cast<int64_t>(ox) * w / w2);
                out.mutable_data()[(ic * h2 + oy) * w2 + ox] = x.data()[(ic * h + sy) * w + sx];
            }
        }
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os, c, h, w, h2, w2] {
            xs->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                for (int oy = 0; oy < h2; ++oy) {
                    const int sy = static_cast<int>(static_cast<int64_t>(oy) * h / h2);
                    for (int ox = 0; ox < w2; ++ox) {
                        const int sx = static_cast<int>(static_cast<int64_t>(ox) * w / w2);
                        xs->grad[(ic * h + sy) * w + sx] += os->grad[(ic * h2 + oy) * w2 + ox];
                    }
                }
            }
        });
    }
    return out;
}

// [C,H,W] -> [C*p*p, H/p, W/p]; pure index permutation, exact inverse below.
template <class T>
BasicTensor<T> space_to_depth(const BasicTensor<T>& x, int p) {
    if (x.ndim() != 3) throw ShapeError("space_to_depth: need [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % p != 0 || w % p != 0) {
        throw ShapeError("space_to_depth: " + shape_str(x.shape()) + " not divisible by patch " +
                         std::to_string(p));
    }
    const int h2 = h / p, w2 = w / p;
    auto out = BasicTensor<T>::zeros({c * p * p, h2, w2});
    for (int ic = 0; ic < c; ++ic) {
        for (int dy = 0; dy < p; ++dy) {
            for (int dx = 0; dx < p; ++dx) {
                const int oc = (ic * p + dy) * p + dx;
                for (int y = 0; y < h2; ++y) {
                    for (int xw = 0; xw < w2; ++xw) {
                        out.mutable_data()[(oc * h2 + y) * w2 + xw] =
                            x.data()[(ic * h + y * p + dy) * w + xw * p + dx];
                    }
                }
            }
        }
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os, c, h, w, p, h2, w2] {
            xs->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        const int oc = (ic * p + dy) * p + dx;
                        for (int y = 0; y < h2; ++y) {
                            for (int xw = 0; xw < w2; ++xw) {
                                xs->grad[(ic * h + y * p + dy) * w + xw * p + dx] +=
                                    os->grad[(oc * h2 + y) * w2 + xw];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> depth_to_space(const BasicTensor<T>& x, int p) {
    if (x.ndim() != 3) throw ShapeError("depth_to_space: need [C,H,W], got " + shape_str(x.shape()));
    const int cpp = x.dim(0), h2 = x.dim(1), w2 = x.dim(2);
    if (cpp % (p * p) != 0) {
        throw ShapeError("depth_to_space: channels of " + shape_str(x.shape()) +
                         " not divisible by patch^2 " + std::to_string(p * p));
    }
    const int c = cpp / (p * p);
    const int h = h2 * p, w = w2 * p;
    auto out = BasicTensor<T>::zeros({c, h, w});
    for (int ic = 0; ic < c; ++ic) {
        for (int dy = 0; dy < p; ++dy) {
            for (int dx = 0; dx < p; ++dx) {
                const int sc = (ic * p + dy) * p + dx;
                for (int y = 0; y < h2; ++y) {
                    for (int xw = 0; xw < w2; ++xw) {
                        out.mutable_data()[(ic * h + y * p + dy) * w + xw * p + dx] =
                            x.data()[(sc * h2 + y) * w2 + xw];
                    }
                }
            }
        }
    }
    if (detail::tape_wants<T>({x})) {
        auto xs = x.state(), os = out.state();
        detail::record(out, [xs, os, c, h, w, p, h2, w2] {
            xs->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        const int sc = (ic * p + dy) * p + dx;
                        for (int y = 0; y < h2; ++y) {
                            for (int xw = 0; xw < w2; ++xw) {
                                xs->grad[(sc * h2 + y) * w2 + xw] +=
                                    os->grad[(ic * h + y * p + dy) * w + xw * p + dx];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// lookup / row-wise scaling
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
    const int v = table.dim(0), w = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw ContractError("gather_rows: id " + std::to_string(id) + " outside table " +
                                shape_str(table.shape()));
        }
    }
    auto out = BasicTensor<T>::zeros({static_cast<int>(ids.size()), w});
    for (size_t i = 0; i < ids.size(); ++i) {
        const T* src = table.data().data() + static_cast<size_t>(ids[i]) * w;
        std::copy(src, src + w, out.mutable_data().data() + i * w);
    }
    if (detail::tape_wants<T>({table})) {
        auto ts = table.state(), os = out.state();
        detail::record(out, [ts, os, ids, w] {
            ts->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                for (int j = 0; j < w; ++j) {
                    ts->grad[static_cast<size_t>(ids[i]) * w + j] += os->grad[i * w + j];
                }
            }
        });
    }
    return out;
}

// out[i,j] = x[i,j] * s[i]
template <class T>
BasicTensor<T> scale_rows(const BasicTensor<T>& x, const BasicTensor<T>& s) {
    if (x.ndim() != 2 || s.ndim() != 1 || s.dim(0) != x.dim(0)) {
        throw ShapeError("scale_rows: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    }
    const int m = x.dim(0), n = x.dim(1);
    auto out = BasicTensor<T>::zeros(x.shape());
    for (int i = 0; i < m; ++i) {
        const T si = s.data()[i];
        for (int j = 0; j < n; ++j) out.mutable_data()[i * n + j] = x.data()[i * n + j] * si;
    }
    if (detail::tape_wants<T>({x, s})) {
        auto xs = x.state(), ss = s.state(), os = out.state();
        detail::record(out, [xs, ss, os, m, n] {
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const T si = ss->data[i];
                    for (int j = 0; j < n; ++j) xs->grad[i * n + j] += os->grad[i * n + j] * si;
                }
            }
            if (ss->requires_grad) {
                ss->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (int j = 0; j < n; ++j) acc += os->grad[i * n + j] * xs->data[i * n + j];
                    ss->grad[i] += acc;
                }
            }
        });
    }
    return out;
}

// out[i,j] = x[i,j] + v[j]
template <class T>
BasicTensor<T> add_row_broadcast(const BasicTensor<T>& x, const BasicTensor<T>& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.dim(1)) {
        throw ShapeError("add_row_broadcast: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    }
    const int m = x.dim(0), n = x.dim(1);
    auto out = BasicTensor<T>::zeros(x.shape());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.mutable_data()[i * n + j] = x.data()[i * n + j] + v.data()[j];
    }
    if (detail::tape_wants<T>({x, v})) {
        auto xs = x.state(), vs = v.state(), os = out.state();
        detail::record(out, [xs, vs, os, m, n] {
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (size_t i = 0; i < os->numel(); ++i) xs->grad[i] += os->grad[i];
            }
            if (vs->requires_grad) {
                vs->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) vs->grad[j] += os->grad[i * n + j];
                }
            }
        });
    }
    return out;
}

} // namespace refgen
