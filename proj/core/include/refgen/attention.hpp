#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "refgen/ops.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

// Low-rank adapted projection, row convention: y = x.w + scale * (x.a).b.
// `a` is the input-side factor, `b` the output-side factor; `b` starts at
// zero so the initial forward equals the base weight exactly. The base stays
// frozen during training.
template <class T>
struct LoraLinear {
    BasicTensor<T> w;  // [in, out]
    BasicTensor<T> a;  // [in, rank]
    BasicTensor<T> b;  // [rank, out]
    T scale = T(1);    // alpha / rank

    bool has_lora() const { return a.defined(); }

    BasicTensor<T> forward(const BasicTensor<T>& x) const {
        auto y = matmul(x, w);
        if (has_lora()) {
            y = add(y, mul_scalar(matmul(matmul(x, a), b), scale));
        }
        return y;
    }
};

// Projections of one attention layer.
template <class T>
struct AttentionParams {
    LoraLinear<T> wq;    // hidden width -> d
    LoraLinear<T> wk;    // conditioning width -> d
    LoraLinear<T> wv;
    LoraLinear<T> wout;  // d -> hidden width
    int d = 0;
};

// Image-branch key/value projections of the decoupled cross-attention, plus
// the identity scale applied to that branch.
template <class T>
struct DecoupledAdapterParams {
    BasicTensor<T> wkx;  // [image token width, d]
    BasicTensor<T> wvx;
    T s_x = T(1.6);

    DecoupledAdapterParams with_scale(T s) const {
        DecoupledAdapterParams p = *this;
        p.s_x = s;
        return p;
    }
};

// Key/value pairs harvested from the frozen reference network, one entry per
// self-attention layer.
template <class T>
struct ReferenceKV {
    struct LayerKV {
        BasicTensor<T> k;  // [n_ref, d]
        BasicTensor<T> v;
    };
    std::vector<LayerKV> layers;

    bool empty() const { return layers.empty(); }
};

// Per-layer binary subject mask over the layer's spatial token grid.
struct LayerMask {
    std::vector<uint8_t> m;  // h*w entries in {0,1}, row-major
    int h = 0;
    int w = 0;

    bool all_of(uint8_t v) const {
        for (uint8_t x : m) {
            if (x != v) return false;
        }
        return true;
    }
};

template <class T>
BasicTensor<T> mask_row_tensor(const LayerMask& mask) {
    const int n = static_cast<int>(mask.m.size());
    std::vector<T> v(mask.m.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(mask.m[i]);
    return BasicTensor<T>::from_data({n}, std::move(v));
}

// ---------------------------------------------------------------------------
// attention ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void check_attend_shapes(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, int d) {
    if (q.ndim() != 2 || q.dim(1) != d) {
        throw ShapeError("attend: Q " + shape_str(q.shape()) + " width != d=" + std::to_string(d));
    }
    if (k.ndim() != 2 || k.dim(1) != d) {
        throw ShapeError("attend: K " + shape_str(k.shape()) + " width != d=" + std::to_string(d));
    }
    if (v.ndim() != 2 || v.dim(1) != d) {
        throw ShapeError("attend: V " + shape_str(v.shape()) + " width != d=" + std::to_string(d));
    }
    if (k.dim(0) != v.dim(0)) {
        throw ShapeError("attend: K " + shape_str(k.shape()) + " vs V " + shape_str(v.shape()));
    }
    if (k.dim(0) < 1) throw ContractError("attend: need at least one key");
}

} // namespace detail

// SoftMax(Q K^T / sqrt(d)) V together with the row-stochastic weights.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> attend_with_probs(const BasicTensor<T>& q,
                                                            const BasicTensor<T>& k,
                                                            const BasicTensor<T>& v, int d) {
    detail::check_attend_shapes(q, k, v, d);
    auto scores = mul_scalar(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(d)));
    auto probs = softmax_rows(scores);
    return {matmul(probs, v), probs};
}

template <class T>
BasicTensor<T> attend(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                      int d) {
    return attend_with_probs(q, k, v, d).first;
}

template <class T>
BasicTensor<T> self_attention(const BasicTensor<T>& h, const AttentionParams<T>& p) {
    auto q = p.wq.forward(h);
    auto k = p.wk.forward(h);
    auto v = p.wv.forward(h);
    return p.wout.forward(attend(q, k, v, p.d));
}

// Self-attention over the augmented triplet (Q, K (+) K_ref, V (+) V_ref),
// concatenated along the token dimension. An empty reference (0 tokens)
// reduces to plain self-attention.
template <class T>
BasicTensor<T> inject_self_attention(const BasicTensor<T>& h, const AttentionParams<T>& p,
                                     const typename ReferenceKV<T>::LayerKV& ref) {
    auto q = p.wq.forward(h);
    auto k = p.wk.forward(h);
    auto v = p.wv.forward(h);
    if (ref.k.defined() && ref.k.dim(0) > 0) {
        if (ref.k.dim(1) != p.d || ref.v.dim(1) != p.d) {
            throw ShapeError("inject_self_attention: reference KV " + shape_str(ref.k.shape()) +
                             " width != layer d=" + std::to_string(p.d));
        }
        k = concat(k, ref.k, 0);
        v = concat(v, ref.v, 0);
    }
    return p.wout.forward(attend(q, k, v, p.d));
}

// Text-branch cross-attention tokens: Attn(Q, K_y, V_y). The caller applies
// the layer's output projection.
template <class T>
BasicTensor<T> cross_attention_text(const BasicTensor<T>& h, const BasicTensor<T>& c_y,
                                    const AttentionParams<T>& p) {
    if (!c_y.defined() || c_y.dim(0) < 1) {
        throw ContractError("cross_attention: text conditioning is mandatory");
    }
    auto q = p.wq.forward(h);
    auto ky = p.wk.forward(c_y);
    auto vy = p.wv.forward(c_y);
    return attend(q, ky, vy, p.d);
}

// Attn(Q,K_y,V_y) + s_x * Attn(Q,K_x,V_x); the second term drops at the
// argument level when s_x == 0. Also hands back the text-branch attention
// map for subject-mask extraction.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> decoupled_cross_attention_with_probs(
    const BasicTensor<T>& h, const BasicTensor<T>& c_y, const BasicTensor<T>& c_x,
    const AttentionParams<T>& p, const DecoupledAdapterParams<T>& a) {
    if (!c_y.defined() || c_y.dim(0) < 1) {
        throw ContractError("decoupled_cross_attention: text conditioning is mandatory");
    }
    auto q = p.wq.forward(h);
    auto ky = p.wk.forward(c_y);
    auto vy = p.wv.forward(c_y);
    auto [text, text_probs] = attend_with_probs(q, ky, vy, p.d);
    if (a.s_x == T(0)) return {text, text_probs};
    auto kx = matmul(c_x, a.wkx);
    auto vx = matmul(c_x, a.wvx);
    auto img = attend(q, kx, vx, p.d);
    return {add(text, mul_scalar(img, a.s_x)), text_probs};
}

template <class T>
BasicTensor<T> decoupled_cross_attention(const BasicTensor<T>& h, const BasicTensor<T>& c_y,
                                         const BasicTensor<T>& c_x, const AttentionParams<T>& p,
                                         const DecoupledAdapterParams<T>& a) {
    return decoupled_cross_attention_with_probs(h, c_y, c_x, p, a).first;
}

// Attn(Q,K_y,V_y) + s_x * M (.) Attn(Q,K_x,V_x). The mask gates the image
// branch per spatial token; an all-zero mask reduces to the text branch at
// the argument level.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> masked_decoupled_cross_attention_with_probs(
    const BasicTensor<T>& h, const BasicTensor<T>& c_y, const BasicTensor<T>& c_x,
    const AttentionParams<T>& p, const DecoupledAdapterParams<T>& a, const LayerMask& mask) {
    if (static_cast<int>(mask.m.size()) != h.dim(0)) {
        throw ShapeError("masked_decoupled_cross_attention: mask " + std::to_string(mask.h) + "x" +
                         std::to_string(mask.w) + " does not cover " + std::to_string(h.dim(0)) +
                         " tokens");
    }
    if (a.s_x == T(0) || mask.all_of(0)) {
        auto q = p.wq.forward(h);
        auto [text, probs] = attend_with_probs(q, p.wk.forward(c_y), p.wv.forward(c_y), p.d);
        return {text, probs};
    }
    if (!c_y.defined() || c_y.dim(0) < 1) {
        throw ContractError("masked_decoupled_cross_attention: text conditioning is mandatory");
    }
    auto q = p.wq.forward(h);
    auto ky = p.wk.forward(c_y);
    auto vy = p.wv.forward(c_y);
    auto [text, text_probs] = attend_with_probs(q, ky, vy, p.d);
    auto kx = matmul(c_x, a.wkx);
    auto vx = matmul(c_x, a.wvx);
    auto img = attend(q, kx, vx, p.d);
    auto gated = scale_rows(img, mask_row_tensor<T>(mask));
    return {add(text, mul_scalar(gated, a.s_x)), text_probs};
}

template <class T>
BasicTensor<T> masked_decoupled_cross_attention(const BasicTensor<T>& h, const BasicTensor<T>& c_y,
                                                const BasicTensor<T>& c_x, const AttentionParams<T>& p,
                                                const DecoupledAdapterParams<T>& a,
                                                const LayerMask& mask) {
    return masked_decoupled_cross_attention_with_probs(h, c_y, c_x, p, a, mask).first;
}

// ---------------------------------------------------------------------------
// subject mask extraction
// ---------------------------------------------------------------------------

// Aggregates the subject-token column of text-branch attention maps (averaged
// over all provided layers at the reference resolution), min-max normalizes,
// thresholds at tau (>= tau selects), and resizes nearest-neighbor to each
// requested layer grid. A constant aggregate map yields an all-ones mask so
// identity guidance is never silently dropped.
template <class T>
std::vector<LayerMask> extract_subject_mask(const std::vector<BasicTensor<T>>& attn_maps,
                                            int subject_token, double tau, int ref_h, int ref_w,
                                            const std::vector<std::pair<int, int>>& layer_grids) {
    if (attn_maps.empty()) throw ContractError("extract_subject_mask: no attention maps");
    const int m = attn_maps[0].dim(0);
    if (m != ref_h * ref_w) {
        throw ShapeError("extract_subject_mask: map rows " + std::to_string(m) +
                         " != reference grid " + std::to_string(ref_h) + "x" + std::to_string(ref_w));
    }
    std::vector<double> agg(static_cast<size_t>(m), 0.0);
    for (const auto& map : attn_maps) {
        if (map.ndim() != 2 || map.dim(0) != m) {
            throw ShapeError("extract_subject_mask: inconsistent map " + shape_str(map.shape()));
        }
        if (subject_token < 0 || subject_token >= map.dim(1)) {
            throw ContractError("extract_subject_mask: subject token " + std::to_string(subject_token) +
                                " outside " + std::to_string(map.dim(1)) + " text tokens");
        }
        const int n = map.dim(1);
        for (int i = 0; i < m; ++i) {
            agg[static_cast<size_t>(i)] += static_cast<double>(map.data()[i * n + subject_token]);
        }
    }
    for (auto& v : agg) v /= static_cast<double>(attn_maps.size());

    double lo = agg[0], hi = agg[0];
    for (double v : agg) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    LayerMask base;
    base.h = ref_h;
    base.w = ref_w;
    base.m.resize(static_cast<size_t>(m));
    if (hi == lo) {
        std::fill(base.m.begin(), base.m.end(), uint8_t{1});
    } else {
        for (int i = 0; i < m; ++i) {
            const double norm = (agg[static_cast<size_t>(i)] - lo) / (hi - lo);
            base.m[static_cast<size_t>(i)] = norm >= tau ? 1 : 0;
        }
    }

    std::vector<LayerMask> out;
    out.reserve(layer_grids.size());
    for (auto [h, w] : layer_grids) {
        LayerMask lm;
        lm.h = h;
        lm.w = w;
        lm.m.resize(static_cast<size_t>(h) * w);
        for (int y = 0; y < h; ++y) {
            const int sy = static_cast<int>(static_cast<int64_t>(y) * ref_h / h);
            for (int x = 0; x < w; ++x) {
                const int sx = static_cast<int>(static_cast<int64_t>(x) * ref_w / w);
                lm.m[static_cast<size_t>(y) * w + x] = base.m[static_cast<size_t>(sy) * ref_w + sx];
            }
        }
        out.push_back(std::move(lm));
    }
    return out;
}

} // namespace refgen
