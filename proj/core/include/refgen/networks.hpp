#pragma once

#include <string>
#include <vector>

#include "refgen/attention.hpp"
#include "refgen/config.hpp"
#include "refgen/diffusion.hpp"
#include "refgen/ops.hpp"
#include "refgen/synthdata.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

// Branch activity per ablation mode.
inline bool mode_uses_refkv(Mode m) { return m == Mode::kFull || m == Mode::kSingleRefKv; }
inline bool mode_uses_adapter(Mode m) { return m != Mode::kSingleRefKv; }

// Instrumentation for branch-isolation checks.
struct RunCounters {
    size_t refkv_builds = 0;
    size_t refkv_injections = 0;
    size_t adapter_invocations = 0;
    size_t crops_applied = 0;

    void reset() { *this = RunCounters{}; }
};

template <class T>
struct NamedParam {
    std::string name;
    BasicTensor<T> tensor;
    bool trainable = false;
};

// ---------------------------------------------------------------------------
// latentizer: exact, invertible stand-in for the VAE
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> latentize(const BasicTensor<T>& image, int patch = 2) {
    return space_to_depth(image, patch);
}

template <class T>
BasicTensor<T> delatentize(const BasicTensor<T>& latent, int patch = 2) {
    return depth_to_space(latent, patch);
}

// ---------------------------------------------------------------------------
// fixed seeded feature pyramid
// ---------------------------------------------------------------------------

// Three frozen conv stages (stride 1, 2, 2). Weights depend only on the seed.
template <class T>
struct FeaturePyramid {
    BasicTensor<T> w1, b1;  // [8,3,3,3]
    BasicTensor<T> w2, b2;  // [16,8,3,3]
    BasicTensor<T> w3, b3;  // [32,16,3,3]

    static constexpr int kStageChannels[3] = {8, 16, 32};

    static FeaturePyramid seeded(uint64_t seed) {
        Rng rng(derive_seed(seed, 0x50595241));  // "PYRA"
        FeaturePyramid p;
        auto he = [&](Shape s) {
            const int fan_in = s[1] * s[2] * s[3];
            return BasicTensor<T>::randn(s, rng, std::sqrt(T(2) / static_cast<T>(fan_in)));
        };
        p.w1 = he({8, 3, 3, 3});
        p.b1 = BasicTensor<T>::zeros({8});
        p.w2 = he({16, 8, 3, 3});
        p.b2 = BasicTensor<T>::zeros({16});
        p.w3 = he({32, 16, 3, 3});
        p.b3 = BasicTensor<T>::zeros({32});
        return p;
    }

    // Stages at full, half, quarter resolution.
    std::vector<BasicTensor<T>> stages(const BasicTensor<T>& image) const {
        std::vector<BasicTensor<T>> out;
        auto s1 = silu(conv2d(image, w1, b1, 1, 1));
        auto s2 = silu(conv2d(s1, w2, b2, 2, 1));
        auto s3 = silu(conv2d(s2, w3, b3, 2, 1));
        out.push_back(std::move(s1));
        out.push_back(std::move(s2));
        out.push_back(std::move(s3));
        return out;
    }

    std::vector<NamedParam<T>> params(const std::string& prefix) const {
        return {
            {prefix + ".w1", w1, false}, {prefix + ".b1", b1, false},
            {prefix + ".w2", w2, false}, {prefix + ".b2", b2, false},
            {prefix + ".w3", w3, false}, {prefix + ".b3", b3, false},
        };
    }
};

// ---------------------------------------------------------------------------
// image token encoder: frozen pyramid + linear projection to n_tok tokens
// ---------------------------------------------------------------------------

template <class T>
struct ImageTokenEncoder {
    FeaturePyramid<T> pyramid;
    BasicTensor<T> proj_w;  // [flattened stage-3, n_tok*width]
    BasicTensor<T> proj_b;  // [n_tok*width]
    int n_tok = 4;
    int width = 64;

    static ImageTokenEncoder seeded(uint64_t seed, int image_size, int n_tok, int width,
                                    bool trainable_proj) {
        ImageTokenEncoder e;
        e.n_tok = n_tok;
        e.width = width;
        e.pyramid = FeaturePyramid<T>::seeded(derive_seed(seed, 0x494d47));  // "IMG"
        const int s3 = image_size / 4;
        const int flat = 32 * s3 * s3;
        Rng rng(derive_seed(seed, 0x50524f4a));  // "PROJ"
        e.proj_w = BasicTensor<T>::randn({flat, n_tok * width}, rng,
                                         std::sqrt(T(1) / static_cast<T>(flat)), trainable_proj);
        e.proj_b = BasicTensor<T>::zeros({n_tok * width}, trainable_proj);
        return e;
    }

    // [3,H,W] image -> [n_tok, width] tokens.
    BasicTensor<T> encode(const BasicTensor<T>& image) const {
        auto feats = pyramid.stages(image).back();
        const int flat = static_cast<int>(feats.numel());
        auto row = reshape(feats, {1, flat});
        auto tok = add_row_broadcast(matmul(row, proj_w), proj_b);
        return reshape(tok, {n_tok, width});
    }

    std::vector<NamedParam<T>> params(const std::string& prefix, bool proj_trainable) const {
        auto out = pyramid.params(prefix + ".pyramid");
        out.push_back({prefix + ".proj.w", proj_w, proj_trainable});
        out.push_back({prefix + ".proj.b", proj_b, proj_trainable});
        return out;
    }
};

// ---------------------------------------------------------------------------
// transformer block
// ---------------------------------------------------------------------------

template <class T>
struct LayerNormParams {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;

    BasicTensor<T> forward(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <class T>
struct Mlp {
    BasicTensor<T> w1, b1;
    BasicTensor<T> w2, b2;

    BasicTensor<T> forward(const BasicTensor<T>& x) const {
        return add_row_broadcast(matmul(silu(add_row_broadcast(matmul(x, w1), b1)), w2), b2);
    }
};

template <class T>
struct TransformerBlock {
    LayerNormParams<T> ln1, ln2, ln3;
    AttentionParams<T> self_attn;
    AttentionParams<T> cross_attn;
    DecoupledAdapterParams<T> adapter;
    Mlp<T> mlp;
};

// ---------------------------------------------------------------------------
// sinusoidal timestep embedding
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sinusoidal_embedding(int t, int width) {
    const int half = width / 2;
    std::vector<T> v(static_cast<size_t>(width), T(0));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        v[static_cast<size_t>(i)] = static_cast<T>(std::sin(t * freq));
        v[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
    }
    return BasicTensor<T>::from_data({width}, std::move(v));
}

// ---------------------------------------------------------------------------
// generator (and its frozen reference twin)
// ---------------------------------------------------------------------------

struct NetDims {
    int image_size = kImageSize;
    int patch = 2;
    int latent_ch = 12;   // 3 * patch^2
    int latent_hw = 16;   // image_size / patch
    int width = 64;
    int d = 64;
    int blocks = 4;
    int n_tok = 4;
    int grid = 8;         // latent_hw / 2 after the stride-2 encoder conv
    int mlp_hidden = 128;
    int vocab = kVocabSize;
};

template <class T>
struct GenForwardOptions {
    Mode mode = Mode::kFull;
    T s_x = T(1);
    const ReferenceKV<T>* ref = nullptr;
    // Mask-guided rescaling (inference only). `masks`, when set, supplies a
    // precomputed mask per block (auxiliary-pass variant); `same_pass_mask`
    // builds each block's mask from the text attention maps of the already
    // executed blocks, the first block seeing all-ones.
    const std::vector<LayerMask>* masks = nullptr;
    bool same_pass_mask = false;
    double tau = 0.6;
    int subject_token = kSubjectTokenIndex;
    RunCounters* counters = nullptr;
};

template <class T>
struct GenOutput {
    BasicTensor<T> latent;                       // [latent_ch, latent_hw, latent_hw]
    std::vector<BasicTensor<T>> text_attn_maps;  // per block, [grid*grid, ctx tokens]
};

template <class T>
struct Generator {
    NetDims dims;
    BasicTensor<T> conv_in_w, conv_in_b;
    std::vector<TransformerBlock<T>> blocks;
    BasicTensor<T> conv_out_w, conv_out_b;
    BasicTensor<T> ctx_table;  // [vocab, width], frozen
    ImageTokenEncoder<T> img_enc;

    static Generator init(const NetDims& dims, int lora_rank, uint64_t seed) {
        Generator g;
        g.dims = dims;
        Rng rng(derive_seed(seed, 0x47454e));  // "GEN"
        auto he_conv = [&](Shape s) {
            const int fan_in = s[1] * s[2] * s[3];
            return BasicTensor<T>::randn(s, rng, std::sqrt(T(2) / static_cast<T>(fan_in)));
        };
        auto lin = [&](int in, int out) {
            return BasicTensor<T>::randn({in, out}, rng, std::sqrt(T(1) / static_cast<T>(in)));
        };
        auto lora_lin = [&](int in, int out) {
            LoraLinear<T> l;
            l.w = lin(in, out);
            l.a = BasicTensor<T>::randn({in, lora_rank}, rng,
                                        std::sqrt(T(1) / static_cast<T>(in)), true);
            l.b = BasicTensor<T>::zeros({lora_rank, out}, true);
            l.scale = T(1);  // alpha = rank
            return l;
        };

        g.conv_in_w = he_conv({dims.width, dims.latent_ch, 3, 3});
        g.conv_in_b = BasicTensor<T>::zeros({dims.width});
        for (int i = 0; i < dims.blocks; ++i) {
            TransformerBlock<T> b;
            for (auto* ln : {&b.ln1, &b.ln2, &b.ln3}) {
                ln->gamma = BasicTensor<T>::filled({dims.width}, T(1));
                ln->beta = BasicTensor<T>::zeros({dims.width});
            }
            b.self_attn = {lora_lin(dims.width, dims.d), lora_lin(dims.width, dims.d),
                           lora_lin(dims.width, dims.d), lora_lin(dims.d, dims.width), dims.d};
            b.cross_attn = {lora_lin(dims.width, dims.d), lora_lin(dims.width, dims.d),
                            lora_lin(dims.width, dims.d), lora_lin(dims.d, dims.width), dims.d};
            b.adapter.wkx = BasicTensor<T>::randn({dims.width, dims.d}, rng,
                                                  std::sqrt(T(1) / static_cast<T>(dims.width)), true);
            b.adapter.wvx = BasicTensor<T>::randn({dims.width, dims.d}, rng,
                                                  std::sqrt(T(1) / static_cast<T>(dims.width)), true);
            b.mlp.w1 = BasicTensor<T>::randn({dims.width, dims.mlp_hidden}, rng,
                                             std::sqrt(T(2) / static_cast<T>(dims.width)));
            b.mlp.b1 = BasicTensor<T>::zeros({dims.mlp_hidden});
            b.mlp.w2 = BasicTensor<T>::randn({dims.mlp_hidden, dims.width}, rng,
                                             std::sqrt(T(1) / static_cast<T>(dims.mlp_hidden)));
            b.mlp.b2 = BasicTensor<T>::zeros({dims.width});
            g.blocks.push_back(std::move(b));
        }
        g.conv_out_w = he_conv({dims.latent_ch, dims.width, 3, 3});
        g.conv_out_b = BasicTensor<T>::zeros({dims.latent_ch});
        g.ctx_table = BasicTensor<T>::randn({dims.vocab, dims.width}, rng, T(1));
        g.img_enc = ImageTokenEncoder<T>::seeded(derive_seed(seed, 0x454e43), dims.image_size,
                                                 dims.n_tok, dims.width, /*trainable_proj=*/true);
        return g;
    }

    BasicTensor<T> embed_context(const std::vector<int>& codes) const {
        return gather_rows(ctx_table, codes);
    }

    BasicTensor<T> encode_image_tokens(const BasicTensor<T>& image) const {
        return img_enc.encode(image);
    }

    // One forward pass, noise latent to clean latent. Consumes eps exactly
    // once; everything downstream is deterministic in (eps, inputs, weights).
    GenOutput<T> forward(const BasicTensor<T>& eps, const std::vector<int>& ctx_codes,
                         const BasicTensor<T>& c_x, const GenForwardOptions<T>& opt) const {
        const bool use_ref = mode_uses_refkv(opt.mode);
        const bool use_adapter = mode_uses_adapter(opt.mode);
        if (use_ref) {
            if (!opt.ref) {
                throw ContractError("generator: mode " + mode_name(opt.mode) +
                                    " requires reference KV");
            }
            if (!opt.ref->layers.empty() &&
                static_cast<int>(opt.ref->layers.size()) != dims.blocks) {
                throw ShapeError("generator: reference KV has " +
                                 std::to_string(opt.ref->layers.size()) + " layers, expected " +
                                 std::to_string(dims.blocks));
            }
        }
        if (use_adapter && !c_x.defined()) {
            throw ContractError("generator: mode " + mode_name(opt.mode) + " requires image tokens");
        }

        auto c_y = embed_context(ctx_codes);
        const int m = dims.grid * dims.grid;

        auto hmap = conv2d(eps, conv_in_w, conv_in_b, 2, 1);
        auto h = transpose(reshape(hmap, {dims.width, m}));

        GenOutput<T> out;
        for (int i = 0; i < dims.blocks; ++i) {
            const auto& blk = blocks[static_cast<size_t>(i)];

            auto x = blk.ln1.forward(h);
            BasicTensor<T> sa;
            if (use_ref && !opt.ref->layers.empty()) {
                sa = inject_self_attention(x, blk.self_attn, opt.ref->layers[static_cast<size_t>(i)]);
                if (opt.counters) ++opt.counters->refkv_injections;
            } else {
                sa = self_attention(x, blk.self_attn);
            }
            h = add(h, sa);

            x = blk.ln2.forward(h);
            BasicTensor<T> cross_tokens;
            if (use_adapter) {
                if (opt.counters) ++opt.counters->adapter_invocations;
                auto a = blk.adapter.with_scale(opt.s_x);
                if (opt.masks || opt.same_pass_mask) {
                    LayerMask mask;
                    if (opt.masks) {
                        mask = opt.masks->at(static_cast<size_t>(i));
                    } else if (out.text_attn_maps.empty()) {
                        mask = LayerMask{std::vector<uint8_t>(static_cast<size_t>(m), 1), dims.grid,
                                         dims.grid};
                    } else {
                        mask = extract_subject_mask(out.text_attn_maps, opt.subject_token, opt.tau,
                                                    dims.grid, dims.grid,
                                                    {{dims.grid, dims.grid}})[0];
                    }
                    auto [tokens, probs] =
                        masked_decoupled_cross_attention_with_probs(x, c_y, c_x, blk.cross_attn, a, mask);
                    cross_tokens = tokens;
                    out.text_attn_maps.push_back(probs);
                } else {
                    auto [tokens, probs] =
                        decoupled_cross_attention_with_probs(x, c_y, c_x, blk.cross_attn, a);
                    cross_tokens = tokens;
                    out.text_attn_maps.push_back(probs);
                }
            } else {
                auto q = blk.cross_attn.wq.forward(x);
                auto [tokens, probs] = attend_with_probs(q, blk.cross_attn.wk.forward(c_y),
                                                         blk.cross_attn.wv.forward(c_y),
                                                         blk.cross_attn.d);
                cross_tokens = tokens;
                out.text_attn_maps.push_back(probs);
            }
            h = add(h, blk.cross_attn.wout.forward(cross_tokens));

            x = blk.ln3.forward(h);
            h = add(h, blk.mlp.forward(x));
        }

        auto fmap = reshape(transpose(h), {dims.width, dims.grid, dims.grid});
        auto up = resize_nearest(fmap, dims.latent_hw, dims.latent_hw);
        out.latent = sigmoid(conv2d(up, conv_out_w, conv_out_b, 1, 1));
        return out;
    }

    // Frozen twin sharing this generator's base weights, with LoRA factors
    // dropped. Base weights never receive gradients, so this equals the
    // pre-training snapshot at any time.
    Generator base_snapshot() const {
        Generator r = *this;
        for (auto& blk : r.blocks) {
            for (auto* attn : {&blk.self_attn, &blk.cross_attn}) {
                for (auto* l : {&attn->wq, &attn->wk, &attn->wv, &attn->wout}) {
                    l->a = BasicTensor<T>();
                    l->b = BasicTensor<T>();
                }
            }
        }
        return r;
    }

    // Single forward pass over the noised foreground latent, harvesting the
    // K/V each self-attention layer computes for itself. Runs text-only cross
    // attention; no injection, no adapter.
    ReferenceKV<T> harvest_reference_kv(const BasicTensor<T>& z_noised,
                                        const std::vector<int>& ctx_codes) const {
        auto c_y = embed_context(ctx_codes);
        const int m = dims.grid * dims.grid;
        auto hmap = conv2d(z_noised, conv_in_w, conv_in_b, 2, 1);
        auto h = transpose(reshape(hmap, {dims.width, m}));

        ReferenceKV<T> kv;
        for (const auto& blk : blocks) {
            auto x = blk.ln1.forward(h);
            auto k = blk.self_attn.wk.forward(x);
            auto v = blk.self_attn.wv.forward(x);
            kv.layers.push_back({k, v});
            auto q = blk.self_attn.wq.forward(x);
            h = add(h, blk.self_attn.wout.forward(attend(q, k, v, blk.self_attn.d)));

            x = blk.ln2.forward(h);
            h = add(h, blk.cross_attn.wout.forward(cross_attention_text(x, c_y, blk.cross_attn)));

            x = blk.ln3.forward(h);
            h = add(h, blk.mlp.forward(x));
        }
        return kv;
    }

    std::vector<NamedParam<T>> params(const std::string& prefix = "generator") const {
        std::vector<NamedParam<T>> out;
        auto lora = [&](const std::string& p, const LoraLinear<T>& l) {
            out.push_back({p + ".base", l.w, false});
            if (l.has_lora()) {
                out.push_back({p + ".loraA", l.a, true});
                out.push_back({p + ".loraB", l.b, true});
            }
        };
        out.push_back({prefix + ".conv_in.w", conv_in_w, false});
        out.push_back({prefix + ".conv_in.b", conv_in_b, false});
        for (size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string bp = prefix + ".block" + std::to_string(i);
            out.push_back({bp + ".ln1.gamma", b.ln1.gamma, false});
            out.push_back({bp + ".ln1.beta", b.ln1.beta, false});
            out.push_back({bp + ".ln2.gamma", b.ln2.gamma, false});
            out.push_back({bp + ".ln2.beta", b.ln2.beta, false});
            out.push_back({bp + ".ln3.gamma", b.ln3.gamma, false});
            out.push_back({bp + ".ln3.beta", b.ln3.beta, false});
            lora(bp + ".selfattn.Wq", b.self_attn.wq);
            lora(bp + ".selfattn.Wk", b.self_attn.wk);
            lora(bp + ".selfattn.Wv", b.self_attn.wv);
            lora(bp + ".selfattn.Wout", b.self_attn.wout);
            lora(bp + ".crossattn.Wq", b.cross_attn.wq);
            lora(bp + ".crossattn.Wk", b.cross_attn.wk);
            lora(bp + ".crossattn.Wv", b.cross_attn.wv);
            lora(bp + ".crossattn.Wout", b.cross_attn.wout);
            out.push_back({bp + ".crossattn.Wkx", b.adapter.wkx, true});
            out.push_back({bp + ".crossattn.Wvx", b.adapter.wvx, true});
            out.push_back({bp + ".mlp.w1", b.mlp.w1, false});
            out.push_back({bp + ".mlp.b1", b.mlp.b1, false});
            out.push_back({bp + ".mlp.w2", b.mlp.w2, false});
            out.push_back({bp + ".mlp.b2", b.mlp.b2, false});
        }
        out.push_back({prefix + ".conv_out.w", conv_out_w, false});
        out.push_back({prefix + ".conv_out.b", conv_out_b, false});
        out.push_back({prefix + ".ctx_embed.table", ctx_table, false});
        for (auto& p : img_enc.params(prefix + ".img_enc", /*proj_trainable=*/true)) {
            out.push_back(std::move(p));
        }
        return out;
    }
};

// Foreground latent -> t=1 perturbation -> frozen reference forward.
template <class T>
ReferenceKV<T> reference_forward(const Generator<T>& reference_net,
                                 const BasicTensor<T>& x_ref_foreground,
                                 const std::vector<int>& ctx_codes, const NoiseSchedule& schedule,
                                 Rng& rng, RunCounters* counters = nullptr) {
    auto z_ref = latentize(x_ref_foreground, reference_net.dims.patch);
    auto eps = BasicTensor<T>::randn(z_ref.shape(), rng);
    auto z1 = forward_perturb(z_ref, 1, eps, schedule);
    if (counters) ++counters->refkv_builds;
    return reference_net.harvest_reference_kv(z1, ctx_codes);
}

// ---------------------------------------------------------------------------
// conditional diffusion discriminator
// ---------------------------------------------------------------------------

template <class T>
struct Discriminator {
    NetDims dims;
    int n_blocks = 2;
    BasicTensor<T> conv_in_w, conv_in_b;
    std::vector<TransformerBlock<T>> blocks;
    BasicTensor<T> null_ctx;  // learned-constant context tokens, frozen
    ImageTokenEncoder<T> img_enc;  // frozen, including projection
    BasicTensor<T> head_w, head_b;
    int max_t = 1000;

    static Discriminator init(const NetDims& dims, int lora_rank, int max_t, uint64_t seed) {
        Discriminator d;
        d.dims = dims;
        d.max_t = max_t;
        Rng rng(derive_seed(seed, 0x44495343));  // "DISC"
        auto lin = [&](int in, int out) {
            return BasicTensor<T>::randn({in, out}, rng, std::sqrt(T(1) / static_cast<T>(in)));
        };
        auto lora_lin = [&](int in, int out) {
            LoraLinear<T> l;
            l.w = lin(in, out);
            l.a = BasicTensor<T>::randn({in, lora_rank}, rng,
                                        std::sqrt(T(1) / static_cast<T>(in)), true);
            l.b = BasicTensor<T>::zeros({lora_rank, out}, true);
            l.scale = T(1);
            return l;
        };
        d.conv_in_w = BasicTensor<T>::randn({dims.width, dims.latent_ch, 3, 3}, rng,
                                            std::sqrt(T(2) / static_cast<T>(dims.latent_ch * 9)));
        d.conv_in_b = BasicTensor<T>::zeros({dims.width});
        for (int i = 0; i < d.n_blocks; ++i) {
            TransformerBlock<T> b;
            for (auto* ln : {&b.ln1, &b.ln2, &b.ln3}) {
                ln->gamma = BasicTensor<T>::filled({dims.width}, T(1));
                ln->beta = BasicTensor<T>::zeros({dims.width});
            }
            b.self_attn = {lora_lin(dims.width, dims.d), lora_lin(dims.width, dims.d),
                           lora_lin(dims.width, dims.d), lora_lin(dims.d, dims.width), dims.d};
            b.cross_attn = {lora_lin(dims.width, dims.d), lora_lin(dims.width, dims.d),
                            lora_lin(dims.width, dims.d), lora_lin(dims.d, dims.width), dims.d};
            b.adapter.wkx = BasicTensor<T>::randn({dims.width, dims.d}, rng,
                                                  std::sqrt(T(1) / static_cast<T>(dims.width)));
            b.adapter.wvx = BasicTensor<T>::randn({dims.width, dims.d}, rng,
                                                  std::sqrt(T(1) / static_cast<T>(dims.width)));
            b.mlp.w1 = BasicTensor<T>::randn({dims.width, dims.mlp_hidden}, rng,
                                             std::sqrt(T(2) / static_cast<T>(dims.width)));
            b.mlp.b1 = BasicTensor<T>::zeros({dims.mlp_hidden});
            b.mlp.w2 = BasicTensor<T>::randn({dims.mlp_hidden, dims.width}, rng,
                                             std::sqrt(T(1) / static_cast<T>(dims.mlp_hidden)));
            b.mlp.b2 = BasicTensor<T>::zeros({dims.width});
            d.blocks.push_back(std::move(b));
        }
        d.null_ctx = BasicTensor<T>::randn({kContextTokens, dims.width}, rng, T(1));
        d.img_enc = ImageTokenEncoder<T>::seeded(derive_seed(seed, 0x44454e43), dims.image_size,
                                                 dims.n_tok, dims.width, /*trainable_proj=*/false);
        d.head_w = BasicTensor<T>::randn({dims.width, 1}, rng,
                                         std::sqrt(T(1) / static_cast<T>(dims.width)), true);
        d.head_b = BasicTensor<T>::zeros({1}, true);
        return d;
    }

    BasicTensor<T> encode_image_tokens(const BasicTensor<T>& image) const {
        return img_enc.encode(image);
    }

    // Scalar logit for a noisy latent conditioned on reference-image tokens;
    // the timestep enters as a sinusoidal embedding added to the first hidden
    // state.
    BasicTensor<T> forward(const BasicTensor<T>& z_t, int t, const BasicTensor<T>& c_x) const {
        if (t < 0 || t > max_t) {
            throw ContractError("discriminator: t=" + std::to_string(t) + " outside [0," +
                                std::to_string(max_t) + "]");
        }
        const int m = dims.grid * dims.grid;
        auto hmap = conv2d(z_t, conv_in_w, conv_in_b, 2, 1);
        auto h = transpose(reshape(hmap, {dims.width, m}));
        h = add_row_broadcast(h, sinusoidal_embedding<T>(t, dims.width));

        for (const auto& blk : blocks) {
            auto x = blk.ln1.forward(h);
            h = add(h, self_attention(x, blk.self_attn));
            x = blk.ln2.forward(h);
            auto tokens = decoupled_cross_attention(x, null_ctx, c_x, blk.cross_attn,
                                                    blk.adapter.with_scale(T(1)));
            h = add(h, blk.cross_attn.wout.forward(tokens));
            x = blk.ln3.forward(h);
            h = add(h, blk.mlp.forward(x));
        }

        auto pooled = row_mean(transpose(h));  // mean over tokens, per channel
        auto logit = add_row_broadcast(matmul(reshape(pooled, {1, dims.width}), head_w), head_b);
        return reshape(logit, {1});
    }

    std::vector<NamedParam<T>> params(const std::string& prefix = "discriminator") const {
        std::vector<NamedParam<T>> out;
        auto lora = [&](const std::string& p, const LoraLinear<T>& l) {
            out.push_back({p + ".base", l.w, false});
            if (l.has_lora()) {
                out.push_back({p + ".loraA", l.a, true});
                out.push_back({p + ".loraB", l.b, true});
            }
        };
        out.push_back({prefix + ".conv_in.w", conv_in_w, false});
        out.push_back({prefix + ".conv_in.b", conv_in_b, false});
        for (size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string bp = prefix + ".block" + std::to_string(i);
            out.push_back({bp + ".ln1.gamma", b.ln1.gamma, false});
            out.push_back({bp + ".ln1.beta", b.ln1.beta, false});
            out.push_back({bp + ".ln2.gamma", b.ln2.gamma, false});
            out.push_back({bp + ".ln2.beta", b.ln2.beta, false});
            out.push_back({bp + ".ln3.gamma", b.ln3.gamma, false});
            out.push_back({bp + ".ln3.beta", b.ln3.beta, false});
            lora(bp + ".selfattn.Wq", b.self_attn.wq);
            lora(bp + ".selfattn.Wk", b.self_attn.wk);
            lora(bp + ".selfattn.Wv", b.self_attn.wv);
            lora(bp + ".selfattn.Wout", b.self_attn.wout);
            lora(bp + ".crossattn.Wq", b.cross_attn.wq);
            lora(bp + ".crossattn.Wk", b.cross_attn.wk);
            lora(bp + ".crossattn.Wv", b.cross_attn.wv);
            lora(bp + ".crossattn.Wout", b.cross_attn.wout);
            out.push_back({bp + ".crossattn.Wkx", b.adapter.wkx, false});
            out.push_back({bp + ".crossattn.Wvx", b.adapter.wvx, false});
            out.push_back({bp + ".mlp.w1", b.mlp.w1, false});
            out.push_back({bp + ".mlp.b1", b.mlp.b1, false});
            out.push_back({bp + ".mlp.w2", b.mlp.w2, false});
            out.push_back({bp + ".mlp.b2", b.mlp.b2, false});
        }
        out.push_back({prefix + ".null_ctx", null_ctx, false});
        for (auto& p : img_enc.params(prefix + ".img_enc", /*proj_trainable=*/false)) {
            out.push_back(std::move(p));
        }
        out.push_back({prefix + ".head.w", head_w, true});
        out.push_back({prefix + ".head.b", head_b, true});
        return out;
    }
};

} // namespace refgen
