#include "refgen/eval.hpp"

#include <cmath>

namespace refgen {

std::vector<float> pyramid_embedding(const FeaturePyramid<float>& pyramid, const Tensor& image,
                                     const std::vector<uint8_t>& region_mask) {
    auto region = foreground_extract(image, region_mask);
    auto stages = pyramid.stages(region);
    std::vector<float> embed;
    for (const auto& s : stages) {
        const int c = s.dim(0);
        const int hw = s.dim(1) * s.dim(2);
        for (int ch = 0; ch < c; ++ch) {
            float acc = 0.0f;
            for (int i = 0; i < hw; ++i) acc += s.data()[ch * hw + i];
            embed.push_back(acc / static_cast<float>(hw));
        }
    }
    return embed;
}

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine_similarity: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

Tensor generate_image(const ModelBundle& m, const Tensor& ref_image,
                      const std::vector<uint8_t>& ref_mask, const std::vector<int>& ctx_codes,
                      uint64_t noise_seed, const EvalOptions& opt, RunCounters* counters) {
    ReferenceKV<float> refkv;
    GenForwardOptions<float> fwd;
    fwd.mode = opt.mode;
    fwd.s_x = static_cast<float>(opt.s_x);
    fwd.tau = opt.tau;
    fwd.counters = counters;

    if (mode_uses_refkv(opt.mode)) {
        Rng ref_rng(derive_seed(noise_seed, 0x52454656));  // "REFV"
        refkv = reference_forward(m.ref, foreground_extract(ref_image, ref_mask), ctx_codes,
                                  m.schedule, ref_rng, counters);
        fwd.ref = &refkv;
    }
    Tensor c_x;
    if (mode_uses_adapter(opt.mode)) {
        c_x = m.gen.encode_image_tokens(ref_image);
    }

    std::vector<LayerMask> aux_masks;
    if (mode_uses_adapter(opt.mode) && opt.mask_enabled) {
        if (opt.mask_from_aux_pass) {
            // Text-only pre-pass (image branch disabled) collects the maps,
            // then one mask set drives the real pass.
            GenForwardOptions<float> aux = fwd;
            aux.s_x = 0.0f;
            aux.masks = nullptr;
            aux.same_pass_mask = false;
            Rng eps_rng(derive_seed(noise_seed, 0x455053));  // "EPS"
            auto eps = Tensor::randn({m.dims.latent_ch, m.dims.latent_hw, m.dims.latent_hw}, eps_rng);
            auto probe = m.gen.forward(eps, ctx_codes, c_x, aux);
            auto masks = extract_subject_mask(probe.text_attn_maps, kSubjectTokenIndex, opt.tau,
                                              m.dims.grid, m.dims.grid,
                                              std::vector<std::pair<int, int>>(
                                                  static_cast<size_t>(m.dims.blocks),
                                                  {m.dims.grid, m.dims.grid}));
            aux_masks = std::move(masks);
            fwd.masks = &aux_masks;
        } else {
            fwd.same_pass_mask = true;
        }
    }

    Rng eps_rng(derive_seed(noise_seed, 0x455053));  // "EPS"
    auto eps = Tensor::randn({m.dims.latent_ch, m.dims.latent_hw, m.dims.latent_hw}, eps_rng);
    auto out = m.gen.forward(eps, ctx_codes, c_x, fwd);
    return delatentize(out.latent, m.dims.patch);
}

EvalResult evaluate(const ModelBundle& m, const std::vector<ManifestEntry>& heldout,
                    const EvalOptions& opt, RunCounters* counters) {
    if (heldout.empty()) throw ContractError("evaluate: empty heldout set");
    const int n = opt.max_count > 0
                      ? std::min<int>(opt.max_count, static_cast<int>(heldout.size()))
                      : static_cast<int>(heldout.size());

    EvalResult res;
    for (int i = 0; i < n; ++i) {
        const auto& entry = heldout[static_cast<size_t>(i)];
        SceneSample ref_scene = entry.render();

        // Deterministic target context, distinct from the reference context.
        Rng ctx_rng(derive_seed(opt.seed, 0x54475458, static_cast<uint64_t>(i)));  // "TGTX"
        SceneContext target = sample_context(ctx_rng);
        for (int tries = 0; tries < 16 && target.background_id == ref_scene.context.background_id &&
                            target.position_id == ref_scene.context.position_id;
             ++tries) {
            target = sample_context(ctx_rng);
        }
        SceneSample gt = render_scene(entry.identity, target);

        auto img = generate_image(m, ref_scene.image, ref_scene.mask, gt.context_codes(),
                                  derive_seed(opt.seed, 0x47454e53, static_cast<uint64_t>(i)), opt,
                                  counters);

        auto gen_embed = pyramid_embedding(m.loss_pyramid, img, gt.mask);
        auto ref_embed = pyramid_embedding(m.loss_pyramid, ref_scene.image, ref_scene.mask);
        res.id_proxy += cosine_similarity(gen_embed, ref_embed);

        const Rgb coded = background_palette()[static_cast<size_t>(target.background_id)];
        double mr = 0, mg = 0, mb = 0;
        int bg_count = 0;
        const int hw = kImageSize * kImageSize;
        for (int p = 0; p < hw; ++p) {
            if (gt.mask[static_cast<size_t>(p)]) continue;
            mr += img.data()[0 * hw + p];
            mg += img.data()[1 * hw + p];
            mb += img.data()[2 * hw + p];
            ++bg_count;
        }
        if (bg_count > 0) {
            mr /= bg_count;
            mg /= bg_count;
            mb /= bg_count;
            const double dist = std::sqrt((mr - coded.r) * (mr - coded.r) +
                                          (mg - coded.g) * (mg - coded.g) +
                                          (mb - coded.b) * (mb - coded.b));
            if (dist <= kCtxRgbTolerance) res.ctx_proxy += 1.0;
        }
        ++res.count;
    }
    res.id_proxy /= res.count;
    res.ctx_proxy /= res.count;
    return res;
}

} // namespace refgen
