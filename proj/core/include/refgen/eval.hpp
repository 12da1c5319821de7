#pragma once

#include <vector>

#include "refgen/trainer.hpp"

namespace refgen {

// Background hue match tolerance: euclidean RGB distance between the mean
// generated background color and the coded palette color, values in [0,1].
constexpr double kCtxRgbTolerance = 0.15;

struct EvalOptions {
    Mode mode = Mode::kFull;
    double s_x = 1.6;
    double tau = 0.6;
    bool mask_enabled = true;
    bool mask_from_aux_pass = false;  // alternative mask source (text-only pre-pass)
    uint64_t seed = 12345;
    int max_count = 0;  // 0 = every heldout entry
};

struct EvalResult {
    double id_proxy = 0.0;
    double ctx_proxy = 0.0;
    int count = 0;
};

// Per-stage channel means of the pyramid features of the masked image,
// concatenated into one vector.
std::vector<float> pyramid_embedding(const FeaturePyramid<float>& pyramid, const Tensor& image,
                                     const std::vector<uint8_t>& region_mask);

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);

// Full inference path: reference KV + image tokens + one-step forward with
// optional mask-guided rescaling, back to image space.
Tensor generate_image(const ModelBundle& m, const Tensor& ref_image,
                      const std::vector<uint8_t>& ref_mask, const std::vector<int>& ctx_codes,
                      uint64_t noise_seed, const EvalOptions& opt, RunCounters* counters = nullptr);

// id_proxy: mean cosine similarity between pyramid embeddings of the
// generated subject region (mask from the ground-truth render of the target
// context) and the reference subject region. ctx_proxy: fraction of
// generated backgrounds whose mean RGB lands within kCtxRgbTolerance of the
// coded background color.
EvalResult evaluate(const ModelBundle& m, const std::vector<ManifestEntry>& heldout,
                    const EvalOptions& opt, RunCounters* counters = nullptr);

} // namespace refgen
