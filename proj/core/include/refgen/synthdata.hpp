#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "refgen/rng.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

// Procedural 32x32 scenes: a solid coded background plus one striped subject
// shape. Identity (shape / texture / hue) reaches the model only through
// pixels; the context codes carry background color and position only, so the
// code vocabulary cannot leak identity.

constexpr int kImageSize = 32;
constexpr int kNumBackgrounds = 6;
constexpr int kNumPositions = 5;
constexpr int kNumShapes = 3;  // circle, square, triangle
constexpr int kNumTexFreqs = 3;
constexpr int kNumTexPhases = 2;
constexpr int kNumHues = 6;
constexpr int kNumIdentities = kNumShapes * kNumTexFreqs * kNumTexPhases * kNumHues;

// Context-code vocabulary: background ids, then position ids, then the
// subject slot. The subject slot sits at a fixed position in every code
// sequence; extract_subject_mask reads that token's attention column.
constexpr int kVocabSize = kNumBackgrounds + kNumPositions + 1;
constexpr int kSubjectSlotCode = kNumBackgrounds + kNumPositions;
constexpr int kSubjectTokenIndex = 2;
constexpr int kContextTokens = 3;

struct SubjectIdentity {
    int shape_id = 0;
    int tex_freq_id = 0;
    int tex_phase_id = 0;
    int hue_id = 0;

    int linear_index() const {
        return ((shape_id * kNumTexFreqs + tex_freq_id) * kNumTexPhases + tex_phase_id) * kNumHues +
               hue_id;
    }
    static SubjectIdentity from_linear(int idx);
};

struct SceneContext {
    int background_id = 0;
    int position_id = 0;
};

struct Rgb {
    float r, g, b;
};

inline const std::array<Rgb, kNumBackgrounds>& background_palette() {
    static const std::array<Rgb, kNumBackgrounds> p = {{
        {0.08f, 0.08f, 0.08f},
        {0.92f, 0.92f, 0.92f},
        {0.70f, 0.15f, 0.15f},
        {0.15f, 0.60f, 0.20f},
        {0.15f, 0.25f, 0.75f},
        {0.80f, 0.75f, 0.15f},
    }};
    return p;
}

inline const std::array<Rgb, kNumHues>& subject_palette() {
    static const std::array<Rgb, kNumHues> p = {{
        {0.90f, 0.20f, 0.85f},  // magenta
        {0.10f, 0.85f, 0.90f},  // cyan
        {0.95f, 0.55f, 0.10f},  // orange
        {0.55f, 0.15f, 0.85f},  // purple
        {0.55f, 0.95f, 0.15f},  // lime
        {0.10f, 0.60f, 0.55f},  // teal
    }};
    return p;
}

// (cx, cy) anchors; every shape fits inside the frame at all anchors.
inline const std::array<std::pair<int, int>, kNumPositions>& position_anchors() {
    static const std::array<std::pair<int, int>, kNumPositions> p = {{
        {16, 16}, {9, 9}, {23, 9}, {9, 23}, {23, 23},
    }};
    return p;
}

inline SubjectIdentity SubjectIdentity::from_linear(int idx) {
    SubjectIdentity id;
    id.hue_id = idx % kNumHues;
    idx /= kNumHues;
    id.tex_phase_id = idx % kNumTexPhases;
    idx /= kNumTexPhases;
    id.tex_freq_id = idx % kNumTexFreqs;
    idx /= kNumTexFreqs;
    id.shape_id = idx;
    return id;
}

inline void validate(const SubjectIdentity& id) {
    if (id.shape_id < 0 || id.shape_id >= kNumShapes || id.tex_freq_id < 0 ||
        id.tex_freq_id >= kNumTexFreqs || id.tex_phase_id < 0 || id.tex_phase_id >= kNumTexPhases ||
        id.hue_id < 0 || id.hue_id >= kNumHues) {
        throw ContractError("invalid subject identity ids");
    }
}

inline void validate(const SceneContext& ctx) {
    if (ctx.background_id < 0 || ctx.background_id >= kNumBackgrounds || ctx.position_id < 0 ||
        ctx.position_id >= kNumPositions) {
        throw ContractError("invalid scene context ids");
    }
}

// Subject-local membership test, shared radius 6/7 footprint.
inline bool subject_covers(int shape_id, int dx, int dy) {
    switch (shape_id) {
        case 0: return dx * dx + dy * dy <= 49;                       // circle r=7
        case 1: return std::abs(dx) <= 6 && std::abs(dy) <= 6;        // 13x13 square
        case 2:                                                       // upward triangle
            if (dy < -6 || dy > 6) return false;
            return std::abs(dx) <= (dy + 6) / 2;
        default: throw ContractError("invalid shape id");
    }
}

// Striped fill in subject-local coordinates: identical identity renders a
// pixel-identical subject at every position.
inline Rgb subject_texel(const SubjectIdentity& id, int dx, int dy) {
    static const int kStripeWidth[kNumTexFreqs] = {2, 3, 4};
    const int w = kStripeWidth[id.tex_freq_id];
    const int shift = id.tex_phase_id * w;
    int t = (dx + dy + shift) % (2 * w);
    if (t < 0) t += 2 * w;
    const Rgb hue = subject_palette()[static_cast<size_t>(id.hue_id)];
    if (t < w) return hue;
    return Rgb{0.5f * hue.r + 0.5f, 0.5f * hue.g + 0.5f, 0.5f * hue.b + 0.5f};
}

struct SceneSample {
    Tensor image;                 // [3,32,32], values in [0,1]
    std::vector<uint8_t> mask;    // 32*32, exact subject coverage
    SubjectIdentity identity;
    SceneContext context;

    std::vector<int> context_codes() const {
        return {context.background_id, kNumBackgrounds + context.position_id, kSubjectSlotCode};
    }
    int subject_token_index() const { return kSubjectTokenIndex; }
};

template <class T>
BasicTensor<T> render_image(const SubjectIdentity& id, const SceneContext& ctx,
                            std::vector<uint8_t>* mask_out = nullptr) {
    validate(id);
    validate(ctx);
    const auto [cx, cy] = position_anchors()[static_cast<size_t>(ctx.position_id)];
    const Rgb bg = background_palette()[static_cast<size_t>(ctx.background_id)];
    auto img = BasicTensor<T>::zeros({3, kImageSize, kImageSize});
    if (mask_out) mask_out->assign(static_cast<size_t>(kImageSize) * kImageSize, 0);
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            Rgb c = bg;
            if (subject_covers(id.shape_id, x - cx, y - cy)) {
                c = subject_texel(id, x - cx, y - cy);
                if (mask_out) (*mask_out)[static_cast<size_t>(y) * kImageSize + x] = 1;
            }
            img.mutable_data()[(0 * kImageSize + y) * kImageSize + x] = static_cast<T>(c.r);
            img.mutable_data()[(1 * kImageSize + y) * kImageSize + x] = static_cast<T>(c.g);
            img.mutable_data()[(2 * kImageSize + y) * kImageSize + x] = static_cast<T>(c.b);
        }
    }
    return img;
}

inline SceneSample render_scene(const SubjectIdentity& id, const SceneContext& ctx) {
    SceneSample s;
    s.identity = id;
    s.context = ctx;
    s.image = render_image<float>(id, ctx, &s.mask);
    return s;
}

// image (.) mask: background zeroed, subject pixels kept.
template <class T>
BasicTensor<T> foreground_extract(const BasicTensor<T>& image, const std::vector<uint8_t>& mask) {
    if (image.ndim() != 3 ||
        static_cast<size_t>(image.dim(1)) * static_cast<size_t>(image.dim(2)) != mask.size()) {
        throw ShapeError("foreground_extract: mask size " + std::to_string(mask.size()) +
                         " vs image " + shape_str(image.shape()));
    }
    auto out = BasicTensor<T>::zeros(image.shape());
    const int c = image.dim(0);
    const size_t hw = mask.size();
    for (int ch = 0; ch < c; ++ch) {
        for (size_t i = 0; i < hw; ++i) {
            out.mutable_data()[static_cast<size_t>(ch) * hw + i] =
                mask[i] ? image.data()[static_cast<size_t>(ch) * hw + i] : T(0);
        }
    }
    return out;
}

inline Tensor foreground_extract(const SceneSample& s) {
    return foreground_extract(s.image, s.mask);
}

// ---------------------------------------------------------------------------
// dataset sampling and manifests
// ---------------------------------------------------------------------------

// Identities with linear index % 7 == 3 are held out; training never sees
// them.
inline bool identity_heldout(const SubjectIdentity& id) {
    return id.linear_index() % 7 == 3;
}

inline SubjectIdentity sample_identity(Rng& rng, bool heldout) {
    while (true) {
        auto id = SubjectIdentity::from_linear(static_cast<int>(rng.uniform_index(kNumIdentities)));
        if (identity_heldout(id) == heldout) return id;
    }
}

inline SceneContext sample_context(Rng& rng) {
    SceneContext ctx;
    ctx.background_id = static_cast<int>(rng.uniform_index(kNumBackgrounds));
    ctx.position_id = static_cast<int>(rng.uniform_index(kNumPositions));
    return ctx;
}

struct ManifestEntry {
    int index = 0;
    SubjectIdentity identity;
    SceneContext context;
    std::string image_path;
    std::string mask_path;

    SceneSample render() const { return render_scene(identity, context); }
};

// JSON-lines manifest IO ({index, identity ids, context ids, file paths}).
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Deterministic dataset: entry i depends only on (seed, i) and the heldout
// flag, so generation parallelizes over indices without changing results.
std::vector<ManifestEntry> build_dataset(uint64_t seed, int count, bool heldout,
                                         const std::string& dir_prefix);

// Renders every entry to PPM image/mask files under its recorded paths.
void materialize_dataset(const std::vector<ManifestEntry>& entries);

} // namespace refgen
