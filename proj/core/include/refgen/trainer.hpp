#pragma once

#include <optional>
#include <string>
#include <vector>

#include "refgen/checkpoint.hpp"
#include "refgen/config.hpp"
#include "refgen/curriculum.hpp"
#include "refgen/losses.hpp"
#include "refgen/networks.hpp"
#include "refgen/synthdata.hpp"

namespace refgen {

// Seed of the loss/eval feature pyramid. Fixed and independent of the
// training seed so that metrics are comparable across runs.
constexpr uint64_t kLossPyramidSeed = 0x44495354;

// Stream tags for deriving per-purpose RNGs. Each purpose gets its own
// stream keyed by (seed, tag, stage, iteration, slot), so consuming one
// stream (e.g. crops) never shifts another (e.g. reference noise).
namespace train_tags {
constexpr uint64_t kBatch = 1;
constexpr uint64_t kEps = 2;
constexpr uint64_t kRefNoise = 3;
constexpr uint64_t kAdvG = 4;
constexpr uint64_t kAdvD = 5;
constexpr uint64_t kCrop = 6;
} // namespace train_tags

inline uint64_t stream_seed(uint64_t seed, uint64_t tag, int stage, int iter, int slot = 0) {
    return derive_seed(derive_seed(seed, tag, static_cast<uint64_t>(stage)),
                       static_cast<uint64_t>(iter) + 0x5eed, static_cast<uint64_t>(slot));
}

struct ModelBundle {
    NetDims dims;
    Generator<float> gen;
    Generator<float> ref;  // frozen base view of gen
    Discriminator<float> disc;
    FeaturePyramid<float> loss_pyramid;
    NoiseSchedule schedule{1000};
};

ModelBundle make_models(uint64_t seed, int lora_rank, const NetDims& dims = NetDims{});

// Full parameter inventory (generator + discriminator) in a stable order.
NamedTensors collect_params(const ModelBundle& m);
// Copies loaded tensors into the bundle in place; throws on missing names or
// shape mismatches. The reference view shares base storage, so it follows.
void load_params(ModelBundle& m, const NamedTensors& loaded);
void save_bundle(const ModelBundle& m, const std::string& path);
void load_bundle(ModelBundle& m, const std::string& path);
// Rank of the LoRA factors recorded in a checkpoint.
int checkpoint_lora_rank(const NamedTensors& t);
// Builds a bundle shaped like the checkpoint and loads it.
ModelBundle bundle_from_checkpoint(const std::string& path);

class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params);
    void set_lr(double lr) { lr_ = lr; }

private:
    struct State {
        std::vector<float> m, v;
    };
    std::vector<State> states_;
    int64_t t_ = 0;
    double lr_, wd_, beta1_, beta2_, eps_;
};

struct StepMetrics {
    int step = 0;
    double loss_total = 0;
    double loss_dist = 0;
    double loss_ssim = 0;
    double loss_adv_g = 0;
    double loss_adv_d = 0;
    double id_proxy = -1;
    double ctx_proxy = -1;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

struct TrainResult {
    std::string checkpoint_path;
    bool nan_abort = false;
    int iters_done = 0;
};

// Two-stage training orchestration. Stage 1 trains the dual-branch
// objective; stage 2 adds curriculum cropping to the adapter-branch input
// only. Training always runs with plain (unmasked) cross-attention and
// s_x = s_x_train; mask-guided rescaling is inference-only.
class Trainer {
public:
    Trainer(const TrainConfig& cfg, int stage, std::vector<ManifestEntry> data,
            std::vector<ManifestEntry> heldout);
    // Loads datasets from cfg.manifest / cfg.heldout.
    Trainer(const TrainConfig& cfg, int stage);

    void resume_from(const std::string& ckpt_path);

    // One G step + one D step (1:1 alternation). update=false computes the
    // metrics without touching weights or optimizer state.
    StepMetrics step(int iter, bool update = true);

    // Full stage loop with CSV logging and a final checkpoint at
    // out_dir/stage{N}.ckpt. Aborts (retaining the last saved checkpoint)
    // if a loss turns non-finite.
    TrainResult run();

    ModelBundle& models() { return models_; }
    const TrainConfig& config() const { return cfg_; }
    RunCounters& counters() { return counters_; }
    const std::vector<double>& crop_bound_log() const { return crop_bounds_; }
    int stage() const { return stage_; }

private:
    struct GeneratorPass {
        BasicTensor<float> loss;  // scalar, averaged over the whole batch
        double dist = 0, ssim_term = 0, adv = 0;
        std::vector<Tensor> z_rec_detached;
        std::vector<Tensor> z_ref;
        std::vector<Tensor> cx_d;
        std::vector<int> sample_indices;
    };

    GeneratorPass generator_micro_pass(int iter, int micro, const std::vector<int>& indices);
    void zero_all_grads();

    TrainConfig cfg_;
    int stage_;
    Mode mode_;
    double lambda3_effective_;
    std::vector<ManifestEntry> data_;
    std::vector<ManifestEntry> heldout_;
    ModelBundle models_;
    CurriculumParams curriculum_;
    AdamW opt_g_;
    AdamW opt_d_;
    std::vector<Tensor> g_trainables_;
    std::vector<Tensor> d_trainables_;
    RunCounters counters_;
    std::vector<double> crop_bounds_;
};

} // namespace refgen
