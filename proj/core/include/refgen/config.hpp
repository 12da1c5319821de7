#pragma once

#include <cstdint>
#include <string>

namespace refgen {

enum class Mode {
    kFull,        // both injection branches
    kDirectIpa,   // adapter branch only, no training intended
    kFinetuneIpa, // adapter branch only, perceptual loss only
    kSingleRefKv, // reference-KV branch only
};

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

// All training hyperparameters. JSON round trip is lossless and parsing
// rejects unknown keys.
struct TrainConfig {
    double lambda1 = 1.0;        // DIST weight
    double lambda2 = 0.2;        // SSIM weight
    double lambda3 = 0.1;        // adversarial weight
    double s_x_train = 1.0;      // identity scale during training
    double s_x_infer = 1.6;      // identity scale at inference
    double tau = 0.6;            // subject-mask binarization threshold
    double r_min = 0.1;          // curriculum crop bounds
    double r_max = 1.0;
    double lambda_curr = 0.025;  // curriculum decay target
    int stage1_iters = 2000;     // paper-scale reference: 100000 @ lr 1e-5
    int stage2_iters = 800;      // paper-scale reference: 60000 @ lr 1e-6
    double lr_stage1 = 1e-3;
    double lr_stage2 = 1e-4;
    double weight_decay = 0.0;
    int batch_size = 4;
    int grad_accum = 2;
    int lora_rank = 8;
    uint64_t seed = 1;           // weights + training streams
    uint64_t data_seed = 7;      // dataset generation
    std::string mode = "full";
    std::string manifest = "data/manifest.jsonl";
    std::string heldout = "data/heldout.jsonl";
    std::string out_dir = "runs/default";
    int log_interval = 50;
    int probe_count = 8;         // heldout samples scored per metrics row

    Mode mode_enum() const { return mode_from_name(mode); }
};

std::string config_to_json(const TrainConfig& c);
TrainConfig config_from_json(const std::string& json_text);
TrainConfig load_config(const std::string& path);
void save_config(const TrainConfig& c, const std::string& path);

} // namespace refgen
