#include "refgen/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "refgen/eval.hpp"

namespace refgen {

ModelBundle make_models(uint64_t seed, int lora_rank, const NetDims& dims) {
    ModelBundle m;
    m.dims = dims;
    m.gen = Generator<float>::init(dims, lora_rank, seed);
    m.ref = m.gen.base_snapshot();
    m.disc = Discriminator<float>::init(dims, lora_rank, m.schedule.max_t(), seed);
    m.loss_pyramid = FeaturePyramid<float>::seeded(kLossPyramidSeed);
    return m;
}

NamedTensors collect_params(const ModelBundle& m) {
    NamedTensors out;
    for (const auto& p : m.gen.params()) out.emplace_back(p.name, p.tensor);
    for (const auto& p : m.disc.params()) out.emplace_back(p.name, p.tensor);
    return out;
}

void load_params(ModelBundle& m, const NamedTensors& loaded) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : loaded) by_name[name] = &t;

    size_t used = 0;
    auto apply = [&](const std::vector<NamedParam<float>>& params) {
        for (const auto& p : params) {
            auto it = by_name.find(p.name);
            if (it == by_name.end()) {
                throw ContractError("checkpoint: missing tensor \"" + p.name + "\"");
            }
            if (it->second->shape() != p.tensor.shape()) {
                throw ShapeError("checkpoint: tensor \"" + p.name + "\" has shape " +
                                 shape_str(it->second->shape()) + ", model expects " +
                                 shape_str(p.tensor.shape()));
            }
            const_cast<Tensor&>(p.tensor).mutable_data() = it->second->data();
            ++used;
        }
    };
    apply(m.gen.params());
    apply(m.disc.params());
    if (used != loaded.size()) {
        throw ContractError("checkpoint: " + std::to_string(loaded.size() - used) +
                            " unknown tensors");
    }
}

void save_bundle(const ModelBundle& m, const std::string& path) {
    save_checkpoint(collect_params(m), path);
}

void load_bundle(ModelBundle& m, const std::string& path) {
    load_params(m, load_checkpoint(path));
}

int checkpoint_lora_rank(const NamedTensors& tensors) {
    for (const auto& [name, t] : tensors) {
        if (name.size() > 6 && name.substr(name.size() - 6) == ".loraA") return t.dim(1);
    }
    throw ContractError("checkpoint: no LoRA factors found");
}

ModelBundle bundle_from_checkpoint(const std::string& path) {
    auto loaded = load_checkpoint(path);
    ModelBundle m = make_models(0, checkpoint_lora_rank(loaded));
    load_params(m, loaded);
    return m;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void AdamW::step(std::vector<Tensor>& params) {
    if (states_.empty()) {
        states_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            states_[i].m.assign(params[i].numel(), 0.0f);
            states_[i].v.assign(params[i].numel(), 0.0f);
        }
    }
    if (states_.size() != params.size()) throw ContractError("AdamW: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& data = params[i].mutable_data();
        const bool has_grad = params[i].grad_allocated();
        const auto& g = params[i].grad();
        auto& st = states_[i];
        for (size_t j = 0; j < data.size(); ++j) {
            const double gj = has_grad ? static_cast<double>(g[j]) : 0.0;
            const double mj = beta1_ * st.m[j] + (1.0 - beta1_) * gj;
            const double vj = beta2_ * st.v[j] + (1.0 - beta2_) * gj * gj;
            st.m[j] = static_cast<float>(mj);
            st.v[j] = static_cast<float>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps_) + wd_ * data[j];
            data[j] = static_cast<float>(data[j] - lr_ * update);
        }
    }
}

// ---------------------------------------------------------------------------
// metrics CSV
// ---------------------------------------------------------------------------

std::string metrics_csv_header() {
    return "step,loss_total,loss_dist,loss_ssim,loss_adv_g,loss_adv_d,id_proxy,ctx_proxy\n";
}

std::string metrics_csv_row(const StepMetrics& m) {
    std::ostringstream os;
    os.precision(10);
    os << m.step << "," << m.loss_total << "," << m.loss_dist << "," << m.loss_ssim << ","
       << m.loss_adv_g << "," << m.loss_adv_d << "," << m.id_proxy << "," << m.ctx_proxy << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, int stage, std::vector<ManifestEntry> data,
                 std::vector<ManifestEntry> heldout)
    : cfg_(cfg),
      stage_(stage),
      mode_(cfg.mode_enum()),
      data_(std::move(data)),
      heldout_(std::move(heldout)),
      models_(make_models(cfg.seed, cfg.lora_rank)),
      opt_g_(stage == 1 ? cfg.lr_stage1 : cfg.lr_stage2, cfg.weight_decay),
      opt_d_(stage == 1 ? cfg.lr_stage1 : cfg.lr_stage2, cfg.weight_decay) {
    if (stage_ != 1 && stage_ != 2) throw ContractError("trainer: stage must be 1 or 2");
    if (mode_ == Mode::kDirectIpa) {
        throw ContractError("trainer: direct-ipa plugs the untrained adapter at inference; "
                            "it has no training phase");
    }
    if (data_.empty()) throw ContractError("trainer: empty training manifest");
    lambda3_effective_ = (mode_ == Mode::kFinetuneIpa) ? 0.0 : cfg_.lambda3;
    curriculum_ = CurriculumParams{cfg_.r_min, cfg_.r_max, cfg_.lambda_curr, cfg_.stage2_iters};
    for (const auto& p : models_.gen.params()) {
        if (p.trainable) g_trainables_.push_back(p.tensor);
    }
    for (const auto& p : models_.disc.params()) {
        if (p.trainable) d_trainables_.push_back(p.tensor);
    }
}

Trainer::Trainer(const TrainConfig& cfg, int stage)
    : Trainer(cfg, stage, read_manifest(cfg.manifest), read_manifest(cfg.heldout)) {}

void Trainer::resume_from(const std::string& ckpt_path) {
    load_bundle(models_, ckpt_path);
}

void Trainer::zero_all_grads() {
    for (const auto& p : models_.gen.params()) const_cast<Tensor&>(p.tensor).zero_grad();
    for (const auto& p : models_.disc.params()) const_cast<Tensor&>(p.tensor).zero_grad();
}

Trainer::GeneratorPass Trainer::generator_micro_pass(int iter, int micro,
                                                     const std::vector<int>& indices) {
    const int batch = cfg_.batch_size;
    const float inv = 1.0f / static_cast<float>(batch * cfg_.grad_accum);
    const float l1 = static_cast<float>(cfg_.lambda1);
    const float l2 = static_cast<float>(cfg_.lambda2);
    const float l3 = static_cast<float>(lambda3_effective_);

    GeneratorPass pass;
    auto loss_acc = Tensor::scalar(0.0f);
    for (int b = 0; b < batch; ++b) {
        const int slot = micro * batch + b;
        const int idx = indices[static_cast<size_t>(slot)];
        SceneSample sample = data_[static_cast<size_t>(idx)].render();
        const auto codes = sample.context_codes();
        const Tensor& x_ref = sample.image;

        ReferenceKV<float> refkv;
        const bool use_ref = mode_uses_refkv(mode_);
        if (use_ref) {
            Rng ref_rng(stream_seed(cfg_.seed, train_tags::kRefNoise, stage_, iter, slot));
            refkv = reference_forward(models_.ref, foreground_extract(sample), codes,
                                      models_.schedule, ref_rng, &counters_);
        }

        Tensor c_x;
        if (mode_uses_adapter(mode_)) {
            Tensor enc_in = x_ref;
            if (stage_ == 2) {
                Rng crop_rng(stream_seed(cfg_.seed, train_tags::kCrop, stage_, iter, slot));
                const double r_i = crop_lower_bound(iter, curriculum_);
                const double r_crop = sample_crop_scale(crop_rng, r_i, cfg_.r_max);
                enc_in = random_crop(x_ref, r_crop, crop_rng);
                ++counters_.crops_applied;
            }
            c_x = models_.gen.encode_image_tokens(enc_in);
        }

        Rng eps_rng(stream_seed(cfg_.seed, train_tags::kEps, stage_, iter, slot));
        auto eps = Tensor::randn({models_.dims.latent_ch, models_.dims.latent_hw,
                                  models_.dims.latent_hw},
                                 eps_rng);

        GenForwardOptions<float> opt;
        opt.mode = mode_;
        opt.s_x = static_cast<float>(cfg_.s_x_train);
        opt.ref = use_ref ? &refkv : nullptr;
        opt.counters = &counters_;
        auto out = models_.gen.forward(eps, codes, c_x, opt);
        auto x_rec = delatentize(out.latent, models_.dims.patch);

        auto d_term = dist_loss(x_rec, x_ref, models_.loss_pyramid);
        auto s_term = sub_from_scalar(1.0f, ssim(x_rec, x_ref));
        auto perceptual = add(mul_scalar(d_term, l1), mul_scalar(s_term, l2));

        BasicTensor<float> total;
        Tensor cx_d;
        if (l3 > 0.0f) {
            Rng adv_rng(stream_seed(cfg_.seed, train_tags::kAdvG, stage_, iter, slot));
            const int t_g = static_cast<int>(
                adv_rng.uniform_index(static_cast<uint64_t>(models_.schedule.max_t()) + 1));
            auto noise = Tensor::randn(out.latent.shape(), adv_rng);
            auto z_rec_t = forward_perturb(out.latent, t_g, noise, models_.schedule);
            cx_d = models_.disc.encode_image_tokens(x_ref);
            auto logit_fake = models_.disc.forward(z_rec_t, t_g, cx_d);
            auto a_term = adv_g(logit_fake);
            total = add(perceptual, mul_scalar(a_term, l3));
            pass.adv += static_cast<double>(a_term.item()) * inv;
        } else {
            total = perceptual;
        }
        loss_acc = add(loss_acc, total);
        pass.dist += static_cast<double>(d_term.item()) * inv;
        pass.ssim_term += static_cast<double>(s_term.item()) * inv;
        pass.z_rec_detached.push_back(out.latent.detach());
        pass.z_ref.push_back(latentize(x_ref, models_.dims.patch).detach());
        pass.cx_d.push_back(cx_d);
        pass.sample_indices.push_back(idx);
    }
    pass.loss = mul_scalar(loss_acc, inv);
    return pass;
}

StepMetrics Trainer::step(int iter, bool update) {
    StepMetrics row;
    row.step = iter;
    const int batch = cfg_.batch_size;
    const int accum = cfg_.grad_accum;
    const float inv = 1.0f / static_cast<float>(batch * accum);

    Rng batch_rng(stream_seed(cfg_.seed, train_tags::kBatch, stage_, iter));
    std::vector<int> indices(static_cast<size_t>(batch) * accum);
    for (auto& ix : indices) {
        ix = static_cast<int>(batch_rng.uniform_index(data_.size()));
    }
    if (update && stage_ == 2) crop_bounds_.push_back(crop_lower_bound(iter, curriculum_));

    // --- generator update ---
    std::vector<GeneratorPass> passes;
    for (int micro = 0; micro < accum; ++micro) {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto pass = generator_micro_pass(iter, micro, indices);
        if (update) tape.backward(pass.loss);
        row.loss_total += pass.loss.item();
        row.loss_dist += pass.dist;
        row.loss_ssim += pass.ssim_term;
        row.loss_adv_g += pass.adv;
        passes.push_back(std::move(pass));
    }
    if (!std::isfinite(row.loss_total)) {
        throw NumericError("trainer: non-finite generator loss at iteration " +
                           std::to_string(iter));
    }
    if (update) {
        opt_g_.step(g_trainables_);
        zero_all_grads();
    }

    // --- discriminator update (1:1 alternation) ---
    if (lambda3_effective_ > 0.0) {
        for (int micro = 0; micro < accum; ++micro) {
            Tape<float> tape;
            TapeScope<float> scope(tape);
            auto& pass = passes[static_cast<size_t>(micro)];
            auto loss_acc = Tensor::scalar(0.0f);
            for (int b = 0; b < batch; ++b) {
                const int slot = micro * batch + b;
                Rng adv_rng(stream_seed(cfg_.seed, train_tags::kAdvD, stage_, iter, slot));
                const int t_d = static_cast<int>(
                    adv_rng.uniform_index(static_cast<uint64_t>(models_.schedule.max_t()) + 1));
                auto noise_real = Tensor::randn(pass.z_ref[static_cast<size_t>(b)].shape(), adv_rng);
                auto noise_fake = Tensor::randn(pass.z_ref[static_cast<size_t>(b)].shape(), adv_rng);
                auto z_ref_t = forward_perturb(pass.z_ref[static_cast<size_t>(b)], t_d, noise_real,
                                               models_.schedule);
                auto z_rec_t = forward_perturb(pass.z_rec_detached[static_cast<size_t>(b)], t_d,
                                               noise_fake, models_.schedule);
                auto logit_real = models_.disc.forward(z_ref_t, t_d, pass.cx_d[static_cast<size_t>(b)]);
                auto logit_fake = models_.disc.forward(z_rec_t, t_d, pass.cx_d[static_cast<size_t>(b)]);
                loss_acc = add(loss_acc, adv_d(logit_real, logit_fake));
            }
            auto loss_d = mul_scalar(loss_acc, inv);
            if (update) tape.backward(loss_d);
            row.loss_adv_d += loss_d.item();
        }
        if (!std::isfinite(row.loss_adv_d)) {
            throw NumericError("trainer: non-finite discriminator loss at iteration " +
                               std::to_string(iter));
        }
        if (update) {
            opt_d_.step(d_trainables_);
            zero_all_grads();
        }
    }
    return row;
}

TrainResult Trainer::run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    const std::string ckpt_path = cfg_.out_dir + "/stage" + std::to_string(stage_) + ".ckpt";
    const std::string csv_path = cfg_.out_dir + "/metrics_stage" + std::to_string(stage_) + ".csv";

    std::ofstream csv(csv_path, std::ios::app);
    if (!csv) throw IoError("trainer: cannot open " + csv_path);
    if (fs::file_size(csv_path) == 0) csv << metrics_csv_header();

    const int iters = stage_ == 1 ? cfg_.stage1_iters : cfg_.stage2_iters;
    TrainResult result;
    result.checkpoint_path = ckpt_path;
    for (int iter = 0; iter < iters; ++iter) {
        StepMetrics row;
        try {
            row = step(iter);
        } catch (const NumericError&) {
            result.nan_abort = true;
            result.iters_done = iter;
            return result;
        }
        if (iter % cfg_.log_interval == 0 || iter == iters - 1) {
            if (!heldout_.empty() && cfg_.probe_count > 0) {
                EvalOptions probe;
                probe.mode = mode_ == Mode::kFinetuneIpa ? Mode::kFinetuneIpa : mode_;
                probe.s_x = cfg_.s_x_infer;
                probe.tau = cfg_.tau;
                probe.max_count = cfg_.probe_count;
                auto ev = evaluate(models_, heldout_, probe);
                row.id_proxy = ev.id_proxy;
                row.ctx_proxy = ev.ctx_proxy;
            }
            csv << metrics_csv_row(row);
            csv.flush();
            save_bundle(models_, ckpt_path);
        }
    }
    save_bundle(models_, ckpt_path);
    result.iters_done = iters;
    return result;
}

} // namespace refgen
