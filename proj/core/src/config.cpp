#include "refgen/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "refgen/errors.hpp"

namespace refgen {

using nlohmann::json;

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::kFull: return "full";
        case Mode::kDirectIpa: return "direct-ipa";
        case Mode::kFinetuneIpa: return "finetune-ipa";
        case Mode::kSingleRefKv: return "single-refkv";
    }
    throw ContractError("mode_name: bad mode value");
}

Mode mode_from_name(const std::string& name) {
    if (name == "full") return Mode::kFull;
    if (name == "direct-ipa") return Mode::kDirectIpa;
    if (name == "finetune-ipa") return Mode::kFinetuneIpa;
    if (name == "single-refkv") return Mode::kSingleRefKv;
    throw ContractError("unknown mode \"" + name +
                        "\" (expected full|direct-ipa|finetune-ipa|single-refkv)");
}

namespace {

json to_json(const TrainConfig& c) {
    return json{
        {"lambda1", c.lambda1},
        {"lambda2", c.lambda2},
        {"lambda3", c.lambda3},
        {"s_x_train", c.s_x_train},
        {"s_x_infer", c.s_x_infer},
        {"tau", c.tau},
        {"r_min", c.r_min},
        {"r_max", c.r_max},
        {"lambda_curr", c.lambda_curr},
        {"stage1_iters", c.stage1_iters},
        {"stage2_iters", c.stage2_iters},
        {"lr_stage1", c.lr_stage1},
        {"lr_stage2", c.lr_stage2},
        {"weight_decay", c.weight_decay},
        {"batch_size", c.batch_size},
        {"grad_accum", c.grad_accum},
        {"lora_rank", c.lora_rank},
        {"seed", c.seed},
        {"data_seed", c.data_seed},
        {"mode", c.mode},
        {"manifest", c.manifest},
        {"heldout", c.heldout},
        {"out_dir", c.out_dir},
        {"log_interval", c.log_interval},
        {"probe_count", c.probe_count},
    };
}

} // namespace

std::string config_to_json(const TrainConfig& c) {
    return to_json(c).dump(2) + "\n";
}

TrainConfig config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config: ") + e.what(), e.byte);
    }
    if (!j.is_object()) throw ContractError("config: top level must be an object");

    const json defaults = to_json(TrainConfig{});
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!defaults.contains(key)) throw ContractError("config: unknown key \"" + key + "\"");
    }

    TrainConfig c;
    auto num = [&](const char* key, double& field) {
        if (j.contains(key)) field = j.at(key).get<double>();
    };
    auto integer = [&](const char* key, int& field) {
        if (j.contains(key)) field = j.at(key).get<int>();
    };
    num("lambda1", c.lambda1);
    num("lambda2", c.lambda2);
    num("lambda3", c.lambda3);
    num("s_x_train", c.s_x_train);
    num("s_x_infer", c.s_x_infer);
    num("tau", c.tau);
    num("r_min", c.r_min);
    num("r_max", c.r_max);
    num("lambda_curr", c.lambda_curr);
    integer("stage1_iters", c.stage1_iters);
    integer("stage2_iters", c.stage2_iters);
    num("lr_stage1", c.lr_stage1);
    num("lr_stage2", c.lr_stage2);
    num("weight_decay", c.weight_decay);
    integer("batch_size", c.batch_size);
    integer("grad_accum", c.grad_accum);
    integer("lora_rank", c.lora_rank);
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("data_seed")) c.data_seed = j.at("data_seed").get<uint64_t>();
    if (j.contains("mode")) c.mode = j.at("mode").get<std::string>();
    if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
    if (j.contains("heldout")) c.heldout = j.at("heldout").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    integer("log_interval", c.log_interval);
    integer("probe_count", c.probe_count);

    mode_from_name(c.mode);  // validate
    if (c.batch_size < 1 || c.grad_accum < 1) throw ContractError("config: batch/accum must be >= 1");
    if (c.lora_rank < 1) throw ContractError("config: lora_rank must be >= 1");
    if (!(c.r_min > 0.0 && c.r_min < c.r_max && c.r_max <= 1.0)) {
        throw ContractError("config: need 0 < r_min < r_max <= 1");
    }
    if (!(c.lambda_curr > 0.0 && c.lambda_curr <= 1.0)) {
        throw ContractError("config: need 0 < lambda_curr <= 1");
    }
    if (c.lambda1 < 0.0 || c.lambda2 < 0.0 || c.lambda3 < 0.0) {
        throw ContractError("config: loss weights must be >= 0");
    }
    if (c.s_x_train < 0.0 || c.s_x_infer < 0.0) throw ContractError("config: s_x must be >= 0");
    return c;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return config_from_json(text);
}

void save_config(const TrainConfig& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_config: cannot open " + path);
    f << config_to_json(c);
}

} // namespace refgen
