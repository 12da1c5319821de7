#include "refgen/synthdata.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "refgen/errors.hpp"
#include "refgen/ppm.hpp"

namespace refgen {

using nlohmann::json;

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_manifest: cannot open " + path);
    for (const auto& e : entries) {
        json j{
            {"index", e.index},
            {"shape_id", e.identity.shape_id},
            {"tex_freq_id", e.identity.tex_freq_id},
            {"tex_phase_id", e.identity.tex_phase_id},
            {"hue_id", e.identity.hue_id},
            {"background_id", e.context.background_id},
            {"position_id", e.context.position_id},
            {"image_path", e.image_path},
            {"mask_path", e.mask_path},
        };
        f << j.dump() << "\n";
    }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_manifest: cannot open " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("read_manifest: line " + std::to_string(line_no) + ": " + e.what(),
                             e.byte);
        }
        ManifestEntry e;
        e.index = j.at("index").get<int>();
        e.identity.shape_id = j.at("shape_id").get<int>();
        e.identity.tex_freq_id = j.at("tex_freq_id").get<int>();
        e.identity.tex_phase_id = j.at("tex_phase_id").get<int>();
        e.identity.hue_id = j.at("hue_id").get<int>();
        e.context.background_id = j.at("background_id").get<int>();
        e.context.position_id = j.at("position_id").get<int>();
        e.image_path = j.at("image_path").get<std::string>();
        e.mask_path = j.at("mask_path").get<std::string>();
        validate(e.identity);
        validate(e.context);
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<ManifestEntry> build_dataset(uint64_t seed, int count, bool heldout,
                                         const std::string& dir_prefix) {
    std::vector<ManifestEntry> entries;
    entries.reserve(static_cast<size_t>(count));
    const uint64_t tag = heldout ? 0x48454c44 : 0x54524149;  // "HELD" / "TRAI"
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, tag, static_cast<uint64_t>(i)));
        ManifestEntry e;
        e.index = i;
        e.identity = sample_identity(rng, heldout);
        e.context = sample_context(rng);
        e.image_path = dir_prefix + "/img_" + std::to_string(i) + ".ppm";
        e.mask_path = dir_prefix + "/mask_" + std::to_string(i) + ".ppm";
        entries.push_back(std::move(e));
    }
    return entries;
}

void materialize_dataset(const std::vector<ManifestEntry>& entries) {
    for (const auto& e : entries) {
        std::filesystem::create_directories(std::filesystem::path(e.image_path).parent_path());
        SceneSample s = e.render();
        write_ppm(s.image, e.image_path);
        Tensor mask_img = Tensor::zeros({3, kImageSize, kImageSize});
        for (int c = 0; c < 3; ++c) {
            for (size_t i = 0; i < s.mask.size(); ++i) {
                mask_img.mutable_data()[static_cast<size_t>(c) * s.mask.size() + i] =
                    s.mask[i] ? 1.0f : 0.0f;
            }
        }
        write_ppm(mask_img, e.mask_path);
    }
}

} // namespace refgen
