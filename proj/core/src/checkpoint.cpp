#include "refgen/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "refgen/errors.hpp"

namespace refgen {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'C', '1'};

template <class T>
void put(std::ofstream& f, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& f, const std::string& path) {
    T v{};
    if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw ParseError("load_checkpoint: truncated " + path, static_cast<size_t>(f.gcount()));
    }
    return v;
}

} // namespace

void save_checkpoint(const NamedTensors& tensors, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("save_checkpoint: cannot open " + tmp);
        f.write(kMagic, 4);
        put<uint32_t>(f, static_cast<uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            if (name.size() > UINT16_MAX) throw ContractError("save_checkpoint: name too long: " + name);
            put<uint16_t>(f, static_cast<uint16_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<uint8_t>(f, static_cast<uint8_t>(t.ndim()));
            for (int i = 0; i < t.ndim(); ++i) put<uint32_t>(f, static_cast<uint32_t>(t.dim(i)));
            f.write(reinterpret_cast<const char*>(t.data().data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(float)));
        }
        if (!f) throw IoError("save_checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("load_checkpoint: bad magic in " + path, 0);
    }
    const auto count = get<uint32_t>(f, path);
    NamedTensors out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<uint16_t>(f, path);
        std::string name(name_len, '\0');
        if (!f.read(name.data(), name_len)) {
            throw ParseError("load_checkpoint: truncated name in " + path, i);
        }
        const auto ndim = get<uint8_t>(f, path);
        Shape shape(ndim);
        size_t numel = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(get<uint32_t>(f, path));
            numel *= static_cast<size_t>(shape[d]);
        }
        std::vector<float> data(numel);
        if (!f.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(numel * sizeof(float)))) {
            throw ParseError("load_checkpoint: truncated payload for " + name, i);
        }
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

} // namespace refgen
