#include "refgen/ppm.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "refgen/errors.hpp"

namespace refgen {

uint8_t quantize_u8(float v) {
    float scaled = v * 255.0f + 0.5f;
    if (scaled < 0.0f) scaled = 0.0f;
    if (scaled > 255.0f) scaled = 255.0f;
    return static_cast<uint8_t>(scaled);
}

void write_ppm(const Tensor& image, const std::string& path) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("write_ppm: need [3,H,W], got " + shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("write_ppm: cannot open " + tmp);
        f << "P6\n" << w << " " << h << "\n255\n";
        std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    row[static_cast<size_t>(x) * 3 + c] = quantize_u8(image.data()[(c * h + y) * w + x]);
                }
            }
            f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
        }
        if (!f) throw IoError("write_ppm: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

namespace {

struct ByteReader {
    std::vector<char> bytes;
    size_t pos = 0;

    bool eof() const { return pos >= bytes.size(); }
    char peek() const { return bytes[pos]; }
    char take() { return bytes[pos++]; }

    void skip_space_and_comments() {
        while (!eof()) {
            const char c = peek();
            if (c == '#') {
                while (!eof() && take() != '\n') {
                }
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                take();
            } else {
                break;
            }
        }
    }

    int read_int(const char* what) {
        skip_space_and_comments();
        if (eof() || peek() < '0' || peek() > '9') {
            throw ParseError(std::string("read_ppm: expected ") + what, pos);
        }
        long v = 0;
        while (!eof() && peek() >= '0' && peek() <= '9') {
            v = v * 10 + (take() - '0');
            if (v > 1 << 20) throw ParseError(std::string("read_ppm: absurd ") + what, pos);
        }
        return static_cast<int>(v);
    }
};

} // namespace

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_ppm: cannot open " + path);
    ByteReader r;
    r.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

    if (r.bytes.size() < 2 || r.bytes[0] != 'P' || r.bytes[1] != '6') {
        throw ParseError("read_ppm: missing P6 magic", 0);
    }
    r.pos = 2;
    const int w = r.read_int("width");
    const int h = r.read_int("height");
    const int maxval = r.read_int("maxval");
    if (maxval != 255) throw ParseError("read_ppm: only maxval 255 supported", r.pos);
    // Exactly one whitespace byte separates the header from the raster.
    if (r.eof()) throw ParseError("read_ppm: truncated header", r.pos);
    const char sep = r.take();
    if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') {
        throw ParseError("read_ppm: missing raster separator", r.pos - 1);
    }
    const size_t need = static_cast<size_t>(w) * h * 3;
    if (r.bytes.size() - r.pos < need) {
        throw ParseError("read_ppm: truncated raster, need " + std::to_string(need) + " bytes",
                         r.bytes.size());
    }
    Tensor img = Tensor::zeros({3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const uint8_t b = static_cast<uint8_t>(r.bytes[r.pos++]);
                img.mutable_data()[(c * h + y) * w + x] = static_cast<float>(b) / 255.0f;
            }
        }
    }
    return img;
}

} // namespace refgen
