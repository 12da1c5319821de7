#pragma once

#include <string>

#include "refgen/tensor.hpp"

namespace refgen {

// Binary PPM ("P6", maxval 255) IO for [3,H,W] images with values in [0,1].
// Writing quantizes with round-half-up to u8; reading back an image written
// by write_ppm reproduces the quantized values exactly.
void write_ppm(const Tensor& image, const std::string& path);
Tensor read_ppm(const std::string& path);

uint8_t quantize_u8(float v);

} // namespace refgen
