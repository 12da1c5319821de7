#pragma once

#include <string>
#include <utility>
#include <vector>

#include "refgen/tensor.hpp"

namespace refgen {

// Binary checkpoint: magic "SPC1", u32 tensor count, then per tensor
// {u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, float32 payload}.
// All integers and floats little-endian. Names are dotted paths, e.g.
// "generator.block0.selfattn.Wq.loraA". Writes are atomic (temp + rename)
// and preserve entry order, so save -> load -> save is byte-identical.

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const NamedTensors& tensors, const std::string& path);
NamedTensors load_checkpoint(const std::string& path);

} // namespace refgen
