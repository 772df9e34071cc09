#pragma once

#include "mrham/tensor.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace mrham {

// Tensor snapshot: "MRHT", u32 version = 1, u32 rank, u32 dims[rank], f32 values.
// Checkpoint:      "MRHW", u32 version = 1, u32 count, then per tensor
//                  u16 name length, name bytes, u32 rank, u32 dims[], f32 values.
// All integers and reals little-endian.

inline constexpr std::uint32_t kFormatVersion = 1;

void write_snapshot(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_snapshot(std::istream& is);
void save_snapshot(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> load_snapshot(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void write_checkpoint(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace mrham
