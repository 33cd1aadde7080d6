// Named-tensor checkpoints.
//
// Layout (all integers little-endian u32, payload little-endian f32):
//   "GPCKPT1" | count | { name_len | name (UTF-8) | rank | dims... | values... } * count
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gridpaint/tensor.hpp"

namespace gridpaint {

inline constexpr std::string_view kCheckpointMagic = "GPCKPT1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::string encode_checkpoint(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace gridpaint
