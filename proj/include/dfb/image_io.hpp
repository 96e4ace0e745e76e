#pragma once

#include <filesystem>

#include "dfb/tensor.hpp"

namespace dfb {

// Decodes an image file into a {C,H,W} float tensor in [0,1], RGB order
// (or single-channel when channels == 1). Throws on undecodable input.
Tensor decode_image_file(const std::filesystem::path& p, int channels = 3);

// Writes a {C,H,W} tensor in [0,1] as PNG (values clipped to range).
void save_image_png(const std::filesystem::path& p, const Tensor& chw);

}  // namespace dfb
