#pragma once

#include <filesystem>

#include "tryflow/image.hpp"

namespace tryflow {

// 8-bit PNG, grayscale (1 channel) or RGB (3 channels). Floats are quantized
// with round(v*255) after clamping; identical pixel data yields identical bytes.
void write_png(const std::filesystem::path& path, const Image& img);

Image read_png(const std::filesystem::path& path);

}  // namespace tryflow
