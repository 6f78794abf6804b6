#pragma once

#include <filesystem>

#include "tryflow/model.hpp"

namespace tryflow {

// Checkpoints are written as `<stem>.manifest` (text: header plus one
// `name rows cols byte_offset` line per tensor) and `<stem>.blob` (raw
// little-endian 32-bit floats, column-major, in manifest order).
// save -> load -> save round-trips bit-exactly.
void checkpoint_save(const ModelParams<float>& params, const std::filesystem::path& stem,
                     long step = 0);

ModelParams<float> checkpoint_load(const std::filesystem::path& stem, long* step = nullptr);

}  // namespace tryflow
