// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "beamgraph/params.hpp"

namespace beamgraph::tk {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary little-endian container:
//   "BGCK" u32 version u64 entry_count
//   per entry: u32 name_len, name bytes, u8 kind, u32 rank, u64 extents[rank], f64 values[]
// A text manifest "<path>.manifest" lists one entry per line in write order:
//   <name> <kind> <shape>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store);
ParameterStore load_checkpoint(const std::filesystem::path& path);

}  // namespace beamgraph::tk
