#pragma once

#include <string>

#include "capsnet/model.hpp"

namespace capsnet {

// Checkpoint container: magic "CAPSNET1", a little-endian u32 length plus
// the model-config JSON, a u32 parameter count, then per parameter a u16
// name length + name, a u8 rank, i64 dims, and raw little-endian f32 data.
// Values are stored as f32 regardless of the in-memory dtype; an f32 model
// round-trips bit-exactly.
template <typename T>
void save_checkpoint(const std::string& path, CapsNet<T>& net);

// Rebuilds the model from the embedded config and fills every parameter.
// Unknown, missing, or reshaped parameters raise FormatError naming them.
template <typename T>
CapsNet<T> load_checkpoint(const std::string& path);

}  // namespace capsnet
