#pragma once

#include <string>

#include "mitodet/model.hpp"

namespace mitodet {

// Binary weights file: magic "GNET1", u32 version, u32 header length,
// JSON header (model config, config fingerprint, ordered tensor descriptors
// with name/shape/dtype "f32le"), then the raw little-endian f32 payloads in
// header order. Round-trips byte-exactly.
void save_weights(const Model& model, const std::string& path);

// Rebuilds the model from the embedded config and loads all tensors.
// Malformed files raise IoError naming the byte offset of the problem.
Model load_weights(const std::string& path);

}  // namespace mitodet
