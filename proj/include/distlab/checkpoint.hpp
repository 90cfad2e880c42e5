#pragma once

// Model checkpoint container: a size-prefixed JSON header describing the
// configuration and a named tensor manifest (name, shape, dtype, byte
// offset), followed by the raw little-endian f32 payload. The header carries
// the model digest, so a load always proves it reconstructed the exact
// weights that were saved.

#include <string>

#include "distlab/model.hpp"

namespace distlab {

void save_checkpoint(const Transformer<float>& model, const std::string& path);
Transformer<float> load_checkpoint(const std::string& path);

}  // namespace distlab
