#pragma once

#include <cstdint>
#include <string>

#include "melodi/model.hpp"

namespace melodi {

// Checkpoint layout, little-endian:
//   char[8] "MLDICKP1", u32 version, u64 config_hash,
//   u64 config_len, char config[config_len]   (serialized model config)
//   u64 count, count x {
//     u32 name_len, char name[name_len], u32 rank, u64 dims[rank], f32 data[prod(dims)]
//   }
void save_checkpoint(const std::string& path, const Model& model);

// Reads only the embedded model config.
ModelConfig read_checkpoint_config(const std::string& path);

// Copies every record into the model's parameters. Throws if the config hash,
// a name or a shape differs.
void load_checkpoint(const std::string& path, Model& model);

// Builds a model from the embedded config and loads the weights.
Model load_model(const std::string& path);

}  // namespace melodi
