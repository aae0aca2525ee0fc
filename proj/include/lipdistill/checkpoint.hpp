// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files come in pairs: <name>.json holds the manifest (version,
// config echo, tensor names, shapes and byte offsets, blob length and hash)
// and <name>.bin holds every tensor back to back as little-endian float64.
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "lipdistill/nn/params.hpp"

namespace lipdistill::train {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string role;  // "teacher" or "student"
  nn::ParameterSet params;
  nlohmann::json config = nlohmann::json::object();
  std::size_t epoch = 0;
  std::string rng_state;
  nlohmann::json metrics = nlohmann::json::object();
};

/// path names the manifest; the blob goes next to it with extension .bin.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws std::runtime_error on version mismatch, missing files, or a blob
/// whose length or hash disagrees with the manifest.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values from src into dst; names and shapes must match exactly.
void assign_params(nn::ParameterSet& dst, const nn::ParameterSet& src);

}  // namespace lipdistill::train
