#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "cellsynth/diffusion.hpp"
#include "cellsynth/nn.hpp"
#include "cellsynth/unet.hpp"

namespace cellsynth {

using Json = nlohmann::json;

// Archive layout: "CSYN", u32 version, u64 header length, JSON header, then every
// parameter as little-endian float32 in ParameterStore order. The header carries the
// parameter names and shapes plus whatever model metadata the caller adds.

void save_checkpoint(const std::filesystem::path& path, Json header, const nn::ParameterStore& params);

/// Reads only the header.
Json read_checkpoint_header(const std::filesystem::path& path);

/// Reads the header and fills `params`, which must list the same names and shapes.
Json load_checkpoint(const std::filesystem::path& path, nn::ParameterStore& params);

Json schedule_to_json(const DiffusionSchedule& s);
DiffusionSchedule schedule_from_json(const Json& j);

namespace nn {
void to_json(Json& j, const UNetConfig& c);
void from_json(const Json& j, UNetConfig& c);
}  // namespace nn

}  // namespace cellsynth
