#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evis/tensor.hpp"

namespace evis {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint layout:
///   u64 little-endian header length L
///   L bytes of UTF-8 JSON: {"tensors": {name: shape, ...}, "hyperparameters": {...}}
///   float64 little-endian values of every tensor, concatenated in header order
struct Checkpoint {
  NamedTensors tensors;
  nlohmann::ordered_json hyperparameters = nlohmann::ordered_json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evis
