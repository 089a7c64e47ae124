// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "plaindet/tensor.hpp"

namespace plaindet {

/// Checkpoint = `<prefix>.json` manifest (tensor names, shapes, byte offsets,
/// free-form meta) + `<prefix>.bin`, a raw little-endian float64 blob.
/// Round trips are bit-exact.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& prefix,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& meta);

Checkpoint load_checkpoint(const std::string& prefix);

}  // namespace plaindet
