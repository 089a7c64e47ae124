// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>

namespace plaindet {

struct RpbShape {
  std::int64_t queries = 0;   // K
  std::int64_t grid_h = 0;    // H
  std::int64_t grid_w = 0;    // W
  std::int64_t heads = 0;     // M
  std::int64_t hidden = 0;    // meta-network hidden width
};

/// Closed-form bias-path cost. FLOPs count 2 per multiply-add (plus the
/// plain adds of the axial broadcast); activation bytes count the bias-path
/// hidden activations at 32 bits each, nothing else.
struct FlopReport {
  std::string variant;
  RpbShape shape;
  std::int64_t flops = 0;
  std::int64_t activation_bytes = 0;
};

/// Reports for the full 4-feature path and the axial-decomposed path:
///   naive:      2*K*H*W*(4h + hM),             activations K*H*W*h
///   decomposed: 2*K*(H+W)*(2h + hM) + K*H*W*M, activations K*(H+W)*h
std::pair<FlopReport, FlopReport> boxrpb_flops(const RpbShape& s);

/// MLP-only cost ratio naive/decomposed = H*W*(4+M) / ((H+W)*(2+M)),
/// independent of the hidden width.
double mlp_flop_ratio(const RpbShape& s);

std::string flops_csv(std::span<const FlopReport> reports);

}  // namespace plaindet
