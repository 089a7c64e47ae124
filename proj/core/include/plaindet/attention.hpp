// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "plaindet/boxrpb.hpp"
#include "plaindet/optim.hpp"
#include "plaindet/tensor.hpp"

namespace plaindet {

/// Score offset standing in for -inf in attention masks. Finite so that
/// max-subtraction inside softmax never produces (-inf)-(-inf).
constexpr double kMaskNegative = -1e9;

struct AttentionConfig {
  int d = 32;
  int heads = 4;

  int head_width() const { return d / heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_width())); }
  void validate() const {
    if (heads < 1 || d < 1 || d % heads != 0) {
      throw ConfigError("attention: head count must divide model width");
    }
  }
};

/// Query/key/value/output projection parameters of one attention block.
struct MhaParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  static MhaParams create(ParamStore& store, const std::string& prefix, int d,
                          Rng& rng);
};

struct AttentionOutput {
  Tensor out;  // (K, d)
  /// Post-softmax weights, (heads, K, positions) row-major; filled only when
  /// retain_weights was requested.
  std::vector<double> weights;
  int heads = 0, queries = 0, positions = 0;

  double weight(int head, int query, int pos) const {
    return weights[(static_cast<std::size_t>(head) * queries + query) *
                       positions +
                   pos];
  }
};

/// Biased global cross-attention:
///   out = proj(concat_heads(Softmax(Q K^T * scale + B) V)) + x.
/// Q from x; K from memory (+ memory_pos when defined); V from memory.
/// bias, when present, must be shaped (K, H, W, heads) with H*W == positions.
AttentionOutput cross_attention(const Tensor& x, const Tensor& memory,
                                const std::optional<BiasTerm>& bias,
                                const Tensor& memory_pos, const MhaParams& p,
                                const AttentionConfig& cfg,
                                bool retain_weights = false);

/// Multi-head self-attention with positional embeddings added to queries and
/// keys (not values), plus the residual.
Tensor self_attention(const Tensor& x, const Tensor& pos, const MhaParams& p,
                      const AttentionConfig& cfg);

/// Local-attention baseline: 0 inside the box, kMaskNegative outside.
/// Boxes are clamped so at least one cell center always falls inside.
BiasTerm box_mask_bias(const Tensor& boxes, int grid_h, int grid_w, int heads);

/// Local-attention baseline restricted to an n x n lattice of sampled cells
/// inside each box: sample s of n sits at fraction (s+1)/(n+1) of the box
/// extent, snapped to the nearest cell center and clamped to the grid.
std::vector<int> roi_sample_cells(double cx, double cy, double w, double h,
                                  int grid_h, int grid_w, int samples_per_axis);

AttentionOutput roi_sampling_attention(const Tensor& x, const Tensor& memory,
                                       const Tensor& boxes,
                                       int grid_h, int grid_w,
                                       int samples_per_axis,
                                       const Tensor& memory_pos,
                                       const MhaParams& p,
                                       const AttentionConfig& cfg,
                                       bool retain_weights = false);

}  // namespace plaindet
