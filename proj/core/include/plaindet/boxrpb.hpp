// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>

#include "plaindet/geometry.hpp"
#include "plaindet/optim.hpp"
#include "plaindet/rng.hpp"
#include "plaindet/tensor.hpp"

namespace plaindet {

/// Two-layer bias meta-network: Linear -> ReLU -> Linear over the last axis.
struct RpbMlp {
  Tensor w1, b1, w2, b2;

  int in_width() const { return w1.extent(0); }
  int hidden() const { return w1.extent(1); }
  int heads() const { return w2.extent(1); }

  static RpbMlp create(ParamStore& store, const std::string& prefix,
                       int in_width, int hidden, int heads, Rng& rng);
  /// Detached copy with all parameters zero; useful to express "no bias".
  static RpbMlp zero(int in_width, int hidden, int heads);

  Tensor forward(const Tensor& x) const;
};

/// Per-query, per-position, per-head additive attention bias. Held either in
/// full (K,H,W,M) form or as the axial pair Bx (K,W,M) / By (K,H,M) whose
/// broadcast sum reconstructs the full form exactly.
class BiasTerm {
 public:
  static BiasTerm from_full(Tensor full);
  static BiasTerm from_axial(Tensor bx, Tensor by);

  bool is_axial() const { return bx_.defined(); }
  const Tensor& bx() const;
  const Tensor& by() const;
  /// Full (K,H,W,M) form; materialized by broadcast_add for axial terms.
  Tensor full() const;

  int queries() const { return K_; }
  int grid_h() const { return H_; }
  int grid_w() const { return W_; }
  int heads() const { return M_; }

 private:
  Tensor full_, bx_, by_;
  int K_ = 0, H_ = 0, W_ = 0, M_ = 0;
};

/// Per-query slab of per-position features assembled from per-axis rows.
/// channels[c] = (rows, 'x'|'y'); the slab value at flattened position
/// (i*W+j, c) is rows[k, j] for an x channel and rows[k, i] for a y channel.
/// Differentiable back into the rows. This is the lazy, query-at-a-time
/// materialization used by the non-decomposed bias path.
Tensor position_feature_slab(
    std::span<const std::pair<Tensor, char>> channels, int k, int grid_h,
    int grid_w);

/// Full 4-feature bias: per position the vector (dx1, dy1, dx2, dy2) is
/// mapped through one MLP (input width 4) to M head biases.
BiasTerm naive_boxrpb(const OffsetGrid& offsets, const RpbMlp& mlp);

/// Axial bias: Bx = mlp_x(dx1, dx2), By = mlp_y(dy1, dy2);
/// full form is the exact broadcast sum.
BiasTerm decomposed_boxrpb(const OffsetGrid& offsets, const RpbMlp& mlp_x,
                           const RpbMlp& mlp_y);

/// Ablation variant conditioning on the box center only: per position the
/// pair ((px-cx)/W, (py-cy)/H) through one MLP (input width 2).
BiasTerm center_rpb(const Tensor& boxes, int grid_h, int grid_w,
                    const RpbMlp& mlp, bool normalized = true);

}  // namespace plaindet
