// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "plaindet/tensor.hpp"

namespace plaindet {

/// Axis-aligned box in center-size form, feature-grid units.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
  }
};

void validate_box(const Box& b);

/// Intersection over union in [0, 1]; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);
/// IoU - (enclosure - union)/enclosure, in [-1, 1].
double giou(const Box& a, const Box& b);

/// Dimensionless box regression target (tx, ty, tw, th).
struct BoxDeltas {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

/// t such that applying it to p recovers g:
/// tx=(g.cx-p.cx)/p.w, ty=(g.cy-p.cy)/p.h, tw=log(g.w/p.w), th=log(g.h/p.h).
BoxDeltas reparam_deltas(const Box& g, const Box& p);

constexpr double kMinBoxSize = 1e-4;
/// Log-scale deltas beyond this magnitude are treated as overflow.
constexpr double kMaxLogScale = 80.0;

/// Inverse of reparam_deltas, clamped to the feature grid: centers to
/// [0, extent], sizes to [kMinBoxSize, extent].
Box apply_deltas(const Box& p, const BoxDeltas& t, double grid_w,
                 double grid_h);

/// Differentiable (K,4) -> (K,4) version of apply_deltas, same clamping.
Tensor apply_deltas(const Tensor& boxes, const Tensor& deltas, double grid_w,
                    double grid_h);

/// Per-pair GIoU of two (N,4) center-size tensors -> (N,). Differentiable.
Tensor giou_pairwise(const Tensor& a, const Tensor& b);

/// Offsets between every pixel center and the two box corners, per axis.
/// dx1[k,j] = (j+0.5 - x1_k)/W (or unnormalized), dx2 with x2; dy with H.
struct OffsetGrid {
  Tensor dx1, dx2;  // (K, W)
  Tensor dy1, dy2;  // (K, H)
  bool normalized = true;
  int grid_h = 0, grid_w = 0;
};

/// boxes: (K,4) center-size tensor. Differentiable in the box coordinates.
OffsetGrid corner_offsets(const Tensor& boxes, int grid_h, int grid_w,
                          bool normalized = true);

}  // namespace plaindet
