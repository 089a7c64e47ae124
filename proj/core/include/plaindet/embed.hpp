// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "plaindet/tensor.hpp"

namespace plaindet {

/// Fixed 2-d sine embedding of grid cell centers -> (H*W, d) constant.
/// Half the width encodes y, half x; within each half, sin/cos pairs over
/// geometrically spaced frequencies (temperature 10000). Requires d % 4 == 0.
Tensor grid_sine_embedding(int grid_h, int grid_w, int d);

/// Sine embedding of boxes (K,4 values; cx,cy,w,h in grid units) -> (K, d)
/// constant. d/4 dims per coordinate (d/8 frequencies x sin/cos), coordinates
/// normalized by the grid extent. Requires d % 8 == 0.
Tensor box_sine_embedding(const Tensor& boxes, int d, int grid_w, int grid_h);

}  // namespace plaindet
