// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/embed.hpp"

#include <cmath>

namespace plaindet {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kTemperature = 10000.0;
}  // namespace

Tensor grid_sine_embedding(int grid_h, int grid_w, int d) {
  if (d % 4 != 0) {
    throw ConfigError("grid_sine_embedding: d must be divisible by 4");
  }
  const int per_axis = d / 2;
  const int freqs = per_axis / 2;
  Tensor out = Tensor::zeros({grid_h * grid_w, d});
  auto ov = out.values_mut();
  for (int i = 0; i < grid_h; ++i) {
    for (int j = 0; j < grid_w; ++j) {
      const double py = (i + 0.5) / grid_h * kTwoPi;
      const double px = (j + 0.5) / grid_w * kTwoPi;
      double* row = ov.data() + (static_cast<std::int64_t>(i) * grid_w + j) * d;
      for (int f = 0; f < freqs; ++f) {
        const double denom =
            std::pow(kTemperature, (2.0 * f) / static_cast<double>(per_axis));
        row[2 * f] = std::sin(py / denom);
        row[2 * f + 1] = std::cos(py / denom);
        row[per_axis + 2 * f] = std::sin(px / denom);
        row[per_axis + 2 * f + 1] = std::cos(px / denom);
      }
    }
  }
  return out;
}

Tensor box_sine_embedding(const Tensor& boxes, int d, int grid_w, int grid_h) {
  if (d % 8 != 0) {
    throw ConfigError("box_sine_embedding: d must be divisible by 8");
  }
  if (boxes.rank() != 2 || boxes.extent(1) != 4) {
    throw ShapeError("box_sine_embedding: expected (K,4) boxes");
  }
  const int K = boxes.extent(0);
  const int per_coord = d / 4;
  const int freqs = per_coord / 2;
  Tensor out = Tensor::zeros({K, d});
  auto ov = out.values_mut();
  const auto bv = boxes.values();
  for (int k = 0; k < K; ++k) {
    const double coords[4] = {bv[k * 4 + 0] / grid_w, bv[k * 4 + 1] / grid_h,
                              bv[k * 4 + 2] / grid_w, bv[k * 4 + 3] / grid_h};
    double* row = ov.data() + static_cast<std::int64_t>(k) * d;
    for (int c = 0; c < 4; ++c) {
      for (int f = 0; f < freqs; ++f) {
        const double denom =
            std::pow(kTemperature, (2.0 * f) / static_cast<double>(per_coord));
        const double a = coords[c] * kTwoPi / denom;
        row[c * per_coord + 2 * f] = std::sin(a);
        row[c * per_coord + 2 * f + 1] = std::cos(a);
      }
    }
  }
  return out;
}

}  // namespace plaindet
