// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/cost_model.hpp"

#include <sstream>

#include "plaindet/tensor.hpp"

namespace plaindet {

namespace {

void validate(const RpbShape& s) {
  if (s.queries < 1 || s.grid_h < 1 || s.grid_w < 1 || s.heads < 1 ||
      s.hidden < 1) {
    throw ConfigError("boxrpb_flops: all extents must be positive");
  }
}

}  // namespace

std::pair<FlopReport, FlopReport> boxrpb_flops(const RpbShape& s) {
  validate(s);
  const std::int64_t K = s.queries, H = s.grid_h, W = s.grid_w, M = s.heads,
                     h = s.hidden;
  FlopReport naive{"naive", s, 2 * K * H * W * (4 * h + h * M),
                   4 * K * H * W * h};
  FlopReport decomposed{"decomposed", s,
                        2 * K * (H + W) * (2 * h + h * M) + K * H * W * M,
                        4 * K * (H + W) * h};
  return {naive, decomposed};
}

double mlp_flop_ratio(const RpbShape& s) {
  validate(s);
  return static_cast<double>(s.grid_h * s.grid_w * (4 + s.heads)) /
         static_cast<double>((s.grid_h + s.grid_w) * (2 + s.heads));
}

std::string flops_csv(std::span<const FlopReport> reports) {
  std::ostringstream os;
  os << "variant,K,H,W,M,h,flops,activation_bytes\n";
  for (const FlopReport& r : reports) {
    os << r.variant << ',' << r.shape.queries << ',' << r.shape.grid_h << ','
       << r.shape.grid_w << ',' << r.shape.heads << ',' << r.shape.hidden
       << ',' << r.flops << ',' << r.activation_bytes << '\n';
  }
  os << "# activation_bytes counts bias-path hidden activations (32-bit) "
        "only, not whole-training memory footprints\n";
  return os.str();
}

}  // namespace plaindet
