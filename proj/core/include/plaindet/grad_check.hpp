// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>

#include "plaindet/tensor.hpp"

namespace plaindet {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_coord = -1;
};

/// Central-difference gradient verification. `f` must be a deterministic
/// scalar function of the current values of `params` (each a leaf with
/// requires_grad). Returns max over all coordinates of
/// |analytic - numeric| / max(1, |analytic|).
/// Throws DomainError naming the coordinate if `f` is non-finite at a probe.
GradCheckResult finite_diff_check(
    const std::function<Tensor()>& f,
    std::span<const std::pair<std::string, Tensor>> params, double h = 1e-5);

}  // namespace plaindet
