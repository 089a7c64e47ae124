// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/grad_check.hpp"

#include <cmath>
#include <vector>

namespace plaindet {

GradCheckResult finite_diff_check(
    const std::function<Tensor()>& f,
    std::span<const std::pair<std::string, Tensor>> params, double h) {
  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    for (auto& [name, p] : params) {
      Tensor t = p;
      if (!t.requires_grad()) {
        throw DomainError("finite_diff_check: parameter " + name +
                          " does not require grad");
      }
      t.zero_grad();
    }
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    if (loss.numel() != 1) {
      throw DomainError("finite_diff_check: f must return a scalar");
    }
    tape.backward(loss);
    for (auto& [name, p] : params) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    }
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    const std::string& name = params[pi].first;
    auto vals = p.values_mut();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double orig = vals[i];
      double fp = 0.0, fm = 0.0;
      try {
        vals[i] = orig + h;
        fp = f().item();
        vals[i] = orig - h;
        fm = f().item();
      } catch (const NumericError&) {
        vals[i] = orig;
        throw DomainError("finite_diff_check: non-finite value probing " +
                          name + "[" + std::to_string(i) + "]");
      }
      vals[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw DomainError("finite_diff_check: non-finite value probing " +
                          name + "[" + std::to_string(i) + "]");
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][static_cast<std::size_t>(i)];
      const double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = name;
        result.worst_coord = i;
      }
    }
  }
  return result;
}

}  // namespace plaindet
