// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "plaindet/rng.hpp"
#include "plaindet/tensor.hpp"

namespace plaindet {

/// Named leaf parameters in a fixed (lexicographic) order. The order defines
/// checkpoint layout and optimizer traversal, which keeps runs reproducible.
class ParamStore {
 public:
  /// Registers a zero-initialized parameter.
  Tensor create(const std::string& name, Shape shape);
  /// Registers a parameter filled from a Xavier-uniform draw.
  Tensor create_xavier(const std::string& name, Shape shape, Rng& rng);
  /// Registers a parameter filled from N(0, std^2).
  Tensor create_normal(const std::string& name, Shape shape, double stddev,
                       Rng& rng);
  Tensor create_const(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::int64_t total_coords() const;

  void zero_grad();
  /// Global L2 norm of all gradients.
  double grad_norm() const;
  /// Scales every gradient by max_norm/norm when norm exceeds max_norm.
  void clip_grad_norm(double max_norm);

  const std::map<std::string, Tensor>& entries() const { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// AdamW state: bias-corrected first/second moments plus a step counter,
/// with weight decay decoupled from the adaptive update.
struct OptimState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

/// One decoupled-decay Adam step over every parameter in the store, reading
/// the accumulated gradients in place.
void adamw_step(OptimState& state, ParamStore& params);

}  // namespace plaindet
