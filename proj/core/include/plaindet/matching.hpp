// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>
#include <vector>

#include "plaindet/geometry.hpp"
#include "plaindet/tensor.hpp"

namespace plaindet {

struct GtObject {
  int class_id = 0;
  Box box;
};

/// One-to-one assignment between predictions and ground truths.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt), sorted by pred
  std::vector<int> unmatched_predictions;
  double total_cost = 0.0;
};

/// Minimum-total-cost partial injection of size min(n, m) via shortest
/// augmenting paths. Ties are resolved deterministically by scanning lowest
/// indices first; the returned pair list is sorted by prediction index.
MatchResult hungarian(const std::vector<std::vector<double>>& cost);

/// Sigmoid focal loss summed over all K*C entries, normalized by the number
/// of matched ground truths. target_class[i] is the class of the ground truth
/// matched to prediction i, or -1 for unmatched predictions. alpha < 0
/// disables the positive/negative re-weighting.
Tensor focal_loss(const Tensor& logits, const std::vector<int>& target_class,
                  double alpha = 0.25, double gamma = 2.0);

struct LossWeights {
  double cls = 2.0, l1 = 5.0, giou = 2.0;
  double focal_alpha = 0.25, focal_gamma = 2.0;
  int o2m_replication = 3;   // ground-truth copies in the one-to-many branch
  double o2m_weight = 1.0;
};

/// Matching cost: cls * (focal positive cost - focal negative cost)
/// + l1 * |box - gt|_1 in grid-normalized coordinates + giou * (1 - GIoU).
/// logits/boxes are read as plain values (matching is not differentiated).
std::vector<std::vector<double>> match_cost_matrix(
    const Tensor& logits, const Tensor& boxes, const std::vector<GtObject>& gts,
    const LossWeights& w, double grid_w, double grid_h);

/// One decoder stage: class logits (K,C) and boxes (K,4) in grid units.
struct StagePrediction {
  Tensor logits;
  Tensor boxes;
};

struct StageLoss {
  double focal = 0, l1 = 0, giou = 0;  // unweighted component values
  MatchResult match;
};

/// Hungarian-matched focal + L1 + GIoU loss of one stage. `replication`
/// replicates the ground truths (one-to-many branch); 1 = plain one-to-one.
std::pair<Tensor, StageLoss> stage_loss(const StagePrediction& pred,
                                        const std::vector<GtObject>& gts,
                                        const LossWeights& w, double grid_w,
                                        double grid_h, int replication = 1);

/// Stage loss under a fixed assignment. Gradients never flow through the
/// assignment itself, so pinning it isolates the differentiable path.
std::pair<Tensor, StageLoss> matched_stage_loss(
    const StagePrediction& pred, const std::vector<GtObject>& targets,
    const MatchResult& match, const LossWeights& w, double grid_w,
    double grid_h);

struct LossBreakdown {
  std::vector<StageLoss> one_to_one;   // proposal stage first, then layers
  std::vector<StageLoss> one_to_many;  // auxiliary stages, if any
  double total = 0.0;
};

/// Total training loss: one-to-one branch over every stage plus, when
/// auxiliary stages are provided, the one-to-many branch with replicated
/// ground truths, weighted by o2m_weight. Inference never sees the aux group.
std::pair<Tensor, LossBreakdown> hybrid_loss(
    const std::vector<StagePrediction>& one_to_one_stages,
    const std::vector<StagePrediction>& one_to_many_stages,
    const std::vector<GtObject>& gts, const LossWeights& w, double grid_w,
    double grid_h);

}  // namespace plaindet
