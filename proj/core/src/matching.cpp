// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace plaindet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment for n <= m; returns col index per row.
std::vector<int> solve_rows(const std::vector<std::vector<double>>& a, int n,
                            int m) {
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);  // col -> row (1-based)
  std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a[static_cast<std::size_t>(i0 - 1)]
                            [static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] > 0) {
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] =
          j - 1;
    }
  }
  return row_to_col;
}

}  // namespace

MatchResult hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = n > 0 ? static_cast<int>(cost[0].size()) : 0;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m) {
      throw ShapeError("hungarian: ragged cost matrix");
    }
    for (double c : row) {
      if (std::isnan(c)) throw DomainError("hungarian: NaN in cost matrix");
    }
  }
  MatchResult result;
  if (n == 0 || m == 0) {
    for (int i = 0; i < n; ++i) result.unmatched_predictions.push_back(i);
    return result;
  }

  if (n <= m) {
    const auto row_to_col = solve_rows(cost, n, m);
    for (int i = 0; i < n; ++i) {
      result.pairs.emplace_back(i, row_to_col[static_cast<std::size_t>(i)]);
    }
  } else {
    std::vector<std::vector<double>> t(
        static_cast<std::size_t>(m),
        std::vector<double>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
            cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      }
    }
    const auto col_to_row = solve_rows(t, m, n);
    for (int j = 0; j < m; ++j) {
      result.pairs.emplace_back(col_to_row[static_cast<std::size_t>(j)], j);
    }
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  std::vector<char> matched(static_cast<std::size_t>(n), 0);
  for (const auto& [i, j] : result.pairs) {
    matched[static_cast<std::size_t>(i)] = 1;
    result.total_cost +=
        cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  for (int i = 0; i < n; ++i) {
    if (!matched[static_cast<std::size_t>(i)]) {
      result.unmatched_predictions.push_back(i);
    }
  }
  return result;
}

Tensor focal_loss(const Tensor& logits, const std::vector<int>& target_class,
                  double alpha, double gamma) {
  if (logits.rank() != 2) throw ShapeError("focal_loss: logits must be (K,C)");
  const int K = logits.extent(0), C = logits.extent(1);
  if (static_cast<int>(target_class.size()) != K) {
    throw ShapeError("focal_loss: one target per prediction required");
  }
  Tensor pos_mask = Tensor::zeros({K, C});
  int matched = 0;
  for (int i = 0; i < K; ++i) {
    const int c = target_class[static_cast<std::size_t>(i)];
    if (c == -1) continue;
    if (c < 0 || c >= C) {
      throw DomainError("focal_loss: target class " + std::to_string(c) +
                        " out of range [0," + std::to_string(C) + ")");
    }
    pos_mask.values_mut()[static_cast<std::size_t>(i) * C + c] = 1.0;
    ++matched;
  }
  Tensor neg_mask = add_scalar(neg(pos_mask), 1.0);

  // Probabilities clamped away from 0/1 so saturated logits stay finite.
  // alpha < 0 disables the positive/negative re-weighting.
  const double pos_w = alpha < 0.0 ? 1.0 : alpha;
  const double neg_w = alpha < 0.0 ? 1.0 : 1.0 - alpha;
  const Tensor p = clamp(sigmoid(logits), 1e-12, 1.0 - 1e-12);
  const Tensor one_minus_p = add_scalar(neg(p), 1.0);
  const Tensor pos_term =
      scale(mul(pow_scalar(one_minus_p, gamma), neg(log(p))), pos_w);
  const Tensor neg_term =
      scale(mul(pow_scalar(p, gamma), neg(log(one_minus_p))), neg_w);
  const Tensor total =
      sum(add(mul(pos_mask, pos_term), mul(neg_mask, neg_term)));
  return scale(total, 1.0 / std::max(1, matched));
}

std::vector<std::vector<double>> match_cost_matrix(
    const Tensor& logits, const Tensor& boxes, const std::vector<GtObject>& gts,
    const LossWeights& w, double grid_w, double grid_h) {
  const int K = logits.extent(0), C = logits.extent(1);
  const int G = static_cast<int>(gts.size());
  if (boxes.extent(0) != K || boxes.extent(1) != 4) {
    throw ShapeError("match_cost_matrix: boxes must be (K,4)");
  }
  std::vector<std::vector<double>> cost(
      static_cast<std::size_t>(K), std::vector<double>(static_cast<std::size_t>(G)));
  const auto lv = logits.values();
  const auto bv = boxes.values();
  for (int i = 0; i < K; ++i) {
    const Box pb{bv[i * 4], bv[i * 4 + 1], bv[i * 4 + 2], bv[i * 4 + 3]};
    for (int j = 0; j < G; ++j) {
      const int c = gts[static_cast<std::size_t>(j)].class_id;
      if (c < 0 || c >= C) {
        throw DomainError("match_cost_matrix: gt class out of range");
      }
      const double logit = lv[static_cast<std::size_t>(i) * C + c];
      const double p = 1.0 / (1.0 + std::exp(-logit));
      const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
      const double pos_cost = w.focal_alpha *
                              std::pow(1.0 - pc, w.focal_gamma) *
                              (-std::log(pc));
      const double neg_cost = (1.0 - w.focal_alpha) *
                              std::pow(pc, w.focal_gamma) *
                              (-std::log(1.0 - pc));
      const Box& gb = gts[static_cast<std::size_t>(j)].box;
      const double l1 = std::fabs(pb.cx - gb.cx) / grid_w +
                        std::fabs(pb.cy - gb.cy) / grid_h +
                        std::fabs(pb.w - gb.w) / grid_w +
                        std::fabs(pb.h - gb.h) / grid_h;
      cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          w.cls * (pos_cost - neg_cost) + w.l1 * l1 +
          w.giou * (1.0 - giou(pb, gb));
    }
  }
  return cost;
}

std::pair<Tensor, StageLoss> stage_loss(const StagePrediction& pred,
                                        const std::vector<GtObject>& gts,
                                        const LossWeights& w, double grid_w,
                                        double grid_h, int replication) {
  if (replication < 1) throw ConfigError("stage_loss: replication must be >= 1");
  const int K = pred.logits.extent(0);

  std::vector<GtObject> targets;
  targets.reserve(gts.size() * static_cast<std::size_t>(replication));
  for (int r = 0; r < replication; ++r) {
    targets.insert(targets.end(), gts.begin(), gts.end());
  }

  if (targets.empty()) {
    StageLoss out;
    std::vector<int> target_class(static_cast<std::size_t>(K), -1);
    Tensor f = focal_loss(pred.logits, target_class, w.focal_alpha,
                          w.focal_gamma);
    out.focal = f.item();
    return {scale(f, w.cls), out};
  }

  const auto cost =
      match_cost_matrix(pred.logits, pred.boxes, targets, w, grid_w, grid_h);
  return matched_stage_loss(pred, targets, hungarian(cost), w, grid_w, grid_h);
}

std::pair<Tensor, StageLoss> matched_stage_loss(
    const StagePrediction& pred, const std::vector<GtObject>& targets,
    const MatchResult& match, const LossWeights& w, double grid_w,
    double grid_h) {
  const int K = pred.logits.extent(0);
  StageLoss out;
  out.match = match;
  std::vector<int> target_class(static_cast<std::size_t>(K), -1);
  const int matched = static_cast<int>(match.pairs.size());

  std::vector<int> pred_idx;
  std::vector<double> gt_vals, norm_vals;
  pred_idx.reserve(static_cast<std::size_t>(matched));
  for (const auto& [i, j] : match.pairs) {
    target_class[static_cast<std::size_t>(i)] =
        targets[static_cast<std::size_t>(j)].class_id;
    pred_idx.push_back(i);
    const Box& g = targets[static_cast<std::size_t>(j)].box;
    gt_vals.insert(gt_vals.end(), {g.cx, g.cy, g.w, g.h});
    norm_vals.insert(norm_vals.end(),
                     {1.0 / grid_w, 1.0 / grid_h, 1.0 / grid_w, 1.0 / grid_h});
  }

  const Tensor f =
      focal_loss(pred.logits, target_class, w.focal_alpha, w.focal_gamma);
  if (matched == 0) {
    out.focal = f.item();
    return {scale(f, w.cls), out};
  }
  const Tensor matched_boxes = gather_rows(pred.boxes, pred_idx);
  const Tensor gt_boxes = Tensor::from_data({matched, 4}, gt_vals);
  const Tensor norm = Tensor::from_data({matched, 4}, norm_vals);
  const double inv_matched = 1.0 / matched;
  const Tensor l1 = scale(
      sum(abs(mul(sub(matched_boxes, gt_boxes), norm))), inv_matched);
  const Tensor gl = scale(
      sum(add_scalar(neg(giou_pairwise(matched_boxes, gt_boxes)), 1.0)),
      inv_matched);

  out.focal = f.item();
  out.l1 = l1.item();
  out.giou = gl.item();
  Tensor total = add(add(scale(f, w.cls), scale(l1, w.l1)), scale(gl, w.giou));
  return {total, out};
}

std::pair<Tensor, LossBreakdown> hybrid_loss(
    const std::vector<StagePrediction>& one_to_one_stages,
    const std::vector<StagePrediction>& one_to_many_stages,
    const std::vector<GtObject>& gts, const LossWeights& w, double grid_w,
    double grid_h) {
  if (one_to_one_stages.empty()) {
    throw ConfigError("hybrid_loss: at least one one-to-one stage required");
  }
  LossBreakdown breakdown;
  Tensor total;
  for (const auto& stage : one_to_one_stages) {
    auto [t, comp] = stage_loss(stage, gts, w, grid_w, grid_h, 1);
    breakdown.one_to_one.push_back(std::move(comp));
    total = total.defined() ? add(total, t) : t;
  }
  for (const auto& stage : one_to_many_stages) {
    auto [t, comp] =
        stage_loss(stage, gts, w, grid_w, grid_h, w.o2m_replication);
    breakdown.one_to_many.push_back(std::move(comp));
    total = add(total, scale(t, w.o2m_weight));
  }
  breakdown.total = total.item();
  return {total, breakdown};
}

}  // namespace plaindet
