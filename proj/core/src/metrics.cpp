// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/metrics.hpp"

#include <algorithm>
#include <set>

namespace plaindet {

namespace {

struct RankedDet {
  double confidence;
  std::size_t order;  // insertion order breaks confidence ties
  int image_id;
  Box box;
};

double class_ap(std::vector<RankedDet> dets,
                const std::vector<GtBox>& class_gts, double thr) {
  const int n_gt = static_cast<int>(class_gts.size());
  if (n_gt == 0) return 0.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const RankedDet& a, const RankedDet& b) {
                     if (a.confidence != b.confidence) {
                       return a.confidence > b.confidence;
                     }
                     return a.order < b.order;
                   });
  std::vector<char> gt_used(class_gts.size(), 0);
  std::vector<char> is_tp;
  is_tp.reserve(dets.size());
  for (const RankedDet& d : dets) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < class_gts.size(); ++g) {
      if (gt_used[g] || class_gts[g].image_id != d.image_id) continue;
      const double v = iou(d.box, class_gts[g].box);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      gt_used[static_cast<std::size_t>(best)] = 1;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  // Precision-recall points, then the 101-point interpolated integral.
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t k = 0; k < is_tp.size(); ++k) {
    tp += is_tp[k];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    double best_p = 0.0;
    for (std::size_t k = 0; k < prec.size(); ++k) {
      if (rec[k] >= r) best_p = std::max(best_p, prec[k]);
    }
    ap += best_p;
  }
  return ap / 101.0;
}

}  // namespace

double average_precision(const std::vector<Detection>& dets,
                         const std::vector<GtBox>& gts, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw DomainError("average_precision: threshold must lie in (0,1)");
  }
  std::set<int> images_with_gt;
  std::set<int> classes;
  for (const GtBox& g : gts) {
    images_with_gt.insert(g.image_id);
    classes.insert(g.class_id);
  }
  if (classes.empty()) return 0.0;

  double total = 0.0;
  for (int c : classes) {
    std::vector<RankedDet> class_dets;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const Detection& d = dets[i];
      if (d.class_id != c || !images_with_gt.count(d.image_id)) continue;
      class_dets.push_back({d.confidence, i, d.image_id, d.box});
    }
    std::vector<GtBox> class_gts;
    for (const GtBox& g : gts) {
      if (g.class_id == c) class_gts.push_back(g);
    }
    total += class_ap(std::move(class_dets), class_gts, iou_threshold);
  }
  return total / static_cast<double>(classes.size());
}

MapResult map_range(const std::vector<Detection>& dets,
                    const std::vector<GtBox>& gts) {
  MapResult result;
  std::set<int> classes;
  for (const GtBox& g : gts) classes.insert(g.class_id);

  int count = 0;
  for (int t = 50; t <= 95; t += 5) {
    const double thr = t / 100.0;
    result.ap += average_precision(dets, gts, thr);
    if (t == 50) result.ap50 = average_precision(dets, gts, thr);
    if (t == 75) result.ap75 = average_precision(dets, gts, thr);
    ++count;
    for (int c : classes) {
      std::vector<Detection> cd;
      std::vector<GtBox> cg;
      for (const Detection& d : dets) {
        if (d.class_id == c) cd.push_back(d);
      }
      for (const GtBox& g : gts) {
        if (g.class_id == c) cg.push_back(g);
      }
      result.per_class[c] += average_precision(cd, cg, thr);
    }
  }
  result.ap /= count;
  for (auto& [c, v] : result.per_class) v /= count;
  return result;
}

nlohmann::json metrics_json(const MapResult& m) {
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [c, v] : m.per_class) pc[std::to_string(c)] = v;
  return nlohmann::json{
      {"AP", m.ap}, {"AP50", m.ap50}, {"AP75", m.ap75}, {"per_class", pc}};
}

}  // namespace plaindet
