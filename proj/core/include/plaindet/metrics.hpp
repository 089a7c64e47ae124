// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <vector>

#include <json.hpp>

#include "plaindet/geometry.hpp"

namespace plaindet {

struct Detection {
  int image_id = 0;
  int class_id = 0;
  Box box;
  double confidence = 0.0;
};

struct GtBox {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

/// Greedy-matched average precision at one IoU threshold with 101-point
/// interpolated precision-recall integration. Detections are ranked by
/// confidence (ties by insertion order); each ground truth matches at most
/// once, best IoU first. Per-class AP is averaged over the classes present in
/// the ground truth; images without any ground truth are excluded.
double average_precision(const std::vector<Detection>& dets,
                         const std::vector<GtBox>& gts, double iou_threshold);

struct MapResult {
  double ap = 0.0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::map<int, double> per_class;  // mean over the 10 thresholds
};

MapResult map_range(const std::vector<Detection>& dets,
                    const std::vector<GtBox>& gts);

nlohmann::json metrics_json(const MapResult& m);

}  // namespace plaindet
