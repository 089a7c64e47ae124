#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "plaindet/cost_model.hpp"
#include "plaindet/metrics.hpp"
#include "plaindet/rng.hpp"

using namespace plaindet;

namespace {

// Independent reference evaluator: direct enumeration of the greedy matching
// and the 101-point integral, written from the definition.
double reference_ap(const std::vector<Detection>& dets,
                    const std::vector<GtBox>& gts, double thr) {
  std::vector<int> classes, gt_images;
  for (const auto& g : gts) {
    if (std::find(classes.begin(), classes.end(), g.class_id) == classes.end()) {
      classes.push_back(g.class_id);
    }
    if (std::find(gt_images.begin(), gt_images.end(), g.image_id) ==
        gt_images.end()) {
      gt_images.push_back(g.image_id);
    }
  }
  if (classes.empty()) return 0.0;
  std::sort(classes.begin(), classes.end());

  double total = 0.0;
  for (int c : classes) {
    // Rank detections of this class on images that have ground truth.
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id != c) continue;
      if (std::find(gt_images.begin(), gt_images.end(), dets[i].image_id) ==
          gt_images.end()) {
        continue;
      }
      order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dets[a].confidence > dets[b].confidence;
    });

    std::vector<std::size_t> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id == c) gt_idx.push_back(g);
    }
    std::vector<char> used(gt_idx.size(), 0);

    std::vector<char> tp_flags;
    for (std::size_t oi : order) {
      int best = -1;
      double best_v = thr;  // must reach the threshold
      for (std::size_t g = 0; g < gt_idx.size(); ++g) {
        if (used[g] || gts[gt_idx[g]].image_id != dets[oi].image_id) continue;
        const double v = iou(dets[oi].box, gts[gt_idx[g]].box);
        if (v >= thr && (best == -1 || v > best_v)) {
          best = static_cast<int>(g);
          best_v = v;
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = 1;
        tp_flags.push_back(1);
      } else {
        tp_flags.push_back(0);
      }
    }

    double ap = 0.0;
    for (int t = 0; t <= 100; ++t) {
      const double want_recall = t / 100.0;
      double best_prec = 0.0;
      int tp = 0;
      for (std::size_t k = 0; k < tp_flags.size(); ++k) {
        tp += tp_flags[k];
        const double prec = static_cast<double>(tp) / static_cast<double>(k + 1);
        const double rec =
            static_cast<double>(tp) / static_cast<double>(gt_idx.size());
        if (rec >= want_recall) best_prec = std::max(best_prec, prec);
      }
      ap += best_prec;
    }
    total += ap / 101.0;
  }
  return total / static_cast<double>(classes.size());
}

Box rand_box(Rng& rng) {
  const double w = rng.uniform(1.0, 4.0);
  const double h = rng.uniform(1.0, 4.0);
  return {rng.uniform(w / 2, 8 - w / 2), rng.uniform(h / 2, 8 - h / 2), w, h};
}

}  // namespace

TEST_CASE("average precision hand cases") {
  // One detection matching one gt at IoU 0.8.
  std::vector<GtBox> gts{{0, 0, Box{5, 5, 4, 4}}};
  std::vector<Detection> dets{{0, 0, Box{5, 5, 4, 3.2}, 0.9}};
  CHECK(iou(dets[0].box, gts[0].box) == doctest::Approx(0.8));
  CHECK(average_precision(dets, gts, 0.5) == doctest::Approx(1.0));

  // Two gts, rank-1 TP, rank-2 FP, one gt unmatched.
  std::vector<GtBox> gts2{{0, 0, Box{2, 2, 2, 2}}, {0, 0, Box{10, 10, 2, 2}}};
  std::vector<Detection> dets2{{0, 0, Box{2, 2, 2, 2}, 0.9},
                               {0, 0, Box{6, 6, 2, 2}, 0.5}};
  CHECK(average_precision(dets2, gts2, 0.5) ==
        doctest::Approx(51.0 / 101.0).epsilon(1e-12));

  // No detections.
  CHECK(average_precision({}, gts2, 0.5) == 0.0);

  CHECK_THROWS_AS(average_precision(dets, gts, 0.0), DomainError);
  CHECK_THROWS_AS(average_precision(dets, gts, 1.0), DomainError);
}

TEST_CASE("evaluator equals the exhaustive reference on small instances") {
  Rng rng(42);
  for (int trial = 0; trial < 800; ++trial) {
    const int n_gt = rng.uniform_int(0, 3);
    const int n_det = rng.uniform_int(0, 4);
    std::vector<GtBox> gts;
    std::vector<Detection> dets;
    for (int g = 0; g < n_gt; ++g) {
      gts.push_back({rng.uniform_int(0, 1), rng.uniform_int(0, 1), rand_box(rng)});
    }
    for (int d = 0; d < n_det; ++d) {
      // Ties in confidence are common on purpose.
      const double conf = rng.uniform_int(1, 4) / 4.0;
      if (!gts.empty() && rng.uniform01() < 0.6) {
        // Perturb a gt box so matches at varied IoU actually occur.
        const GtBox& g = gts[static_cast<std::size_t>(
            rng.uniform_int(0, n_gt - 1))];
        Box b = g.box;
        b.cx += rng.uniform(-1.0, 1.0);
        b.cy += rng.uniform(-1.0, 1.0);
        dets.push_back({g.image_id, g.class_id, b, conf});
      } else {
        dets.push_back(
            {rng.uniform_int(0, 1), rng.uniform_int(0, 1), rand_box(rng), conf});
      }
    }
    if (gts.empty()) {
      CHECK(average_precision(dets, gts, 0.5) == 0.0);
      continue;
    }
    for (double thr : {0.5, 0.75}) {
      const double got = average_precision(dets, gts, thr);
      const double want = reference_ap(dets, gts, thr);
      CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("map_range extremes") {
  // Perfect detector.
  std::vector<GtBox> gts;
  std::vector<Detection> dets;
  Rng rng(7);
  for (int i = 0; i < 3; ++i) {
    Box b = rand_box(rng);
    gts.push_back({i, i % 2, b});
    dets.push_back({i, i % 2, b, 0.9});
  }
  MapResult perfect = map_range(dets, gts);
  CHECK(perfect.ap == doctest::Approx(1.0));
  CHECK(perfect.ap50 == doctest::Approx(1.0));
  CHECK(perfect.ap75 == doctest::Approx(1.0));

  // Correct only at IoU ~0.74: perfect at AP50, zero at AP75.
  std::vector<GtBox> g1{{0, 0, Box{5, 5, 10, 10}}};
  std::vector<Detection> d1{{0, 0, Box{5, 6.5, 10, 10}, 0.8}};
  CHECK(iou(d1[0].box, g1[0].box) > 0.55);
  CHECK(iou(d1[0].box, g1[0].box) < 0.75);
  MapResult partial = map_range(d1, g1);
  CHECK(partial.ap50 == doctest::Approx(1.0));
  CHECK(partial.ap75 == 0.0);

  nlohmann::json j = metrics_json(partial);
  CHECK(j.contains("AP"));
  CHECK(j.contains("per_class"));
}

TEST_CASE("flops closed forms match hand counts") {
  auto [naive, dec] = boxrpb_flops({1, 2, 2, 1, 2});
  CHECK(naive.flops == 80);
  CHECK(dec.flops == 52);
  CHECK(naive.activation_bytes == 4 * 1 * 2 * 2 * 2);
  CHECK(dec.activation_bytes == 4 * 1 * 4 * 2);

  // MLP-only ratio is independent of the hidden width.
  for (std::int64_t h : {16LL, 64LL, 256LL}) {
    RpbShape s{4, 6, 9, 8, h};
    auto [n2, d2] = boxrpb_flops(s);
    const double mlp_naive = 2.0 * 4 * 6 * 9 * (4 * h + h * 8);
    const double mlp_dec = 2.0 * 4 * (6 + 9) * (2 * h + h * 8);
    CHECK(mlp_naive / mlp_dec == doctest::Approx(mlp_flop_ratio(s)).epsilon(1e-12));
  }

  // Paper-plausible shape: ratio ~37.6, within 1.5x of 265.4/5.8.
  RpbShape paper{300, 50, 84, 8, 256};
  const double ratio = mlp_flop_ratio(paper);
  CHECK(ratio == doctest::Approx(37.6).epsilon(0.01));
  const double table_ratio = 265.4 / 5.8;
  CHECK(ratio < table_ratio * 1.5);
  CHECK(ratio > table_ratio / 1.5);

  CHECK_THROWS_AS(boxrpb_flops({0, 1, 1, 1, 1}), ConfigError);
}

TEST_CASE("flops counts are monotone in every extent") {
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    RpbShape s{rng.uniform_int(1, 50), rng.uniform_int(1, 30),
               rng.uniform_int(1, 30), rng.uniform_int(1, 16),
               rng.uniform_int(1, 128)};
    auto [n0, d0] = boxrpb_flops(s);
    for (int axis = 0; axis < 5; ++axis) {
      RpbShape b = s;
      (axis == 0   ? b.queries
       : axis == 1 ? b.grid_h
       : axis == 2 ? b.grid_w
       : axis == 3 ? b.heads
                   : b.hidden) += 1;
      auto [n1, d1] = boxrpb_flops(b);
      CHECK(n1.flops >= n0.flops);
      CHECK(d1.flops >= d0.flops);
      CHECK(n1.activation_bytes >= n0.activation_bytes);
      CHECK(d1.activation_bytes >= d0.activation_bytes);
    }
  }
}

TEST_CASE("square-grid ratio grows linearly in the side length") {
  const double base = mlp_flop_ratio({8, 10, 10, 4, 32}) / 10.0;
  for (std::int64_t n : {20LL, 40LL, 80LL}) {
    const double r = mlp_flop_ratio({8, n, n, 4, 32});
    CHECK(r / static_cast<double>(n) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("flops csv layout") {
  auto [n, d] = boxrpb_flops({16, 8, 8, 4, 64});
  const FlopReport reports[] = {n, d};
  const std::string csv = flops_csv(reports);
  CHECK(csv.find("variant,K,H,W,M,h,flops,activation_bytes\n") == 0);
  CHECK(csv.find("naive,16,8,8,4,64,") != std::string::npos);
  CHECK(csv.find("decomposed,16,8,8,4,64,") != std::string::npos);
  CHECK(csv.find("# activation_bytes") != std::string::npos);
}
