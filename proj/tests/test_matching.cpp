#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "plaindet/grad_check.hpp"
#include "plaindet/matching.hpp"
#include "support/grad_suite.hpp"

using namespace plaindet;

namespace {

// Factorial enumeration over all partial injections of size min(n,m).
double brute_force_min_cost(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = n ? static_cast<int>(cost[0].size()) : 0;
  if (n == 0 || m == 0) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  if (n <= m) {
    std::vector<int> cols(m);
    std::iota(cols.begin(), cols.end(), 0);
    std::sort(cols.begin(), cols.end());
    do {
      double s = 0;
      for (int i = 0; i < n; ++i) s += cost[i][cols[i]];
      best = std::min(best, s);
    } while (std::next_permutation(cols.begin(), cols.end()));
  } else {
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    do {
      double s = 0;
      for (int j = 0; j < m; ++j) s += cost[rows[j]][j];
      best = std::min(best, s);
    } while (std::next_permutation(rows.begin(), rows.end()));
  }
  return best;
}

std::vector<std::vector<double>> random_cost(Rng& rng, int n, int m) {
  std::vector<std::vector<double>> c(n, std::vector<double>(m));
  for (auto& row : c) {
    for (auto& v : row) v = rng.uniform(-5.0, 5.0);
  }
  return c;
}

}  // namespace

TEST_CASE("hungarian hand cases") {
  MatchResult r1 = hungarian({{0.0}});
  REQUIRE(r1.pairs.size() == 1);
  CHECK(r1.pairs[0] == std::pair<int, int>{0, 0});
  CHECK(r1.total_cost == 0.0);

  MatchResult r2 = hungarian({{1, 2}, {2, 1}});
  REQUIRE(r2.pairs.size() == 2);
  CHECK(r2.pairs[0] == std::pair<int, int>{0, 0});
  CHECK(r2.pairs[1] == std::pair<int, int>{1, 1});
  CHECK(r2.total_cost == doctest::Approx(2.0));

  CHECK_THROWS_AS(hungarian({{0.0, std::nan("")}}), DomainError);

  MatchResult empty = hungarian({});
  CHECK(empty.pairs.empty());
}

TEST_CASE("hungarian equals brute force on 1000 random instances") {
  Rng rng(123);
  for (int t = 0; t < 1000; ++t) {
    const int n = rng.uniform_int(1, 7);
    const int m = rng.uniform_int(1, 7);
    auto cost = random_cost(rng, n, m);
    MatchResult r = hungarian(cost);
    CHECK(static_cast<int>(r.pairs.size()) == std::min(n, m));
    CHECK(r.total_cost ==
          doctest::Approx(brute_force_min_cost(cost)).epsilon(1e-9));
    // Partial injection both ways.
    std::vector<char> pu(n, 0), gu(m, 0);
    for (auto& [i, j] : r.pairs) {
      CHECK(!pu[i]);
      CHECK(!gu[j]);
      pu[i] = gu[j] = 1;
    }
    CHECK(static_cast<int>(r.pairs.size() + r.unmatched_predictions.size()) == n);
  }
}

TEST_CASE("argmin pairing is scale invariant") {
  Rng rng(321);
  for (int t = 0; t < 200; ++t) {
    const int n = rng.uniform_int(2, 6), m = rng.uniform_int(2, 6);
    auto cost = random_cost(rng, n, m);
    MatchResult base = hungarian(cost);
    for (double c : {2.0, 0.5, 3.0}) {
      auto scaled = cost;
      for (auto& row : scaled) {
        for (auto& v : row) v *= c;
      }
      CHECK(hungarian(scaled).pairs == base.pairs);
    }
  }
}

TEST_CASE("focal loss reduces to BCE at gamma=0 with weighting disabled") {
  Rng rng(11);
  Tensor logits = plaindet::testing::rand_tensor(rng, {3, 4}, -3, 3, false);
  std::vector<int> targets{2, -1, 0};
  Tensor f = focal_loss(logits, targets, /*alpha=*/-1.0, /*gamma=*/0.0);
  // Direct BCE evaluation.
  double want = 0;
  const auto lv = logits.values();
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 4; ++c) {
      const double p = 1.0 / (1.0 + std::exp(-lv[i * 4 + c]));
      const bool pos = targets[i] == c;
      want += pos ? -std::log(p) : -std::log(1.0 - p);
    }
  }
  want /= 2.0;  // two matched ground truths
  CHECK(f.item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("focal loss hand value and saturation limit") {
  // Single positive with p = 0.9: 0.25 * (0.1)^2 * (-ln 0.9).
  const double logit = std::log(0.9 / 0.1);
  Tensor one = Tensor::from_data({1, 1}, {logit});
  Tensor f = focal_loss(one, {0}, 0.25, 2.0);
  CHECK(f.item() == doctest::Approx(0.25 * 0.01 * -std::log(0.9)).epsilon(1e-9));
  CHECK(f.item() == doctest::Approx(2.634e-4).epsilon(1e-3));

  Tensor sure = Tensor::from_data({1, 1}, {30.0});
  CHECK(focal_loss(sure, {0}, 0.25, 2.0).item() < 1e-10);

  CHECK_THROWS_AS(focal_loss(one, {5}, 0.25, 2.0), DomainError);
}

TEST_CASE("focal loss gradient matches finite differences at two h values") {
  Rng rng(22);
  Tensor logits = plaindet::testing::rand_tensor(rng, {4, 3}, -2, 2);
  std::vector<int> targets{1, -1, 2, 0};
  std::vector<std::pair<std::string, Tensor>> params{{"logits", logits}};
  auto f = [&]() { return focal_loss(logits, targets, 0.25, 2.0); };
  CHECK(finite_diff_check(f, params, 1e-5).max_rel_err <= 1e-4);
  CHECK(finite_diff_check(f, params, 1e-6).max_rel_err <= 1e-4);
}

TEST_CASE("match cost matrix hand evaluation") {
  LossWeights w;
  // Two predictions, two gts on a 4x4 grid.
  Tensor logits = Tensor::from_data({2, 2}, {2.0, -1.0, -0.5, 1.5});
  Tensor boxes = Tensor::from_data({2, 4}, {1, 1, 1, 1, 3, 3, 1.5, 1});
  std::vector<GtObject> gts{{0, Box{1, 1, 1, 1}}, {1, Box{3, 2.5, 1.5, 1}}};
  auto cost = match_cost_matrix(logits, boxes, gts, w, 4, 4);
  REQUIRE(cost.size() == 2);
  REQUIRE(cost[0].size() == 2);

  auto hand = [&](int i, int j) {
    const double lv = logits.values()[i * 2 + gts[j].class_id];
    const double p = 1.0 / (1.0 + std::exp(-lv));
    const double pos = 0.25 * std::pow(1 - p, 2.0) * -std::log(p);
    const double negc = 0.75 * std::pow(p, 2.0) * -std::log(1 - p);
    const auto bv = boxes.values();
    const Box pb{bv[i * 4], bv[i * 4 + 1], bv[i * 4 + 2], bv[i * 4 + 3]};
    const double l1 = std::fabs(pb.cx - gts[j].box.cx) / 4 +
                      std::fabs(pb.cy - gts[j].box.cy) / 4 +
                      std::fabs(pb.w - gts[j].box.w) / 4 +
                      std::fabs(pb.h - gts[j].box.h) / 4;
    return 2.0 * (pos - negc) + 5.0 * l1 + 2.0 * (1.0 - giou(pb, gts[j].box));
  };
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      CHECK(cost[i][j] == doctest::Approx(hand(i, j)).epsilon(1e-12));
    }
  }

  // A confident exact prediction dominates its column.
  CHECK(cost[0][0] < cost[1][0]);
  // No ground truths -> empty matrix, no pairs.
  auto empty = match_cost_matrix(logits, boxes, {}, w, 4, 4);
  CHECK(empty[0].empty());
  CHECK(hungarian(empty).pairs.empty());
}

TEST_CASE("stage loss with zero ground truths keeps only classification") {
  Rng rng(33);
  StagePrediction pred{plaindet::testing::rand_tensor(rng, {3, 2}, -1, 1, false),
                       Tensor::from_data({3, 4}, {1, 1, 1, 1, 2, 2, 1, 1, 3, 3, 1, 1})};
  LossWeights w;
  auto [t, comp] = stage_loss(pred, {}, w, 4, 4);
  CHECK(comp.l1 == 0.0);
  CHECK(comp.giou == 0.0);
  CHECK(comp.focal > 0.0);
  CHECK(t.item() == doctest::Approx(w.cls * comp.focal).epsilon(1e-12));
}

TEST_CASE("hybrid loss composition and breakdown recomposition") {
  Rng rng(44);
  LossWeights w;
  const int K = 2;
  StagePrediction s1{plaindet::testing::rand_tensor(rng, {K, 2}, -1, 1, false),
                     Tensor::from_data({K, 4}, {1, 1, 1, 1, 2.5, 2.5, 1, 1.5})};
  StagePrediction s2{plaindet::testing::rand_tensor(rng, {K, 2}, -1, 1, false),
                     Tensor::from_data({K, 4}, {1.2, 1, 1, 1, 2.5, 2, 1, 1})};
  std::vector<GtObject> gts{{1, Box{2.4, 2.4, 1.1, 1.4}}};

  // Plain per-layer one-to-one loss when the aux group is absent.
  auto [t_plain, bd_plain] = hybrid_loss({s1, s2}, {}, gts, w, 4, 4);
  auto [t1, c1] = stage_loss(s1, gts, w, 4, 4);
  auto [t2, c2] = stage_loss(s2, gts, w, 4, 4);
  CHECK(t_plain.item() == doctest::Approx(t1.item() + t2.item()).epsilon(1e-12));
  CHECK(bd_plain.one_to_many.empty());

  // Hand-composed total with an auxiliary branch.
  StagePrediction aux{plaindet::testing::rand_tensor(rng, {2 * K, 2}, -1, 1, false),
                      Tensor::from_data({2 * K, 4}, {1, 1, 1, 1, 2, 2, 1, 1, 3,
                                                     3, 1, 1, 2.5, 2.5, 1, 1})};
  auto [t_hybrid, bd] = hybrid_loss({s1, s2}, {aux}, gts, w, 4, 4);
  auto [t_aux, c_aux] = stage_loss(aux, gts, w, 4, 4, w.o2m_replication);
  CHECK(t_hybrid.item() ==
        doctest::Approx(t1.item() + t2.item() + w.o2m_weight * t_aux.item())
            .epsilon(1e-12));

  // total recomposes from weighted components.
  double recomposed = 0;
  for (const auto& c : bd.one_to_one) {
    recomposed += w.cls * c.focal + w.l1 * c.l1 + w.giou * c.giou;
  }
  for (const auto& c : bd.one_to_many) {
    recomposed +=
        w.o2m_weight * (w.cls * c.focal + w.l1 * c.l1 + w.giou * c.giou);
  }
  CHECK(std::fabs(bd.total - recomposed) <= 1e-12);
}

TEST_CASE("one-to-many branch assigns duplicates injectively") {
  LossWeights w;
  // Four identical predictions vs one gt replicated three times.
  std::vector<double> logit_row{1.0, -1.0};
  std::vector<double> box_row{2, 2, 1, 1};
  std::vector<double> logits, boxes;
  for (int i = 0; i < 4; ++i) {
    logits.insert(logits.end(), logit_row.begin(), logit_row.end());
    boxes.insert(boxes.end(), box_row.begin(), box_row.end());
  }
  StagePrediction pred{Tensor::from_data({4, 2}, logits),
                       Tensor::from_data({4, 4}, boxes)};
  std::vector<GtObject> gts{{0, Box{2.2, 2.2, 1, 1}}};
  auto [t, comp] = stage_loss(pred, gts, w, 4, 4, 3);
  REQUIRE(comp.match.pairs.size() == 3);
  std::vector<char> pred_used(4, 0), gt_used(3, 0);
  for (auto& [i, j] : comp.match.pairs) {
    CHECK(!pred_used[i]);
    CHECK(!gt_used[j]);
    pred_used[i] = 1;
    gt_used[j] = 1;
  }
}

TEST_CASE("stage loss gradients flow through boxes and logits") {
  Rng rng(55);
  Tensor logits = plaindet::testing::rand_tensor(rng, {3, 2}, -1, 1);
  // No coordinate may coincide with its matched gt: |pred - gt| has a kink
  // at zero where finite differences disagree with the subgradient.
  Tensor boxes = Tensor::from_data({3, 4}, {1, 1, 0.95, 1.02, 2.5, 2.55, 1.2,
                                            1.4, 3.2, 1.2, 0.8, 0.9});
  boxes.set_requires_grad(true);
  std::vector<GtObject> gts{{0, Box{1.1, 1.2, 1.04, 1.1}},
                            {1, Box{2.6, 2.4, 1.1, 1.2}}};
  LossWeights w;
  std::vector<std::pair<std::string, Tensor>> params{{"logits", logits},
                                                     {"boxes", boxes}};
  auto f = [&]() {
    StagePrediction pred{logits, boxes};
    return stage_loss(pred, gts, w, 4, 4).first;
  };
  CHECK(finite_diff_check(f, params, 1e-6).max_rel_err <= 1e-4);
}
