#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "plaindet/attention.hpp"
#include "plaindet/embed.hpp"
#include "plaindet/grad_check.hpp"
#include "support/grad_suite.hpp"

using namespace plaindet;

namespace {

MhaParams random_mha(ParamStore& store, const std::string& prefix, int d,
                     Rng& rng) {
  return MhaParams::create(store, prefix, d, rng);
}

Tensor random_boxes(Rng& rng, int K, double gw, double gh) {
  std::vector<double> v;
  for (int k = 0; k < K; ++k) {
    const double w = rng.uniform(0.5, 0.4 * gw);
    const double h = rng.uniform(0.5, 0.4 * gh);
    v.insert(v.end(), {rng.uniform(w / 2, gw - w / 2),
                       rng.uniform(h / 2, gh - h / 2), w, h});
  }
  return Tensor::from_data({K, 4}, v);
}

}  // namespace

TEST_CASE("tied scores give uniform attention") {
  Rng rng(1);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "p", 4, rng);
  Tensor x = plaindet::testing::rand_tensor(rng, {1, 4}, -1, 1, false);
  // Four identical memory rows -> all scores tie.
  std::vector<double> row{0.3, -0.7, 1.1, 0.2};
  std::vector<double> mem;
  for (int i = 0; i < 4; ++i) mem.insert(mem.end(), row.begin(), row.end());
  Tensor memory = Tensor::from_data({4, 4}, mem);
  AttentionOutput out =
      cross_attention(x, memory, std::nullopt, Tensor(), p, cfg, true);
  for (int m = 0; m < 2; ++m) {
    for (int s = 0; s < 4; ++s) CHECK(out.weight(m, 0, s) == 0.25);
  }
}

TEST_CASE("a huge bias saturates attention onto one position") {
  Rng rng(2);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "p", 4, rng);
  Tensor x = plaindet::testing::rand_tensor(rng, {1, 4}, -1, 1, false);
  Tensor memory = plaindet::testing::rand_tensor(rng, {6, 4}, -1, 1, false);
  Tensor full = Tensor::zeros({1, 2, 3, 2});
  // Position (1,1) -> flat 4.
  full.values_mut()[(1 * 3 + 1) * 2 + 0] = 1e9;
  full.values_mut()[(1 * 3 + 1) * 2 + 1] = 1e9;
  AttentionOutput out = cross_attention(x, memory, BiasTerm::from_full(full),
                                        Tensor(), p, cfg, true);
  for (int m = 0; m < 2; ++m) {
    CHECK(out.weight(m, 0, 4) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("hand-evaluated scalar attention") {
  const AttentionConfig cfg{1, 1};
  ParamStore store;
  MhaParams p;
  p.wq = Tensor::from_data({1, 1}, {1.5});
  p.bq = Tensor::from_data({1}, {0.1});
  p.wk = Tensor::from_data({1, 1}, {-0.5});
  p.bk = Tensor::from_data({1}, {0.2});
  p.wv = Tensor::from_data({1, 1}, {2.0});
  p.bv = Tensor::from_data({1}, {-0.3});
  p.wo = Tensor::from_data({1, 1}, {0.7});
  p.bo = Tensor::from_data({1}, {0.05});
  Tensor x = Tensor::from_data({1, 1}, {0.4});
  Tensor memory = Tensor::from_data({2, 1}, {1.0, -2.0});
  Tensor bias = Tensor::from_data({1, 1, 2, 1}, {0.3, -0.6});

  const double q = 0.4 * 1.5 + 0.1;
  const double k0 = 1.0 * -0.5 + 0.2, k1 = -2.0 * -0.5 + 0.2;
  const double v0 = 1.0 * 2.0 - 0.3, v1 = -2.0 * 2.0 - 0.3;
  const double s0 = q * k0 + 0.3, s1 = q * k1 - 0.6;  // scale = 1
  const double m = std::max(s0, s1);
  const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
  const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
  const double o = a0 * v0 + a1 * v1;
  const double expect = o * 0.7 + 0.05 + 0.4;

  AttentionOutput out = cross_attention(x, memory, BiasTerm::from_full(bias),
                                        Tensor(), p, cfg, true);
  CHECK(out.out.item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(out.weight(0, 0, 0) == doctest::Approx(a0).epsilon(1e-12));
}

TEST_CASE("zero bias is bitwise identical to the unbiased path") {
  Rng rng(3);
  ParamStore store;
  const AttentionConfig cfg{8, 2};
  MhaParams p = random_mha(store, "p", 8, rng);
  Tensor x = plaindet::testing::rand_tensor(rng, {3, 8}, -1, 1, false);
  Tensor memory = plaindet::testing::rand_tensor(rng, {12, 8}, -1, 1, false);
  Tensor pos = grid_sine_embedding(3, 4, 8);

  RpbMlp zero2 = RpbMlp::zero(2, 8, 2);
  Tensor boxes = random_boxes(rng, 3, 4, 3);
  BiasTerm zero_bias =
      decomposed_boxrpb(corner_offsets(boxes, 3, 4), zero2, zero2);

  AttentionOutput biased =
      cross_attention(x, memory, zero_bias, pos, p, cfg, true);
  AttentionOutput plain =
      cross_attention(x, memory, std::nullopt, pos, p, cfg, true);

  REQUIRE(biased.weights.size() == plain.weights.size());
  CHECK(std::memcmp(biased.weights.data(), plain.weights.data(),
                    plain.weights.size() * sizeof(double)) == 0);
  auto a = biased.out.values(), b = plain.out.values();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("attention weight rows always sum to one") {
  Rng rng(4);
  ParamStore store;
  const AttentionConfig cfg{8, 4};
  MhaParams p = random_mha(store, "p", 8, rng);
  Tensor x = plaindet::testing::rand_tensor(rng, {5, 8}, -2, 2, false);
  Tensor memory = plaindet::testing::rand_tensor(rng, {16, 8}, -2, 2, false);
  Tensor boxes = random_boxes(rng, 5, 4, 4);

  auto check_rows = [&](const AttentionOutput& out) {
    for (int m = 0; m < out.heads; ++m) {
      for (int q = 0; q < out.queries; ++q) {
        double s = 0;
        for (int c = 0; c < out.positions; ++c) s += out.weight(m, q, c);
        CHECK(std::fabs(s - 1.0) < 1e-9);
      }
    }
  };

  check_rows(cross_attention(x, memory, std::nullopt, Tensor(), p, cfg, true));
  check_rows(cross_attention(x, memory, box_mask_bias(boxes, 4, 4, 4), Tensor(),
                             p, cfg, true));
  ParamStore store2;
  Rng rng2(5);
  RpbMlp mx = RpbMlp::create(store2, "mx", 2, 8, 4, rng2);
  RpbMlp my = RpbMlp::create(store2, "my", 2, 8, 4, rng2);
  check_rows(cross_attention(x, memory,
                             decomposed_boxrpb(corner_offsets(boxes, 4, 4), mx, my),
                             Tensor(), p, cfg, true));
  check_rows(roi_sampling_attention(x, memory, boxes, 4, 4, 2, Tensor(), p, cfg,
                                    true));
}

TEST_CASE("self-attention singleton and permutation equivariance") {
  Rng rng(6);
  ParamStore store;
  const AttentionConfig cfg{8, 2};
  MhaParams p = random_mha(store, "p", 8, rng);

  // K=1: softmax over one token is 1, so out = proj(v) + x.
  Tensor x1 = plaindet::testing::rand_tensor(rng, {1, 8}, -1, 1, false);
  Tensor pos1 = plaindet::testing::rand_tensor(rng, {1, 8}, -1, 1, false);
  Tensor got = self_attention(x1, pos1, p, cfg);
  Tensor v = affine(x1, p.wv, p.bv);
  Tensor want = add(affine(v, p.wo, p.bo), x1);
  for (int i = 0; i < 8; ++i) {
    CHECK(got.values()[i] == doctest::Approx(want.values()[i]).epsilon(1e-12));
  }

  // Joint permutation of queries and positions permutes outputs.
  const int K = 5;
  Tensor x = plaindet::testing::rand_tensor(rng, {K, 8}, -1, 1, false);
  Tensor pos = plaindet::testing::rand_tensor(rng, {K, 8}, -1, 1, false);
  const int perm[] = {3, 0, 4, 1, 2};
  Tensor xp = gather_rows(x, perm);
  Tensor pp = gather_rows(pos, perm);
  Tensor base = self_attention(x, pos, p, cfg);
  Tensor permuted = self_attention(xp, pp, p, cfg);
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(permuted.at({i, j}) ==
            doctest::Approx(base.at({perm[i], j})).epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(self_attention(x, pos1, p, cfg), ShapeError);
}

TEST_CASE("box mask bias covers the stated extremes") {
  Rng rng(7);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "p", 4, rng);
  Tensor x = plaindet::testing::rand_tensor(rng, {1, 4}, -1, 1, false);
  Tensor memory = plaindet::testing::rand_tensor(rng, {4, 4}, -1, 1, false);

  // Box covering the whole 2x2 grid: bias is identically zero and the result
  // is bitwise equal to global attention.
  Tensor full_box = Tensor::from_data({1, 4}, {1.0, 1.0, 2.0, 2.0});
  BiasTerm mask = box_mask_bias(full_box, 2, 2, 2);
  {
    Tensor full = mask.full();
    for (double v : full.values()) CHECK(v == 0.0);
  }
  AttentionOutput masked = cross_attention(x, memory, mask, Tensor(), p, cfg, true);
  AttentionOutput global =
      cross_attention(x, memory, std::nullopt, Tensor(), p, cfg, true);
  CHECK(std::memcmp(masked.weights.data(), global.weights.data(),
                    global.weights.size() * sizeof(double)) == 0);

  // Box covering a single cell: nearly all mass on that cell.
  Tensor one_cell = Tensor::from_data({1, 4}, {0.5, 0.5, 0.9, 0.9});
  AttentionOutput sat = cross_attention(
      x, memory, box_mask_bias(one_cell, 2, 2, 2), Tensor(), p, cfg, true);
  for (int m = 0; m < 2; ++m) CHECK(sat.weight(m, 0, 0) >= 0.999);

  // Box over the left column: right-column weights vanish.
  Tensor left = Tensor::from_data({1, 4}, {0.5, 1.0, 1.0, 2.0});
  AttentionOutput lw = cross_attention(
      x, memory, box_mask_bias(left, 2, 2, 2), Tensor(), p, cfg, true);
  for (int m = 0; m < 2; ++m) {
    CHECK(lw.weight(m, 0, 1) <= 1e-300);
    CHECK(lw.weight(m, 0, 3) <= 1e-300);
    CHECK(lw.weight(m, 0, 0) + lw.weight(m, 0, 2) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }

  // Degenerate box between cell centers still opens one cell.
  Tensor tiny = Tensor::from_data({1, 4}, {1.0, 1.0, 1e-4, 1e-4});
  BiasTerm tiny_mask = box_mask_bias(tiny, 2, 2, 1);
  Tensor tf = tiny_mask.full();
  int open = 0;
  for (double v : tf.values()) open += v == 0.0;
  CHECK(open == 1);
}

TEST_CASE("roi sampling lattice and determinism") {
  // n=1 samples the box-center cell.
  auto c1 = roi_sample_cells(2.2, 1.7, 1.0, 1.0, 4, 4, 1);
  REQUIRE(c1.size() == 1);
  CHECK(c1[0] == 1 * 4 + 2);

  // Whole 4x4 grid, n=2: lattice at 1/3 and 2/3 of the box -> cells 1 and 2.
  auto c2 = roi_sample_cells(2.0, 2.0, 4.0, 4.0, 4, 4, 2);
  REQUIRE(c2.size() == 4);
  CHECK(c2[0] == 1 * 4 + 1);
  CHECK(c2[1] == 1 * 4 + 2);
  CHECK(c2[2] == 2 * 4 + 1);
  CHECK(c2[3] == 2 * 4 + 2);

  // Identical boxes yield identical per-query features.
  Rng rng(8);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "p", 4, rng);
  Tensor x0 = plaindet::testing::rand_tensor(rng, {1, 4}, -1, 1, false);
  std::vector<double> xd(x0.values().begin(), x0.values().end());
  xd.insert(xd.end(), x0.values().begin(), x0.values().end());
  Tensor x = Tensor::from_data({2, 4}, xd);
  Tensor memory = plaindet::testing::rand_tensor(rng, {16, 4}, -1, 1, false);
  Tensor boxes = Tensor::from_data({2, 4}, {2, 2, 1.5, 1.5, 2, 2, 1.5, 1.5});
  AttentionOutput out =
      roi_sampling_attention(x, memory, boxes, 4, 4, 2, Tensor(), p, cfg);
  for (int j = 0; j < 4; ++j) CHECK(out.out.at({0, j}) == out.out.at({1, j}));

  CHECK_THROWS_AS(roi_sample_cells(2, 2, 1, 1, 4, 4, 0), ConfigError);
}

TEST_CASE("cross-attention gradients through projections, bias and boxes") {
  Rng rng(9);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "attn", 4, rng);
  RpbMlp mx = RpbMlp::create(store, "mx", 2, 4, 2, rng);
  RpbMlp my = RpbMlp::create(store, "my", 2, 4, 2, rng);
  Tensor boxes = random_boxes(rng, 2, 3, 2);
  boxes.set_requires_grad(true);
  Tensor x = plaindet::testing::rand_tensor(rng, {2, 4}, -1, 1, false);
  Tensor memory = plaindet::testing::rand_tensor(rng, {6, 4}, -1, 1, false);
  Tensor w = plaindet::testing::rand_tensor(rng, {2, 4}, -1, 1, false);

  std::vector<std::pair<std::string, Tensor>> params{{"boxes", boxes}};
  for (auto& [name, t] : store.entries()) params.emplace_back(name, t);

  auto f = [&]() {
    BiasTerm bias = decomposed_boxrpb(corner_offsets(boxes, 2, 3), mx, my);
    AttentionOutput out = cross_attention(x, memory, bias, Tensor(), p, cfg);
    return sum(mul(out.out, w));
  };
  CHECK(finite_diff_check(f, params, 1e-6).max_rel_err <= 1e-4);
}

TEST_CASE("shape errors are reported") {
  Rng rng(10);
  ParamStore store;
  const AttentionConfig cfg{4, 2};
  MhaParams p = random_mha(store, "p", 4, rng);
  Tensor x = Tensor::zeros({2, 4});
  Tensor memory = Tensor::zeros({6, 4});
  CHECK_THROWS_AS(
      cross_attention(Tensor::zeros({2, 3}), memory, std::nullopt, Tensor(), p, cfg),
      ShapeError);
  // Bias grid 2x2 does not match memory length 6.
  BiasTerm bad = BiasTerm::from_full(Tensor::zeros({2, 2, 2, 2}));
  CHECK_THROWS_AS(cross_attention(x, memory, bad, Tensor(), p, cfg), ShapeError);
  CHECK_THROWS_AS((AttentionConfig{5, 2}).validate(), ConfigError);
}
