#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "plaindet/checkpoint.hpp"
#include "plaindet/grad_check.hpp"
#include "plaindet/optim.hpp"
#include "plaindet/rng.hpp"
#include "plaindet/tensor.hpp"
#include "support/grad_suite.hpp"

using namespace plaindet;

TEST_CASE("matmul identity and reference oracle") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {3, -1, 2, 7});
  Tensor y = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == a.values()[i]);

  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor c = Tensor::from_data({2, 1}, {1, 1});
  Tensor r = matmul(b, c);
  CHECK(r.at({0, 0}) == doctest::Approx(3.0));
  CHECK(r.at({1, 0}) == doctest::Approx(7.0));

  // Triple-loop reference on a random batched case.
  Rng rng(11);
  Tensor x = plaindet::testing::rand_tensor(rng, {2, 3, 4}, -1, 1, false);
  Tensor w = plaindet::testing::rand_tensor(rng, {2, 4, 5}, -1, 1, false);
  Tensor got = matmul(x, w);
  for (int t = 0; t < 2; ++t) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 5; ++j) {
        double acc = 0;
        for (int p = 0; p < 4; ++p) acc += x.at({t, i, p}) * w.at({t, p, j});
        CHECK(got.at({t, i, j}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                  ShapeError);
}

TEST_CASE("softmax_last basics") {
  Tensor z = softmax_last(Tensor::from_data({2}, {0, 0}));
  CHECK(z.values()[0] == doctest::Approx(0.5));
  CHECK(z.values()[1] == doctest::Approx(0.5));

  // Shift invariance.
  Tensor x = Tensor::from_data({3}, {0.3, -1.2, 2.4});
  Tensor xs = add_scalar(x, 17.0);
  Tensor a = softmax_last(x), b = softmax_last(xs);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::fabs(a.values()[i] - b.values()[i]) < 1e-12);
  }

  // Direct exp/sum evaluation.
  Tensor s = softmax_last(Tensor::from_data({3}, {1, 2, 3}));
  const double den = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::fabs(s.values()[i] - std::exp(1.0 + i) / den) < 1e-12);
  }

  // Rows sum to one even at large magnitude.
  Rng rng(5);
  Tensor big = plaindet::testing::rand_tensor(rng, {8, 16}, -1e3, 1e3, false);
  Tensor sm = softmax_last(big);
  for (int i = 0; i < 8; ++i) {
    double row = 0;
    for (int j = 0; j < 16; ++j) row += sm.at({i, j});
    CHECK(std::fabs(row - 1.0) < 1e-9);
  }

  CHECK_THROWS_AS(softmax_last(Tensor::zeros({2, 0})), ShapeError);
}

TEST_CASE("backward on simple graphs") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  x.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(x);
    backward(tape, loss);
  }
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

  Tensor y = Tensor::scalar(3.0);
  y.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(mul(y, y));
    backward(tape, loss);
  }
  CHECK(y.grad()[0] == doctest::Approx(6.0));

  // Non-scalar loss is a contract error.
  Tape tape;
  TapeScope scope(tape);
  Tensor v = add(x, x);
  CHECK_THROWS_AS(backward(tape, v), DomainError);
}

TEST_CASE("backward accumulates across calls and is deterministic") {
  Rng rng(42);
  Tensor x = plaindet::testing::rand_tensor(rng, {4}, -1, 1);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(x, x));
  }
  tape.backward(loss);
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-15));
  }

  // Bit-identical gradients across two independent runs.
  auto run = [&]() {
    Rng r2(7);
    Tensor a = plaindet::testing::rand_tensor(r2, {5, 6}, -1, 1);
    Tensor w1 = plaindet::testing::rand_tensor(r2, {6, 4}, -1, 1);
    Tensor b1 = plaindet::testing::rand_tensor(r2, {4}, -1, 1);
    Tape t;
    TapeScope s(t);
    Tensor h = relu(affine(a, w1, b1));
    Tensor l = mean(mul(h, h));
    t.backward(l);
    std::vector<double> out;
    for (double g : w1.grad()) out.push_back(g);
    for (double g : b1.grad()) out.push_back(g);
    return out;
  };
  auto ga = run();
  auto gb = run();
  REQUIRE(ga.size() == gb.size());
  CHECK(std::memcmp(ga.data(), gb.data(), ga.size() * sizeof(double)) == 0);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  Rng rng(3);
  Tensor x = plaindet::testing::rand_tensor(rng, {4, 3}, -1, 1, false);
  Tensor w1 = plaindet::testing::rand_tensor(rng, {3, 5}, -1, 1);
  Tensor b1 = plaindet::testing::rand_tensor(rng, {5}, -0.5, 0.5);
  Tensor w2 = plaindet::testing::rand_tensor(rng, {5, 2}, -1, 1);
  Tensor b2 = plaindet::testing::rand_tensor(rng, {2}, -0.5, 0.5);
  std::vector<std::pair<std::string, Tensor>> params{
      {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
  auto f = [&]() {
    Tensor h = relu(affine(x, w1, b1));
    Tensor o = affine(h, w2, b2);
    return mean(mul(o, o));
  };
  auto res = finite_diff_check(f, params, 1e-5);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("finite_diff_check contract cases") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  std::vector<std::pair<std::string, Tensor>> params{{"x", x}};
  auto square = [&]() { return sum(mul(x, x)); };
  CHECK(finite_diff_check(square, params, 1e-5).max_rel_err <= 1e-8);

  auto constant = [&]() { return scale(sum(mul(x, x)), 0.0); };
  CHECK(finite_diff_check(constant, params, 1e-5).max_rel_err == 0.0);

  // Probing across a log singularity must fail loudly, naming the coordinate.
  Tensor z = Tensor::scalar(0.5e-5);
  z.set_requires_grad(true);
  std::vector<std::pair<std::string, Tensor>> zp{{"z", z}};
  auto logf = [&]() { return sum(log(z)); };
  CHECK_THROWS_AS(finite_diff_check(logf, zp, 1e-5), DomainError);
}

TEST_CASE("finite checks surface NaN immediately") {
  set_finite_checks(true);
  Tensor neg = Tensor::scalar(-1.0);
  CHECK_THROWS_AS(log(neg), NumericError);
}

TEST_CASE("primitive gradient sweep") {
  auto results = plaindet::testing::primitive_grad_sweep(5, 999);
  for (const auto& r : results) {
    INFO("op: ", r.op);
    CHECK(r.worst_rel_err <= 1e-4);
  }
}

TEST_CASE("adamw contract cases") {
  SUBCASE("lr = 0 leaves params unchanged") {
    ParamStore store;
    Tensor p = store.create("p", {3});
    auto vals = p.values_mut();
    vals[0] = 1.0, vals[1] = -2.0, vals[2] = 0.5;
    for (auto& g : p.grad()) g = 1.0;
    OptimState st;
    st.lr = 0.0;
    adamw_step(st, store);
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == -2.0);
    CHECK(p.values()[2] == 0.5);
    CHECK(st.step == 1);
  }
  SUBCASE("first step approximates signed unit step") {
    ParamStore store;
    Tensor p = store.create("p", {2});
    p.values_mut()[0] = 1.0;
    p.values_mut()[1] = 1.0;
    p.grad()[0] = 0.25;
    p.grad()[1] = -3.0;
    OptimState st;
    st.lr = 1e-2;
    st.weight_decay = 0.0;
    adamw_step(st, store);
    // update = -lr * g / (|g| + eps)
    CHECK(p.values()[0] ==
          doctest::Approx(1.0 - 1e-2 * 0.25 / (0.25 + st.eps)).epsilon(1e-12));
    CHECK(p.values()[1] ==
          doctest::Approx(1.0 - 1e-2 * (-3.0) / (3.0 + st.eps)).epsilon(1e-12));
  }
  SUBCASE("pure decay scales by (1 - lr*wd)") {
    ParamStore store;
    Tensor p = store.create("p", {1});
    p.values_mut()[0] = 2.0;
    OptimState st;
    st.lr = 0.1;
    st.weight_decay = 0.5;
    adamw_step(st, store);
    CHECK(p.values()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "plaindet_ckpt_test";
  fs::create_directories(dir);
  const std::string prefix = (dir / "model").string();

  Rng rng(77);
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.emplace_back("layer/w", plaindet::testing::rand_tensor(rng, {3, 4}, -1, 1, false));
  tensors.emplace_back("layer/b", plaindet::testing::rand_tensor(rng, {4}, -1, 1, false));
  // Include values that stress float round-tripping.
  Tensor odd = Tensor::from_data({3}, {1.0 / 3.0, -0.0, 5e-324});
  tensors.emplace_back("odd", odd);

  nlohmann::json meta = {{"step", 17}, {"note", "test"}};
  save_checkpoint(prefix, tensors, meta);
  Checkpoint loaded = load_checkpoint(prefix);
  REQUIRE(loaded.tensors.size() == tensors.size());
  CHECK(loaded.meta.at("step").get<int>() == 17);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded.tensors[i].first == tensors[i].first);
    CHECK(loaded.tensors[i].second.shape() == tensors[i].second.shape());
    auto a = tensors[i].second.values();
    auto b = loaded.tensors[i].second.values();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }

  // Save the loaded copy and compare raw files.
  const std::string prefix2 = (dir / "model2").string();
  save_checkpoint(prefix2, loaded.tensors, loaded.meta);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(prefix + ".bin") == slurp(prefix2 + ".bin"));
  fs::remove_all(dir);
}

TEST_CASE("gradient accumulation across fan-out") {
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 5
    tape.backward(sum(y));
  }
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("detach cuts gradient flow") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor d = detach(mul(x, x));
    Tensor loss = sum(mul(d, x));  // d treated as constant 9
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(9.0));
}
