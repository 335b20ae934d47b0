#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "retgen/tape.hpp"

using namespace retgen;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = g(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul basic cases") {
  Tape tape;
  Var id2 = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var a = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK(tape.value(tape.matmul(id2, a)).values == std::vector<double>{1, 2, 3, 4});

  Var ones = tape.leaf(Tensor::matrix(2, 2, {1, 1, 1, 1}));
  Var zero = tape.leaf(Tensor::zeros({2, 2}));
  CHECK(tape.value(tape.matmul(ones, zero)).values == std::vector<double>(4, 0.0));

  Var b = tape.leaf(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  CHECK(tape.value(tape.matmul(a, b)).values == std::vector<double>{19, 22, 43, 50});

  Var bad = tape.leaf(Tensor::zeros({3, 2}));
  CHECK_THROWS_AS(tape.matmul(a, bad), DimensionError);
}

TEST_CASE("softmax_rows examples and row-sum property") {
  Tape tape;
  Var sym = tape.leaf(Tensor::row_vector({1, 1, 1}));
  for (double v : tape.value(tape.softmax_rows(sym)).values) CHECK(v == Catch::Approx(1.0 / 3));

  Var two = tape.leaf(Tensor::row_vector({0.0, std::log(2.0)}));
  const Tensor& r = tape.value(tape.softmax_rows(two));
  CHECK(r.values[0] == Catch::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(r.values[1] == Catch::Approx(2.0 / 3).epsilon(1e-12));

  Var single = tape.leaf(Tensor::row_vector({42.0}));
  CHECK(tape.value(tape.softmax_rows(single)).values[0] == 1.0);

  Var nan_in = tape.leaf(Tensor::row_vector({1.0, std::nan("")}));
  CHECK_THROWS_AS(tape.softmax_rows(nan_in), NumericError);

  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    Tape t2;
    double scale = (rep % 2 == 0) ? 1.0 : 1e4;
    Var x = t2.leaf(random_tensor({4, 6}, rng, scale));
    const Tensor& y = t2.value(t2.softmax_rows(x));
    for (int i = 0; i < 4; ++i) {
      double sum = 0;
      for (int j = 0; j < 6; ++j) {
        sum += y.at(i, j);
        CHECK(y.at(i, j) >= 0.0);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("cross_entropy examples") {
  const int v = 7;
  Tape tape;
  Var uniform = tape.leaf(Tensor::zeros({1, v}));
  CHECK(tape.value(tape.cross_entropy(uniform, {3})).item() ==
        Catch::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));

  Tensor sat = Tensor::zeros({1, v});
  sat.at(0, 2) = 40.0;
  Var satv = tape.leaf(sat);
  CHECK(tape.value(tape.cross_entropy(satv, {2})).item() < 1e-10);

  Var hand = tape.leaf(Tensor::row_vector({0.0, std::log(3.0)}));
  CHECK(tape.value(tape.cross_entropy(hand, {0})).item() ==
        Catch::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(tape.cross_entropy(hand, {2}), IndexError);
  CHECK_THROWS_AS(tape.cross_entropy(hand, {0, 1}), DimensionError);
}

TEST_CASE("masked_attention degenerate and hand cases") {
  SECTION("single allowed position returns that value row") {
    Tape tape;
    std::mt19937_64 rng(3);
    Var q = tape.leaf(random_tensor({3, 4}, rng));
    Var k = tape.leaf(random_tensor({3, 4}, rng));
    Tensor tv = random_tensor({3, 4}, rng);
    Var v = tape.leaf(tv);
    AttentionMask m = AttentionMask::disallow_all(3);
    m.set(0, 0, true);
    m.set(1, 0, true);
    m.set(2, 1, true);
    const Tensor& out = tape.value(tape.masked_attention(q, k, v, m));
    for (int c = 0; c < 4; ++c) {
      CHECK(out.at(1, c) == tv.at(0, c));
      CHECK(out.at(2, c) == tv.at(1, c));
    }
  }

  SECTION("identical keys average the allowed value rows") {
    Tape tape;
    Var q = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var k = tape.leaf(Tensor::matrix(2, 2, {5, 6, 5, 6}));
    Var v = tape.leaf(Tensor::matrix(2, 2, {1, 0, 3, 8}));
    const Tensor& out = tape.value(tape.masked_attention(q, k, v, causal_mask(2)));
    CHECK(out.at(1, 0) == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(out.at(1, 1) == Catch::Approx(4.0).epsilon(1e-12));
  }

  SECTION("t=2 d=1 causal hand softmax") {
    Tape tape;
    Var q = tape.leaf(Tensor::matrix(2, 1, {1.0, 2.0}));
    Var k = tape.leaf(Tensor::matrix(2, 1, {0.5, -1.0}));
    Var v = tape.leaf(Tensor::matrix(2, 1, {3.0, 7.0}));
    const Tensor& out = tape.value(tape.masked_attention(q, k, v, causal_mask(2)));
    CHECK(out.at(0, 0) == Catch::Approx(3.0).epsilon(1e-12));
    // row 1: scores (2*0.5, 2*-1) = (1, -2); w = softmax -> e^1/(e^1+e^-2)
    const double w0 = std::exp(1.0) / (std::exp(1.0) + std::exp(-2.0));
    CHECK(out.at(1, 0) == Catch::Approx(w0 * 3.0 + (1 - w0) * 7.0).epsilon(1e-12));
  }

  SECTION("row with no allowed positions fails") {
    Tape tape;
    std::mt19937_64 rng(5);
    Var q = tape.leaf(random_tensor({2, 2}, rng));
    Var k = tape.leaf(random_tensor({2, 2}, rng));
    Var v = tape.leaf(random_tensor({2, 2}, rng));
    AttentionMask m = AttentionMask::disallow_all(2);
    m.set(1, 0, true);
    CHECK_THROWS_AS(tape.masked_attention(q, k, v, m), MaskError);
  }
}

TEST_CASE("disallowed positions carry literally zero weight") {
  std::mt19937_64 rng(11);
  Tensor q = random_tensor({4, 3}, rng);
  Tensor k = random_tensor({4, 3}, rng);
  Tensor v = random_tensor({4, 3}, rng);
  AttentionMask m = build_session_mask(2, 2);

  auto run = [&](const Tensor& kk, const Tensor& vv) {
    Tape tape;
    AttentionProbe probe;
    Var out = tape.masked_attention(tape.leaf(q), tape.leaf(kk), tape.leaf(vv), m, &probe);
    return std::pair{tape.value(out), probe.weights.front()};
  };

  auto [base, weights] = run(k, v);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (!m.allow(i, j)) CHECK(weights.at(i, j) == 0.0);

  // Perturbing a disallowed key/value row must leave the output bit-identical.
  // Row 0 of k/v is disallowed for rows 2 and 3 under the session mask.
  Tensor k2 = k, v2 = v;
  k2.at(0, 1) += 123.456;
  v2.at(0, 2) -= 77.0;
  auto [pert, w2] = run(k2, v2);
  for (int i = 2; i < 4; ++i)
    for (int c = 0; c < 3; ++c) CHECK(pert.at(i, c) == base.at(i, c));
}

TEST_CASE("analytic gradients match central finite differences") {
  std::mt19937_64 rng(23);

  SECTION("matmul") {
    double err = oracle::max_grad_error(
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
        [](Tape& t, const std::vector<Var>& xs) { return t.sum_all(t.matmul(xs[0], xs[1])); });
    CHECK(err < 1e-4);
  }

  SECTION("matmul_nt") {
    double err = oracle::max_grad_error(
        {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)},
        [](Tape& t, const std::vector<Var>& xs) {
          return t.sum_all(t.gelu(t.matmul_nt(xs[0], xs[1])));
        });
    CHECK(err < 1e-4);
  }

  SECTION("softmax_rows") {
    double err = oracle::max_grad_error(
        {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)},
        [](Tape& t, const std::vector<Var>& xs) {
          // pair the softmax with a second tensor so every entry matters
          return t.sum_all(t.matmul_nt(t.softmax_rows(xs[0]), xs[1]));
        });
    CHECK(err < 1e-4);
  }

  SECTION("cross_entropy") {
    double err = oracle::max_grad_error(
        {random_tensor({4, 6}, rng)}, [](Tape& t, const std::vector<Var>& xs) {
          return t.cross_entropy(xs[0], {1, 0, 5, 2});
        });
    CHECK(err < 1e-4);
  }

  SECTION("layer_norm") {
    double err = oracle::max_grad_error(
        {random_tensor({3, 4}, rng), random_tensor({1, 4}, rng), random_tensor({1, 4}, rng)},
        [](Tape& t, const std::vector<Var>& xs) {
          return t.sum_all(t.gelu(t.layer_norm(xs[0], xs[1], xs[2])));
        });
    CHECK(err < 1e-4);
  }

  SECTION("gelu") {
    double err = oracle::max_grad_error(
        {random_tensor({3, 3}, rng)},
        [](Tape& t, const std::vector<Var>& xs) { return t.sum_all(t.gelu(xs[0])); });
    CHECK(err < 1e-4);
  }

  SECTION("masked_attention under a session mask") {
    AttentionMask m = build_session_mask(3, 2);
    double err = oracle::max_grad_error(
        {random_tensor({5, 3}, rng), random_tensor({5, 3}, rng), random_tensor({5, 3}, rng)},
        [m](Tape& t, const std::vector<Var>& xs) {
          return t.sum_all(t.gelu(t.masked_attention(xs[0], xs[1], xs[2], m)));
        });
    CHECK(err < 1e-4);
  }

  SECTION("embedding, slices, concat, stack, broadcast") {
    double err = oracle::max_grad_error(
        {random_tensor({6, 4}, rng), random_tensor({1, 2}, rng)},
        [](Tape& t, const std::vector<Var>& xs) {
          Var rows = t.embedding_rows(xs[0], {0, 3, 3, 5});
          Var left = t.slice_cols(rows, 0, 2);
          Var right = t.slice_cols(rows, 2, 2);
          Var both = t.concat_cols({left, right});
          Var sl = t.slice_rows(both, 1, 2);
          Var biased = t.add_row_broadcast(t.slice_cols(sl, 1, 2), xs[1]);
          Var stacked = t.stack_rows({t.slice_rows(biased, 0, 1), t.slice_rows(biased, 1, 1)});
          return t.sum_all(t.gelu(stacked));
        });
    CHECK(err < 1e-4);
  }

  SECTION("add, scale, mean_scalars") {
    double err = oracle::max_grad_error(
        {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
        [](Tape& t, const std::vector<Var>& xs) {
          Var sum = t.add(xs[0], t.scale(xs[1], -0.7));
          Var a = t.sum_all(t.gelu(sum));
          Var b = t.sum_all(sum);
          return t.mean_scalars({a, b});
        });
    CHECK(err < 1e-4);
  }
}
