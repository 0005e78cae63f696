#include <cstring>
#include <vector>

#include "doctest.h"
#include "hrlm/nn_ops.hpp"
#include "hrlm/tensor.hpp"
#include "oracle_utils.hpp"

using namespace hrlm;
using hrlm_test::check_grads_fd;

namespace {

Tensor64 rand_t(Shape shape, Rng& rng, bool rg = true, double stddev = 1.0) {
  return Tensor64::randn(std::move(shape), rng, stddev, rg);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity and zeros") {
  Rng rng(1);
  Tensor64 eye = Tensor64::zeros({2, 2});
  eye.mutable_data()[0] = 1.0;
  eye.mutable_data()[3] = 1.0;
  Tensor64 a = rand_t({2, 2}, rng, false);
  Tensor64 out = matmul(eye, a);
  CHECK(hrlm_test::max_abs_diff(out.data(), a.data()) == 0.0);

  Tensor64 z = Tensor64::zeros({2, 3});
  Tensor64 b = rand_t({3, 4}, rng, false);
  Tensor64 zb = matmul(z, b);
  CHECK(zb.shape() == Shape{2, 4});
  for (double v : zb.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul backward: column sums of b, and finite differences") {
  Rng rng(2);
  Tensor64 a = rand_t({3, 4}, rng);
  Tensor64 b = rand_t({4, 5}, rng);
  {
    Tape<double> tape;
    Tensor64 loss = sum(matmul(a, b));
    tape.backward(loss);
    std::vector<double> ga = tape.grad(a);
    // d sum(AB) / dA[i,k] = sum_j B[k,j]
    for (int64_t i = 0; i < 3; ++i) {
      for (int64_t k = 0; k < 4; ++k) {
        double expect = 0.0;
        for (int64_t j = 0; j < 5; ++j) expect += b.data()[k * 5 + j];
        CHECK(ga[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
  auto res = check_grads_fd({a, b}, [&] { return sum(matmul(a, b)); });
  CHECK_MESSAGE(res.max_rel_err < 1e-6, (res.worst));
}

TEST_CASE("elementwise trivial values") {
  Tensor64 zero = Tensor64::scalar(0.0);
  CHECK(sigmoid(zero).item() == doctest::Approx(0.5));
  CHECK(silu(zero).item() == 0.0);

  // d/dx sigmoid(x) at x=0 is 0.25
  Tensor64 x = Tensor64::scalar(0.0, true);
  auto res = check_grads_fd({x}, [&] { return sum(sigmoid(x)); });
  CHECK(res.max_rel_err < 1e-6);
  Tape<double> tape;
  Tensor64 loss = sum(sigmoid(x));
  tape.backward(loss);
  CHECK(tape.grad(x)[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("broadcast rules: suffix and size-1 last dim only") {
  Rng rng(3);
  Tensor64 a = rand_t({4, 3}, rng, false);
  Tensor64 v = rand_t({3}, rng, false);
  Tensor64 s = add(a, v);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(s.data()[i * 3 + j] ==
            doctest::Approx(a.data()[i * 3 + j] + v.data()[j]));

  Tensor64 col = rand_t({4, 1}, rng, false);
  Tensor64 m = mul(a, col);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(m.data()[i * 3 + j] ==
            doctest::Approx(a.data()[i * 3 + j] * col.data()[i]));

  Tensor64 bad = rand_t({3, 4}, rng, false);
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("masked_softmax values") {
  Mask all{{4}, {1, 1, 1, 1}};
  Tensor64 eq = Tensor64::filled({4}, 1.7);
  Tensor64 p = masked_softmax(eq, all);
  for (double v : p.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  Mask one{{4}, {0, 0, 1, 0}};
  Tensor64 q = masked_softmax(eq, one);
  CHECK(q.data()[2] == 1.0);
  CHECK(q.data()[0] == 0.0);  // exactly zero, not merely small
  CHECK(q.data()[1] == 0.0);
  CHECK(q.data()[3] == 0.0);

  Tensor64 l = Tensor64::from_data({3}, {1.0, 2.0, 3.0});
  Mask all3{{3}, {1, 1, 1}};
  Tensor64 sm = masked_softmax(l, all3);
  // direct exp-normalize
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(sm.data()[0] - std::exp(1.0) / z) < 1e-7);
  CHECK(std::abs(sm.data()[1] - std::exp(2.0) / z) < 1e-7);
  CHECK(std::abs(sm.data()[2] - std::exp(3.0) / z) < 1e-7);

  Mask none{{4}, {0, 0, 0, 0}};
  CHECK_THROWS_AS(masked_softmax(eq, none), ContractError);
}

TEST_CASE("detach blocks gradient but not values") {
  Rng rng(4);
  Tensor64 x = rand_t({2, 2}, rng);
  Tensor64 y = rand_t({2, 2}, rng);
  {
    Tape<double> tape;
    Tensor64 loss = sum(mul(detach(x), y));
    tape.backward(loss);
    for (double g : tape.grad(x)) CHECK(g == 0.0);
    std::vector<double> gy = tape.grad(y);
    for (size_t i = 0; i < gy.size(); ++i) CHECK(gy[i] == x.data()[i]);
  }
  // value transparency
  Tensor64 with = mul(detach(x), y);
  Tensor64 without = mul(x, y);
  CHECK(hrlm_test::max_abs_diff(with.data(), without.data()) == 0.0);
}

TEST_CASE("detach in a 2-step chain: severed path equals hand chain rule") {
  // z1 = x*x, z2 = z1*x. Severed at z1: d sum(z2)/dx = z1 = x^2.
  // Unsevered: 3x^2. Extra path contributes exactly 2x^2 (2x * x).
  Rng rng(5);
  Tensor64 x = rand_t({2, 2}, rng);
  std::vector<double> g_detached, g_full;
  {
    Tape<double> tape;
    Tensor64 loss = sum(mul(detach(mul(x, x)), x));
    tape.backward(loss);
    g_detached = tape.grad(x);
  }
  {
    Tape<double> tape;
    Tensor64 loss = sum(mul(mul(x, x), x));
    tape.backward(loss);
    g_full = tape.grad(x);
  }
  for (size_t i = 0; i < g_full.size(); ++i) {
    const double xi = x.data()[i];
    CHECK(g_detached[i] == doctest::Approx(xi * xi).epsilon(1e-12));
    CHECK(g_full[i] - g_detached[i] ==
          doctest::Approx(2.0 * xi * xi).epsilon(1e-12));
  }
}

TEST_CASE("backward basics") {
  Rng rng(6);
  Tensor64 x = rand_t({5}, rng);
  {
    Tape<double> tape;
    tape.backward(sum(x));
    for (double g : tape.grad(x)) CHECK(g == 1.0);
  }
  {
    Tape<double> tape;
    tape.backward(sum(mul(x, x)));
    std::vector<double> g = tape.grad(x);
    for (size_t i = 0; i < g.size(); ++i)
      CHECK(g[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-12));
  }
  {
    Tape<double> tape;
    Tensor64 y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
}

TEST_CASE("finite differences agree for every registered op") {
  Rng rng(7);
  const double tol = 1e-6;

  auto check = [&](const char* name, auto&& fn,
                   std::vector<Tensor64> leaves) {
    auto res = check_grads_fd(leaves, fn);
    CHECK_MESSAGE(res.max_rel_err < tol,
                  (std::string(name) + ": " + res.worst));
  };

  {
    Tensor64 a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
    check("add", [&] { return sum(add(a, b)); }, {a, b});
    check("sub", [&] { return sum(mul(sub(a, b), b)); }, {a, b});
    check("mul", [&] { return sum(mul(a, b)); }, {a, b});
  }
  {
    Tensor64 a = rand_t({3, 4}, rng);
    Tensor64 v = rand_t({4}, rng);
    Tensor64 c = rand_t({3, 1}, rng);
    check("add suffix", [&] { return sum(mul(add(a, v), a)); }, {a, v});
    check("mul lastdim", [&] { return sum(mul(mul(a, c), a)); }, {a, c});
  }
  {
    Tensor64 x = rand_t({2, 6}, rng);
    Tensor64 w = rand_t({2, 1}, rng, false);
    check("sigmoid", [&] { return sum(mul(sigmoid(x), x)); }, {x});
    check("silu", [&] { return sum(mul(silu(x), x)); }, {x});
    check("scale", [&] { return sum(scale(x, 1.7)); }, {x});
    check("add_scalar", [&] { return sum(mul(add_scalar(x, 0.3), x)); }, {x});
    check("row_mean", [&] { return sum(mul(row_mean(mul(x, x)), w)); }, {x});
    check("mean", [&] { return mean(mul(x, x)); }, {x});
  }
  {
    // rsqrt needs positive input; square it first
    Tensor64 x = rand_t({8}, rng);
    check("rsqrt", [&] { return sum(rsqrt(add_scalar(mul(x, x), 0.5))); }, {x});
  }
  {
    Tensor64 a = rand_t({3, 4}, rng), b = rand_t({4, 2}, rng);
    Tensor64 w = rand_t({3, 2}, rng, false);
    check("matmul", [&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  }
  {
    Tensor64 x = rand_t({2, 5}, rng);
    Mask mk{{2, 5}, {1, 0, 1, 1, 0, 1, 1, 1, 0, 1}};
    Tensor64 w = rand_t({2, 5}, rng, false);
    check("masked_softmax", [&] { return sum(mul(masked_softmax(x, mk), w)); }, {x});
  }
  {
    Tensor64 v = rand_t({6}, rng);
    Tensor64 w = rand_t({4, 6}, rng, false);
    check("broadcast_rows", [&] { return sum(mul(broadcast_rows(v, 4), w)); }, {v});
  }
  {
    Tensor64 x = rand_t({2, 6}, rng);
    Tensor64 w = rand_t({3, 4}, rng, false);
    check("reshape", [&] { return sum(mul(reshape(x, {3, 4}), w)); }, {x});
  }
  {
    Tensor64 table = rand_t({7, 3}, rng);
    std::vector<int32_t> ids = {2, 5, 2, 0};
    Tensor64 w = rand_t({4, 3}, rng, false);
    check("embedding_lookup",
          [&] { return sum(mul(embedding_lookup(table, ids), w)); }, {table});
  }
  {
    Tensor64 x = rand_t({3, 8}, rng);  // 2 heads of dim 4
    std::vector<int64_t> pos = {0, 1, 2};
    Tensor64 w = rand_t({3, 8}, rng, false);
    check("rope_pairs",
          [&] { return sum(mul(rope_pairs(x, 4, 100.0, pos), w)); }, {x});
  }
  {
    Tensor64 q = rand_t({3, 8}, rng), k = rand_t({3, 8}, rng),
             v = rand_t({3, 8}, rng);
    Tensor64 w = rand_t({2, 3, 3}, rng, false);
    check("multihead_scores",
          [&] { return sum(mul(multihead_scores(q, k, 4), w)); }, {q, k});
    Tensor64 w2 = rand_t({3, 8}, rng, false);
    check("multihead_mix", [&] {
      Mask mk{{3, 3}, {1, 1, 0, 1, 1, 1, 0, 1, 1}};
      Tensor64 p = masked_softmax(scale(multihead_scores(q, k, 4), 0.5), mk);
      return sum(mul(multihead_mix(p, v, 4), w2));
    }, {q, k, v});
  }
  {
    Tensor64 logits = rand_t({4, 6}, rng);
    std::vector<int32_t> targets = {1, 4, 0, 3};
    std::vector<uint8_t> include = {0, 1, 1, 1};
    check("masked_nll_sum",
          [&] { return masked_nll_sum(logits, targets, include); }, {logits});
  }
}

TEST_CASE("two backward passes over identical graphs give identical bytes") {
  auto run = [] {
    Rng rng(42);
    Tensor64 a = rand_t({4, 4}, rng);
    Tensor64 b = rand_t({4, 4}, rng);
    Tape<double> tape;
    Tensor64 loss = sum(mul(sigmoid(matmul(a, b)), a));
    tape.backward(loss);
    auto ga = tape.grad(a);
    auto gb = tape.grad(b);
    ga.insert(ga.end(), gb.begin(), gb.end());
    return ga;
  };
  std::vector<double> g1 = run();
  std::vector<double> g2 = run();
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite results raise at the producing op") {
  Tensor big = Tensor::filled({2}, 3.0e38f);
  try {
    Tensor out = scale(big, 10.0f);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("scale") != std::string::npos);
  }
}

TEST_CASE("masked_nll_sum rejects empty selection and bad targets") {
  Tensor64 logits = Tensor64::zeros({2, 3});
  CHECK_THROWS_AS(masked_nll_sum(logits, {0, 1}, {0, 0}), ContractError);
  CHECK_THROWS_AS(masked_nll_sum(logits, {0, 9}, {1, 1}), ContractError);
}

TEST_CASE("nested tape is rejected; grad pause suppresses recording") {
  Tape<double> tape;
  CHECK_THROWS_AS(Tape<double>(), ContractError);

  Rng rng(8);
  Tensor64 x = rand_t({3}, rng);
  size_t before = tape.record_count();
  {
    GradPause<double> pause;
    Tensor64 y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.record_count() == before);
}

}  // TEST_SUITE
