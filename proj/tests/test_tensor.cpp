#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "memstream/grad_check.hpp"
#include "memstream/ops.hpp"
#include "memstream/tensor.hpp"

using namespace memstream;

namespace {

Tensor make(const Shape& shape, std::vector<double> data,
            bool requires_grad = false) {
  Tensor t(shape, std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

}  // namespace

TEST_CASE("matmul identity leaves the right operand unchanged") {
  Tensor eye = make({2, 2}, {1, 0, 0, 1});
  Tensor b = make({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(eye, b);
  REQUIRE(c.data() == std::vector<double>{3, 4, 5, 6});
}

TEST_CASE("matmul hand-computed 1x2 by 2x1") {
  Tensor a = make({1, 2}, {1, 2});
  Tensor b = make({2, 1}, {3, 4});
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{1, 1});
  REQUIRE(c.item() == 11.0);
}

TEST_CASE("matmul rejects disagreeing inner extents naming both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  REQUIRE_THROWS_MATCHES(
      matmul(a, b), ShapeError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("[2,3]") &&
          Catch::Matchers::ContainsSubstring("[4,2]")));
}

TEST_CASE("matmul gradients match central finite differences") {
  RandomSource rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto report = grad_check([&] { return sum_all(matmul(a, b)); },
                           {{"a", a}, {"b", b}});
  CAPTURE(report.worst);
  REQUIRE(report.max_rel_err <= 1e-5);
}

TEST_CASE("matmul broadcasts a shared right operand over batch dims") {
  RandomSource rng(11);
  Tensor a = Tensor::randn({2, 3, 4}, rng);
  Tensor b = Tensor::randn({4, 5}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  // Slice 1 equals a plain 2-d product of the same rows.
  Tensor a1 = slice(a, 0, 1, 1);
  Tensor c1 = matmul(reshape(a1, {3, 4}), b);
  for (long i = 0; i < 15; ++i) {
    REQUIRE(c.data()[15 + i] == Catch::Approx(c1.data()[i]).margin(1e-12));
  }

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto report = grad_check([&] { return sum_all(matmul(a, b)); },
                           {{"a", a}, {"b", b}});
  REQUIRE(report.max_rel_err <= 1e-5);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = make({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (double v : y.data()) REQUIRE(v == Catch::Approx(1.0 / 3).margin(1e-12));
}

TEST_CASE("softmax is stable under large logits") {
  Tensor x = make({2}, {1000, 0});
  Tensor y = softmax(x, 0);
  REQUIRE(std::abs(y.data()[0] - 1.0) <= 1e-9);
  REQUIRE(std::abs(y.data()[1]) <= 1e-9);
}

TEST_CASE("softmax matches the direct formula and rows sum to one") {
  Tensor x = make({3}, {1, 2, 3});
  Tensor y = softmax(x, 0);
  const double z = std::exp(1) + std::exp(2) + std::exp(3);
  REQUIRE(y.data()[0] == Catch::Approx(std::exp(1) / z).epsilon(1e-12));
  REQUIRE(y.data()[1] == Catch::Approx(std::exp(2) / z).epsilon(1e-12));
  REQUIRE(y.data()[2] == Catch::Approx(std::exp(3) / z).epsilon(1e-12));

  RandomSource rng(3);
  Tensor r = Tensor::randn({4, 6}, rng);
  Tensor s = softmax(r, -1);
  for (long row = 0; row < 4; ++row) {
    double total = 0.0;
    for (long j = 0; j < 6; ++j) total += s.data()[row * 6 + j];
    REQUIRE(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("softmax along a middle axis normalizes that axis") {
  RandomSource rng(5);
  Tensor x = Tensor::randn({2, 3, 4}, rng);
  Tensor y = softmax(x, 1);
  for (long b = 0; b < 2; ++b) {
    for (long k = 0; k < 4; ++k) {
      double total = 0.0;
      for (long j = 0; j < 3; ++j) total += y.data()[(b * 3 + j) * 4 + k];
      REQUIRE(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("layer_norm maps a constant vector to zero") {
  Tensor x = make({1, 4}, {5, 5, 5, 5});
  Tensor y = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data()) REQUIRE(std::abs(v) <= 1e-9);
}

TEST_CASE("layer_norm standardizes [1,3] to [-1,1]") {
  Tensor x = make({1, 2}, {1, 3});
  Tensor y = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}));
  REQUIRE(y.data()[0] == Catch::Approx(-1.0).margin(1e-4));
  REQUIRE(y.data()[1] == Catch::Approx(1.0).margin(1e-4));
}

TEST_CASE("layer_norm gradients match finite differences") {
  RandomSource rng(13);
  Tensor x = Tensor::randn({3, 5}, rng);
  Tensor gamma = Tensor::randn({5}, rng);
  Tensor beta = Tensor::randn({5}, rng);
  x.set_requires_grad(true);
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  // Weighted sum keeps the loss sensitive to every coordinate.
  Tensor w = Tensor::randn({3, 5}, rng);
  auto report = grad_check(
      [&] { return sum_all(mul(layer_norm(x, gamma, beta), w)); },
      {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  CAPTURE(report.worst);
  REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
  RandomSource rng(17);
  Tensor x = Tensor::randn({1, 1, 3, 3}, rng);
  Tensor w = make({1, 1, 1, 1}, {1});
  Tensor y = conv2d(x, w, 1, 0);
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.data() == x.data());
}

TEST_CASE("conv2d 2x2 ones kernel at stride 2 produces block sums") {
  Tensor x = make({1, 1, 4, 4},
                  {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  Tensor w = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor y = conv2d(x, w, 2, 0);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  REQUIRE(y.data() == std::vector<double>{1 + 2 + 5 + 6, 3 + 4 + 7 + 8,
                                          9 + 10 + 13 + 14, 11 + 12 + 15 + 16});
}

TEST_CASE("conv2d rejects a kernel larger than the padded input") {
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  Tensor w = Tensor::zeros({1, 1, 5, 5});
  REQUIRE_THROWS_AS(conv2d(x, w, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  RandomSource rng(19);
  Tensor x = Tensor::randn({2, 2, 5, 5}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tensor weight = Tensor::randn({2, 3, 3, 3}, rng);
  auto report =
      grad_check([&] { return sum_all(mul(conv2d(x, w, 2, 1), weight)); },
                 {{"x", x}, {"w", w}});
  CAPTURE(report.worst);
  REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("conv_transpose2d with a unit 1x1 kernel is the identity") {
  RandomSource rng(23);
  Tensor x = Tensor::randn({1, 1, 3, 3}, rng);
  Tensor w = make({1, 1, 1, 1}, {1});
  Tensor y = conv_transpose2d(x, w, 1, 0);
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.data() == x.data());
}

TEST_CASE("conv_transpose2d equals conv2d's input gradient") {
  RandomSource rng(29);
  const long stride = 2, pad = 1;
  Tensor x = Tensor::randn({2, 2, 6, 6}, rng);
  Tensor w = Tensor::randn({3, 2, 4, 4}, rng);
  x.set_requires_grad(true);
  Tensor y = conv2d(x, w, stride, pad);

  // Seed the output cotangent via an inner product, so grad(x) is the
  // vector-Jacobian product against g.
  Tensor g = Tensor::randn(y.shape(), rng);
  sum_all(mul(y, g)).backward();
  std::vector<double> vjp = x.grad();

  Tensor direct = conv_transpose2d(g, w, stride, pad);
  REQUIRE(direct.shape() == x.shape());
  for (long i = 0; i < direct.numel(); ++i) {
    REQUIRE(std::abs(direct.data()[i] - vjp[i]) <= 1e-10);
  }
}

TEST_CASE("conv_transpose2d output size follows (H-1)s - 2p + k") {
  struct Case {
    long h, k, s, p, expect;
  };
  for (const Case c : {Case{3, 2, 2, 0, 6}, Case{5, 3, 1, 1, 5},
                       Case{4, 4, 2, 1, 8}}) {
    Tensor x = Tensor::zeros({1, 1, c.h, c.h});
    Tensor w = Tensor::zeros({1, 1, c.k, c.k});
    Tensor y = conv_transpose2d(x, w, c.s, c.p);
    REQUIRE(y.dim(2) == c.expect);
    REQUIRE(y.dim(3) == c.expect);
  }
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  RandomSource rng(31);
  Tensor x = Tensor::randn({1, 3, 3, 3}, rng);
  Tensor w = Tensor::randn({3, 2, 4, 4}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tensor weight = Tensor::randn({1, 2, 6, 6}, rng);
  auto report = grad_check(
      [&] { return sum_all(mul(conv_transpose2d(x, w, 2, 1), weight)); },
      {{"x", x}, {"w", w}});
  CAPTURE(report.worst);
  REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("backward of sum gives a gradient of ones") {
  Tensor x = Tensor::full({2, 3}, 4.0);
  x.set_requires_grad(true);
  sum_all(x).backward();
  for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  Tensor x = make({4}, {1, -2, 3, 0.5}, true);
  sum_all(mul(x, x)).backward();
  for (long i = 0; i < 4; ++i) {
    REQUIRE(x.grad()[i] == Catch::Approx(2 * x.data()[i]).margin(1e-12));
  }
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::zeros({2});
  x.set_requires_grad(true);
  Tensor y = add(x, x);
  REQUIRE_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("repeated backward calls accumulate into leaf gradients") {
  Tensor x = make({3}, {1, 2, 3}, true);
  Tensor loss = sum_all(mul(x, x));
  loss.backward();
  loss.backward();
  for (long i = 0; i < 3; ++i) {
    REQUIRE(x.grad()[i] == Catch::Approx(4 * x.data()[i]).margin(1e-12));
  }
}

TEST_CASE("composite conv-norm-matmul-softmax graph passes grad_check") {
  RandomSource rng(37);
  Tensor x = Tensor::randn({1, 1, 4, 4}, rng);
  Tensor w = Tensor::randn({2, 1, 2, 2}, rng);
  Tensor gamma = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  Tensor proj = Tensor::randn({8, 3}, rng);
  for (Tensor* t : {&x, &w, &gamma, &beta, &proj}) t->set_requires_grad(true);
  Tensor pick = Tensor::randn({1, 3}, rng);

  auto build = [&] {
    Tensor h = conv2d(x, w, 2, 0);            // [1,2,2,2]
    Tensor flat = reshape(h, {1, 8});
    Tensor normed = layer_norm(flat, gamma, beta);
    Tensor logits = matmul(normed, proj);     // [1,3]
    return sum_all(mul(softmax(logits, -1), pick));
  };
  auto report = grad_check(build, {{"x", x},
                                   {"w", w},
                                   {"gamma", gamma},
                                   {"beta", beta},
                                   {"proj", proj}});
  CAPTURE(report.worst);
  REQUIRE(report.max_rel_err <= 1e-3);
}

TEST_CASE("grad_check is exact for a linear function") {
  Tensor x = make({5}, {0.1, -0.4, 2.0, 1.5, -3.0}, true);
  Tensor c = make({5}, {2, -1, 0.5, 3, 1});
  auto report = grad_check([&] { return sum_all(mul(x, c)); }, {{"x", x}});
  REQUIRE(report.max_rel_err <= 1e-9);
}

TEST_CASE("grad_check handles the constant sum-of-softmax") {
  RandomSource rng(41);
  Tensor x = Tensor::randn({4}, rng);
  x.set_requires_grad(true);
  auto report =
      grad_check([&] { return sum_all(softmax(x, 0)); }, {{"x", x}});
  // The function is constant: both gradients vanish.
  REQUIRE(report.max_abs_err <= 1e-8);
  for (double g : x.grad()) REQUIRE(std::abs(g) <= 1e-12);
}

TEST_CASE("two runs from the same seed produce bit-identical gradients") {
  auto run = [] {
    RandomSource rng(101);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({4, 4}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    Tensor y = softmax(matmul(x, w), -1);
    sum_all(mul(y, y)).backward();
    auto gx = x.grad();
    auto gw = w.grad();
    gx.insert(gx.end(), gw.begin(), gw.end());
    return gx;
  };
  REQUIRE(run() == run());
}

TEST_CASE("elementwise ops broadcast a trailing bias vector") {
  Tensor x = make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = make({3}, {10, 20, 30}, true);
  Tensor y = add(x, b);
  REQUIRE(y.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
  sum_all(y).backward();
  REQUIRE(b.grad() == std::vector<double>{2, 2, 2});
  REQUIRE(x.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("elementwise ops broadcast an extent-1 middle axis") {
  Tensor x = make({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor m = make({2, 1, 2}, {1, 10, 100, 1000}, true);
  Tensor y = mul(x, m);
  REQUIRE(y.data() ==
          std::vector<double>{1, 20, 3, 40, 500, 6000, 700, 8000});
  sum_all(y).backward();
  REQUIRE(m.grad() == std::vector<double>{1 + 3, 2 + 4, 5 + 7, 6 + 8});
}

TEST_CASE("incompatible elementwise shapes raise a dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  REQUIRE_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("a scalar tensor broadcasts against any shape") {
  Tensor s = Tensor::scalar(2.0);
  s.set_requires_grad(true);
  Tensor x = make({2, 2}, {1, 2, 3, 4});
  Tensor y = mul(s, x);
  REQUIRE(y.data() == std::vector<double>{2, 4, 6, 8});
  sum_all(y).backward();
  REQUIRE(s.grad()[0] == 10.0);
}

TEST_CASE("activations match their closed forms and pass grad_check") {
  RandomSource rng(43);
  Tensor x = Tensor::randn({6}, rng);
  x.set_requires_grad(true);
  Tensor pick = Tensor::randn({6}, rng);

  SECTION("gelu at zero is zero and near-linear for large inputs") {
    Tensor y = gelu(make({3}, {0.0, 10.0, -10.0}));
    REQUIRE(y.data()[0] == 0.0);
    REQUIRE(y.data()[1] == Catch::Approx(10.0).margin(1e-6));
    REQUIRE(std::abs(y.data()[2]) <= 1e-6);
  }
  SECTION("gelu gradient") {
    auto r = grad_check([&] { return sum_all(mul(gelu(x), pick)); },
                        {{"x", x}});
    REQUIRE(r.max_rel_err <= 1e-4);
  }
  SECTION("silu gradient") {
    auto r = grad_check([&] { return sum_all(mul(silu(x), pick)); },
                        {{"x", x}});
    REQUIRE(r.max_rel_err <= 1e-4);
  }
  SECTION("softplus is positive, monotone, and differentiable") {
    Tensor y = softplus(make({2}, {-30.0, 30.0}));
    REQUIRE(y.data()[0] > 0.0);
    REQUIRE(y.data()[0] <= 1e-12);
    REQUIRE(y.data()[1] == Catch::Approx(30.0).margin(1e-12));
    auto r = grad_check([&] { return sum_all(mul(softplus(x), pick)); },
                        {{"x", x}});
    REQUIRE(r.max_rel_err <= 1e-4);
  }
  SECTION("tanh and exp gradients") {
    auto r = grad_check(
        [&] { return sum_all(mul(tanh_op(x), exp_op(mul_scalar(x, 0.1)))); },
        {{"x", x}});
    REQUIRE(r.max_rel_err <= 1e-4);
  }
}

TEST_CASE("clamp01 saturates and gates its gradient") {
  Tensor x = make({4}, {-0.5, 0.25, 0.75, 1.5}, true);
  Tensor y = clamp01(x);
  REQUIRE(y.data() == std::vector<double>{0.0, 0.25, 0.75, 1.0});
  sum_all(y).backward();
  REQUIRE(x.grad() == std::vector<double>{0, 1, 1, 0});
}

TEST_CASE("reductions over an axis match hand sums") {
  Tensor x = make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor s0 = sum_axis(x, 0);
  REQUIRE(s0.shape() == Shape{3});
  REQUIRE(s0.data() == std::vector<double>{5, 7, 9});
  Tensor m1 = mean_axis(x, 1);
  REQUIRE(m1.shape() == Shape{2});
  REQUIRE(m1.data()[0] == Catch::Approx(2.0));
  REQUIRE(m1.data()[1] == Catch::Approx(5.0));
  sum_all(m1).backward();
  for (double g : x.grad()) REQUIRE(g == Catch::Approx(1.0 / 3).margin(1e-12));
}

TEST_CASE("reshape infers a single -1 extent and is grad-transparent") {
  Tensor x = make({2, 6}, std::vector<double>(12, 1.0), true);
  Tensor y = reshape(x, {4, -1});
  REQUIRE(y.shape() == Shape{4, 3});
  REQUIRE_THROWS_AS(reshape(x, {5, -1}), ShapeError);
  sum_all(mul(y, y)).backward();
  for (double g : x.grad()) REQUIRE(g == 2.0);
}

TEST_CASE("permute transposes data and routes gradients back") {
  Tensor x = make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor y = permute(x, {1, 0});
  REQUIRE(y.shape() == Shape{3, 2});
  REQUIRE(y.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
  Tensor w = make({3, 2}, {1, 0, 0, 0, 0, 2});
  sum_all(mul(y, w)).backward();
  REQUIRE(x.grad() == std::vector<double>{1, 0, 0, 0, 0, 2});
}

TEST_CASE("slice and concat are inverse and split gradients") {
  Tensor x = make({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor left = slice(x, 1, 0, 2);
  Tensor right = slice(x, 1, 2, 2);
  REQUIRE(left.data() == std::vector<double>{1, 2, 5, 6});
  REQUIRE(right.data() == std::vector<double>{3, 4, 7, 8});
  Tensor glued = concat({left, right}, 1);
  REQUIRE(glued.data() == x.data());
  sum_all(mul(glued, glued)).backward();
  for (long i = 0; i < 8; ++i) {
    REQUIRE(x.grad()[i] == Catch::Approx(2 * x.data()[i]).margin(1e-12));
  }
  REQUIRE_THROWS_AS(slice(x, 1, 3, 2), ShapeError);
}

TEST_CASE("detach cuts a tensor off the tape") {
  Tensor x = make({2}, {1, 2}, true);
  Tensor d = mul(x, x).detach();
  REQUIRE_FALSE(d.requires_grad());
  Tensor y = sum_all(mul(d, d));
  REQUIRE_FALSE(y.requires_grad());
  y = sum_all(add(mul(d, d), x));
  y.backward();
  REQUIRE(x.grad() == std::vector<double>{1, 1});
}

TEST_CASE("NoGradGuard suppresses tape construction") {
  Tensor x = make({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    Tensor y = sum_all(mul(x, x));
    REQUIRE_FALSE(y.requires_grad());
  }
  Tensor y = sum_all(mul(x, x));
  REQUIRE(y.requires_grad());
}

TEST_CASE("non-finite op outputs raise a numeric error naming the op") {
  Tensor x = make({1}, {1e300});
  REQUIRE_THROWS_MATCHES(
      mul(x, x), NumericError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("mul")));
  REQUIRE_THROWS_AS(exp_op(Tensor::full({1}, 1e4)), NumericError);
}

TEST_CASE("attention-style masking stays finite through softmax") {
  // A large negative constant stands in for -inf so the finite check keeps
  // watching every intermediate.
  Tensor scores = make({1, 3}, {0.3, -1e30, 0.1});
  Tensor y = softmax(scores, -1);
  REQUIRE(y.data()[1] == 0.0);
  REQUIRE(y.data()[0] + y.data()[2] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("RandomSource reproduces streams and honors bounds") {
  RandomSource a(99), b(99);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  RandomSource c(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const auto r = c.randint(7);
    REQUIRE(r < 7);
  }
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(std::abs(c.trunc_normal(0.02)) <= 0.04);
  }
}

TEST_CASE("derive_seed separates streams by tag and index") {
  const auto s1 = derive_seed(42, "data");
  const auto s2 = derive_seed(42, "model");
  const auto s3 = derive_seed(43, "data");
  REQUIRE(s1 != s2);
  REQUIRE(s1 != s3);
  REQUIRE(derive_seed(42, "data") == s1);
  REQUIRE(derive_seed(42, "data", 0) != derive_seed(42, "data", 1));
}
