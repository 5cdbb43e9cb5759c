// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "emnet/error.hpp"
#include "emnet/tensor.hpp"
#include "test_support.hpp"

using namespace emnet;
using emnet::testing::random_tensor;

namespace {

void check_values(const Tensor& t, std::initializer_list<double> expected, double tol = 0.0) {
  REQUIRE(t.numel() == expected.size());
  std::size_t i = 0;
  for (double e : expected) CHECK(std::abs(t.at(i++) - e) <= tol);
}

Tensor positive_tensor(std::mt19937_64& rng, Shape shape) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (auto& v : t.mutable_values()) v = 0.5 + std::abs(v);
  return t;
}

}  // namespace

TEST_CASE("matmul by hand") {
  const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  check_values(matmul(id, id), {1, 0, 0, 1});
  const Tensor out = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{0}, {1}}));
  CHECK(out.shape() == Shape{2, 1});
  check_values(out, {2, 4});
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 2});
  CHECK(grad_check([&](const Tensor& x) { return sum_sq(matmul(x, b)); }, a).max_rel_error <= 1e-6);
  CHECK(grad_check([&](const Tensor& x) { return sum_sq(matmul(a, x)); }, b).max_rel_error <= 1e-6);
}

TEST_CASE("softmax is stable and normalized") {
  check_values(softmax(Tensor::from_values({0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  const Tensor big = softmax(Tensor::from_values({1000, 0}), 0);
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(1.0));
  CHECK(big.at(1) < 1e-300);
  std::mt19937_64 rng(5);
  for (int n = 0; n < 100; ++n) {
    const Tensor p = softmax(random_tensor(rng, {5}, 3.0), 0);
    double s = 0;
    for (double v : p.values()) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  const Tensor rows = softmax(random_tensor(rng, {4, 6}, 10.0), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += rows.at(r, c);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("elementwise examples") {
  CHECK(sum_sq(Tensor::from_values({3, 4})).item() == 25.0);
  check_values(layer_norm(Tensor::from_values({2, 2, 2, 2})), {0, 0, 0, 0});
  check_values(relu(Tensor::from_values({-1, 0.5})), {0, 0.5});
  check_values(concat({Tensor::matrix({{1, 2}}), Tensor::matrix({{3, 4}})}, 0), {1, 2, 3, 4});
  check_values(slice(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}), 1, 1, 3), {2, 3, 5, 6});
  const int ids[] = {2, 0};
  check_values(embedding_lookup(Tensor::matrix({{1, 1}, {2, 2}, {3, 3}}), ids), {3, 3, 1, 1});
  CHECK(mean(Tensor::from_values({1, 2, 3, 6})).item() == 3.0);
  CHECK_THROWS_AS(log(Tensor::from_values({1, 0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::from_values({-2})), DomainError);
}

TEST_CASE("every differentiable op matches finite differences on 100 seeds") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor a = random_tensor(rng, {3, 4});
    const Tensor b = random_tensor(rng, {3, 4});
    const Tensor w = random_tensor(rng, {4, 4});
    const Tensor row = random_tensor(rng, {4});
    const Tensor pos = positive_tensor(rng, {3, 4});
    const Tensor table = random_tensor(rng, {5, 4});
    const int ids[] = {4, 1, 1, 0};
    const int picks[] = {3, 0, 2};
    const Tensor r = random_tensor(rng, {3, 4});  // fixed projection so every output coordinate matters
    auto proj = [&](const Tensor& y) { return sum(mul(y, r)); };
    auto proj_any = [&](const Tensor& y) {
      return sum(mul(y, Tensor(y.shape(), std::vector<double>(r.values().begin(), r.values().begin() + y.numel()))));
    };
    const std::vector<std::function<Tensor(const Tensor&)>> ops = {
        [&](const Tensor& x) { return proj(add(x, b)); },
        [&](const Tensor& x) { return proj(sub(b, x)); },
        [&](const Tensor& x) { return proj(mul(x, b)); },
        [&](const Tensor& x) { return proj(scale(x, -1.7)); },
        [&](const Tensor& x) { return proj(add_scalar(x, 0.3)); },
        [&](const Tensor& x) { return proj(add_row(x, row)); },
        [&](const Tensor& x) { return proj(mul_row(x, row)); },
        [&](const Tensor& x) { return proj(exp(x)); },
        [&](const Tensor& x) { return proj(relu(x)); },
        [&](const Tensor& x) { return proj(softmax(x, 1)); },
        [&](const Tensor& x) { return proj(softmax(x, 0)); },
        [&](const Tensor& x) { return proj(log_softmax(x, 1)); },
        [&](const Tensor& x) { return proj(layer_norm(x)); },
        [&](const Tensor& x) { return proj(layer_norm(x, row, row)); },
        [&](const Tensor& x) { return proj(causal_softmax(x)); },
        [&](const Tensor& x) { return proj(matmul(x, w)); },
        [&](const Tensor& x) { return proj_any(transpose(x)); },
        [&](const Tensor& x) { return proj_any(slice(x, 1, 1, 3)); },
        [&](const Tensor& x) { return proj_any(slice(concat({x, b}, 0), 0, 2, 5)); },
        [&](const Tensor& x) { return proj_any(select(x, picks)); },
        [&](const Tensor& x) { return mean(x); },
        [&](const Tensor& x) { return sum_sq(x); },
    };
    for (const auto& f : ops) worst = std::max(worst, grad_check(f, a).max_rel_error);
    // Ops with restricted domains or other argument roles.
    worst = std::max(worst, grad_check([&](const Tensor& x) { return proj(log(x)); }, pos).max_rel_error);
    worst = std::max(worst, grad_check([&](const Tensor& g) { return proj(layer_norm(a, g, row)); }, row).max_rel_error);
    worst = std::max(worst, grad_check([&](const Tensor& bias) { return proj(add_row(a, bias)); }, row).max_rel_error);
    worst = std::max(
        worst,
        grad_check([&](const Tensor& t) { return sum(mul(embedding_lookup(t, ids), w)); }, table).max_rel_error);
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("backward basics and accumulation") {
  Tensor x = Tensor::from_values({1, -2, 3});
  x.set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  backward(sum(x));  // accumulates
  for (double g : x.grad()) CHECK(g == 2.0);
  x.zero_grad();
  backward(scale(sum_sq(x), 0.5));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == x.at(i));
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("two-layer composition and tape replay") {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor(rng, {5, 3});
  const Tensor w1 = random_tensor(rng, {3, 6});
  const Tensor w2 = random_tensor(rng, {6, 2});
  auto net = [&](const Tensor& w) { return sum_sq(matmul(relu(add_scalar(matmul(x, w), 0.1)), w2)); };
  CHECK(grad_check(net, w1).max_rel_error <= 1e-5);

  Tensor leaf = w1.detach();
  leaf.set_requires_grad(true);
  const Tensor loss = net(leaf);
  const Tape tape = Tape::record(loss);
  CHECK(tape.leaf_count() == 1);
  CHECK(tape.size() > 3);
  // Identical inputs give bit-identical losses.
  CHECK(net(w1).item() == loss.item());
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x = Tensor::from_values({1, 2});
  x.set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard guard;
    CHECK(NoGradGuard::active());
    y = sum_sq(x);
  }
  CHECK_FALSE(NoGradGuard::active());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check of a sum is exact") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor(rng, {4, 3});
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x).max_rel_error <= 1e-10);
}
