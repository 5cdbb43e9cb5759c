// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "emnet/ctc.hpp"
#include "emnet/error.hpp"
#include "test_support.hpp"

using namespace emnet;
using emnet::testing::random_labels;
using emnet::testing::random_tensor;
using emnet::testing::uniform_int;
using emnet::testing::uniform_logits;

namespace {

constexpr int kA = 1;
constexpr int kB = 2;

// Path-weighted label frequencies per frame, from the enumerated path set.
std::vector<double> enumerated_marginals(const Tensor& logits, const Tokens& y) {
  const std::size_t t = logits.rows(), k = logits.cols();
  const auto paths = enumerate_alignments(y, t, Vocab(static_cast<int>(k)));
  const auto lp = path_log_probs(logits, paths);
  double total = 0;
  for (double v : lp) total += std::exp(v);
  std::vector<double> m(t * k, 0.0);
  for (std::size_t p = 0; p < paths.size(); ++p) {
    for (std::size_t f = 0; f < t; ++f) m[f * k + static_cast<std::size_t>(paths[p][f])] += std::exp(lp[p]) / total;
  }
  return m;
}

Tensor path_logits(const AlignmentPath& path, std::size_t vocab, double magnitude) {
  Tensor u({path.size(), vocab}, 0.0);
  for (std::size_t f = 0; f < path.size(); ++f) u.mutable_values()[f * vocab + static_cast<std::size_t>(path[f])] = magnitude;
  return u;
}

}  // namespace

TEST_CASE("collapse") {
  const int e = kBlank;
  CHECK(collapse(AlignmentPath{e, kA, kA, e, e, kA, kB, kB}) == Tokens{kA, kA, kB});
  CHECK(collapse(AlignmentPath{e, e, e}).empty());
  CHECK(collapse(AlignmentPath{kA, e, kA}) == Tokens{kA, kA});
  CHECK(min_frames(Tokens{kA, kA, kB}) == 4);
}

TEST_CASE("enumerate_alignments") {
  const auto ab = enumerate_alignments(Tokens{kA, kB}, 3, Vocab(3));
  const std::set<AlignmentPath> got(ab.begin(), ab.end());
  const std::set<AlignmentPath> want{{kA, kA, kB}, {kA, kB, kB}, {kA, kB, 0}, {0, kA, kB}, {kA, 0, kB}};
  CHECK(got == want);
  CHECK(ab.size() == 5);
  CHECK(enumerate_alignments(Tokens{kA, kA}, 2, Vocab(3)).empty());
  CHECK(enumerate_alignments(Tokens{kA}, 1, Vocab(3)) == std::vector<AlignmentPath>{{kA}});
  CHECK_THROWS_AS(enumerate_alignments(Tokens{kA}, 13, Vocab(5)), RefusalError);
  CHECK_THROWS_AS(validate_target(Tokens{0, 1}, 3), VocabError);
  CHECK_THROWS_AS(validate_target(Tokens{3}, 3), VocabError);
}

TEST_CASE("brute-force loss examples") {
  CHECK(ctc_loss_bruteforce(uniform_logits(3, 3), Tokens{kA, kB}) == doctest::Approx(-std::log(5.0 / 27.0)));
  CHECK(-std::log(5.0 / 27.0) == doctest::Approx(1.6864).epsilon(1e-4));
  const Tensor sharp = path_logits({0, kA, kB, kB}, 3, 20.0);
  CHECK(ctc_loss_bruteforce(sharp, Tokens{kA, kB}) < 1e-3);
  CHECK_THROWS_AS(ctc_loss_bruteforce(uniform_logits(2, 3), Tokens{kA, kA}), InfeasibleError);
}

TEST_CASE("forward recursion equals enumeration on random instances") {
  std::mt19937_64 rng(21);
  for (int n = 0; n < 100; ++n) {
    const int k = uniform_int(rng, 2, 4);
    const Tokens y = random_labels(rng, k, 4);
    const int lo = static_cast<int>(min_frames(y));
    if (lo > 8) continue;
    const auto t = static_cast<std::size_t>(uniform_int(rng, lo, 8));
    const Tensor u = random_tensor(rng, {t, static_cast<std::size_t>(k)}, 2.0);
    CHECK(std::abs(ctc_loss_dp(u, y) - ctc_loss_bruteforce(u, y)) <= 1e-9);
    const Tensor post = ctc_posterior(u, y);
    const auto marg = enumerated_marginals(u, y);
    for (std::size_t i = 0; i < marg.size(); ++i) CHECK(std::abs(post.at(i) - marg[i]) <= 1e-9);
  }
}

TEST_CASE("dp edge cases") {
  std::mt19937_64 rng(4);
  const Tensor u = random_tensor(rng, {1, 4});
  CHECK(ctc_loss_dp(u, Tokens{2}) == doctest::Approx(-log_softmax(u, 1).at(2)).epsilon(1e-14));
  const Tensor post = ctc_posterior(u, Tokens{2});
  CHECK(post.at(2) == doctest::Approx(1.0));
  CHECK(post.at(0) == 0.0);
  CHECK_THROWS_AS(ctc_loss_dp(uniform_logits(2, 3), Tokens{kA, kA}), InfeasibleError);

  // Shift invariance per frame.
  const Tokens y{1, 3, 3};
  Tensor v = random_tensor(rng, {9, 4});
  const double base = ctc_loss_dp(v, y);
  for (std::size_t f = 0; f < 9; ++f)
    for (std::size_t c = 0; c < 4; ++c) v.mutable_values()[f * 4 + c] += 7.5 * static_cast<double>(f) - 3.0;
  CHECK(std::abs(ctc_loss_dp(v, y) - base) <= 1e-10);

  // Long sequences stay finite.
  const Tensor long_u = random_tensor(rng, {400, 6});
  Tokens long_y;
  for (int i = 0; i < 60; ++i) long_y.push_back(1 + i % 5);
  CHECK(std::isfinite(ctc_loss_dp(long_u, long_y)));
}

TEST_CASE("posterior on the two-token example") {
  const Tensor post = ctc_posterior(uniform_logits(3, 3), Tokens{kA, kB});
  CHECK(post.at(0, kA) == doctest::Approx(4.0 / 5.0));
  CHECK(post.at(0, 0) == doctest::Approx(1.0 / 5.0));
  CHECK(post.at(0, kB) == 0.0);
  for (std::size_t f = 0; f < 3; ++f) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += post.at(f, c);
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("ctc gradient") {
  std::mt19937_64 rng(8);
  double worst = 0;
  for (int n = 0; n < 50; ++n) {
    const int k = uniform_int(rng, 2, 5);
    const Tokens y = random_labels(rng, k, 4);
    const std::size_t t = min_frames(y) + static_cast<std::size_t>(uniform_int(rng, 0, 4));
    const Tensor u = random_tensor(rng, {t, static_cast<std::size_t>(k)}, 1.5);
    worst = std::max(worst, grad_check([&](const Tensor& a) { return ctc_loss(a, y); }, u).max_rel_error);
    const Tensor g = ctc_grad(u, y);
    for (std::size_t f = 0; f < t; ++f) {
      double s = 0;
      for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) s += g.at(f, c);
      CHECK(std::abs(s) <= 1e-10);
    }
  }
  CHECK(worst <= 1e-5);

  // When softmax already equals the posterior the gradient vanishes.
  const Tensor forced = path_logits({kA, kB}, 3, 40.0);
  const Tensor g = ctc_grad(forced, Tokens{kA, kB});
  for (double v : g.values()) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("frame-level distillation") {
  std::mt19937_64 rng(9);
  const Tensor p = softmax(random_tensor(rng, {4, 3}), 1);
  CHECK(kd_loss_ctc(p, p, KdForm::kL2).item() == 0.0);
  CHECK(std::abs(kd_loss_ctc(p, p, KdForm::kKl).item()) <= 1e-15);
  CHECK(kd_loss_ctc(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 1}}), KdForm::kL2).item() == 2.0);
  CHECK_THROWS_AS(kd_loss_ctc(p, Tensor({3, 3}), KdForm::kL2), DimensionError);
  // A zero student entry under a positive teacher stays finite.
  CHECK(std::isfinite(kd_loss_ctc(Tensor::matrix({{1, 0}}), Tensor::matrix({{0.5, 0.5}}), KdForm::kKl).item()));

  double worst = 0;
  for (int n = 0; n < 20; ++n) {
    const Tensor u = random_tensor(rng, {5, 4});
    const Tensor v = random_tensor(rng, {5, 4});
    for (KdForm form : {KdForm::kL2, KdForm::kKl}) {
      CHECK(kd_loss_ctc(softmax(u, 1), softmax(v, 1), form).item() >= 0.0);
      worst = std::max(worst, grad_check([&](const Tensor& a) { return kd_loss_ctc(softmax(a, 1), softmax(v, 1), form); }, u)
                                  .max_rel_error);
      worst = std::max(worst, grad_check([&](const Tensor& b) { return kd_loss_ctc(softmax(u, 1), softmax(b, 1), form); }, v)
                                  .max_rel_error);
    }
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("greedy decoding") {
  const int e = kBlank;
  CHECK(greedy_decode(path_logits({e, kA, kA, e, e, kA, kB, kB}, 3, 10.0)) == Tokens{kA, kA, kB});
  CHECK(greedy_decode(path_logits({e, e, e}, 3, 10.0)).empty());
  CHECK(greedy_decode(uniform_logits(4, 3)).empty());  // ties go to blank
  std::mt19937_64 rng(12);
  for (int n = 0; n < 100; ++n) {
    AlignmentPath z(static_cast<std::size_t>(uniform_int(rng, 1, 10)));
    for (auto& l : z) l = uniform_int(rng, 0, 4);
    CHECK(greedy_decode(softmax(path_logits(z, 5, 8.0), 1)) == collapse(z));
  }
}
