// SPDX-License-Identifier: Apache-2.0
#include "emnet/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "emnet/error.hpp"

namespace emnet {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void require_logits(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("CTC logits must be a T×K matrix");
  if (logits.cols() < 2) throw DimensionError("CTC vocabulary needs at least blank and one label");
}

// Row-wise log-softmax values of a T×K matrix.
std::vector<double> row_log_softmax(const Tensor& logits) {
  const std::size_t t_len = logits.rows(), k = logits.cols();
  const auto u = logits.values();
  std::vector<double> out(u.size());
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* ur = u.data() + t * k;
    const double mx = *std::max_element(ur, ur + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(ur[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[t * k + j] = ur[j] - lse;
  }
  return out;
}

std::vector<double> row_softmax(const Tensor& logits) {
  auto v = row_log_softmax(logits);
  for (auto& x : v) x = std::exp(x);
  return v;
}

}  // namespace

Vocab::Vocab(int k) : size(k) {
  if (k < 2) throw ContractError("vocabulary must contain blank and at least one label");
}

Tokens collapse(std::span<const int> path) {
  Tokens out;
  int prev = -1;
  for (int z : path) {
    if (z != prev && z != kBlank) out.push_back(z);
    prev = z;
  }
  return out;
}

std::size_t min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

void validate_target(std::span<const int> target, int vocab_size) {
  if (target.empty()) throw VocabError("target sequence is empty");
  for (int y : target) {
    if (y == kBlank) throw VocabError("target sequence contains the blank label");
    if (y < 0 || y >= vocab_size) {
      throw VocabError("target label " + std::to_string(y) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
    }
  }
}

std::vector<AlignmentPath> enumerate_alignments(std::span<const int> target, std::size_t frames,
                                                const Vocab& vocab, std::uint64_t cap) {
  const auto k = static_cast<std::uint64_t>(vocab.size);
  std::uint64_t total = 1;
  for (std::size_t t = 0; t < frames; ++t) {
    total *= k;
    if (total > cap) {
      throw RefusalError("enumeration of " + std::to_string(vocab.size) + "^" + std::to_string(frames) +
                         " paths exceeds the cap of " + std::to_string(cap));
    }
  }
  std::vector<AlignmentPath> out;
  if (frames < min_frames(target)) return out;
  AlignmentPath z(frames, 0);
  for (std::uint64_t n = 0; n < total; ++n) {
    // Odometer increment, last frame fastest: yields lexicographic order.
    if (n > 0) {
      for (std::size_t t = frames; t-- > 0;) {
        if (++z[t] < vocab.size) break;
        z[t] = 0;
      }
    }
    const Tokens c = collapse(z);
    if (std::equal(c.begin(), c.end(), target.begin(), target.end())) out.push_back(z);
  }
  return out;
}

std::vector<double> path_log_probs(const Tensor& logits, const std::vector<AlignmentPath>& paths) {
  require_logits(logits);
  const auto lp = row_log_softmax(logits);
  const std::size_t k = logits.cols();
  std::vector<double> out;
  out.reserve(paths.size());
  for (const auto& z : paths) {
    if (z.size() != logits.rows()) throw DimensionError("path length differs from frame count");
    double s = 0.0;
    for (std::size_t t = 0; t < z.size(); ++t) s += lp[t * k + static_cast<std::size_t>(z[t])];
    out.push_back(s);
  }
  return out;
}

double ctc_loss_bruteforce(const Tensor& logits, std::span<const int> target, std::uint64_t cap) {
  require_logits(logits);
  validate_target(target, static_cast<int>(logits.cols()));
  const auto paths = enumerate_alignments(target, logits.rows(), Vocab(static_cast<int>(logits.cols())), cap);
  if (paths.empty()) {
    throw InfeasibleError("no alignment of " + std::to_string(logits.rows()) + " frames collapses to the target");
  }
  double acc = kNegInf;
  for (double lp : path_log_probs(logits, paths)) acc = log_add(acc, lp);
  return -acc;
}

ForwardBackward ctc_forward_backward(const Tensor& logits, std::span<const int> target) {
  require_logits(logits);
  validate_target(target, static_cast<int>(logits.cols()));
  const std::size_t t_len = logits.rows(), k = logits.cols();
  if (t_len < min_frames(target)) {
    throw InfeasibleError(std::to_string(t_len) + " frames cannot emit a target needing " +
                          std::to_string(min_frames(target)));
  }
  const std::size_t s_len = 2 * target.size() + 1;
  std::vector<int> ext(s_len, kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];

  const auto lp = row_log_softmax(logits);
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * k + static_cast<std::size_t>(ext[s])]; };
  auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(t_len * s_len, kNegInf), beta(t_len * s_len, kNegInf);
  alpha[0] = emit(0, 0);
  if (s_len > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
      if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  const std::size_t last = (t_len - 1) * s_len;
  const double log_lik = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
  if (log_lik == kNegInf) throw InfeasibleError("target has zero probability under the logits");

  // beta excludes the emission at its own frame.
  beta[last + s_len - 1] = 0.0;
  beta[last + s_len - 2] = 0.0;
  for (std::size_t t = t_len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double b = beta[(t + 1) * s_len + s] + emit(t + 1, s);
      if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1] + emit(t + 1, s + 1));
      if (s + 2 < s_len && skip_ok(s + 2)) b = log_add(b, beta[(t + 1) * s_len + s + 2] + emit(t + 1, s + 2));
      beta[t * s_len + s] = b;
    }
  }

  std::vector<double> post(t_len * k, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    double row = 0.0;
    for (std::size_t s = 0; s < s_len; ++s) {
      const double lg = alpha[t * s_len + s] + beta[t * s_len + s] - log_lik;
      if (lg == kNegInf) continue;
      const double g = std::exp(lg);
      post[t * k + static_cast<std::size_t>(ext[s])] += g;
      row += g;
    }
    for (std::size_t j = 0; j < k; ++j) post[t * k + j] /= row;
  }
  return {-log_lik, Tensor({t_len, k}, std::move(post))};
}

double ctc_loss_dp(const Tensor& logits, std::span<const int> target) {
  return ctc_forward_backward(logits, target).loss;
}

Tensor ctc_posterior(const Tensor& logits, std::span<const int> target) {
  return ctc_forward_backward(logits, target).posterior;
}

Tensor ctc_grad(const Tensor& logits, std::span<const int> target) {
  const auto fb = ctc_forward_backward(logits, target);
  auto p = row_softmax(logits);
  const auto sigma = fb.posterior.values();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= sigma[i];
  return Tensor(logits.shape(), std::move(p));
}

Tensor ctc_loss(const Tensor& logits, std::span<const int> target) {
  auto fb = ctc_forward_backward(logits, target);
  auto grad = row_softmax(logits);
  const auto sigma = fb.posterior.values();
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] -= sigma[i];
  return make_op_result({}, {fb.loss}, {logits}, [grad = std::move(grad)](detail::Node& out) {
    detail::Node& p = *out.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0] * grad[i];
  });
}

Tensor kd_loss_ctc(const Tensor& student_posterior, const Tensor& teacher_posterior, KdForm form) {
  if (student_posterior.shape() != teacher_posterior.shape() || student_posterior.rank() != 2) {
    throw DimensionError("kd_loss_ctc: student and teacher must share one T×K shape");
  }
  const double frames = static_cast<double>(student_posterior.rows());
  if (form == KdForm::kL2) {
    return scale(sum_sq(sub(student_posterior, teacher_posterior)), 1.0 / frames);
  }
  const Tensor log_ratio = sub(log(add_scalar(teacher_posterior, kProbFloor)), log(add_scalar(student_posterior, kProbFloor)));
  return scale(sum(mul(teacher_posterior, log_ratio)), 1.0 / frames);
}

Tokens greedy_decode(const Tensor& logits) {
  require_logits(logits);
  const std::size_t k = logits.cols();
  AlignmentPath best(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits.at(t, j) > logits.at(t, arg)) arg = j;
    best[t] = static_cast<int>(arg);
  }
  return collapse(best);
}

}  // namespace emnet
