// SPDX-License-Identifier: Apache-2.0
//
// Connectionist temporal classification: the collapse mapping, exhaustive
// alignment enumeration, log-space forward-backward, posteriors, gradients,
// frame-level distillation losses and greedy decoding.
//
// Logits are T×K tensors (frames × vocabulary). The blank label is always 0.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "emnet/tensor.hpp"

namespace emnet {

using Tokens = std::vector<int>;
using AlignmentPath = std::vector<int>;

inline constexpr int kBlank = 0;

struct Vocab {
  int size = 2;  // including blank

  explicit Vocab(int k);
  int blank() const { return kBlank; }
};

/// Merges repeated labels, then drops blanks.
Tokens collapse(std::span<const int> path);

/// Fewest frames able to emit `target`: its length plus one forced blank per
/// pair of equal adjacent labels.
std::size_t min_frames(std::span<const int> target);

/// Throws VocabError if `target` is empty, contains blank, or leaves the vocabulary.
void validate_target(std::span<const int> target, int vocab_size);

inline constexpr std::uint64_t kEnumerationCap = 1'000'000;

/// All paths of length `frames` that collapse to `target`, by exhaustive
/// K^T enumeration in lexicographic order. Returns an empty set when the
/// length is infeasible; throws RefusalError when K^T exceeds `cap`.
std::vector<AlignmentPath> enumerate_alignments(std::span<const int> target, std::size_t frames,
                                                const Vocab& vocab, std::uint64_t cap = kEnumerationCap);

/// -log sum_{z in B^-1(y)} prod_t softmax(u)_{t, z_t}, by enumeration.
double ctc_loss_bruteforce(const Tensor& logits, std::span<const int> target,
                           std::uint64_t cap = kEnumerationCap);

/// Per-path log-probabilities log prod_t softmax(u)_{t,z_t}.
std::vector<double> path_log_probs(const Tensor& logits, const std::vector<AlignmentPath>& paths);

struct ForwardBackward {
  double loss = 0.0;    // -log P(y|x)
  Tensor posterior;     // T×K, sigma(k, t)
};

/// Log-space forward-backward over the blank-interleaved target (length 2L+1).
ForwardBackward ctc_forward_backward(const Tensor& logits, std::span<const int> target);

double ctc_loss_dp(const Tensor& logits, std::span<const int> target);
Tensor ctc_posterior(const Tensor& logits, std::span<const int> target);

/// softmax(u) - sigma: the derivative of the CTC loss w.r.t. the logits.
Tensor ctc_grad(const Tensor& logits, std::span<const int> target);

/// Differentiable CTC loss whose backward rule is ctc_grad.
Tensor ctc_loss(const Tensor& logits, std::span<const int> target);

enum class KdForm { kL2, kKl };

inline constexpr double kProbFloor = 1e-12;

/// Frame-level distillation between two T×K per-frame distributions.
/// l2: mean over frames of ||student_t - teacher_t||^2.
/// kl: mean over frames of KL(teacher_t || student_t), logs floored by kProbFloor.
/// Gradient reaches both arguments; detach the teacher to stop it.
Tensor kd_loss_ctc(const Tensor& student_posterior, const Tensor& teacher_posterior, KdForm form);

/// Frame-wise argmax (ties to the lowest index) followed by collapse.
Tokens greedy_decode(const Tensor& logits);

}  // namespace emnet
