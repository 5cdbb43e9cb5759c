// SPDX-License-Identifier: Apache-2.0
//
// The combined training objective L_total = L_org + L_em + alpha * L_kd, the
// target masking function, and the Adam optimizer.
//
// L_org: student loss (CTC, or teacher-forced cross-entropy for AED).
// L_em:  the same loss on the teacher path, which sees oracle guidance built
//        from the (masked) target.
// L_kd:  frame/position-level distillation from teacher to student.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "emnet/ctc.hpp"
#include "emnet/models.hpp"
#include "emnet/tasks.hpp"

namespace emnet {

struct TrainConfig {
  ModelConfig model;
  double alpha = 2.0;
  double lambda_mask = 0.0;
  KdForm kd_form = KdForm::kL2;
  bool stop_teacher_grad = false;
  double temperature = 1.0;
  bool fusion = true;  // false: plain baseline, teacher path not evaluated
  std::uint64_t seed = 1;
  int steps = 600;
  int batch_size = 16;
  double lr = 3e-3;
  int warmup_steps = 50;

  void validate() const;
};

/// Target-side oracle input with the masked positions recorded.
struct MaskedTarget {
  Tokens tokens;
  std::vector<bool> masked;
};

/// Replaces each token by `mask_id` independently with probability lambda.
MaskedTarget mask_target(std::span<const int> y, double lambda, int mask_id, std::mt19937_64& rng);

struct LossBreakdown {
  double l_org = 0.0;
  double l_em = 0.0;
  double l_kd = 0.0;
  double l_total = 0.0;
};

/// Differentiable loss terms of one batch, each a batch mean.
struct LossTerms {
  Tensor org;
  Tensor em;
  Tensor kd;
  Tensor total;
  /// Teacher output logits per item, as used by L_kd (empty when fusion is off).
  std::vector<Tensor> teacher_logits;

  LossBreakdown values() const;
};

/// One fresh masked target per item, drawn in item order.
std::vector<MaskedTarget> draw_masks(const Batch& batch, double lambda, int mask_id, std::mt19937_64& rng);

/// All three terms with one shared encoder forward per item.
LossTerms compute_losses(const EmNetwork& net, const Batch& batch, const TrainConfig& config,
                         const std::vector<MaskedTarget>& oracle_inputs);

// Individual terms (each recomputes the forward it needs).
Tensor loss_org(const EmNetwork& net, const Batch& batch);
Tensor loss_em(const EmNetwork& net, const Batch& batch, const std::vector<MaskedTarget>& oracle_inputs);
Tensor loss_kd(const EmNetwork& net, const Batch& batch, const TrainConfig& config,
               const std::vector<MaskedTarget>& oracle_inputs);

/// Mean over positions of KL(softmax(teacher/τ) || softmax(student/τ)).
Tensor kd_loss_softmax(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) with linear warmup to a constant rate.
class Adam {
 public:
  struct Options {
    double lr = 3e-3;
    int warmup_steps = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(const ParamStore& params, Options options);

  /// Applies one update from the accumulated gradients. Throws NumericError,
  /// before touching any parameter, if a gradient is not finite.
  void step(ParamStore& params);
  double rate_at(int step) const;
  int steps_taken() const { return t_; }

 private:
  Options options_;
  int t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct StepResult {
  LossBreakdown losses;
  std::vector<Tensor> teacher_logits;
  std::vector<MaskedTarget> oracle_inputs;
};

/// Forward, backward and update on one batch. The teacher outputs are
/// recomputed from the current parameters every call.
StepResult train_step(EmNetwork& net, Adam& optimizer, const Batch& batch, const TrainConfig& config,
                      std::mt19937_64& mask_rng);

}  // namespace emnet
