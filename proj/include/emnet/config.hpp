// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: `key = value` lines, `#` comments. Unknown or repeated
// keys are rejected. Keys:
//
//   task                 ctc | aed (read first; selects the defaults below)
//   seed                 model init, batch order and masking
//   steps, batch_size, lr, warmup_steps
//   alpha, lambda_mask, kd_form (l2 | kl), stop_teacher_grad (true | false),
//   temperature, fusion (on | off)
//   d_model, enc_layers, dec_layers, heads, ff_dim, oracle_layers, fusion_layers
//   dataset_size, eval_every, eval_limit, checkpoint_every (0: every 20%)
//   ctc.vocab, ctc.min_len, ctc.max_len, ctc.min_frames, ctc.max_frames,
//   ctc.feat_dim, ctc.noise, ctc.ambiguity, ctc.seed
//   aed.vocab, aed.min_len, aed.max_len, aed.rule, aed.copy_noise, aed.seed
//   fault.nan_at_step    test hook: poison a parameter before that step
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "emnet/objectives.hpp"
#include "emnet/tasks.hpp"

namespace emnet {

struct RunConfig {
  TrainConfig train;
  CtcTaskSpec ctc;
  AedTaskSpec aed;
  std::size_t dataset_size = 2000;
  int eval_every = 100;
  std::size_t eval_limit = 100;  // dev examples scored per metrics row (0: all)
  int checkpoint_every = 0;
  int fault_nan_at_step = 0;

  Task task() const { return train.model.task; }
  /// Copies task-spec sizes into the model configuration and validates everything.
  void finalize();
  int checkpoint_interval() const;
};

/// Task defaults: CTC alpha 2, lambda 0; AED alpha 5, lambda 0.5.
RunConfig default_run_config(Task task);

RunConfig parse_run_config(std::istream& in);
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Canonical text form: every key, fixed order, shortest round-trip numbers.
std::string format_run_config(const RunConfig& config);

/// Every accepted key, in canonical order.
const std::vector<std::string>& config_keys();

std::string format_number(double v);

}  // namespace emnet
