// SPDX-License-Identifier: Apache-2.0
//
// Sequence model (student), oracle encoder, fusion module and teacher head.
//
// Token spaces for the AED task with V content tokens (ids 0..V-1):
//   decoder input:  V content + BOS (= V)
//   decoder output: V content + EOS (= V)
//   oracle input:   V content + MASK (= V)
// For the CTC task the label space is 0..K-1 with blank 0, and the oracle
// input adds MASK = K.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emnet/ctc.hpp"
#include "emnet/params.hpp"
#include "emnet/tensor.hpp"

namespace emnet {

enum class Task { kCtc, kAed };

const char* task_name(Task task);
Task parse_task(std::string_view name);

struct ModelConfig {
  Task task = Task::kCtc;
  int vocab = 7;  // CTC: labels including blank; AED: content tokens
  int feat_dim = 8;  // CTC source feature width
  int d_model = 32;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 2;
  int ff_dim = 64;
  int oracle_layers = 1;
  int fusion_layers = 1;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
};

/// A source sequence: T×F features (CTC) or token ids (AED).
struct Source {
  Tensor features;
  Tokens tokens;

  std::size_t length() const { return features.defined() ? features.rows() : tokens.size(); }
};

/// Fixed sinusoidal position table, rows = positions.
Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

/// Cross-attention probabilities of one fusion layer, averaged over heads:
/// rows are source positions, columns oracle tokens.
using AttentionMaps = std::vector<Tensor>;

class EmNetwork {
 public:
  /// Fresh parameters: Glorot-uniform matrices, zero biases, unit norm gains.
  EmNetwork(const ModelConfig& config, std::uint64_t seed);
  /// Adopts an existing store; names and shapes must match the configuration.
  EmNetwork(const ModelConfig& config, ParamStore params);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  int mask_id() const { return config_.vocab; }
  int bos_id() const { return config_.vocab; }
  int eos_id() const { return config_.vocab; }
  /// Width of the student / teacher output layers.
  int output_size() const;

  // Sequence model (theta only).
  Tensor encode(const Source& x) const;
  Tensor ctc_logits(const Tensor& hidden) const;
  /// Decoder body over `memory` for a teacher-forced input prefix starting with BOS.
  Tensor decoder_states(const Tensor& memory, std::span<const int> input) const;
  Tensor decoder_logits(const Tensor& states) const;
  /// Student inference: greedy CTC decoding or greedy autoregressive decoding.
  Tokens predict(const Source& x) const;

  // Teacher-path additions (rho).
  Tensor oracle_encode(std::span<const int> tokens) const;
  Tensor fuse(const Tensor& hidden, const Tensor& guidance, AttentionMaps* cross_attention = nullptr) const;
  Tensor teacher_logits(const Tensor& states) const;
  /// Teacher-mode inference given the (possibly masked) target-side input.
  Tokens predict_teacher(const Source& x, std::span<const int> oracle_input) const;

 private:
  void build(std::mt19937_64& rng);
  void check_against_config() const;
  Tokens greedy_autoregressive(const Tensor& memory, bool teacher) const;

  ModelConfig config_;
  ParamStore params_;
};

/// Scalar parameter counts per group.
struct ParamCounts {
  std::size_t theta = 0;
  std::size_t rho = 0;
  std::size_t phi() const { return theta + rho; }
};
ParamCounts count_params(const ParamStore& params);

/// Zeroes the cross-attention output projection of every fusion layer, so the
/// fused output no longer depends on the oracle guidance.
void zero_fusion_cross_attention(ParamStore& params);
/// Zeroes every residual-branch output projection of the fusion module, which
/// makes fuse(H, r) == H exactly.
void zero_fusion(ParamStore& params);
/// Copies the student output head into the teacher head.
void tie_teacher_head(ParamStore& params);

}  // namespace emnet
