// SPDX-License-Identifier: Apache-2.0
//
// Synthetic transduction tasks and batching.
//
// CTC task ("toy ASR"): a label sequence y is rendered as frames. Each token
// becomes a block of 2-4 noisy copies of a prototype vector; blocks are
// separated by silence frames and the utterance is padded with one silence
// frame on each side. Labels come in confusable pairs (1,2), (3,4), ...: with
// the ambiguity probability a token is rendered with the pair's shared
// prototype, so only context tells the two apart. Label sequences follow a
// seeded first-order Markov chain, which is the context the model can learn.
//
// AED task ("toy MT"): y = rule(x) over V content tokens, with copy noise on
// the training split (a target token replaced by the aligned source token).
#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emnet/ctc.hpp"
#include "emnet/models.hpp"

namespace emnet {

enum class Split { kTrain, kDev, kTest };

const char* split_name(Split split);
Split parse_split(std::string_view name);

struct Example {
  int id = 0;
  Source x;
  Tokens y;
  Split split = Split::kTrain;
};

using Dataset = std::vector<Example>;

struct CtcTaskSpec {
  int vocab = 7;  // including blank
  int min_len = 2;
  int max_len = 6;
  int min_frames_per_token = 2;
  int max_frames_per_token = 4;
  int feat_dim = 8;
  double noise = 0.3;
  double ambiguity = 0.3;
  std::uint64_t seed = 1;

  void validate() const;
};

enum class AedRule { kReverse, kCipher, kSort };

const char* rule_name(AedRule rule);
AedRule parse_rule(std::string_view name);

struct AedTaskSpec {
  int vocab = 12;
  int min_len = 3;
  int max_len = 8;
  AedRule rule = AedRule::kCipher;
  double copy_noise = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Partner of a label in its confusable pair (itself when unpaired).
int confusable_partner(int label, int vocab);

/// Per-label prototypes of the CTC task, vocab × feat_dim; row 0 is silence.
Tensor ctc_prototypes(const CtcTaskSpec& spec);

Dataset gen_ctc_dataset(const CtcTaskSpec& spec, std::size_t n);
Dataset gen_aed_dataset(const AedTaskSpec& spec, std::size_t n);

/// Substitution cipher used by the AED task: a seeded permutation of 0..V-1.
std::vector<int> cipher_table(int vocab, std::uint64_t seed);
std::vector<int> invert_table(std::span<const int> table);
/// The noiseless transduction rule.
Tokens apply_rule(const AedTaskSpec& spec, std::span<const int> x);

/// Split assignment by seeded hash of a token sequence (~80/10/10).
Split split_of(std::span<const int> key, std::uint64_t seed);

std::vector<const Example*> select_split(const Dataset& data, Split split);

/// Padded batch with length masks. Sources and targets are stored padded to
/// the batch maximum; source(i) and target(i) read back only the unpadded
/// prefix, so padding cannot reach any loss.
struct Batch {
  static constexpr int kPad = -1;

  std::vector<int> ids;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;
  std::size_t max_source = 0;
  std::size_t max_target = 0;
  std::size_t feat_dim = 0;         // 0 for token sources
  std::vector<double> features;     // size × max_source × feat_dim
  std::vector<int> source_tokens;   // size × max_source
  std::vector<int> targets;         // size × max_target

  std::size_t size() const { return ids.size(); }
  Source source(std::size_t i) const;
  Tokens target(std::size_t i) const;
  /// 1 on real positions, 0 on padding.
  std::vector<int> source_mask(std::size_t i) const;
};

Batch make_batch(std::span<const Example* const> items);

/// Seeded per-epoch shuffling over a fixed example list; the last partial
/// batch of each epoch is kept.
class BatchIterator {
 public:
  BatchIterator(std::vector<const Example*> items, std::size_t batch_size, std::uint64_t seed);

  Batch next();
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;
  /// Permutation used by the current epoch.
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  void reshuffle();

  std::vector<const Example*> items_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Line-oriented dataset text: a header comment, then one example per line:
// split, source tokens or feature values (space separated), a tab, target tokens.
void write_dataset(std::ostream& out, const Dataset& data, Task task, std::size_t feat_dim);
Dataset read_dataset(std::istream& in);

}  // namespace emnet
