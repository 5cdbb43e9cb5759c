// SPDX-License-Identifier: Apache-2.0
//
// Exact EM diagnostics by enumeration of B^-1(y), analysis dumps and the
// repetition metric.
//
// Notation for one CTC instance: p(z) = P(z|x;theta) is the student path
// probability (unnormalized over B^-1(y)), M = sum_z p(z) = P(y|x;theta),
// p_c(z) = p(z) / M its conditional form, and q(z) = P(z|x,y;phi) the
// teacher's path distribution renormalized over B^-1(y). Then
//   Q     = sum_z q log p          = -KL(q||p_c) - H(q) + log M
//   bound = sum_z q log(p / q)     = -KL(q||p)
//   slack = log M - bound          =  KL(q||p_c) >= 0.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "emnet/ctc.hpp"
#include "emnet/models.hpp"
#include "emnet/objectives.hpp"

namespace emnet {

/// KL divergences between two weightings of the same path set. Both inputs
/// are path probabilities; the teacher is renormalized, the student is used
/// as given (unnormalized) and renormalized (conditional).
struct PathKl {
  double conditional = 0.0;
  double unnormalized = 0.0;
};
PathKl path_kl(std::span<const double> teacher, std::span<const double> student);

struct AlignmentDiagnostics {
  std::size_t paths = 0;
  double log_likelihood = 0.0;  // log M, from the forward recursion
  double kl_conditional = 0.0;
  double kl_unnormalized = 0.0;
  double teacher_entropy = 0.0;
  double q_function = 0.0;
  double log_mass_term = 0.0;  // sum_z q log M (= log M)
};

/// Exact comparison of teacher and student CTC path distributions for one
/// instance. Throws RefusalError when K^T exceeds `cap`.
AlignmentDiagnostics diagnose_alignments(const Tensor& teacher_logits, const Tensor& student_logits,
                                         std::span<const int> target, std::uint64_t cap = kEnumerationCap);

double alignment_kl(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const int> target);
double q_function(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const int> target);

inline constexpr double kBoundTolerance = 1e-9;

struct BoundReport {
  double log_likelihood = 0.0;
  double bound = 0.0;
  double slack = 0.0;
  double teacher_entropy = 0.0;
  // AED only: the per-position form -sum_i KL(teacher_i || student_i), which
  // is reported but not a valid bound (see check_lower_bound_aed).
  double position_kl_form = std::numeric_limits<double>::quiet_NaN();

  bool holds(double tolerance = kBoundTolerance) const { return slack >= -tolerance; }
};

BoundReport check_lower_bound(const Tensor& teacher_logits, const Tensor& student_logits,
                              std::span<const int> target, std::uint64_t cap = kEnumerationCap);

/// Teacher/student logits of one CTC instance from a network.
struct CtcOutputs {
  Tensor student;
  Tensor teacher;
};
CtcOutputs ctc_outputs(const EmNetwork& net, const Source& x, std::span<const int> oracle_input);

BoundReport check_lower_bound(const EmNetwork& net, const Source& x, std::span<const int> y,
                              std::span<const int> oracle_input);

/// AED form. The output sequence has no latent alignment, so B^-1(y) = {y}
/// and the renormalized teacher is a point mass: the bound equals
/// log P(y|x;theta) and the slack is 0. The per-position KL form is filled in
/// alongside for inspection.
BoundReport check_lower_bound_aed(const EmNetwork& net, const Source& x, std::span<const int> y,
                                  std::span<const int> oracle_input);

/// Random desk-scale CTC instance on a seeded toy network (d = 8, one layer
/// everywhere, K <= 4, T <= 8), for bound sweeps.
struct BoundInstance {
  ModelConfig config;
  std::uint64_t param_seed = 0;
  Source x;
  Tokens y;
};
BoundInstance random_bound_instance(std::mt19937_64& rng);

// CSV dumps.
void write_bound_header(std::ostream& out);
void write_bound_row(std::ostream& out, const BoundReport& r);

/// Frame-wise label probabilities (frame,label,prob,mode). The student grid
/// is always written; the teacher grid only when `oracle_input` is given.
void dump_alignment(std::ostream& out, const EmNetwork& net, const Source& x,
                    const std::vector<int>* oracle_input);

/// Fusion cross-attention maps (frame,token,score,layer).
AttentionMaps dump_attention(std::ostream& out, const EmNetwork& net, const Source& x,
                             std::span<const int> oracle_input);

/// Consecutive repeats over total tokens. Throws ContractError on an empty set.
double repetition_ratio(const std::vector<Tokens>& predictions);

/// Mean L_em and L_org over the last `fraction` of rows.
struct CurveCheck {
  std::size_t rows = 0;
  double mean_em = 0.0;
  double mean_org = 0.0;
  bool em_below_org = false;
};
CurveCheck check_em_below_org(std::span<const double> l_org, std::span<const double> l_em, double fraction = 0.2);

}  // namespace emnet
