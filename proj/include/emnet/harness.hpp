// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration, evaluation, metric files and the verification
// suites behind the command-line tool.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "emnet/checkpoint.hpp"
#include "emnet/config.hpp"
#include "emnet/diagnostics.hpp"

namespace emnet {

/// Environment variable naming the default output root.
inline constexpr const char* kOutRootEnv = "EMNET_OUT_ROOT";

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
/// Corpus token error rate: summed edit distance over summed reference length.
double token_error_rate(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);

// metrics.csv
struct MetricsRow {
  int step = 0;
  double l_org = 0.0;
  double l_em = 0.0;
  double l_kd = 0.0;
  double l_total = 0.0;
  double dev_ter_student = 0.0;
  double dev_ter_teacher = 0.0;
  double rep_ratio = 0.0;
};

inline constexpr const char* kMetricsVersionLine = "# emnet-metrics v1";
inline constexpr const char* kMetricsHeader = "step,l_org,l_em,l_kd,l_total,dev_ter_student,dev_ter_teacher,rep_ratio";

void write_metrics(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics(std::istream& in);

/// Static SVG line plot of L_org, L_em and L_kd against step.
void write_loss_svg(std::ostream& out, const std::vector<MetricsRow>& rows);

/// Holds `<dir>/run.lock` for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

enum class EvalMode { kStudent, kTeacher };

struct EvalSummary {
  EvalMode mode = EvalMode::kStudent;
  std::size_t examples = 0;
  double ter = 0.0;
  double exact_match = 0.0;
  double repetition = 0.0;
  // Reads made while producing predictions.
  std::size_t rho_reads = 0;
  std::size_t target_reads = 0;
  std::vector<Tokens> predictions;
};

/// Oracle input of the teacher for one example: the target, masked with
/// lambda by a generator seeded from (seed, example id).
Tokens teacher_oracle_input(const EmNetwork& net, const Example& ex, double lambda, std::uint64_t seed);

/// Predicts every example, then scores. Student mode never reads targets or
/// rho parameters during prediction; the counters prove it.
EvalSummary evaluate(const EmNetwork& net, const std::vector<const Example*>& examples, EvalMode mode,
                     double lambda, std::uint64_t seed);

Dataset generate_dataset(const RunConfig& config);

struct TrainingResult {
  std::vector<MetricsRow> rows;
  std::vector<double> step_seconds;  // cumulative wall-clock per metrics row
  EmNetwork network;
  EvalSummary test_student;
  EvalSummary test_teacher;
  bool aborted = false;
  std::string abort_reason;
};

/// Full training run. When `run_dir` is set, writes metrics.csv, timing.csv,
/// loss_curve.svg, periodic checkpoints and checkpoint-final.txt there.
TrainingResult run_training(const RunConfig& config, const std::optional<std::filesystem::path>& run_dir,
                            std::ostream* log = nullptr);

/// Run directory for a config: explicit --out, else $EMNET_OUT_ROOT or ./runs,
/// plus a name derived from task and seed.
std::filesystem::path resolve_run_dir(const RunConfig& config, const std::optional<std::string>& out);

// Verification suites.
struct SuiteLine {
  std::string name;
  std::size_t cases = 0;
  double max_deviation = 0.0;
  double threshold = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::vector<SuiteLine> lines;
  bool passed() const;
  void print(std::ostream& out) const;
};

/// DP versus enumeration (loss and posterior). `corrupt_dp` perturbs the DP
/// values as a negative control.
SuiteReport run_ctc_suite(std::size_t instances, std::uint64_t seed, bool corrupt_dp = false);

inline constexpr double kGradSuiteThreshold = 1e-4;
SuiteReport run_grad_suite(std::size_t instances, std::uint64_t seed);

/// Lower-bound sweep over random toy networks plus the tightness and
/// identity checks. Writes one CSV row per random instance when `csv` is set.
SuiteReport run_bound_suite(std::size_t instances, std::uint64_t seed, std::ostream* csv = nullptr);

enum class DumpKind { kAlignment, kAttention };
/// Writes the requested CSV for example `example_id` of the checkpoint's dataset.
void dump_example(const Checkpoint& ckpt, int example_id, DumpKind kind, std::ostream& out);

}  // namespace emnet
