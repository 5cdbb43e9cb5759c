// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criteria 6-8 train the default configurations for five seeds each.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "emnet/error.hpp"
#include "emnet/harness.hpp"

using namespace emnet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) { return format_number(v); }

std::string join(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "FAILED: ") + what);
  }
};

void report(int id, const std::string& title, const Verdict& v, std::map<int, bool>& results) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << "\n";
  for (const auto& n : v.notes) std::cout << "    " << n << "\n";
  std::cout.flush();
  results[id] = v.pass;
}

void require_suite(Verdict& v, const SuiteReport& r) {
  for (const auto& l : r.lines) {
    v.require(l.passed, l.name + ": max deviation " + fmt(l.max_deviation) + " <= " + fmt(l.threshold) + " over " +
                            std::to_string(l.cases) + " cases" + (l.detail.empty() ? "" : " (" + l.detail + ")"));
  }
}

// 1
Verdict ctc_oracle() {
  Verdict v;
  const auto t0 = Clock::now();
  require_suite(v, run_ctc_suite(100, 1));
  const double secs = seconds_since(t0);
  v.require(secs <= 60.0, "runtime " + fmt(secs) + " s <= 60 s");
  return v;
}

// Independent CTC negative log-likelihood in extended precision: the
// alpha recursion over the blank-extended target in probability space.
// Central differences of this function carry about 1e-3 of the round-off of
// a double evaluation, which matters for coordinates with tiny gradients.
long double ctc_nll_extended(const Tensor& u, const Tokens& y) {
  const std::size_t t_len = u.rows(), k = u.cols();
  std::vector<int> ext{0};
  for (int t : y) {
    ext.push_back(t);
    ext.push_back(0);
  }
  const std::size_t s_len = ext.size();
  std::vector<long double> prob(t_len * k);
  for (std::size_t t = 0; t < t_len; ++t) {
    long double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<long double>(u.at(t, j)));
    for (std::size_t j = 0; j < k; ++j) prob[t * k + j] = std::exp(static_cast<long double>(u.at(t, j))) / z;
  }
  std::vector<long double> alpha(s_len, 0.0L), next(s_len);
  alpha[0] = prob[0];
  if (s_len > 1) alpha[1] = prob[static_cast<std::size_t>(ext[1])];
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      long double a = alpha[s];
      if (s >= 1) a += alpha[s - 1];
      if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]) a += alpha[s - 2];
      next[s] = a * prob[t * k + static_cast<std::size_t>(ext[s])];
    }
    alpha.swap(next);
  }
  const long double total = alpha[s_len - 1] + (s_len > 1 ? alpha[s_len - 2] : 0.0L);
  return -std::log(total);
}

// 2
Verdict gradient_fidelity() {
  Verdict v;
  std::mt19937_64 rng(2);
  double worst = 0.0, worst_plain = 0.0;
  for (int n = 0; n < 50; ++n) {
    const int k = std::uniform_int_distribution<int>(2, 5)(rng);
    const int len = std::uniform_int_distribution<int>(1, 4)(rng);
    Tokens y;
    for (int i = 0; i < len; ++i) y.push_back(std::uniform_int_distribution<int>(1, k - 1)(rng));
    const std::size_t frames = min_frames(y) + std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    Tensor u({frames, static_cast<std::size_t>(k)});
    std::normal_distribution<double> normal(0.0, 1.5);
    for (auto& x : u.mutable_values()) x = normal(rng);
    // Analytic gradient softmax(u) - sigma against central differences.
    const Tensor analytic = ctc_grad(u, y);
    Tensor probe = u.detach();
    for (std::size_t i = 0; i < u.numel(); ++i) {
      const double keep = probe.at(i);
      probe.mutable_values()[i] = keep + kGradCheckStep;
      const long double up = ctc_nll_extended(probe, y);
      const double up_plain = ctc_loss_dp(probe, y);
      probe.mutable_values()[i] = keep - kGradCheckStep;
      const long double down = ctc_nll_extended(probe, y);
      const double down_plain = ctc_loss_dp(probe, y);
      probe.mutable_values()[i] = keep;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<long double>(kGradCheckStep)));
      const double numeric_plain = (up_plain - down_plain) / (2 * kGradCheckStep);
      worst = std::max(worst, std::abs(analytic.at(i) - numeric) / std::max(1e-8, std::abs(numeric)));
      worst_plain = std::max(worst_plain,
                             std::abs(analytic.at(i) - numeric_plain) / std::max(1e-8, std::abs(numeric_plain)));
    }
  }
  v.require(worst <= 1e-5, "ctc_grad vs central differences (h = 1e-5, extended-precision loss), 50 instances: "
                           "max relative error " + fmt(worst) + " <= 1e-5");
  v.notes.push_back("same differences of the double-precision DP loss: max relative error " + fmt(worst_plain) +
                    " (round-off floor, reported only)");
  // The toy model and instance count are those of `emnet grad-check` with its defaults.
  const SuiteReport suite = run_grad_suite(20, 1);
  for (const auto& l : suite.lines) {
    if (l.name.rfind("full objective", 0) != 0) continue;
    v.require(l.passed, l.name + " (d=8, one layer per stack): max relative error " + fmt(l.max_deviation) +
                            " <= 1e-4 over " + std::to_string(l.cases) + " coordinates");
  }
  return v;
}

// 3
Verdict lower_bound() {
  Verdict v;
  require_suite(v, run_bound_suite(200, 3));
  return v;
}

// 4
Verdict masking() {
  Verdict v;
  std::mt19937_64 rng(4);
  const int mask_id = 99;
  Tokens y(100000);
  for (auto& t : y) t = std::uniform_int_distribution<int>(0, 11)(rng);
  const auto none = mask_target(y, 0.0, mask_id, rng);
  v.require(none.tokens == y, "lambda = 0 returns the target unchanged");
  const auto all = mask_target(y, 1.0, mask_id, rng);
  v.require(std::all_of(all.tokens.begin(), all.tokens.end(), [&](int t) { return t == mask_id; }),
            "lambda = 1 masks every token");
  const auto half = mask_target(y, 0.5, mask_id, rng);
  const double frac =
      static_cast<double>(std::count(half.masked.begin(), half.masked.end(), true)) / static_cast<double>(y.size());
  v.require(frac >= 0.49 && frac <= 0.51, "lambda = 0.5 over 1e5 tokens: masked fraction " + fmt(frac) +
                                              " in [0.49, 0.51]");
  return v;
}

// 5
Verdict structural_reductions() {
  Verdict v;
  RunConfig config = default_run_config(Task::kCtc);
  config.dataset_size = 200;
  config.finalize();
  const Dataset data = generate_dataset(config);
  const auto train = select_split(data, Split::kTrain);
  const TrainConfig& tc = config.train;

  {
    EmNetwork net(tc.model, 5);
    zero_fusion(net.params());
    tie_teacher_head(net.params());
    BatchIterator it(train, 16, 5);
    std::mt19937_64 rng(5);
    bool equal = true, kd_zero = true;
    for (int b = 0; b < 5; ++b) {
      const Batch batch = it.next();
      const auto masks = draw_masks(batch, tc.lambda_mask, net.mask_id(), rng);
      const LossBreakdown l = compute_losses(net, batch, tc, masks).values();
      equal = equal && l.l_em == l.l_org;
      kd_zero = kd_zero && l.l_kd == 0.0;
    }
    v.require(equal, "fusion reduced to identity and heads tied: L_em == L_org bit for bit on 5 CTC batches");
    v.require(kd_zero, "same configuration: L_kd == 0 exactly");

    EmNetwork cross_only(tc.model, 6);
    zero_fusion_cross_attention(cross_only.params());
    const Example& ex = *train.front();
    const Tokens other(ex.y.size(), cross_only.mask_id());
    const auto a = ctc_outputs(cross_only, ex.x, ex.y), b = ctc_outputs(cross_only, ex.x, other);
    const auto av = a.teacher.values(), bv = b.teacher.values();
    v.require(std::equal(av.begin(), av.end(), bv.begin(), bv.end()),
              "cross-attention output zeroed: teacher logits no longer depend on the oracle input");
  }

  {
    TrainConfig zero_alpha = tc;
    zero_alpha.alpha = 0.0;
    const EmNetwork net(tc.model, 7);
    BatchIterator it(train, 16, 7);
    std::mt19937_64 rng(7);
    bool exact = true;
    for (int b = 0; b < 5; ++b) {
      const Batch batch = it.next();
      const auto masks = draw_masks(batch, tc.lambda_mask, net.mask_id(), rng);
      const LossBreakdown l = compute_losses(net, batch, zero_alpha, masks).values();
      exact = exact && l.l_kd > 0.0 && l.l_total == l.l_org + l.l_em;
    }
    v.require(exact, "alpha = 0: L_total == L_org + L_em exactly while L_kd > 0, on 5 batches");
  }

  for (Task task : {Task::kCtc, Task::kAed}) {
    RunConfig c = default_run_config(task);
    c.dataset_size = 300;
    c.finalize();
    const Dataset d = generate_dataset(c);
    const auto items = select_split(d, Split::kTrain);
    EmNetwork net(c.train.model, 8);
    Adam opt(net.params(), {c.train.lr, c.train.warmup_steps});
    BatchIterator it(items, static_cast<std::size_t>(c.train.batch_size), 8);
    std::mt19937_64 rng(8);
    double worst = 0.0;
    const int steps = 60;
    for (int s = 0; s < steps; ++s) {
      const LossBreakdown l = train_step(net, opt, it.next(), c.train, rng).losses;
      worst = std::max(worst, std::abs(l.l_total - (l.l_org + l.l_em + c.train.alpha * l.l_kd)));
    }
    v.require(worst <= 1e-12, std::string(task_name(task)) + ": |L_total - (L_org + L_em + alpha L_kd)| <= " +
                                  fmt(worst) + " on every one of " + std::to_string(steps) + " training steps");
  }
  return v;
}

struct SeedRun {
  std::uint64_t seed = 0;
  double seconds = 0.0;
  CurveCheck curve;
  double ter_student = 0.0;
  double ter_teacher = 0.0;
  double repetition = 0.0;
};

struct Runs {
  std::vector<SeedRun> em;
  std::vector<SeedRun> baseline;
};

SeedRun train_seed(RunConfig config, std::uint64_t seed, bool fusion, const fs::path& root) {
  config.train.seed = seed;
  if (!fusion) {
    config.train.fusion = false;
    config.train.alpha = 0.0;
  }
  config.finalize();
  const fs::path dir = root / (std::string(task_name(config.task())) + (fusion ? "-em-" : "-baseline-") +
                               std::to_string(seed));
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const TrainingResult r = run_training(config, dir);
  SeedRun out;
  out.seed = seed;
  out.seconds = seconds_since(t0);
  if (r.aborted) throw NumericError("seed " + std::to_string(seed) + " aborted: " + r.abort_reason);
  std::vector<double> org, em;
  for (const auto& row : r.rows) {
    org.push_back(row.l_org);
    em.push_back(row.l_em);
  }
  out.curve = check_em_below_org(org, em);
  out.ter_student = r.test_student.ter;
  out.ter_teacher = r.test_teacher.ter;
  out.repetition = r.test_student.repetition;
  std::cout << "    trained " << dir.filename().string() << " in " << fmt(std::round(out.seconds * 10) / 10)
            << " s: student TER " << fmt(out.ter_student) << ", teacher TER " << fmt(out.ter_teacher)
            << ", repetition " << fmt(out.repetition) << "\n";
  std::cout.flush();
  return out;
}

Runs train_task(Task task, bool with_baseline, const fs::path& root) {
  Runs runs;
  const RunConfig config = default_run_config(task);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) runs.em.push_back(train_seed(config, seed, true, root));
  if (with_baseline) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) runs.baseline.push_back(train_seed(config, seed, false, root));
  }
  return runs;
}

std::vector<double> field(const std::vector<SeedRun>& runs, double SeedRun::*member) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.*member);
  return out;
}

// 6
Verdict late_curve(const Runs& ctc) {
  Verdict v;
  int below = 0;
  double slowest = 0.0;
  for (const auto& r : ctc.em) {
    below += r.curve.em_below_org ? 1 : 0;
    slowest = std::max(slowest, r.seconds);
    v.notes.push_back("seed " + std::to_string(r.seed) + ": mean L_em " + fmt(r.curve.mean_em) + " vs mean L_org " +
                      fmt(r.curve.mean_org) + " over the final " + std::to_string(r.curve.rows) + " metrics rows");
  }
  v.require(below >= 4, std::to_string(below) + " of 5 seeds have L_em below L_org over the final 20% of steps");
  v.require(slowest <= 600.0, "slowest seed " + fmt(std::round(slowest)) + " s <= 600 s");
  return v;
}

// 7
Verdict distillation_benefit(const Runs& ctc, const Runs& aed) {
  Verdict v;
  const std::pair<const char*, const Runs*> tasks[] = {{"ctc", &ctc}, {"aed", &aed}};
  for (const auto& [name, runs] : tasks) {
    const auto em = field(runs->em, &SeedRun::ter_student);
    const auto base = field(runs->baseline, &SeedRun::ter_student);
    const auto teacher = field(runs->em, &SeedRun::ter_teacher);
    v.require(median(em) < median(base), std::string(name) + ": median student TER " + fmt(median(em)) + " " +
                                             join(em) + " < baseline " + fmt(median(base)) + " " + join(base));
    v.require(median(teacher) <= median(em), std::string(name) + ": median teacher TER " + fmt(median(teacher)) +
                                                 " " + join(teacher) + " <= student " + fmt(median(em)));
  }
  return v;
}

// 8
Verdict repetition(const Runs& aed) {
  Verdict v;
  const Tokens abbc{1, 2, 2, 3}, aaa{1, 1, 1};
  v.require(repetition_ratio({abbc}) == 0.25, "\"a b b c\" -> " + fmt(repetition_ratio({abbc})));
  v.require(repetition_ratio({aaa}) == 2.0 / 3.0, "\"a a a\" -> " + fmt(repetition_ratio({aaa})));
  const auto em = field(aed.em, &SeedRun::repetition);
  const auto base = field(aed.baseline, &SeedRun::repetition);
  v.require(median(em) <= median(base), "aed: median student repetition ratio " + fmt(median(em)) + " " + join(em) +
                                            " <= baseline " + fmt(median(base)) + " " + join(base));
  return v;
}

// 9
Verdict determinism(const fs::path& root) {
  Verdict v;
  RunConfig c = default_run_config(Task::kCtc);
  c.train.steps = 60;
  c.dataset_size = 300;
  c.eval_every = 20;
  c.finalize();
  const fs::path a = root / "determinism-a", b = root / "determinism-b";
  fs::remove_all(a);
  fs::remove_all(b);
  const TrainingResult ra = run_training(c, a);
  run_training(c, b);
  const std::string ma = read_file(a / "metrics.csv");
  v.require(!ma.empty() && ma == read_file(b / "metrics.csv"), "identical config and seed: metrics.csv identical");

  const std::string original = read_file(a / "checkpoint-final.txt");
  const Checkpoint ckpt = load_checkpoint((a / "checkpoint-final.txt").string());
  std::ostringstream again;
  write_checkpoint(again, ckpt.config, ckpt.network, ckpt.step);
  v.require(!original.empty() && again.str() == original, "checkpoint load then save is byte identical (" +
                                                              std::to_string(original.size()) + " bytes)");

  for (Task task : {Task::kCtc, Task::kAed}) {
    RunConfig e = default_run_config(task);
    e.dataset_size = 300;
    e.finalize();
    const Dataset data = generate_dataset(e);
    const EmNetwork net(e.train.model, 9);
    const auto s = evaluate(net, select_split(data, Split::kTest), EvalMode::kStudent, e.train.lambda_mask, 9);
    v.require(s.rho_reads == 0 && s.target_reads == 0 && s.examples > 0,
              std::string(task_name(task)) + " student evaluation of " + std::to_string(s.examples) +
                  " examples: " + std::to_string(s.rho_reads) + " rho reads, " + std::to_string(s.target_reads) +
                  " target reads");
  }
  v.require(ra.test_student.rho_reads == 0 && ra.test_student.target_reads == 0,
            "trained run: student test evaluation made no rho or target reads");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string out = (fs::temp_directory_path() / "emnet-acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--out", out, "directory for training runs");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                            : std::set<int>(only.begin(), only.end());
  const fs::path root(out);
  fs::create_directories(root);

  std::map<int, bool> results;
  auto run = [&](int id, const std::string& title, auto&& fn) {
    if (!wanted.count(id)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    report(id, title, v, results);
  };

  run(1, "CTC forward-backward matches enumeration", ctc_oracle);
  run(2, "gradient fidelity", gradient_fidelity);
  run(3, "alignment lower bound", lower_bound);
  run(4, "target masking", masking);
  run(5, "structural reductions", structural_reductions);

  Runs ctc, aed;
  const bool need_ctc = wanted.count(6) || wanted.count(7);
  const bool need_aed = wanted.count(7) || wanted.count(8);
  try {
    if (need_ctc) ctc = train_task(Task::kCtc, wanted.count(7) > 0, root);
    if (need_aed) aed = train_task(Task::kAed, true, root);
  } catch (const std::exception& e) {
    std::cout << "training failed: " << e.what() << "\n";
    for (int id : {6, 7, 8}) {
      if (wanted.count(id)) report(id, "training runs", Verdict{false, {e.what()}}, results);
    }
    ctc = aed = {};
  }
  if (need_ctc && !ctc.em.empty()) run(6, "L_em below L_org late in training (default CTC task)", [&] {
    return late_curve(ctc);
  });
  if (!ctc.em.empty() && !aed.em.empty()) {
    run(7, "distillation benefit and teacher advantage", [&] { return distillation_benefit(ctc, aed); });
    run(8, "repetition ratio", [&] { return repetition(aed); });
  } else if (wanted.count(8)) {
    run(8, "repetition ratio", [&] { return repetition(aed); });
  }
  run(9, "determinism and persistence", [&] { return determinism(root); });

  int failed = 0;
  for (const auto& [id, ok] : results) failed += ok ? 0 : 1;
  std::cout << (failed ? "FAIL" : "PASS") << " acceptance: " << results.size() - failed << "/" << results.size()
            << " criteria\n";
  return failed ? 1 : 0;
}
