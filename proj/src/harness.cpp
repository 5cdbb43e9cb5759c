// SPDX-License-Identifier: Apache-2.0
#include "emnet/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "emnet/error.hpp"

namespace emnet {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sd) {
  std::normal_distribution<double> gauss(0.0, sd);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = gauss(rng);
  return Tensor({rows, cols}, std::move(v));
}

Tokens random_target(std::mt19937_64& rng, int vocab, int max_len) {
  const int len = std::uniform_int_distribution<int>(1, max_len)(rng);
  Tokens y;
  for (int i = 0; i < len; ++i) y.push_back(std::uniform_int_distribution<int>(1, vocab - 1)(rng));
  return y;
}

double parse_field(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("metrics: bad number '" + s + "'");
  return v;
}

}  // namespace

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double token_error_rate(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  if (hypotheses.size() != references.size()) throw ContractError("token_error_rate: size mismatch");
  std::size_t errors = 0, length = 0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    errors += edit_distance(hypotheses[i], references[i]);
    length += references[i].size();
  }
  if (length == 0) throw ContractError("token_error_rate: empty references");
  return static_cast<double>(errors) / static_cast<double>(length);
}

void write_metrics(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << kMetricsVersionLine << "\n" << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_number(r.l_org) << ',' << format_number(r.l_em) << ',' << format_number(r.l_kd)
        << ',' << format_number(r.l_total) << ',' << format_number(r.dev_ter_student) << ','
        << format_number(r.dev_ter_teacher) << ',' << format_number(r.rep_ratio) << "\n";
  }
}

std::vector<MetricsRow> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsVersionLine) throw FormatError("metrics: missing version line");
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics: unexpected header '" + line + "'");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw FormatError("metrics: expected 8 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.step = static_cast<int>(parse_field(f[0]));
    r.l_org = parse_field(f[1]);
    r.l_em = parse_field(f[2]);
    r.l_kd = parse_field(f[3]);
    r.l_total = parse_field(f[4]);
    r.dev_ter_student = parse_field(f[5]);
    r.dev_ter_teacher = parse_field(f[6]);
    r.rep_ratio = parse_field(f[7]);
    rows.push_back(r);
  }
  return rows;
}

void write_loss_svg(std::ostream& out, const std::vector<MetricsRow>& rows) {
  const double w = 640, h = 400, left = 60, right = 20, top = 20, bottom = 50;
  double max_step = 1, max_loss = 1e-12;
  for (const auto& r : rows) {
    max_step = std::max(max_step, static_cast<double>(r.step));
    max_loss = std::max({max_loss, r.l_org, r.l_em, r.l_kd});
  }
  auto px = [&](double step) { return left + (w - left - right) * step / max_step; };
  auto py = [&](double loss) { return h - bottom - (h - top - bottom) * loss / max_loss; };
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (w + left) / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">step</text>\n";
  out << "<text x=\"" << left << "\" y=\"" << h - bottom + 18 << "\" text-anchor=\"middle\">0</text>\n";
  out << "<text x=\"" << w - right << "\" y=\"" << h - bottom + 18 << "\" text-anchor=\"middle\">"
      << static_cast<long>(max_step) << "</text>\n";
  out << "<text x=\"" << left - 6 << "\" y=\"" << top + 5 << "\" text-anchor=\"end\">" << std::setprecision(3)
      << max_loss << "</text>\n" << std::setprecision(2);
  out << "<text x=\"" << left - 6 << "\" y=\"" << h - bottom << "\" text-anchor=\"end\">0</text>\n";
  struct Series {
    const char* name;
    const char* color;
    double MetricsRow::*field;
  };
  const Series series[] = {{"L_org", "#1f77b4", &MetricsRow::l_org},
                           {"L_em", "#d62728", &MetricsRow::l_em},
                           {"L_kd", "#2ca02c", &MetricsRow::l_kd}};
  double legend_y = top + 10;
  for (const auto& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out << (i ? " " : "") << px(rows[i].step) << ',' << py(rows[i].*s.field);
    }
    out << "\"/>\n";
    out << "<text x=\"" << w - right - 60 << "\" y=\"" << legend_y << "\" fill=\"" << s.color << "\">" << s.name
        << "</text>\n";
    legend_y += 16;
  }
  out << "</svg>\n";
}

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / "run.lock") {
  std::filesystem::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) throw IoError("run directory '" + dir.string() + "' is locked by another run (" + path_.string() + ")");
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

Tokens teacher_oracle_input(const EmNetwork& net, const Example& ex, double lambda, std::uint64_t seed) {
  std::mt19937_64 rng(mix(mix(seed, 13), static_cast<std::uint64_t>(ex.id) + 1));
  return mask_target(ex.y, lambda, net.mask_id(), rng).tokens;
}

namespace {

// Hands out sources freely and counts every target read.
class ExampleAccess {
 public:
  explicit ExampleAccess(const std::vector<const Example*>& examples) : examples_(examples) {}
  std::size_t size() const { return examples_.size(); }
  const Source& source(std::size_t i) const { return examples_[i]->x; }
  const Example& with_target(std::size_t i) {
    ++target_reads_;
    return *examples_[i];
  }
  std::size_t target_reads() const { return target_reads_; }

 private:
  const std::vector<const Example*>& examples_;
  std::size_t target_reads_ = 0;
};

}  // namespace

EvalSummary evaluate(const EmNetwork& net, const std::vector<const Example*>& examples, EvalMode mode,
                     double lambda, std::uint64_t seed) {
  if (examples.empty()) throw ContractError("evaluate: no examples");
  EvalSummary s;
  s.mode = mode;
  s.examples = examples.size();
  ExampleAccess access(examples);
  net.params().reset_reads();
  for (std::size_t i = 0; i < access.size(); ++i) {
    if (mode == EvalMode::kStudent) {
      s.predictions.push_back(net.predict(access.source(i)));
    } else {
      const Tokens oracle = teacher_oracle_input(net, access.with_target(i), lambda, seed);
      s.predictions.push_back(net.predict_teacher(access.source(i), oracle));
    }
  }
  s.rho_reads = net.params().reads(ParamGroup::kAuxiliary);
  s.target_reads = access.target_reads();

  std::vector<Tokens> refs;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < access.size(); ++i) {
    refs.push_back(access.with_target(i).y);
    exact += refs.back() == s.predictions[i] ? 1 : 0;
  }
  s.ter = token_error_rate(s.predictions, refs);
  s.exact_match = static_cast<double>(exact) / static_cast<double>(refs.size());
  s.repetition = repetition_ratio(s.predictions);
  return s;
}

Dataset generate_dataset(const RunConfig& config) {
  return config.task() == Task::kCtc ? gen_ctc_dataset(config.ctc, config.dataset_size)
                                     : gen_aed_dataset(config.aed, config.dataset_size);
}

std::filesystem::path resolve_run_dir(const RunConfig& config, const std::optional<std::string>& out) {
  if (out) return *out;
  const char* root = std::getenv(kOutRootEnv);
  const std::filesystem::path base = root && *root ? root : "runs";
  return base / (std::string(task_name(config.task())) + "-seed" + std::to_string(config.train.seed) +
                 (config.train.fusion ? "" : "-baseline"));
}

TrainingResult run_training(const RunConfig& config, const std::optional<std::filesystem::path>& run_dir,
                            std::ostream* log) {
  const Dataset data = generate_dataset(config);
  const auto train = select_split(data, Split::kTrain);
  auto dev = select_split(data, Split::kDev);
  const auto test = select_split(data, Split::kTest);
  if (train.empty() || dev.empty() || test.empty()) throw ConfigError("dataset_size too small: an empty split");
  if (config.eval_limit > 0 && dev.size() > config.eval_limit) dev.resize(config.eval_limit);

  const TrainConfig& tc = config.train;
  TrainingResult result{{}, {}, EmNetwork(tc.model, tc.seed), {}, {}, false, {}};
  EmNetwork& net = result.network;
  Adam optimizer(net.params(), {tc.lr, tc.warmup_steps});
  BatchIterator batches(train, static_cast<std::size_t>(tc.batch_size), mix(tc.seed, 11));
  std::mt19937_64 mask_rng(mix(tc.seed, 12));
  const std::uint64_t eval_seed = tc.seed;

  std::unique_ptr<RunLock> lock;
  if (run_dir) {
    lock = std::make_unique<RunLock>(*run_dir);
    std::ofstream(*run_dir / "config.txt") << format_run_config(config);
  }
  auto checkpoint_path = [&](const std::string& name) { return (*run_dir / name).string(); };

  const auto t0 = std::chrono::steady_clock::now();
  LossBreakdown window;
  int window_n = 0;
  for (int step = 1; step <= tc.steps; ++step) {
    if (step == config.fault_nan_at_step) {
      net.params().entries().front().tensor.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    }
    StepResult r;
    try {
      r = train_step(net, optimizer, batches.next(), tc, mask_rng);
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      if (log) *log << "aborting: " << e.what() << "\n";
      break;
    }
    window.l_org += r.losses.l_org;
    window.l_em += r.losses.l_em;
    window.l_kd += r.losses.l_kd;
    window.l_total += r.losses.l_total;
    ++window_n;

    if (step % config.eval_every == 0 || step == tc.steps) {
      MetricsRow row;
      row.step = step;
      row.l_org = window.l_org / window_n;
      row.l_em = window.l_em / window_n;
      row.l_kd = window.l_kd / window_n;
      row.l_total = window.l_total / window_n;
      const auto student = evaluate(net, dev, EvalMode::kStudent, tc.lambda_mask, eval_seed);
      const auto teacher = evaluate(net, dev, EvalMode::kTeacher, tc.lambda_mask, eval_seed);
      row.dev_ter_student = student.ter;
      row.dev_ter_teacher = teacher.ter;
      row.rep_ratio = student.repetition;
      result.rows.push_back(row);
      result.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      window = {};
      window_n = 0;
      if (log) {
        *log << "step " << step << "  l_org " << format_number(row.l_org) << "  l_em " << format_number(row.l_em)
             << "  l_kd " << format_number(row.l_kd) << "  dev_ter " << format_number(row.dev_ter_student) << "\n";
      }
    }
    if (run_dir && step % config.checkpoint_interval() == 0 && step != tc.steps) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint-%06d.txt", step);
      save_checkpoint(checkpoint_path(name), config, net, step);
    }
  }

  if (!result.aborted) {
    result.test_student = evaluate(net, test, EvalMode::kStudent, tc.lambda_mask, eval_seed);
    result.test_teacher = evaluate(net, test, EvalMode::kTeacher, tc.lambda_mask, eval_seed);
  }
  if (run_dir) {
    if (!result.aborted) save_checkpoint(checkpoint_path("checkpoint-final.txt"), config, net, tc.steps);
    std::ofstream metrics(*run_dir / "metrics.csv", std::ios::binary);
    write_metrics(metrics, result.rows);
    std::ofstream timing(*run_dir / "timing.csv", std::ios::binary);
    timing << "step,seconds\n";
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
      timing << result.rows[i].step << ',' << format_number(result.step_seconds[i]) << "\n";
    }
    std::ofstream svg(*run_dir / "loss_curve.svg", std::ios::binary);
    write_loss_svg(svg, result.rows);
  }
  return result;
}

bool SuiteReport::passed() const {
  return std::all_of(lines.begin(), lines.end(), [](const SuiteLine& l) { return l.passed; });
}

void SuiteReport::print(std::ostream& out) const {
  for (const auto& l : lines) {
    out << (l.passed ? "PASS " : "FAIL ") << l.name << "  cases=" << l.cases
        << "  max_deviation=" << format_number(l.max_deviation) << "  threshold=" << format_number(l.threshold);
    if (!l.detail.empty()) out << "  " << l.detail;
    out << "\n";
  }
  out << (passed() ? "all suites passed" : "suite failure") << "\n";
}

SuiteReport run_ctc_suite(std::size_t instances, std::uint64_t seed, bool corrupt_dp) {
  std::mt19937_64 rng(seed);
  SuiteLine loss{"ctc loss: forward recursion vs enumeration", instances, 0.0, 1e-9, false, {}};
  SuiteLine post{"ctc posterior: forward-backward vs enumeration", instances, 0.0, 1e-9, false, {}};
  for (std::size_t n = 0; n < instances; ++n) {
    const int k = std::uniform_int_distribution<int>(2, 4)(rng);
    const Tokens y = random_target(rng, k, 4);
    const int frames = std::uniform_int_distribution<int>(static_cast<int>(min_frames(y)), 8)(rng);
    const Tensor u = random_matrix(rng, static_cast<std::size_t>(frames), static_cast<std::size_t>(k), 2.0);

    double dp = ctc_loss_dp(u, y);
    Tensor sigma = ctc_posterior(u, y);
    std::vector<double> sig(sigma.values().begin(), sigma.values().end());
    if (corrupt_dp) {
      dp += 1e-6;
      sig[0] += 1e-6;
    }
    loss.max_deviation = std::max(loss.max_deviation, std::abs(dp - ctc_loss_bruteforce(u, y)));

    const auto paths = enumerate_alignments(y, static_cast<std::size_t>(frames), Vocab(k));
    const auto logp = path_log_probs(u, paths);
    const double top = *std::max_element(logp.begin(), logp.end());
    std::vector<double> marg(sig.size(), 0.0);
    double z = 0.0;
    for (std::size_t p = 0; p < paths.size(); ++p) {
      const double w = std::exp(logp[p] - top);
      z += w;
      for (std::size_t t = 0; t < paths[p].size(); ++t) {
        marg[t * static_cast<std::size_t>(k) + static_cast<std::size_t>(paths[p][t])] += w;
      }
    }
    for (std::size_t i = 0; i < sig.size(); ++i) post.max_deviation = std::max(post.max_deviation, std::abs(sig[i] - marg[i] / z));
  }
  loss.passed = loss.max_deviation <= loss.threshold;
  post.passed = post.max_deviation <= post.threshold;
  if (corrupt_dp) loss.detail = post.detail = "(dp values deliberately perturbed)";
  return {{loss, post}};
}

namespace {

void record(SuiteLine& line, const GradCheckResult& g, const std::string& where) {
  ++line.cases;
  if (g.max_rel_error >= line.max_deviation) {
    line.max_deviation = g.max_rel_error;
    std::ostringstream d;
    d << "worst " << where << "[" << g.worst_index << "] analytic=" << format_number(g.worst_analytic)
      << " numeric=" << format_number(g.worst_numeric);
    line.detail = d.str();
  }
}

ModelConfig toy_model(Task task, int vocab) {
  ModelConfig m;
  m.task = task;
  m.vocab = vocab;
  m.feat_dim = 3;
  m.d_model = 8;
  m.heads = 2;
  m.ff_dim = 16;
  m.enc_layers = 1;
  m.dec_layers = 1;
  m.oracle_layers = 1;
  m.fusion_layers = 1;
  return m;
}

Dataset toy_examples(Task task, const ModelConfig& m, std::mt19937_64& rng, std::size_t n) {
  Dataset data;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.id = static_cast<int>(i);
    if (task == Task::kCtc) {
      ex.y = random_target(rng, m.vocab, 3);
      const std::size_t frames = min_frames(ex.y) + std::uniform_int_distribution<std::size_t>(0, 3)(rng);
      ex.x.features = random_matrix(rng, frames, static_cast<std::size_t>(m.feat_dim), 1.0);
    } else {
      const int len = std::uniform_int_distribution<int>(2, 4)(rng);
      for (int t = 0; t < len; ++t) ex.x.tokens.push_back(std::uniform_int_distribution<int>(0, m.vocab - 1)(rng));
      ex.y = random_target(rng, m.vocab, 4);
    }
    data.push_back(std::move(ex));
  }
  return data;
}

}  // namespace

SuiteReport run_grad_suite(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double thr = kGradSuiteThreshold;
  SuiteLine ctc{"ctc_grad vs finite differences", 0, 0.0, thr, false, {}};
  SuiteLine kd_l2{"kd l2 (student and teacher side)", 0, 0.0, thr, false, {}};
  SuiteLine kd_kl{"kd kl (student and teacher side)", 0, 0.0, thr, false, {}};
  SuiteLine kd_aed{"kd softmax KL, AED (student and teacher side)", 0, 0.0, thr, false, {}};
  SuiteLine full_ctc{"full objective, CTC, all of phi", 0, 0.0, thr, false, {}};
  SuiteLine full_aed{"full objective, AED, all of phi", 0, 0.0, thr, false, {}};

  for (std::size_t n = 0; n < instances; ++n) {
    const int k = std::uniform_int_distribution<int>(2, 5)(rng);
    const Tokens y = random_target(rng, k, 4);
    const std::size_t frames = min_frames(y) + std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    const Tensor u = random_matrix(rng, frames, static_cast<std::size_t>(k), 1.5);
    const Tensor v = random_matrix(rng, frames, static_cast<std::size_t>(k), 1.5);
    record(ctc, grad_check([&](const Tensor& a) { return ctc_loss(a, y); }, u), "logits");
    for (KdForm form : {KdForm::kL2, KdForm::kKl}) {
      SuiteLine& line = form == KdForm::kL2 ? kd_l2 : kd_kl;
      record(line, grad_check([&](const Tensor& a) { return kd_loss_ctc(softmax(a, 1), softmax(v, 1), form); }, u),
             "student");
      record(line, grad_check([&](const Tensor& b) { return kd_loss_ctc(softmax(u, 1), softmax(b, 1), form); }, v),
             "teacher");
    }
    record(kd_aed, grad_check([&](const Tensor& a) { return kd_loss_softmax(a, v, 1.0); }, u), "student");
    record(kd_aed, grad_check([&](const Tensor& b) { return kd_loss_softmax(u, b, 2.0); }, v), "teacher");
  }

  for (Task task : {Task::kCtc, Task::kAed}) {
    SuiteLine& line = task == Task::kCtc ? full_ctc : full_aed;
    const ModelConfig m = toy_model(task, task == Task::kCtc ? 4 : 5);
    EmNetwork net(m, rng());
    const Dataset data = toy_examples(task, m, rng, 2);
    std::vector<const Example*> items{&data[0], &data[1]};
    const Batch batch = make_batch(items);
    TrainConfig tc;
    tc.model = m;
    tc.alpha = task == Task::kCtc ? 2.0 : 5.0;
    tc.lambda_mask = task == Task::kCtc ? 0.0 : 0.5;
    tc.kd_form = task == Task::kCtc ? KdForm::kL2 : KdForm::kKl;
    const auto masks = draw_masks(batch, tc.lambda_mask, net.mask_id(), rng);
    std::vector<Tensor> leaves;
    std::vector<std::string> names;
    for (auto& e : net.params().entries()) {
      leaves.push_back(e.tensor);
      names.push_back(e.name);
    }
    const auto g = grad_check_leaves([&] { return compute_losses(net, batch, tc, masks).total; }, leaves);
    record(line, g, names.empty() ? "-" : names[g.worst_tensor]);
    line.cases = g.coordinates;
  }

  SuiteReport report{{ctc, kd_l2, kd_kl, kd_aed, full_ctc, full_aed}};
  for (auto& l : report.lines) l.passed = l.max_deviation <= l.threshold;
  return report;
}

SuiteReport run_bound_suite(std::size_t instances, std::uint64_t seed, std::ostream* csv) {
  std::mt19937_64 rng(seed);
  SuiteLine jensen{"jensen bound: slack >= -1e-9", instances, 0.0, kBoundTolerance, false, {}};
  SuiteLine tight{"equality case: teacher = student conditional, |slack| <= 1e-9", instances, 0.0, kBoundTolerance,
                  false, {}};
  SuiteLine kl{"path KL >= 0", instances, 0.0, kBoundTolerance, false, {}};
  SuiteLine ident{"Q = -KL - H + sum q log M", instances, 0.0, kBoundTolerance, false, {}};
  if (csv) write_bound_header(*csv);
  double min_slack = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < instances; ++n) {
    const BoundInstance inst = random_bound_instance(rng);
    const EmNetwork net(inst.config, inst.param_seed);
    const auto out = ctc_outputs(net, inst.x, inst.y);
    // Every other instance sharpens both distributions so the sweep is not
    // confined to near-uniform freshly initialized outputs.
    const double gain = n % 2 == 0 ? 1.0 : 4.0;
    const Tensor teacher = scale(out.teacher, gain);
    const Tensor student = scale(out.student, gain);
    const BoundReport r = check_lower_bound(teacher, student, inst.y);
    if (csv) write_bound_row(*csv, r);
    min_slack = std::min(min_slack, r.slack);
    jensen.max_deviation = std::max(jensen.max_deviation, -r.slack);

    const BoundReport eq = check_lower_bound(student, student, inst.y);
    tight.max_deviation = std::max(tight.max_deviation, std::abs(eq.slack));

    const auto d = diagnose_alignments(teacher, student, inst.y);
    kl.max_deviation = std::max({kl.max_deviation, -d.kl_conditional, -d.kl_unnormalized});
    const double rhs = -d.kl_conditional - d.teacher_entropy + d.log_mass_term;
    ident.max_deviation = std::max(ident.max_deviation, std::abs(d.q_function - rhs));
  }
  jensen.max_deviation = std::max(0.0, jensen.max_deviation);
  kl.max_deviation = std::max(0.0, kl.max_deviation);
  jensen.detail = "min_slack=" + format_number(min_slack);

  // AED: the latent-free form is checked for consistency; the per-position
  // KL form is reported only.
  SuiteLine aed{"AED bound (B^-1(y) = {y}): slack == 0", 0, 0.0, kBoundTolerance, false, {}};
  std::size_t position_form_above = 0;
  for (std::size_t n = 0; n < std::min<std::size_t>(instances, 20); ++n) {
    const ModelConfig m = toy_model(Task::kAed, 5);
    const EmNetwork net(m, rng());
    const Dataset one = toy_examples(Task::kAed, m, rng, 1);
    std::mt19937_64 mrng(rng());
    const auto masked = mask_target(one[0].y, 0.5, net.mask_id(), mrng);
    const BoundReport r = check_lower_bound_aed(net, one[0].x, one[0].y, masked.tokens);
    aed.max_deviation = std::max(aed.max_deviation, std::abs(r.slack));
    position_form_above += r.position_kl_form > r.log_likelihood ? 1 : 0;
    ++aed.cases;
  }
  aed.detail = "per-position KL form above log-likelihood in " + std::to_string(position_form_above) + "/" +
               std::to_string(aed.cases) + " instances (not a bound)";

  SuiteReport report{{jensen, tight, kl, ident, aed}};
  for (auto& l : report.lines) l.passed = l.max_deviation <= l.threshold;
  return report;
}

void dump_example(const Checkpoint& ckpt, int example_id, DumpKind kind, std::ostream& out) {
  const Dataset data = generate_dataset(ckpt.config);
  auto it = std::find_if(data.begin(), data.end(), [&](const Example& e) { return e.id == example_id; });
  if (it == data.end()) {
    throw LookupError("unknown example id " + std::to_string(example_id) + " (dataset has " +
                      std::to_string(data.size()) + " examples)");
  }
  const EmNetwork& net = ckpt.network;
  const Tokens oracle = teacher_oracle_input(net, *it, ckpt.config.train.lambda_mask, ckpt.config.train.seed);
  if (kind == DumpKind::kAlignment) {
    dump_alignment(out, net, it->x, &oracle);
  } else {
    dump_attention(out, net, it->x, oracle);
  }
}

}  // namespace emnet
