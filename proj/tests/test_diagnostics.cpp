// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "emnet/diagnostics.hpp"
#include "emnet/error.hpp"
#include "emnet/harness.hpp"
#include "test_support.hpp"

using namespace emnet;
using emnet::testing::random_labels;
using emnet::testing::random_tensor;
using emnet::testing::uniform_int;

namespace {

struct CsvRow {
  std::size_t a = 0;
  std::size_t b = 0;
  double value = 0.0;
  std::string tag;
};

std::vector<CsvRow> parse_csv(const std::string& text, const std::string& header) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == header);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string f[4];
    for (auto& s : f) std::getline(ss, s, ',');
    rows.push_back({std::stoul(f[0]), std::stoul(f[1]), std::stod(f[2]), f[3]});
  }
  return rows;
}

// Sums of `value` grouped by (tag, a).
std::map<std::pair<std::string, std::size_t>, double> row_sums(const std::vector<CsvRow>& rows) {
  std::map<std::pair<std::string, std::size_t>, double> sums;
  for (const auto& r : rows) sums[{r.tag, r.a}] += r.value;
  return sums;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

// A CTC task small enough that every instance can be enumerated.
RunConfig tiny_ctc_run() {
  RunConfig c = default_run_config(Task::kCtc);
  c.ctc.vocab = 4;
  c.ctc.min_len = 1;
  c.ctc.max_len = 2;
  c.ctc.min_frames_per_token = 1;
  c.ctc.max_frames_per_token = 2;
  c.ctc.feat_dim = 4;
  c.ctc.ambiguity = 0.3;
  c.train.model.d_model = 16;
  c.train.model.ff_dim = 32;
  c.train.model.enc_layers = 1;
  c.train.steps = 300;
  c.train.batch_size = 8;
  c.dataset_size = 300;
  c.eval_every = 100;
  c.eval_limit = 30;
  c.finalize();
  return c;
}

}  // namespace

TEST_CASE("two-path KL by hand") {
  const double teacher[] = {0.9, 0.1};
  const double student[] = {0.5, 0.5};
  const PathKl kl = path_kl(teacher, student);
  const double expected = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  CHECK(kl.conditional == doctest::Approx(expected).epsilon(1e-14));
  CHECK(kl.conditional == doctest::Approx(0.3681).epsilon(1e-4));
  // Halving the student mass adds log 2 to the unnormalized form only.
  const double half[] = {0.25, 0.25};
  const PathKl h = path_kl(teacher, half);
  CHECK(h.conditional == doctest::Approx(expected));
  CHECK(h.unnormalized == doctest::Approx(expected + std::log(2.0)));
  CHECK(path_kl(student, student).conditional == 0.0);
}

TEST_CASE("alignment KL, Q-function and the bound by enumeration") {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 100; ++n) {
    const int k = uniform_int(rng, 2, 4);
    const Tokens y = random_labels(rng, k, 3);
    const auto t = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(min_frames(y)), 7));
    const Tensor teacher = random_tensor(rng, {t, static_cast<std::size_t>(k)}, 2.0);
    const Tensor student = random_tensor(rng, {t, static_cast<std::size_t>(k)}, 2.0);
    const AlignmentDiagnostics d = diagnose_alignments(teacher, student, y);
    CHECK(d.kl_conditional >= -1e-12);
    CHECK(d.kl_unnormalized >= d.kl_conditional - 1e-12);
    CHECK(d.q_function <= 0.0);
    CHECK(std::abs(d.q_function - (-d.kl_conditional - d.teacher_entropy + d.log_mass_term)) <= 1e-9);
    CHECK(d.log_likelihood == doctest::Approx(-ctc_loss_bruteforce(student, y)).epsilon(1e-12));
    CHECK(alignment_kl(teacher, student, y) == d.kl_conditional);
    CHECK(q_function(teacher, student, y) == d.q_function);

    const BoundReport r = check_lower_bound(teacher, student, y);
    CHECK(r.holds());
    CHECK(std::abs(r.slack - d.kl_conditional) <= 1e-9);
    CHECK(std::abs(alignment_kl(student, student, y)) <= 1e-9);
    CHECK(std::abs(check_lower_bound(student, student, y).slack) <= 1e-9);
  }
}

TEST_CASE("a deterministic teacher turns Q into a single path log-probability") {
  std::mt19937_64 rng(2);
  const Tokens y{1, 2};
  const AlignmentPath star{0, 1, 1, 2};
  Tensor teacher({4, 3}, 0.0);
  for (std::size_t f = 0; f < 4; ++f) teacher.mutable_values()[f * 3 + static_cast<std::size_t>(star[f])] = 60.0;
  const Tensor student = random_tensor(rng, {4, 3});
  const double log_p = path_log_probs(student, {star})[0];
  CHECK(q_function(teacher, student, y) == doctest::Approx(log_p).epsilon(1e-12));
  CHECK_THROWS_AS(diagnose_alignments(teacher, student, y, 10), RefusalError);
}

TEST_CASE("random network instances satisfy the bound") {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 50; ++n) {
    const BoundInstance inst = random_bound_instance(rng);
    CHECK(inst.x.features.rows() <= 8);
    CHECK(inst.config.vocab <= 4);
    const EmNetwork net(inst.config, inst.param_seed);
    CHECK(check_lower_bound(net, inst.x, inst.y, inst.y).holds());
  }
}

TEST_CASE("aed bound form") {
  std::mt19937_64 rng(4);
  ModelConfig m;
  m.task = Task::kAed;
  m.vocab = 5;
  m.d_model = 8;
  m.ff_dim = 16;
  m.enc_layers = 1;
  m.dec_layers = 1;
  const EmNetwork net(m, 5);
  Source x;
  x.tokens = {1, 4, 2};
  const Tokens y{3, 0, 2};
  const BoundReport r = check_lower_bound_aed(net, x, y, Tokens{3, net.mask_id(), 2});
  CHECK(r.slack == 0.0);
  CHECK(r.log_likelihood < 0.0);
  CHECK(std::isfinite(r.position_kl_form));
  CHECK_THROWS_AS(check_lower_bound_aed(EmNetwork(ModelConfig{}, 1), x, y, y), ContractError);
}

TEST_CASE("bound csv has one row per instance") {
  std::ostringstream out;
  const SuiteReport report = run_bound_suite(12, 7, &out);
  CHECK(report.passed());
  const std::string text = out.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 13);
  CHECK(text.rfind("loglik,bound,slack,entropy\n", 0) == 0);
}

TEST_CASE("alignment and attention dumps") {
  std::mt19937_64 rng(6);
  ModelConfig m;  // d = 32
  m.feat_dim = 4;
  const EmNetwork net(m, 7);
  for (std::size_t t : {3u, 7u, 12u}) {
    for (std::size_t l : {1u, 2u, 5u}) {
      Source x{random_tensor(rng, {t, 4}), {}};
      Tokens y;
      for (std::size_t i = 0; i < l; ++i) y.push_back(uniform_int(rng, 1, m.vocab - 1));

      std::ostringstream with_y, without_y;
      dump_alignment(with_y, net, x, &y);
      dump_alignment(without_y, net, x, nullptr);
      const auto rows = parse_csv(with_y.str(), "frame,label,prob,mode");
      CHECK(rows.size() == 2 * t * static_cast<std::size_t>(m.vocab));
      for (const auto& [key, s] : row_sums(rows)) CHECK(std::abs(s - 1.0) <= 1e-9);
      // The student grid does not depend on whether the target was supplied.
      const std::string a = with_y.str(), b = without_y.str();
      CHECK(a.substr(0, b.size()) == b);

      std::ostringstream att;
      const AttentionMaps maps = dump_attention(att, net, x, y);
      REQUIRE(maps.size() == 1);
      CHECK(maps[0].shape() == Shape{t, l});
      const auto att_rows = parse_csv(att.str(), "frame,token,score,layer");
      for (const auto& [key, s] : row_sums(att_rows)) CHECK(std::abs(s - 1.0) <= 1e-9);
      if (l > 1) {
        for (double v : maps[0].values()) CHECK(v < 2.0 / static_cast<double>(l));
      }
    }
  }
}

TEST_CASE("repetition ratio") {
  const int a = 1, b = 2, c = 3;
  CHECK(repetition_ratio({{a, b, b, c}}) == 0.25);
  CHECK(repetition_ratio({{a, a, a}}) == 2.0 / 3.0);
  CHECK(repetition_ratio({{a, b, c}, {c, b}}) == 0.0);
  CHECK(repetition_ratio({{}}) == 0.0);
  CHECK_THROWS_AS(repetition_ratio({}), ContractError);
}

TEST_CASE("curve check over the final window") {
  const std::vector<double> org{5, 4, 3, 2, 2, 2, 2, 2, 2, 2};
  const std::vector<double> em{6, 5, 4, 3, 3, 3, 3, 3, 1, 1};
  const CurveCheck c = check_em_below_org(org, em);
  CHECK(c.rows == 2);
  CHECK(c.mean_em == 1.0);
  CHECK(c.mean_org == 2.0);
  CHECK(c.em_below_org);
  CHECK_FALSE(check_em_below_org(org, em, 0.5).em_below_org);
  CHECK_THROWS_AS(check_em_below_org(org, std::vector<double>{1}), ContractError);
}

TEST_CASE("training tightens the bound and concentrates the teacher on valid labels") {
  const RunConfig config = tiny_ctc_run();
  const Dataset data = generate_dataset(config);
  const auto dev = select_split(data, Split::kDev);
  REQUIRE(dev.size() >= 10);
  auto slacks = [&](const EmNetwork& net) {
    std::vector<double> s;
    for (const Example* ex : dev) s.push_back(check_lower_bound(net, ex->x, ex->y, ex->y).slack);
    return s;
  };
  const EmNetwork fresh(config.train.model, config.train.seed);
  const TrainingResult trained = run_training(config, std::nullopt);
  REQUIRE_FALSE(trained.aborted);
  const auto before = slacks(fresh), after = slacks(trained.network);
  for (double s : after) CHECK(s >= -1e-9);
  CHECK(median(after) < median(before));

  // Teacher mass on labels of the extended target (blank plus y's labels).
  double on_support = 0.0;
  std::size_t frames = 0;
  for (const Example* ex : dev) {
    std::ostringstream out;
    dump_alignment(out, trained.network, ex->x, &ex->y);
    for (const auto& r : parse_csv(out.str(), "frame,label,prob,mode")) {
      if (r.tag != "teacher") continue;
      const bool valid = r.b == 0 || std::find(ex->y.begin(), ex->y.end(), static_cast<int>(r.b)) != ex->y.end();
      if (valid) on_support += r.value;
      if (r.b == 0) ++frames;
    }
  }
  CHECK(on_support / static_cast<double>(frames) > 0.95);
}
