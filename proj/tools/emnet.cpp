// SPDX-License-Identifier: Apache-2.0
//
// emnet: train, evaluate and verify target-aware distillation models on the
// synthetic tasks.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "emnet/error.hpp"
#include "emnet/harness.hpp"

namespace fs = std::filesystem;
using namespace emnet;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

RunConfig load_config(const Globals& g, Task fallback = Task::kCtc) {
  RunConfig c = g.config_path.empty() ? default_run_config(fallback) : load_run_config(g.config_path);
  if (g.seed) {
    c.train.seed = *g.seed;
    c.finalize();
  }
  return c;
}

// Writes to <out>/<name> when --out is given, else to stdout.
template <typename Fn>
void emit(const Globals& g, const std::string& name, Fn&& fn) {
  if (!g.out) {
    fn(std::cout);
    return;
  }
  fs::create_directories(*g.out);
  const fs::path path = fs::path(*g.out) / name;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  fn(f);
  std::cout << "wrote " << path.string() << "\n";
}

void print_eval(const EvalSummary& s) {
  std::cout << "mode " << (s.mode == EvalMode::kStudent ? "student" : "teacher") << "\n"
            << "examples " << s.examples << "\n"
            << "ter " << format_number(s.ter) << "\n"
            << "exact_match " << format_number(s.exact_match) << "\n"
            << "repetition_ratio " << format_number(s.repetition) << "\n"
            << "rho_reads_during_prediction " << s.rho_reads << "\n"
            << "target_reads_during_prediction " << s.target_reads << "\n";
}

int finish(const SuiteReport& report) {
  report.print(std::cout);
  return report.passed() ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"target-aware distillation: training and verification on synthetic sequence tasks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "run configuration file (key = value lines)");
  app.add_option("--seed", g.seed, "override the configured seed");
  app.add_option("--out", g.out, "output directory");

  auto* train = app.add_subcommand("train", "train a model and write metrics, plots and checkpoints");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path, mode = "student", split = "test", dataset_path;
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--mode", mode, "student or teacher")->check(CLI::IsMember({"student", "teacher"}));
  eval->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--dataset", dataset_path, "dataset text file (default: regenerate from the checkpoint config)");

  auto* check_ctc = app.add_subcommand("check-ctc", "forward-backward vs exhaustive enumeration");
  std::size_t ctc_instances = 100;
  bool corrupt_dp = false;
  check_ctc->add_option("--instances", ctc_instances, "random instances");
  check_ctc->add_flag("--corrupt-dp", corrupt_dp, "negative control: perturb the DP values");

  auto* grad_check = app.add_subcommand("grad-check", "analytic gradients vs central differences");
  std::size_t grad_instances = 20;
  grad_check->add_option("--instances", grad_instances, "random instances for the loss-level checks");

  auto* bound_check = app.add_subcommand("bound-check", "Jensen lower bound sweep");
  std::size_t bound_instances = 200;
  bound_check->add_option("--instances", bound_instances, "random instances");

  auto* dump = app.add_subcommand("dump", "alignment or cross-attention CSV for one example");
  int example_id = 0;
  std::string what = "alignment";
  dump->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  dump->add_option("--example", example_id, "example id")->required();
  dump->add_option("--what", what, "alignment or attention")->check(CLI::IsMember({"alignment", "attention"}));

  auto* gen_data = app.add_subcommand("gen-data", "export the configured dataset as text");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const std::uint64_t suite_seed = g.seed.value_or(1);
    if (*train) {
      const RunConfig config = load_config(g);
      const fs::path dir = resolve_run_dir(config, g.out);
      std::cout << "run directory " << dir.string() << "\n";
      const auto result = run_training(config, dir, &std::cout);
      if (result.aborted) {
        std::cerr << "training aborted: " << result.abort_reason << "\n";
        return kExitFailure;
      }
      std::cout << "test_ter_student " << format_number(result.test_student.ter) << "\n"
                << "test_ter_teacher " << format_number(result.test_teacher.ter) << "\n"
                << "test_repetition_ratio " << format_number(result.test_student.repetition) << "\n";
      const auto counts = count_params(result.network.params());
      std::cout << "params theta " << counts.theta << " rho " << counts.rho << " phi " << counts.phi() << "\n";
      return kExitOk;
    }
    if (*eval) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      Dataset data;
      if (dataset_path.empty()) {
        data = generate_dataset(ckpt.config);
      } else {
        std::ifstream in(dataset_path);
        if (!in) throw IoError("cannot read dataset '" + dataset_path + "'");
        data = read_dataset(in);
      }
      const auto examples = select_split(data, parse_split(split));
      const auto s = evaluate(ckpt.network, examples, mode == "student" ? EvalMode::kStudent : EvalMode::kTeacher,
                              ckpt.config.train.lambda_mask, ckpt.config.train.seed);
      print_eval(s);
      return kExitOk;
    }
    if (*check_ctc) return finish(run_ctc_suite(ctc_instances, suite_seed, corrupt_dp));
    if (*grad_check) return finish(run_grad_suite(grad_instances, suite_seed));
    if (*bound_check) {
      SuiteReport report;
      emit(g, "bounds.csv", [&](std::ostream& csv) { report = run_bound_suite(bound_instances, suite_seed, &csv); });
      return finish(report);
    }
    if (*dump) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const DumpKind kind = what == "alignment" ? DumpKind::kAlignment : DumpKind::kAttention;
      emit(g, what + "-" + std::to_string(example_id) + ".csv",
           [&](std::ostream& out) { dump_example(ckpt, example_id, kind, out); });
      return kExitOk;
    }
    if (*gen_data) {
      const RunConfig config = load_config(g);
      const Dataset data = generate_dataset(config);
      emit(g, "dataset.txt", [&](std::ostream& out) {
        write_dataset(out, data, config.task(), static_cast<std::size_t>(config.ctc.feat_dim));
      });
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitConfig;
}
