// SPDX-License-Identifier: Apache-2.0
#include "emnet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "emnet/error.hpp"

namespace emnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v, const char* yes, const char* no) {
  if (v == yes) return true;
  if (v == no) return false;
  throw ConfigError("key '" + key + "': expected " + yes + " or " + no + ", got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define EMNET_INT(name, member)                                                                       \
  Field {                                                                                             \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                                \
        [](RunConfig& c, const std::string& v) { c.member = parse_int<decltype(c.member)>(name, v); } \
  }
#define EMNET_REAL(name, member)                                                 \
  Field {                                                                        \
    name, [](const RunConfig& c) { return format_number(c.member); },            \
        [](RunConfig& c, const std::string& v) { c.member = parse_real(name, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"task", [](const RunConfig& c) { return std::string(task_name(c.train.model.task)); },
       [](RunConfig& c, const std::string& v) { c.train.model.task = parse_task(v); }},
      EMNET_INT("seed", train.seed),
      EMNET_INT("steps", train.steps),
      EMNET_INT("batch_size", train.batch_size),
      EMNET_REAL("lr", train.lr),
      EMNET_INT("warmup_steps", train.warmup_steps),
      EMNET_REAL("alpha", train.alpha),
      EMNET_REAL("lambda_mask", train.lambda_mask),
      {"kd_form", [](const RunConfig& c) { return std::string(c.train.kd_form == KdForm::kL2 ? "l2" : "kl"); },
       [](RunConfig& c, const std::string& v) {
         c.train.kd_form = parse_bool("kd_form", v, "l2", "kl") ? KdForm::kL2 : KdForm::kKl;
       }},
      {"stop_teacher_grad",
       [](const RunConfig& c) { return std::string(c.train.stop_teacher_grad ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) {
         c.train.stop_teacher_grad = parse_bool("stop_teacher_grad", v, "true", "false");
       }},
      EMNET_REAL("temperature", train.temperature),
      {"fusion", [](const RunConfig& c) { return std::string(c.train.fusion ? "on" : "off"); },
       [](RunConfig& c, const std::string& v) { c.train.fusion = parse_bool("fusion", v, "on", "off"); }},
      EMNET_INT("d_model", train.model.d_model),
      EMNET_INT("enc_layers", train.model.enc_layers),
      EMNET_INT("dec_layers", train.model.dec_layers),
      EMNET_INT("heads", train.model.heads),
      EMNET_INT("ff_dim", train.model.ff_dim),
      EMNET_INT("oracle_layers", train.model.oracle_layers),
      EMNET_INT("fusion_layers", train.model.fusion_layers),
      EMNET_INT("dataset_size", dataset_size),
      EMNET_INT("eval_every", eval_every),
      EMNET_INT("eval_limit", eval_limit),
      EMNET_INT("checkpoint_every", checkpoint_every),
      EMNET_INT("ctc.vocab", ctc.vocab),
      EMNET_INT("ctc.min_len", ctc.min_len),
      EMNET_INT("ctc.max_len", ctc.max_len),
      EMNET_INT("ctc.min_frames", ctc.min_frames_per_token),
      EMNET_INT("ctc.max_frames", ctc.max_frames_per_token),
      EMNET_INT("ctc.feat_dim", ctc.feat_dim),
      EMNET_REAL("ctc.noise", ctc.noise),
      EMNET_REAL("ctc.ambiguity", ctc.ambiguity),
      EMNET_INT("ctc.seed", ctc.seed),
      EMNET_INT("aed.vocab", aed.vocab),
      EMNET_INT("aed.min_len", aed.min_len),
      EMNET_INT("aed.max_len", aed.max_len),
      {"aed.rule", [](const RunConfig& c) { return std::string(rule_name(c.aed.rule)); },
       [](RunConfig& c, const std::string& v) { c.aed.rule = parse_rule(v); }},
      EMNET_REAL("aed.copy_noise", aed.copy_noise),
      EMNET_INT("aed.seed", aed.seed),
      EMNET_INT("fault.nan_at_step", fault_nan_at_step),
  };
  return table;
}

#undef EMNET_INT
#undef EMNET_REAL

}  // namespace

std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig default_run_config(Task task) {
  RunConfig c;
  c.train.model.task = task;
  if (task == Task::kCtc) {
    c.train.alpha = 2.0;
    c.train.lambda_mask = 0.0;
    c.train.kd_form = KdForm::kL2;
    c.train.steps = 300;
    c.eval_every = 30;  // ten metrics rows, so the last two cover the final 20% of steps
  } else {
    c.train.alpha = 5.0;
    c.train.lambda_mask = 0.5;
    c.train.kd_form = KdForm::kKl;
    c.train.steps = 1500;
  }
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  if (task() == Task::kCtc) {
    ctc.validate();
    train.model.vocab = ctc.vocab;
    train.model.feat_dim = ctc.feat_dim;
  } else {
    aed.validate();
    train.model.vocab = aed.vocab;
  }
  train.validate();
  if (dataset_size < 10) throw ConfigError("dataset_size must be at least 10");
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (fault_nan_at_step < 0) throw ConfigError("fault.nan_at_step must be non-negative");
}

int RunConfig::checkpoint_interval() const {
  if (checkpoint_every > 0) return checkpoint_every;
  return std::max(1, train.steps / 5);
}

RunConfig parse_run_config(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    bool known = false;
    for (const auto& k : config_keys()) known = known || k == key;
    if (!known) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (seen.count(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key + "' repeats line " +
                        std::to_string(seen[key]));
    }
    if (value.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key '" + key + "' has no value");
    seen[key] = line_no;
    entries.emplace_back(std::move(key), std::move(value));
  }
  Task task = Task::kCtc;
  for (const auto& [k, v] : entries)
    if (k == "task") task = parse_task(v);
  RunConfig config = default_run_config(task);
  for (const auto& [k, v] : entries) {
    for (const auto& f : fields())
      if (f.key == k) f.set(config, v);
  }
  config.finalize();
  return config;
}

RunConfig parse_run_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  return parse_run_config(in);
}

std::string format_run_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace emnet
