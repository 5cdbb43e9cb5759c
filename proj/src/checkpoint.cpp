// SPDX-License-Identifier: Apache-2.0
#include "emnet/checkpoint.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "emnet/error.hpp"

namespace emnet {

namespace {

std::string next_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string("checkpoint truncated before ") + what);
  return line;
}

std::size_t parse_count(const std::string& line, const std::string& keyword) {
  const std::string prefix = keyword + " ";
  if (line.rfind(prefix, 0) != 0) throw FormatError("checkpoint: expected '" + keyword + " <n>', got '" + line + "'");
  std::size_t n = 0;
  const char* b = line.data() + prefix.size();
  const char* e = line.data() + line.size();
  auto res = std::from_chars(b, e, n);
  if (res.ec != std::errc() || res.ptr != e) throw FormatError("checkpoint: bad count in '" + line + "'");
  return n;
}

}  // namespace

void write_checkpoint(std::ostream& out, const RunConfig& config, const EmNetwork& net, int step) {
  const std::string cfg = format_run_config(config);
  std::size_t cfg_lines = 0;
  for (char ch : cfg) cfg_lines += ch == '\n' ? 1 : 0;
  out << "emnet-checkpoint " << kCheckpointVersion << "\n";
  out << "step " << step << "\n";
  out << "config " << cfg_lines << "\n" << cfg;
  const auto& entries = net.params().entries();
  out << "params " << entries.size() << "\n";
  for (const auto& e : entries) {
    out << "param " << e.name << ' ' << group_name(e.group) << ' ' << e.tensor.rank();
    for (auto d : e.tensor.shape()) out << ' ' << d;
    out << "\n";
    const auto v = e.tensor.values();
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_number(v[i]);
    out << "\n";
  }
  out << "end\n";
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string header = next_line(in, "the header");
  if (header.rfind("emnet-checkpoint ", 0) != 0) {
    throw FormatError("not an emnet checkpoint (first line '" + header.substr(0, 40) + "')");
  }
  const std::string version = header.substr(17);
  if (version != std::to_string(kCheckpointVersion)) {
    throw FormatError("unsupported checkpoint version '" + version + "' (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const int step = static_cast<int>(parse_count(next_line(in, "the step"), "step"));
  const std::size_t cfg_lines = parse_count(next_line(in, "the config"), "config");
  std::string cfg;
  for (std::size_t i = 0; i < cfg_lines; ++i) cfg += next_line(in, "the end of the config") + "\n";
  RunConfig config;
  try {
    config = parse_run_config_text(cfg);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint version 1: embedded config is invalid: ") + e.what());
  }

  ParamStore store;
  const std::size_t count = parse_count(next_line(in, "the parameter count"), "params");
  for (std::size_t p = 0; p < count; ++p) {
    std::istringstream head(next_line(in, "a parameter header"));
    std::string keyword, name, group;
    std::size_t rank = 0;
    head >> keyword >> name >> group >> rank;
    if (!head || keyword != "param" || rank == 0 || rank > 4) {
      throw FormatError("checkpoint version 1: malformed parameter header #" + std::to_string(p));
    }
    Shape shape(rank);
    for (auto& d : shape) head >> d;
    if (!head) throw FormatError("checkpoint version 1: bad shape for '" + name + "'");
    const std::string line = next_line(in, "parameter values");
    std::vector<double> values;
    values.reserve(shape_numel(shape));
    const char* b = line.data();
    const char* e = line.data() + line.size();
    while (b < e) {
      double v = 0.0;
      auto res = std::from_chars(b, e, v);
      if (res.ec != std::errc()) throw FormatError("checkpoint version 1: bad value in '" + name + "'");
      values.push_back(v);
      b = res.ptr;
      if (b < e && *b == ' ') ++b;
    }
    if (values.size() != shape_numel(shape)) {
      throw FormatError("checkpoint version 1: '" + name + "' has " + std::to_string(values.size()) +
                        " values, shape needs " + std::to_string(shape_numel(shape)));
    }
    store.add(name, parse_group(group), Tensor(shape, std::move(values))).set_requires_grad(true);
  }
  if (next_line(in, "the end marker") != "end") throw FormatError("checkpoint version 1: missing end marker");
  return Checkpoint{step, config, EmNetwork(config.train.model, std::move(store))};
}

void save_checkpoint(const std::string& path, const RunConfig& config, const EmNetwork& net, int step) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
    write_checkpoint(out, config, net, step);
    if (!out) throw IoError("write failed for checkpoint '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace emnet
