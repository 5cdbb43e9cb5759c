// SPDX-License-Identifier: Apache-2.0
#include "emnet/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "emnet/error.hpp"

namespace emnet {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent streams derived from one task seed.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) { return std::mt19937_64(splitmix(seed ^ splitmix(salt))); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Transition table of the label chain: row 0 is the start state, rows 1..K-1
// the previous label; columns are labels 1..K-1.
std::vector<std::vector<double>> label_chain(const CtcTaskSpec& spec) {
  auto rng = stream(spec.seed, 2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int labels = spec.vocab - 1;
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(spec.vocab));
  for (auto& row : rows) {
    row.resize(static_cast<std::size_t>(labels));
    for (auto& w : row) w = std::exp(2.0 * gauss(rng));
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& w : row) w /= total;
  }
  return rows;
}

int draw(std::mt19937_64& rng, const std::vector<double>& probs) {
  double u = uniform01(rng);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return static_cast<int>(i);
    u -= probs[i];
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "dev") return Split::kDev;
  if (name == "test") return Split::kTest;
  throw FormatError("unknown split '" + std::string(name) + "'");
}

const char* rule_name(AedRule rule) {
  switch (rule) {
    case AedRule::kReverse: return "reverse";
    case AedRule::kCipher: return "cipher";
    case AedRule::kSort: return "sort";
  }
  return "?";
}

AedRule parse_rule(std::string_view name) {
  if (name == "reverse") return AedRule::kReverse;
  if (name == "cipher") return AedRule::kCipher;
  if (name == "sort") return AedRule::kSort;
  throw ConfigError("unknown transduction rule '" + std::string(name) + "' (expected reverse, cipher or sort)");
}

void CtcTaskSpec::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ContractError(std::string("CTC task: ") + what);
  };
  need(vocab >= 2, "vocab must include blank and at least one label");
  need(min_len >= 1 && max_len >= min_len, "bad target length range");
  need(min_frames_per_token >= 1 && max_frames_per_token >= min_frames_per_token, "bad frames-per-token range");
  need(feat_dim >= 1, "feat_dim must be positive");
  need(noise >= 0.0, "noise must be non-negative");
  need(ambiguity >= 0.0 && ambiguity <= 1.0, "ambiguity must lie in [0, 1]");
}

void AedTaskSpec::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ContractError(std::string("AED task: ") + what);
  };
  need(vocab >= 2, "vocab must be at least 2");
  need(min_len >= 1 && max_len >= min_len, "bad length range");
  need(copy_noise >= 0.0 && copy_noise <= 1.0, "copy_noise must lie in [0, 1]");
}

int confusable_partner(int label, int vocab) {
  if (label <= 0 || label >= vocab) throw VocabError("label " + std::to_string(label) + " has no partner");
  const int partner = label % 2 == 1 ? label + 1 : label - 1;
  return partner < vocab ? partner : label;
}

Tensor ctc_prototypes(const CtcTaskSpec& spec) {
  auto rng = stream(spec.seed, 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(spec.vocab * spec.feat_dim));
  for (auto& x : v) x = gauss(rng);
  return Tensor({static_cast<std::size_t>(spec.vocab), static_cast<std::size_t>(spec.feat_dim)}, std::move(v));
}

Split split_of(std::span<const int> key, std::uint64_t seed) {
  std::uint64_t h = splitmix(seed ^ 0x5eedULL);
  for (int t : key) h = splitmix(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  const auto bucket = h % 10;
  return bucket < 8 ? Split::kTrain : (bucket == 8 ? Split::kDev : Split::kTest);
}

Dataset gen_ctc_dataset(const CtcTaskSpec& spec, std::size_t n) {
  spec.validate();
  const auto f = static_cast<std::size_t>(spec.feat_dim);
  const Tensor own = ctc_prototypes(spec);
  // Shared prototype per confusable pair, indexed by the pair's odd label.
  Tensor shared;
  {
    auto rng = stream(spec.seed, 3);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(spec.vocab) * f);
    for (auto& x : v) x = gauss(rng);
    shared = Tensor({static_cast<std::size_t>(spec.vocab), f}, std::move(v));
  }
  const auto chain = label_chain(spec);
  auto rng = stream(spec.seed, 4);
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset data;
  data.reserve(n);
  for (std::size_t id = 0; id < n; ++id) {
    const int len = uniform_int(rng, spec.min_len, spec.max_len);
    Tokens y;
    int prev = 0;
    for (int i = 0; i < len; ++i) {
      prev = 1 + draw(rng, chain[static_cast<std::size_t>(prev)]);
      y.push_back(prev);
    }
    std::vector<double> frames;
    auto emit = [&](const Tensor& table, int row) {
      for (std::size_t j = 0; j < f; ++j) {
        frames.push_back(table.at(static_cast<std::size_t>(row), j) + spec.noise * noise(rng));
      }
    };
    emit(own, 0);
    for (int i = 0; i < len; ++i) {
      const int label = y[static_cast<std::size_t>(i)];
      const int partner = confusable_partner(label, spec.vocab);
      const bool ambiguous = partner != label && uniform01(rng) < spec.ambiguity;
      const int frames_here = uniform_int(rng, spec.min_frames_per_token, spec.max_frames_per_token);
      for (int k = 0; k < frames_here; ++k) {
        if (ambiguous) {
          emit(shared, std::min(label, partner));
        } else {
          emit(own, label);
        }
      }
      emit(own, 0);
    }
    const std::size_t t = frames.size() / f;
    if (t < 2 * y.size() + 1) throw ContractError("generated CTC example is too short for its target");
    Example ex;
    ex.id = static_cast<int>(id);
    ex.x.features = Tensor({t, f}, std::move(frames));
    ex.split = split_of(y, spec.seed);
    ex.y = std::move(y);
    data.push_back(std::move(ex));
  }
  return data;
}

std::vector<int> cipher_table(int vocab, std::uint64_t seed) {
  std::vector<int> table(static_cast<std::size_t>(vocab));
  std::iota(table.begin(), table.end(), 0);
  auto rng = stream(seed, 5);
  std::shuffle(table.begin(), table.end(), rng);
  return table;
}

std::vector<int> invert_table(std::span<const int> table) {
  std::vector<int> inv(table.size(), -1);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const int v = table[i];
    if (v < 0 || static_cast<std::size_t>(v) >= table.size() || inv[static_cast<std::size_t>(v)] != -1) {
      throw ContractError("cipher table is not a permutation");
    }
    inv[static_cast<std::size_t>(v)] = static_cast<int>(i);
  }
  return inv;
}

Tokens apply_rule(const AedTaskSpec& spec, std::span<const int> x) {
  Tokens y(x.begin(), x.end());
  switch (spec.rule) {
    case AedRule::kReverse:
      std::reverse(y.begin(), y.end());
      break;
    case AedRule::kSort:
      std::sort(y.begin(), y.end());
      break;
    case AedRule::kCipher: {
      const auto table = cipher_table(spec.vocab, spec.seed);
      for (auto& t : y) t = table.at(static_cast<std::size_t>(t));
      break;
    }
  }
  return y;
}

Dataset gen_aed_dataset(const AedTaskSpec& spec, std::size_t n) {
  spec.validate();
  auto rng = stream(spec.seed, 6);
  Dataset data;
  data.reserve(n);
  for (std::size_t id = 0; id < n; ++id) {
    const int len = uniform_int(rng, spec.min_len, spec.max_len);
    Tokens x;
    for (int i = 0; i < len; ++i) x.push_back(uniform_int(rng, 0, spec.vocab - 1));
    Tokens y = apply_rule(spec, x);
    const Split split = split_of(x, spec.seed);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const bool copy = uniform01(rng) < spec.copy_noise;
      if (copy && split == Split::kTrain) y[i] = x[i];
    }
    Example ex;
    ex.id = static_cast<int>(id);
    ex.x.tokens = std::move(x);
    ex.y = std::move(y);
    ex.split = split;
    data.push_back(std::move(ex));
  }
  return data;
}

std::vector<const Example*> select_split(const Dataset& data, Split split) {
  std::vector<const Example*> out;
  for (const auto& ex : data)
    if (ex.split == split) out.push_back(&ex);
  return out;
}

Source Batch::source(std::size_t i) const {
  Source s;
  const std::size_t len = source_lengths.at(i);
  if (feat_dim > 0) {
    const auto begin = features.begin() + static_cast<std::ptrdiff_t>(i * max_source * feat_dim);
    s.features = Tensor({len, feat_dim}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(len * feat_dim)));
  } else {
    const auto begin = source_tokens.begin() + static_cast<std::ptrdiff_t>(i * max_source);
    s.tokens.assign(begin, begin + static_cast<std::ptrdiff_t>(len));
  }
  return s;
}

Tokens Batch::target(std::size_t i) const {
  const auto begin = targets.begin() + static_cast<std::ptrdiff_t>(i * max_target);
  return Tokens(begin, begin + static_cast<std::ptrdiff_t>(target_lengths.at(i)));
}

std::vector<int> Batch::source_mask(std::size_t i) const {
  std::vector<int> mask(max_source, 0);
  std::fill_n(mask.begin(), source_lengths.at(i), 1);
  return mask;
}

Batch make_batch(std::span<const Example* const> items) {
  if (items.empty()) throw ContractError("make_batch: no examples");
  Batch b;
  const bool features = items.front()->x.features.defined();
  b.feat_dim = features ? items.front()->x.features.cols() : 0;
  for (const Example* ex : items) {
    if (ex->x.features.defined() != features || (features && ex->x.features.cols() != b.feat_dim)) {
      throw DimensionError("make_batch: mixed source kinds");
    }
    b.ids.push_back(ex->id);
    b.source_lengths.push_back(ex->x.length());
    b.target_lengths.push_back(ex->y.size());
    b.max_source = std::max(b.max_source, ex->x.length());
    b.max_target = std::max(b.max_target, ex->y.size());
  }
  const std::size_t n = items.size();
  if (features) {
    b.features.assign(n * b.max_source * b.feat_dim, 0.0);
  } else {
    b.source_tokens.assign(n * b.max_source, Batch::kPad);
  }
  b.targets.assign(n * b.max_target, Batch::kPad);
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = *items[i];
    if (features) {
      const auto v = ex.x.features.values();
      std::copy(v.begin(), v.end(), b.features.begin() + static_cast<std::ptrdiff_t>(i * b.max_source * b.feat_dim));
    } else {
      std::copy(ex.x.tokens.begin(), ex.x.tokens.end(),
                b.source_tokens.begin() + static_cast<std::ptrdiff_t>(i * b.max_source));
    }
    std::copy(ex.y.begin(), ex.y.end(), b.targets.begin() + static_cast<std::ptrdiff_t>(i * b.max_target));
  }
  return b;
}

BatchIterator::BatchIterator(std::vector<const Example*> items, std::size_t batch_size, std::uint64_t seed)
    : items_(std::move(items)), batch_size_(batch_size), rng_(seed) {
  if (batch_size_ < 1) throw ContractError("batch size must be at least 1");
  if (items_.empty()) throw ContractError("batch iterator over an empty example set");
  reshuffle();
}

std::size_t BatchIterator::batches_per_epoch() const { return (items_.size() + batch_size_ - 1) / batch_size_; }

void BatchIterator::reshuffle() {
  order_.resize(items_.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

Batch BatchIterator::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::vector<const Example*> chosen;
  for (std::size_t i = cursor_; i < end; ++i) chosen.push_back(items_[order_[i]]);
  cursor_ = end;
  return make_batch(chosen);
}

void write_dataset(std::ostream& out, const Dataset& data, Task task, std::size_t feat_dim) {
  out << "# emnet-dataset v1 task=" << task_name(task) << " feat_dim=" << (task == Task::kCtc ? feat_dim : 0)
      << "\n";
  for (const auto& ex : data) {
    out << split_name(ex.split);
    if (task == Task::kCtc) {
      for (double v : ex.x.features.values()) out << ' ' << format_double(v);
    } else {
      for (int t : ex.x.tokens) out << ' ' << t;
    }
    out << '\t';
    for (std::size_t i = 0; i < ex.y.size(); ++i) out << (i ? " " : "") << ex.y[i];
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# emnet-dataset v1 ", 0) != 0) {
    throw FormatError("dataset: missing 'emnet-dataset v1' header");
  }
  std::istringstream header(line.substr(19));
  std::string task_field, feat_field;
  header >> task_field >> feat_field;
  if (task_field.rfind("task=", 0) != 0 || feat_field.rfind("feat_dim=", 0) != 0) {
    throw FormatError("dataset: malformed header '" + line + "'");
  }
  const Task task = parse_task(task_field.substr(5));
  const std::size_t feat_dim = std::stoul(feat_field.substr(9));

  Dataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("dataset line " + std::to_string(data.size() + 2) + ": no tab");
    std::istringstream src(line.substr(0, tab));
    std::istringstream tgt(line.substr(tab + 1));
    std::string split;
    src >> split;
    Example ex;
    ex.id = static_cast<int>(data.size());
    ex.split = parse_split(split);
    std::string tok;
    if (task == Task::kCtc) {
      std::vector<double> values;
      while (src >> tok) {
        double v = 0.0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) throw FormatError("dataset: bad value '" + tok + "'");
        values.push_back(v);
      }
      if (feat_dim == 0 || values.empty() || values.size() % feat_dim != 0) {
        throw FormatError("dataset line " + std::to_string(data.size() + 2) + ": feature count is not a multiple of feat_dim");
      }
      const std::size_t t = values.size() / feat_dim;
      ex.x.features = Tensor({t, feat_dim}, std::move(values));
    } else {
      int v = 0;
      while (src >> v) ex.x.tokens.push_back(v);
    }
    int v = 0;
    while (tgt >> v) ex.y.push_back(v);
    data.push_back(std::move(ex));
  }
  return data;
}

}  // namespace emnet
