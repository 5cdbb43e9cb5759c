// SPDX-License-Identifier: Apache-2.0
#include "emnet/models.hpp"

#include <cmath>

#include "emnet/error.hpp"

namespace emnet {

namespace {

constexpr auto kTheta = ParamGroup::kSequenceModel;
constexpr auto kRho = ParamGroup::kAuxiliary;

std::string at_layer(const std::string& stem, int i) { return stem + "." + std::to_string(i); }

class Builder {
 public:
  Builder(ParamStore& store, std::mt19937_64& rng) : store_(store), rng_(rng) {}

  void matrix(const std::string& name, ParamGroup g, std::size_t in, std::size_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(in * out);
    for (auto& x : v) x = dist(rng_);
    store_.add(name, g, Tensor({in, out}, std::move(v))).set_requires_grad(true);
  }

  void vector(const std::string& name, ParamGroup g, std::size_t n, double fill) {
    store_.add(name, g, Tensor({n}, fill)).set_requires_grad(true);
  }

  void linear(const std::string& name, ParamGroup g, std::size_t in, std::size_t out) {
    matrix(name + ".w", g, in, out);
    vector(name + ".b", g, out, 0.0);
  }

  void norm(const std::string& name, ParamGroup g, std::size_t d) {
    vector(name + ".g", g, d, 1.0);
    vector(name + ".b", g, d, 0.0);
  }

  // The key projection has no bias: it would shift every score in a row
  // equally and cancel in the softmax.
  void attention(const std::string& name, ParamGroup g, std::size_t d) {
    linear(name + ".q", g, d, d);
    matrix(name + ".k.w", g, d, d);
    linear(name + ".v", g, d, d);
    linear(name + ".o", g, d, d);
  }

  void feed_forward(const std::string& name, ParamGroup g, std::size_t d, std::size_t ff) {
    linear(name + ".ff1", g, d, ff);
    linear(name + ".ff2", g, ff, d);
  }

  void encoder_block(const std::string& name, ParamGroup g, std::size_t d, std::size_t ff) {
    norm(name + ".ln1", g, d);
    attention(name + ".attn", g, d);
    norm(name + ".ln2", g, d);
    feed_forward(name, g, d, ff);
  }

  void cross_block(const std::string& name, ParamGroup g, std::size_t d, std::size_t ff) {
    norm(name + ".ln1", g, d);
    attention(name + ".self", g, d);
    norm(name + ".ln2", g, d);
    attention(name + ".cross", g, d);
    norm(name + ".ln3", g, d);
    feed_forward(name, g, d, ff);
  }

 private:
  ParamStore& store_;
  std::mt19937_64& rng_;
};

// Forward helpers reading parameters through the counted accessor.
Tensor linear(const ParamStore& p, const std::string& name, const Tensor& x) {
  return add_row(matmul(x, p.get(name + ".w")), p.get(name + ".b"));
}

Tensor norm(const ParamStore& p, const std::string& name, const Tensor& x) {
  return layer_norm(x, p.get(name + ".g"), p.get(name + ".b"));
}

Tensor attention(const ParamStore& p, const std::string& name, const Tensor& queries, const Tensor& keys_values,
                 int heads, bool causal, Tensor* mean_probs) {
  const Tensor q = linear(p, name + ".q", queries);
  const Tensor k = matmul(keys_values, p.get(name + ".k.w"));
  const Tensor v = linear(p, name + ".v", keys_values);
  const std::size_t d = q.cols();
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  std::vector<double> probs_acc;
  for (int h = 0; h < heads; ++h) {
    const std::size_t lo = static_cast<std::size_t>(h) * dh;
    const Tensor qh = heads == 1 ? q : slice(q, 1, lo, lo + dh);
    const Tensor kh = heads == 1 ? k : slice(k, 1, lo, lo + dh);
    const Tensor vh = heads == 1 ? v : slice(v, 1, lo, lo + dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    const Tensor probs = causal ? causal_softmax(scores) : softmax(scores, 1);
    if (mean_probs) {
      if (probs_acc.empty()) probs_acc.assign(probs.numel(), 0.0);
      for (std::size_t i = 0; i < probs_acc.size(); ++i) probs_acc[i] += probs.values()[i] / heads;
    }
    outs.push_back(matmul(probs, vh));
  }
  if (mean_probs) *mean_probs = Tensor({queries.rows(), keys_values.rows()}, std::move(probs_acc));
  return linear(p, name + ".o", heads == 1 ? outs.front() : concat(outs, 1));
}

Tensor feed_forward(const ParamStore& p, const std::string& name, const Tensor& x) {
  return linear(p, name + ".ff2", relu(linear(p, name + ".ff1", x)));
}

Tensor encoder_block(const ParamStore& p, const std::string& name, const Tensor& x, int heads) {
  const Tensor n1 = norm(p, name + ".ln1", x);
  const Tensor a = add(x, attention(p, name + ".attn", n1, n1, heads, false, nullptr));
  return add(a, feed_forward(p, name, norm(p, name + ".ln2", a)));
}

// Self-attention, then cross-attention to `memory`, then feed-forward; each
// a pre-norm residual branch.
Tensor cross_block(const ParamStore& p, const std::string& name, const Tensor& x, const Tensor& memory, int heads,
                   bool causal, Tensor* cross_probs) {
  const Tensor n1 = norm(p, name + ".ln1", x);
  const Tensor a = add(x, attention(p, name + ".self", n1, n1, heads, causal, nullptr));
  const Tensor b = add(a, attention(p, name + ".cross", norm(p, name + ".ln2", a), memory, heads, false, cross_probs));
  return add(b, feed_forward(p, name, norm(p, name + ".ln3", b)));
}

Tensor embed(const ParamStore& p, const std::string& table, std::span<const int> ids) {
  const Tensor e = embedding_lookup(p.get(table), ids);
  return add(e, sinusoidal_positions(e.rows(), e.cols()));
}

std::size_t argmax_row(const Tensor& m, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols(); ++j)
    if (m.at(row, j) > m.at(row, best)) best = j;
  return best;
}

}  // namespace

const char* task_name(Task task) { return task == Task::kCtc ? "ctc" : "aed"; }

Task parse_task(std::string_view name) {
  if (name == "ctc") return Task::kCtc;
  if (name == "aed") return Task::kAed;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected ctc or aed)");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model configuration: " + what);
  };
  need(vocab >= 2, "vocab must be at least 2");
  need(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model must be a positive multiple of heads");
  need(ff_dim >= 1, "ff_dim must be positive");
  need(enc_layers >= 0 && oracle_layers >= 0 && fusion_layers >= 0, "layer counts must be non-negative");
  if (task == Task::kCtc) need(feat_dim >= 1, "feat_dim must be positive");
  if (task == Task::kAed) need(dec_layers >= 1, "the AED decoder needs at least one layer");
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<double> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      v[pos * dim + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({length, dim}, std::move(v));
}

EmNetwork::EmNetwork(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

EmNetwork::EmNetwork(const ModelConfig& config, ParamStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  check_against_config();
}

int EmNetwork::output_size() const { return config_.task == Task::kCtc ? config_.vocab : config_.vocab + 1; }

void EmNetwork::build(std::mt19937_64& rng) {
  Builder b(params_, rng);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.ff_dim);
  const auto v = static_cast<std::size_t>(config_.vocab);
  const auto out = static_cast<std::size_t>(output_size());

  // theta
  if (config_.task == Task::kCtc) {
    b.linear("enc.in", kTheta, static_cast<std::size_t>(config_.feat_dim), d);
  } else {
    b.matrix("enc.embed", kTheta, v, d);
  }
  for (int i = 0; i < config_.enc_layers; ++i) b.encoder_block(at_layer("enc", i), kTheta, d, ff);
  if (config_.enc_layers > 0) b.norm("enc.ln", kTheta, d);
  if (config_.task == Task::kCtc) {
    b.linear("ctc.head", kTheta, d, out);
  } else {
    b.matrix("dec.embed", kTheta, v + 1, d);
    for (int i = 0; i < config_.dec_layers; ++i) b.cross_block(at_layer("dec", i), kTheta, d, ff);
    b.norm("dec.ln", kTheta, d);
    b.linear("dec.head", kTheta, d, out);
  }

  // rho
  b.matrix("oracle.embed", kRho, v + 1, d);
  for (int i = 0; i < config_.oracle_layers; ++i) b.encoder_block(at_layer("oracle", i), kRho, d, ff);
  b.norm("oracle.ln", kRho, d);
  for (int i = 0; i < config_.fusion_layers; ++i) b.cross_block(at_layer("fusion", i), kRho, d, ff);
  b.linear("teacher.head", kRho, d, out);
}

void EmNetwork::check_against_config() const {
  const EmNetwork reference(config_, 0);
  const auto& want = reference.params().entries();
  const auto& have = params_.entries();
  if (want.size() != have.size()) {
    throw FormatError("parameter set has " + std::to_string(have.size()) + " tensors, configuration implies " +
                      std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].name != have[i].name || want[i].group != have[i].group ||
        want[i].tensor.shape() != have[i].tensor.shape()) {
      throw FormatError("parameter '" + have[i].name + "' does not match the configuration (expected '" +
                        want[i].name + "')");
    }
  }
}

Tensor EmNetwork::encode(const Source& x) const {
  if (x.length() == 0) throw ContractError("encode: empty source sequence");
  Tensor h;
  if (config_.task == Task::kCtc) {
    if (!x.features.defined() || x.features.rank() != 2 ||
        x.features.cols() != static_cast<std::size_t>(config_.feat_dim)) {
      throw DimensionError("encode: CTC source must be T×" + std::to_string(config_.feat_dim) + " features");
    }
    h = linear(params_, "enc.in", x.features);
    h = add(h, sinusoidal_positions(h.rows(), h.cols()));
  } else {
    h = embed(params_, "enc.embed", x.tokens);
  }
  for (int i = 0; i < config_.enc_layers; ++i) h = encoder_block(params_, at_layer("enc", i), h, config_.heads);
  if (config_.enc_layers > 0) h = norm(params_, "enc.ln", h);
  return h;
}

Tensor EmNetwork::ctc_logits(const Tensor& hidden) const {
  if (config_.task != Task::kCtc) throw ContractError("ctc_logits on an AED model");
  return linear(params_, "ctc.head", hidden);
}

Tensor EmNetwork::decoder_states(const Tensor& memory, std::span<const int> input) const {
  if (config_.task != Task::kAed) throw ContractError("decoder_states on a CTC model");
  if (input.empty() || input.front() != bos_id()) throw ContractError("decoder input must start with BOS");
  Tensor h = embed(params_, "dec.embed", input);
  for (int i = 0; i < config_.dec_layers; ++i) {
    h = cross_block(params_, at_layer("dec", i), h, memory, config_.heads, true, nullptr);
  }
  return norm(params_, "dec.ln", h);
}

Tensor EmNetwork::decoder_logits(const Tensor& states) const { return linear(params_, "dec.head", states); }

Tensor EmNetwork::oracle_encode(std::span<const int> tokens) const {
  if (tokens.empty()) throw ContractError("oracle_encode: empty target-side sequence");
  Tensor r = embed(params_, "oracle.embed", tokens);
  for (int i = 0; i < config_.oracle_layers; ++i) r = encoder_block(params_, at_layer("oracle", i), r, config_.heads);
  return norm(params_, "oracle.ln", r);
}

Tensor EmNetwork::fuse(const Tensor& hidden, const Tensor& guidance, AttentionMaps* cross_attention) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (hidden.rank() != 2 || guidance.rank() != 2 || hidden.cols() != d || guidance.cols() != d) {
    throw DimensionError("fuse: hidden and guidance must both have width " + std::to_string(d));
  }
  if (cross_attention) cross_attention->clear();
  Tensor f = hidden;
  for (int i = 0; i < config_.fusion_layers; ++i) {
    Tensor probs;
    f = cross_block(params_, at_layer("fusion", i), f, guidance, config_.heads, false,
                    cross_attention ? &probs : nullptr);
    if (cross_attention) cross_attention->push_back(std::move(probs));
  }
  return f;
}

Tensor EmNetwork::teacher_logits(const Tensor& states) const { return linear(params_, "teacher.head", states); }

Tokens EmNetwork::greedy_autoregressive(const Tensor& memory, bool teacher) const {
  const std::size_t max_len = 2 * memory.rows() + 2;
  Tokens input{bos_id()};
  Tokens out;
  while (out.size() < max_len) {
    const Tensor states = decoder_states(memory, input);
    const Tensor last = slice(states, 0, states.rows() - 1, states.rows());
    const Tensor logits = teacher ? teacher_logits(last) : decoder_logits(last);
    const int next = static_cast<int>(argmax_row(logits, 0));
    if (next == eos_id()) break;
    out.push_back(next);
    input.push_back(next);
  }
  return out;
}

Tokens EmNetwork::predict(const Source& x) const {
  NoGradGuard no_grad;
  const Tensor h = encode(x);
  if (config_.task == Task::kCtc) return greedy_decode(ctc_logits(h));
  return greedy_autoregressive(h, false);
}

Tokens EmNetwork::predict_teacher(const Source& x, std::span<const int> oracle_input) const {
  NoGradGuard no_grad;
  const Tensor f = fuse(encode(x), oracle_encode(oracle_input));
  if (config_.task == Task::kCtc) return greedy_decode(teacher_logits(f));
  return greedy_autoregressive(f, true);
}

ParamCounts count_params(const ParamStore& params) {
  return {params.count(ParamGroup::kSequenceModel), params.count(ParamGroup::kAuxiliary)};
}

namespace {

void zero_matching(ParamStore& params, const std::vector<std::string>& suffixes) {
  for (auto& e : params.entries()) {
    if (e.name.rfind("fusion.", 0) != 0) continue;
    for (const auto& s : suffixes) {
      if (e.name.size() >= s.size() && e.name.compare(e.name.size() - s.size(), s.size(), s) == 0) {
        for (auto& v : e.tensor.mutable_values()) v = 0.0;
      }
    }
  }
}

}  // namespace

void zero_fusion_cross_attention(ParamStore& params) { zero_matching(params, {".cross.o.w", ".cross.o.b"}); }

void zero_fusion(ParamStore& params) {
  zero_matching(params, {".self.o.w", ".self.o.b", ".cross.o.w", ".cross.o.b", ".ff2.w", ".ff2.b"});
}

void tie_teacher_head(ParamStore& params) {
  const std::string student = params.contains("ctc.head.w") ? "ctc.head" : "dec.head";
  for (const char* part : {".w", ".b"}) {
    const auto src = params.raw(student + part).values();
    auto dst = params.raw(std::string("teacher.head") + part).mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace emnet
