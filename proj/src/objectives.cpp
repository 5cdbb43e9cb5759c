// SPDX-License-Identifier: Apache-2.0
#include "emnet/objectives.hpp"

#include <cmath>

#include "emnet/error.hpp"

namespace emnet {

void TrainConfig::validate() const {
  model.validate();
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  need(alpha >= 0.0, "alpha must be non-negative");
  need(lambda_mask >= 0.0 && lambda_mask <= 1.0, "lambda_mask must lie in [0, 1]");
  need(temperature > 0.0, "temperature must be positive");
  need(steps >= 1, "steps must be at least 1");
  need(batch_size >= 1, "batch_size must be at least 1");
  need(lr > 0.0, "lr must be positive");
  need(warmup_steps >= 0, "warmup_steps must be non-negative");
}

MaskedTarget mask_target(std::span<const int> y, double lambda, int mask_id, std::mt19937_64& rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("mask_target: lambda must lie in [0, 1]");
  std::bernoulli_distribution coin(lambda);
  MaskedTarget out;
  out.tokens.reserve(y.size());
  out.masked.reserve(y.size());
  for (int t : y) {
    const bool m = coin(rng);
    out.tokens.push_back(m ? mask_id : t);
    out.masked.push_back(m);
  }
  return out;
}

LossBreakdown LossTerms::values() const { return {org.item(), em.item(), kd.item(), total.item()}; }

std::vector<MaskedTarget> draw_masks(const Batch& batch, double lambda, int mask_id, std::mt19937_64& rng) {
  std::vector<MaskedTarget> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(mask_target(batch.target(i), lambda, mask_id, rng));
  return out;
}

Tensor kd_loss_softmax(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape()) throw DimensionError("kd_loss_softmax: shape mismatch");
  const double inv = 1.0 / temperature;
  const Tensor s = temperature == 1.0 ? student_logits : scale(student_logits, inv);
  const Tensor t = temperature == 1.0 ? teacher_logits : scale(teacher_logits, inv);
  const Tensor log_t = log_softmax(t, 1);
  const Tensor kl = sum(mul(exp(log_t), sub(log_t, log_softmax(s, 1))));
  return scale(kl, 1.0 / static_cast<double>(student_logits.rows()));
}

namespace {

struct ItemLosses {
  Tensor org;
  Tensor em;
  Tensor kd;
  Tensor teacher_logits;
};

Tensor token_nll(const Tensor& logits, std::span<const int> targets) {
  return scale(mean(select(log_softmax(logits, 1), targets)), -1.0);
}

ItemLosses item_losses(const EmNetwork& net, const Source& x, const Tokens& y, const TrainConfig& config,
                       const MaskedTarget* oracle_input) {
  ItemLosses out;
  const Tensor h = net.encode(x);
  if (net.config().task == Task::kCtc) {
    const Tensor s = net.ctc_logits(h);
    out.org = ctc_loss(s, y);
    if (!oracle_input) return out;
    const Tensor t = net.teacher_logits(net.fuse(h, net.oracle_encode(oracle_input->tokens)));
    out.em = ctc_loss(t, y);
    const Tensor tk = config.stop_teacher_grad ? t.detach() : t;
    const double inv = 1.0 / config.temperature;
    const Tensor ps = softmax(config.temperature == 1.0 ? s : scale(s, inv), 1);
    const Tensor pt = softmax(config.temperature == 1.0 ? tk : scale(tk, inv), 1);
    out.kd = kd_loss_ctc(ps, pt, config.kd_form);
    out.teacher_logits = t;
    return out;
  }

  Tokens input{net.bos_id()};
  input.insert(input.end(), y.begin(), y.end());
  Tokens target(y.begin(), y.end());
  target.push_back(net.eos_id());
  const Tensor s = net.decoder_logits(net.decoder_states(h, input));
  out.org = token_nll(s, target);
  if (!oracle_input) return out;
  const Tensor memory = net.fuse(h, net.oracle_encode(oracle_input->tokens));
  const Tensor t = net.teacher_logits(net.decoder_states(memory, input));
  out.em = token_nll(t, target);
  out.kd = kd_loss_softmax(s, config.stop_teacher_grad ? t.detach() : t, config.temperature);
  out.teacher_logits = t;
  return out;
}

Tensor batch_mean(std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

}  // namespace

LossTerms compute_losses(const EmNetwork& net, const Batch& batch, const TrainConfig& config,
                         const std::vector<MaskedTarget>& oracle_inputs) {
  if (batch.size() == 0) throw ContractError("compute_losses: empty batch");
  if (config.fusion && oracle_inputs.size() != batch.size()) {
    throw ContractError("compute_losses: one oracle input per batch item is required");
  }
  std::vector<Tensor> org, em, kd;
  LossTerms terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tokens y = batch.target(i);
    auto item = item_losses(net, batch.source(i), y, config, config.fusion ? &oracle_inputs[i] : nullptr);
    org.push_back(item.org);
    if (config.fusion) {
      em.push_back(item.em);
      kd.push_back(item.kd);
      terms.teacher_logits.push_back(item.teacher_logits);
    }
  }
  terms.org = batch_mean(org);
  terms.em = config.fusion ? batch_mean(em) : Tensor::scalar(0.0);
  terms.kd = config.fusion ? batch_mean(kd) : Tensor::scalar(0.0);
  terms.total = add(add(terms.org, terms.em), scale(terms.kd, config.alpha));
  return terms;
}

Tensor loss_org(const EmNetwork& net, const Batch& batch) {
  TrainConfig config;
  config.model = net.config();
  config.fusion = false;
  return compute_losses(net, batch, config, {}).org;
}

Tensor loss_em(const EmNetwork& net, const Batch& batch, const std::vector<MaskedTarget>& oracle_inputs) {
  TrainConfig config;
  config.model = net.config();
  return compute_losses(net, batch, config, oracle_inputs).em;
}

Tensor loss_kd(const EmNetwork& net, const Batch& batch, const TrainConfig& config,
               const std::vector<MaskedTarget>& oracle_inputs) {
  TrainConfig with_teacher = config;
  with_teacher.fusion = true;
  return compute_losses(net, batch, with_teacher, oracle_inputs).kd;
}

Adam::Adam(const ParamStore& params, Options options) : options_(options) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

double Adam::rate_at(int step) const {
  if (options_.warmup_steps <= 0 || step >= options_.warmup_steps) return options_.lr;
  return options_.lr * static_cast<double>(step) / static_cast<double>(options_.warmup_steps);
}

void Adam::step(ParamStore& params) {
  auto& entries = params.entries();
  if (entries.size() != m_.size()) throw ContractError("optimizer state does not match the parameter store");
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    const auto g = e.tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient in parameter '" + e.name + "' at index " + std::to_string(j) +
                           " (step " + std::to_string(t_ + 1) + ")");
      }
    }
  }
  ++t_;
  const double lr = rate_at(t_);
  const double c1 = 1.0 - std::pow(options_.beta1, t_);
  const double c2 = 1.0 - std::pow(options_.beta2, t_);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

StepResult train_step(EmNetwork& net, Adam& optimizer, const Batch& batch, const TrainConfig& config,
                      std::mt19937_64& mask_rng) {
  StepResult result;
  if (config.fusion) result.oracle_inputs = draw_masks(batch, config.lambda_mask, net.mask_id(), mask_rng);
  net.params().zero_grad();
  const LossTerms terms = compute_losses(net, batch, config, result.oracle_inputs);
  result.losses = terms.values();
  if (!std::isfinite(result.losses.l_total)) {
    throw NumericError("non-finite training loss at step " + std::to_string(optimizer.steps_taken() + 1));
  }
  backward(terms.total);
  optimizer.step(net.params());
  for (const auto& t : terms.teacher_logits) result.teacher_logits.push_back(t.detach());
  return result;
}

}  // namespace emnet
