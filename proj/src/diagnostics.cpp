// SPDX-License-Identifier: Apache-2.0
#include "emnet/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>

#include "emnet/error.hpp"

namespace emnet {

namespace {

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::string num(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

PathKl path_kl(std::span<const double> teacher, std::span<const double> student) {
  if (teacher.size() != student.size() || teacher.empty()) {
    throw DimensionError("path_kl: teacher and student must weight the same non-empty path set");
  }
  double zt = 0.0, zs = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i] < 0.0 || student[i] < 0.0) throw DomainError("path_kl: negative probability");
    zt += teacher[i];
    zs += student[i];
  }
  if (zt <= 0.0 || zs <= 0.0) throw DomainError("path_kl: zero total mass");
  PathKl out;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const double q = teacher[i] / zt;
    if (q == 0.0) continue;
    if (student[i] == 0.0) {
      out.conditional = out.unnormalized = std::numeric_limits<double>::infinity();
      return out;
    }
    out.conditional += q * std::log(q / (student[i] / zs));
    out.unnormalized += q * std::log(q / student[i]);
  }
  return out;
}

AlignmentDiagnostics diagnose_alignments(const Tensor& teacher_logits, const Tensor& student_logits,
                                         std::span<const int> target, std::uint64_t cap) {
  if (teacher_logits.shape() != student_logits.shape() || student_logits.rank() != 2) {
    throw DimensionError("diagnose_alignments: teacher and student logits must both be T×K");
  }
  const Vocab vocab(static_cast<int>(student_logits.cols()));
  validate_target(target, vocab.size);
  const auto paths = enumerate_alignments(target, student_logits.rows(), vocab, cap);
  if (paths.empty()) throw InfeasibleError("diagnose_alignments: no alignment of this length");
  const auto lt = path_log_probs(teacher_logits, paths);
  const auto ls = path_log_probs(student_logits, paths);
  const double log_zt = log_sum_exp(lt);
  const double log_m_enum = log_sum_exp(ls);

  AlignmentDiagnostics d;
  d.paths = paths.size();
  d.log_likelihood = -ctc_loss_dp(student_logits, target);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const double log_q = lt[i] - log_zt;
    const double q = std::exp(log_q);
    if (q == 0.0) continue;
    d.kl_conditional += q * (log_q - (ls[i] - log_m_enum));
    d.kl_unnormalized += q * (log_q - ls[i]);
    d.teacher_entropy -= q * log_q;
    d.q_function += q * ls[i];
    d.log_mass_term += q * d.log_likelihood;
  }
  return d;
}

double alignment_kl(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const int> target) {
  return diagnose_alignments(teacher_logits, student_logits, target).kl_conditional;
}

double q_function(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const int> target) {
  return diagnose_alignments(teacher_logits, student_logits, target).q_function;
}

BoundReport check_lower_bound(const Tensor& teacher_logits, const Tensor& student_logits,
                              std::span<const int> target, std::uint64_t cap) {
  const auto d = diagnose_alignments(teacher_logits, student_logits, target, cap);
  BoundReport r;
  r.log_likelihood = d.log_likelihood;
  r.bound = -d.kl_unnormalized;
  r.slack = r.log_likelihood - r.bound;
  r.teacher_entropy = d.teacher_entropy;
  return r;
}

CtcOutputs ctc_outputs(const EmNetwork& net, const Source& x, std::span<const int> oracle_input) {
  if (net.config().task != Task::kCtc) throw ContractError("ctc_outputs needs a CTC model");
  NoGradGuard no_grad;
  const Tensor h = net.encode(x);
  return {net.ctc_logits(h), net.teacher_logits(net.fuse(h, net.oracle_encode(oracle_input)))};
}

BoundReport check_lower_bound(const EmNetwork& net, const Source& x, std::span<const int> y,
                              std::span<const int> oracle_input) {
  const auto out = ctc_outputs(net, x, oracle_input);
  return check_lower_bound(out.teacher, out.student, y);
}

BoundReport check_lower_bound_aed(const EmNetwork& net, const Source& x, std::span<const int> y,
                                  std::span<const int> oracle_input) {
  if (net.config().task != Task::kAed) throw ContractError("check_lower_bound_aed needs an AED model");
  NoGradGuard no_grad;
  Tokens input{net.bos_id()};
  input.insert(input.end(), y.begin(), y.end());
  Tokens target(y.begin(), y.end());
  target.push_back(net.eos_id());
  const Tensor h = net.encode(x);
  const Tensor ls = log_softmax(net.decoder_logits(net.decoder_states(h, input)), 1);
  const Tensor memory = net.fuse(h, net.oracle_encode(oracle_input));
  const Tensor lt = log_softmax(net.teacher_logits(net.decoder_states(memory, input)), 1);

  BoundReport r;
  for (std::size_t i = 0; i < target.size(); ++i) {
    r.log_likelihood += ls.at(i, static_cast<std::size_t>(target[i]));
  }
  r.bound = r.log_likelihood;
  r.slack = 0.0;
  r.teacher_entropy = 0.0;
  double kl = 0.0;
  for (std::size_t i = 0; i < lt.rows(); ++i) {
    for (std::size_t k = 0; k < lt.cols(); ++k) kl += std::exp(lt.at(i, k)) * (lt.at(i, k) - ls.at(i, k));
  }
  r.position_kl_form = -kl;
  return r;
}

BoundInstance random_bound_instance(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  BoundInstance inst;
  inst.config.task = Task::kCtc;
  inst.config.vocab = pick(2, 4);
  inst.config.feat_dim = 3;
  inst.config.d_model = 8;
  inst.config.heads = pick(1, 2);
  inst.config.ff_dim = 16;
  inst.config.enc_layers = 1;
  inst.config.oracle_layers = 1;
  inst.config.fusion_layers = 1;
  inst.param_seed = rng();
  const int len = pick(1, 4);
  for (int i = 0; i < len; ++i) inst.y.push_back(pick(1, inst.config.vocab - 1));
  // At most 4 labels need at most 7 frames, so 8 is always feasible.
  const int frames = pick(static_cast<int>(min_frames(inst.y)), 8);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> feats(static_cast<std::size_t>(frames) * 3);
  for (auto& v : feats) v = 2.0 * gauss(rng);
  inst.x.features = Tensor({static_cast<std::size_t>(frames), 3}, std::move(feats));
  return inst;
}

void write_bound_header(std::ostream& out) { out << "loglik,bound,slack,entropy\n"; }

void write_bound_row(std::ostream& out, const BoundReport& r) {
  out << num(r.log_likelihood) << ',' << num(r.bound) << ',' << num(r.slack) << ',' << num(r.teacher_entropy) << '\n';
}

void dump_alignment(std::ostream& out, const EmNetwork& net, const Source& x, const std::vector<int>* oracle_input) {
  if (net.config().task != Task::kCtc) throw ContractError("alignment dumps need a CTC model");
  NoGradGuard no_grad;
  auto write = [&](const Tensor& logits, const char* mode) {
    const Tensor p = softmax(logits, 1);
    for (std::size_t t = 0; t < p.rows(); ++t) {
      for (std::size_t k = 0; k < p.cols(); ++k) out << t << ',' << k << ',' << num(p.at(t, k)) << ',' << mode << '\n';
    }
  };
  out << "frame,label,prob,mode\n";
  const Tensor h = net.encode(x);
  write(net.ctc_logits(h), "student");
  if (oracle_input) write(net.teacher_logits(net.fuse(h, net.oracle_encode(*oracle_input))), "teacher");
}

AttentionMaps dump_attention(std::ostream& out, const EmNetwork& net, const Source& x,
                             std::span<const int> oracle_input) {
  NoGradGuard no_grad;
  AttentionMaps maps;
  net.fuse(net.encode(x), net.oracle_encode(oracle_input), &maps);
  out << "frame,token,score,layer\n";
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const Tensor& m = maps[l];
    for (std::size_t t = 0; t < m.rows(); ++t) {
      for (std::size_t j = 0; j < m.cols(); ++j) out << t << ',' << j << ',' << num(m.at(t, j)) << ',' << l << '\n';
    }
  }
  return maps;
}

double repetition_ratio(const std::vector<Tokens>& predictions) {
  if (predictions.empty()) throw ContractError("repetition_ratio: empty prediction set");
  std::size_t repeats = 0, total = 0;
  for (const auto& p : predictions) {
    total += p.size();
    for (std::size_t i = 1; i < p.size(); ++i) repeats += p[i] == p[i - 1] ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(repeats) / static_cast<double>(total);
}

CurveCheck check_em_below_org(std::span<const double> l_org, std::span<const double> l_em, double fraction) {
  if (l_org.size() != l_em.size() || l_org.empty()) throw ContractError("check_em_below_org: need matching non-empty series");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("check_em_below_org: fraction must lie in (0, 1]");
  CurveCheck c;
  const auto n = l_org.size();
  c.rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));
  for (std::size_t i = n - c.rows; i < n; ++i) {
    c.mean_org += l_org[i];
    c.mean_em += l_em[i];
  }
  c.mean_org /= static_cast<double>(c.rows);
  c.mean_em /= static_cast<double>(c.rows);
  c.em_below_org = c.mean_em < c.mean_org;
  return c;
}

}  // namespace emnet
