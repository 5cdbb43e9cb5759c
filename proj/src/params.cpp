// SPDX-License-Identifier: Apache-2.0
#include "emnet/params.hpp"

#include "emnet/error.hpp"

namespace emnet {

const char* group_name(ParamGroup group) {
  return group == ParamGroup::kSequenceModel ? "theta" : "rho";
}

ParamGroup parse_group(std::string_view name) {
  if (name == "theta") return ParamGroup::kSequenceModel;
  if (name == "rho") return ParamGroup::kAuxiliary;
  throw FormatError("unknown parameter group '" + std::string(name) + "'");
}

ParamStore::ParamStore() : reads_(std::make_unique<std::array<std::atomic<std::size_t>, 2>>()) {
  reset_reads();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& e : entries_) {
    Tensor t = e.tensor.detach();
    t.set_requires_grad(e.tensor.requires_grad());
    out.add(e.name, e.group, std::move(t));
  }
  return out;
}

Tensor& ParamStore::add(std::string name, ParamGroup group, Tensor init) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), group, std::move(init)});
  return entries_.back().tensor;
}

bool ParamStore::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw LookupError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

const Tensor& ParamStore::get(std::string_view name) const {
  const auto& e = entries_[index_of(name)];
  (*reads_)[static_cast<std::size_t>(e.group)].fetch_add(1, std::memory_order_relaxed);
  return e.tensor;
}

Tensor& ParamStore::raw(std::string_view name) { return entries_[index_of(name)].tensor; }
const Tensor& ParamStore::raw(std::string_view name) const { return entries_[index_of(name)].tensor; }
ParamGroup ParamStore::group_of(std::string_view name) const { return entries_[index_of(name)].group; }

std::size_t ParamStore::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.group == group) n += e.tensor.numel();
  return n;
}

std::size_t ParamStore::count() const {
  return count(ParamGroup::kSequenceModel) + count(ParamGroup::kAuxiliary);
}

std::size_t ParamStore::reads(ParamGroup group) const {
  return (*reads_)[static_cast<std::size_t>(group)].load(std::memory_order_relaxed);
}

void ParamStore::reset_reads() const {
  for (auto& r : *reads_) r.store(0, std::memory_order_relaxed);
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

}  // namespace emnet
