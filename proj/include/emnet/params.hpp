// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emnet/tensor.hpp"

namespace emnet {

/// theta (the sequence model, kept at inference) or rho (oracle encoder,
/// fusion module and teacher head, discarded at inference). phi = theta ∪ rho.
enum class ParamGroup { kSequenceModel = 0, kAuxiliary = 1 };

const char* group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);

/// Named parameter leaves in insertion order, tagged by group. Reads through
/// get() are counted per group so callers can prove which parameters a code
/// path touched.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor tensor;
  };

  ParamStore();
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  /// Deep copy of names, groups and values; read counters start at zero.
  ParamStore clone() const;

  Tensor& add(std::string name, ParamGroup group, Tensor init);
  bool contains(std::string_view name) const;

  /// Counted read, used by model code.
  const Tensor& get(std::string_view name) const;
  /// Uncounted access for optimizers, checkpointing and tests.
  Tensor& raw(std::string_view name);
  const Tensor& raw(std::string_view name) const;
  ParamGroup group_of(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t count(ParamGroup group) const;
  std::size_t count() const;

  std::size_t reads(ParamGroup group) const;
  void reset_reads() const;

  void zero_grad();

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unique_ptr<std::array<std::atomic<std::size_t>, 2>> reads_;
};

}  // namespace emnet
