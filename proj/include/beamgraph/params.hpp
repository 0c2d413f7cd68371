// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "beamgraph/dense_array.hpp"

namespace beamgraph::tk {

enum class EntryKind : std::uint8_t { param = 0, running_mean = 1, running_var = 2, opt_moment = 3 };

std::string_view kind_name(EntryKind kind);
EntryKind kind_from_name(std::string_view name);

struct Param {
    DenseArray value;
    DenseArray grad;
    EntryKind kind = EntryKind::param;

    bool trainable() const noexcept { return kind == EntryKind::param; }
};

/// Named parameter arrays plus their gradients and batch-norm running
/// statistics. Iteration order is lexicographic by name, which keeps every
/// reduction over a store deterministic.
class ParameterStore {
  public:
    Param& add(const std::string& name, DenseArray value, EntryKind kind = EntryKind::param);

    bool contains(std::string_view name) const;
    Param& at(std::string_view name);
    const Param& at(std::string_view name) const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const noexcept { return entries_.size(); }

    void zero_grad();
    std::vector<std::string> names_with_prefix(std::string_view prefix) const;
    // Number of scalar values in entries whose name starts with `prefix`.
    std::size_t scalar_count(std::string_view prefix = {}) const;

    // Copy values of entries matching `prefix` from `other`.
    void copy_from(const ParameterStore& other, std::string_view prefix);
    ParameterStore subset(const std::function<bool(std::string_view)>& keep) const;

    friend bool operator==(const ParameterStore& a, const ParameterStore& b);

  private:
    std::map<std::string, Param, std::less<>> entries_;
};

bool starts_with(std::string_view s, std::string_view prefix);

}  // namespace beamgraph::tk
