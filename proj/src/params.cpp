// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/params.hpp"

namespace beamgraph::tk {

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

std::string_view kind_name(EntryKind kind) {
    switch (kind) {
        case EntryKind::param:
            return "param";
        case EntryKind::running_mean:
            return "running_mean";
        case EntryKind::running_var:
            return "running_var";
        case EntryKind::opt_moment:
            return "opt_moment";
    }
    return "unknown";
}

EntryKind kind_from_name(std::string_view name) {
    if (name == "param")
        return EntryKind::param;
    if (name == "running_mean")
        return EntryKind::running_mean;
    if (name == "running_var")
        return EntryKind::running_var;
    if (name == "opt_moment")
        return EntryKind::opt_moment;
    throw ContractViolation("unknown entry kind '" + std::string(name) + "'");
}

Param& ParameterStore::add(const std::string& name, DenseArray value, EntryKind kind) {
    require(!entries_.contains(name), "parameter '" + name + "' already exists");
    DenseArray grad = DenseArray::zeros_like(value);
    auto [it, _] = entries_.emplace(name, Param{std::move(value), std::move(grad), kind});
    return it->second;
}

bool ParameterStore::contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

Param& ParameterStore::at(std::string_view name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "no parameter named '" + std::string(name) + "'");
    return it->second;
}

const Param& ParameterStore::at(std::string_view name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), "no parameter named '" + std::string(name) + "'");
    return it->second;
}

void ParameterStore::zero_grad() {
    for (auto& [_, p] : entries_)
        p.grad.fill(0.0);
}

std::vector<std::string> ParameterStore::names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_)
        if (starts_with(name, prefix))
            out.push_back(name);
    return out;
}

std::size_t ParameterStore::scalar_count(std::string_view prefix) const {
    std::size_t n = 0;
    for (const auto& [name, p] : entries_)
        if (starts_with(name, prefix))
            n += p.value.size();
    return n;
}

void ParameterStore::copy_from(const ParameterStore& other, std::string_view prefix) {
    for (const auto& [name, p] : other.entries_) {
        if (!starts_with(name, prefix))
            continue;
        auto& dst = at(name);
        require(dst.value.same_shape(p.value), "copy_from: shape mismatch for '" + name + "'");
        dst.value = p.value;
    }
}

ParameterStore ParameterStore::subset(const std::function<bool(std::string_view)>& keep) const {
    ParameterStore out;
    for (const auto& [name, p] : entries_)
        if (keep(name))
            out.entries_.emplace(name, p);
    return out;
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size())
        return false;
    auto ia = a.entries_.begin();
    auto ib = b.entries_.begin();
    for (; ia != a.entries_.end(); ++ia, ++ib)
        if (ia->first != ib->first || ia->second.kind != ib->second.kind || !(ia->second.value == ib->second.value))
            return false;
    return true;
}

}  // namespace beamgraph::tk
