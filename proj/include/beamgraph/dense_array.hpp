// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace beamgraph {

// Raised when a caller breaks an operation's precondition (shape, range, mode).
class ContractViolation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Raised when a numeric routine meets non-finite data or a singular system.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond)
        throw ContractViolation(what);
}

}  // namespace beamgraph

namespace beamgraph::tk {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major array of 64-bit floats. Rank 1 and rank 2 are the only
/// ranks the networks in this project need; rank-1 arrays act as 1 x n rows.
class DenseArray {
  public:
    DenseArray() = default;
    explicit DenseArray(Shape shape, double fill = 0.0);
    DenseArray(Shape shape, std::vector<double> values);

    static DenseArray vector(std::vector<double> values);
    static DenseArray matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    static DenseArray scalar(double value);
    static DenseArray zeros_like(const DenseArray& other) { return DenseArray(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }
    std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }

    const std::vector<double>& storage() const noexcept { return values_; }

    bool same_shape(const DenseArray& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;
    void fill(double value);
    double sum() const noexcept;
    double max_abs() const noexcept;

    DenseArray& operator+=(const DenseArray& other);

    friend bool operator==(const DenseArray&, const DenseArray&) = default;

  private:
    Shape shape_;
    std::vector<double> values_;
};

std::size_t element_count(const Shape& shape);

}  // namespace beamgraph::tk
