// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/dense_array.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace beamgraph::tk {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape)
        n *= e;
    return shape.empty() ? 0 : n;
}

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), values_(element_count(shape_), fill) {
    require(shape_.size() >= 1 && shape_.size() <= 2, "DenseArray supports rank 1 or 2, got " + shape_string(shape_));
}

DenseArray::DenseArray(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    require(shape_.size() >= 1 && shape_.size() <= 2, "DenseArray supports rank 1 or 2, got " + shape_string(shape_));
    require(element_count(shape_) == values_.size(),
            "DenseArray: shape " + shape_string(shape_) + " does not match " + std::to_string(values_.size()) +
                " values");
}

DenseArray DenseArray::vector(std::vector<double> values) {
    const auto n = values.size();
    return DenseArray({n}, std::move(values));
}

DenseArray DenseArray::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return DenseArray({rows, cols}, std::move(values));
}

DenseArray DenseArray::scalar(double value) { return DenseArray({1}, std::vector<double>{value}); }

bool DenseArray::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void DenseArray::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

double DenseArray::sum() const noexcept { return std::accumulate(values_.begin(), values_.end(), 0.0); }

double DenseArray::max_abs() const noexcept {
    double m = 0.0;
    for (double v : values_)
        m = std::max(m, std::abs(v));
    return m;
}

DenseArray& DenseArray::operator+=(const DenseArray& other) {
    require(same_shape(other), "DenseArray +=: shape mismatch " + shape_string(shape_) + " vs " +
                                   shape_string(other.shape_));
    for (std::size_t i = 0; i < values_.size(); ++i)
        values_[i] += other.values_[i];
    return *this;
}

}  // namespace beamgraph::tk
