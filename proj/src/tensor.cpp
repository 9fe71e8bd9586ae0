#include "jem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "jem/error.hpp"

namespace jem {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_size(shape_)) {
        throw InputError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
    }
}

std::size_t Tensor::row_size() const noexcept {
    if (shape_.empty() || shape_[0] == 0) {
        return 0;
    }
    return data_.size() / shape_[0];
}

std::span<double> Tensor::row(std::size_t n) {
    const std::size_t stride = row_size();
    return std::span<double>(data_).subspan(n * stride, stride);
}

std::span<const double> Tensor::row(std::size_t n) const {
    const std::size_t stride = row_size();
    return std::span<const double>(data_).subspan(n * stride, stride);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw InputError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
        throw InputError("row slice out of range");
    }
    Shape shape = shape_;
    shape[0] = end - begin;
    const std::size_t stride = row_size();
    std::vector<double> values(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                               data_.begin() + static_cast<std::ptrdiff_t>(end * stride));
    return Tensor(std::move(shape), std::move(values));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
        throw InputError("shape mismatch in +=: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    if (other.shape_ != shape_) {
        throw InputError("shape mismatch in -=: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= other.data_[i];
    }
    return *this;
}

Tensor& Tensor::operator*=(double scale) {
    for (double& v : data_) {
        v *= scale;
    }
    return *this;
}

void Tensor::add_scaled(const Tensor& other, double scale) {
    if (other.shape_ != shape_) {
        throw InputError("shape mismatch in add_scaled");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += scale * other.data_[i];
    }
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() == 0 ||
        !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw InputError("concat_rows shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<double> values;
    values.reserve(a.size() + b.size());
    values.insert(values.end(), a.storage().begin(), a.storage().end());
    values.insert(values.end(), b.storage().begin(), b.storage().end());
    return Tensor(std::move(shape), std::move(values));
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw InputError("max_abs_diff shape mismatch");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace jem
