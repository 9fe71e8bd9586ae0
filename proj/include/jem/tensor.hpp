#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace jem {

using Shape = std::vector<std::size_t>;

// Fixed 64-byte alignment keeps vectorized reductions on the same code path
// from run to run, so results do not depend on where the heap put a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major tensor of doubles. NCHW for images, (batch, features) for
// everything else.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Row view along the leading axis.
    std::span<double> row(std::size_t n);
    std::span<const double> row(std::size_t n) const;
    std::size_t row_size() const noexcept;

    // Same data, different shape; sizes must agree.
    Tensor reshaped(Shape shape) const;

    // Rows [begin, end) along the leading axis.
    Tensor slice_rows(std::size_t begin, std::size_t end) const;

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double scale);
    void add_scaled(const Tensor& other, double scale);

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    Storage data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

// Concatenation along the leading axis.
Tensor concat_rows(const Tensor& a, const Tensor& b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace jem
