#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "restitch/error.hpp"

namespace restitch {

enum class DType { f32, f64 };

inline std::string to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    fail(ErrorKind::dtype, "unknown dtype '" + s + "'");
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

/// Result dtype of a binary op: f64 wins.
inline DType promote(DType a, DType b) {
    return (a == DType::f64 || b == DType::f64) ? DType::f64 : DType::f32;
}

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major array. Values are held as doubles; an f32 tensor stores
/// only values exactly representable in single precision, so every f32
/// result is rounded once when the tensor is built. Immutable after
/// construction, copies share storage.
class Tensor {
public:
    Tensor() : Tensor(Shape{1}) {}

    explicit Tensor(Shape shape, DType dtype = DType::f64)
        : shape_(std::move(shape)), dtype_(dtype) {
        check_shape();
        data_ = std::make_shared<const std::vector<double>>(numel(shape_), 0.0);
    }

    Tensor(Shape shape, std::vector<double> values, DType dtype = DType::f64)
        : shape_(std::move(shape)), dtype_(dtype) {
        check_shape();
        if (values.size() != numel(shape_)) {
            fail(ErrorKind::dimension, "tensor data size " + std::to_string(values.size()) +
                                           " does not match shape " + shape_string(shape_));
        }
        if (dtype_ == DType::f32) {
            for (double& v : values) v = static_cast<double>(static_cast<float>(v));
        }
        data_ = std::make_shared<const std::vector<double>>(std::move(values));
    }

    static Tensor full(Shape shape, double value, DType dtype = DType::f64) {
        std::vector<double> v(numel(shape), value);
        return Tensor(std::move(shape), std::move(v), dtype);
    }

    static Tensor scalar(double value, DType dtype = DType::f64) {
        return Tensor(Shape{1}, {value}, dtype);
    }

    static Tensor identity(std::size_t n, DType dtype = DType::f64) {
        std::vector<double> v(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
        return Tensor({n, n}, std::move(v), dtype);
    }

    /// Uniform values in [lo, hi) drawn from a 64-bit Mersenne twister.
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          DType dtype = DType::f64) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> v(numel(shape));
        for (double& x : v) x = dist(rng);
        return Tensor(std::move(shape), std::move(v), dtype);
    }

    static Tensor normal(Shape shape, double mean, double stddev, std::mt19937_64& rng,
                         DType dtype = DType::f64) {
        std::normal_distribution<double> dist(mean, stddev);
        std::vector<double> v(numel(shape));
        for (double& x : v) x = dist(rng);
        return Tensor(std::move(shape), std::move(v), dtype);
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_->size(); }
    DType dtype() const noexcept { return dtype_; }

    std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const {
        if (size() != 1) fail(ErrorKind::contract, "item() on non-scalar tensor " + shape_string(shape_));
        return (*data_)[0];
    }

    std::vector<double> to_vector() const { return *data_; }

    /// Same data, new shape; element count must match.
    Tensor reshaped(Shape shape) const {
        if (numel(shape) != size()) {
            fail(ErrorKind::dimension, "cannot reshape " + shape_string(shape_) + " to " +
                                           shape_string(shape));
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        t.check_shape();
        return t;
    }

    Tensor as(DType dtype) const {
        if (dtype == dtype_) return *this;
        return Tensor(shape_, *data_, dtype);
    }

    /// Exact equality of shape, dtype and every value.
    bool bit_equal(const Tensor& other) const {
        return shape_ == other.shape_ && dtype_ == other.dtype_ && *data_ == *other.data_;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    void check_shape() const {
        for (std::size_t e : shape_) {
            if (e == 0) fail(ErrorKind::dimension, "zero extent in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    DType dtype_ = DType::f64;
    std::shared_ptr<const std::vector<double>> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::dimension, "max_abs_diff shape mismatch " + shape_string(a.shape()) +
                                       " vs " + shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace restitch
