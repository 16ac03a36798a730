#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "stopband/errors.hpp"

namespace stopband {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major n-dimensional value array.
template <typename S = double>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), S(0)) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, S value) {
        Tensor t(std::move(shape));
        for (S& x : t.data_) x = value;
        return t;
    }

    static Tensor scalar(S value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& vec() { return data_; }
    const std::vector<S>& vec() const { return data_; }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S item() const {
        if (size() != 1) throw UsageError("item(): tensor is not scalar, shape " + shape_str(shape_));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Same data, new shape; sizes must agree.
    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                             " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    void fill(S value) {
        for (S& x : data_) x = value;
    }

    bool all_finite() const {
        for (S x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    void check_shape() const {
        for (std::size_t d : shape_)
            if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<S> data_;
};

} // namespace stopband
