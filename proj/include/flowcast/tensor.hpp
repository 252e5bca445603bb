// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"

namespace flowcast {

// Dense row-major tensor. The scalar type is a template parameter: float is
// the training precision, double the gradient-checking precision.
template <typename S>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), S(0)) {}

    TensorT(std::vector<size_t> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string());
        }
    }

    static TensorT zeros(std::vector<size_t> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<size_t> shape, S value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static TensorT eye(size_t n) {
        TensorT t({n, n});
        for (size_t i = 0; i < n; ++i) t.data_[i * n + i] = S(1);
        return t;
    }

    static TensorT uniform(std::vector<size_t> shape, RngStream& rng, S lo, S hi) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    static TensorT gaussian(std::vector<size_t> shape, RngStream& rng, S stddev) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<S>(rng.gaussian() * stddev);
        return t;
    }

    // Glorot-uniform for a fan_in x fan_out map.
    static TensorT glorot(std::vector<size_t> shape, RngStream& rng, size_t fan_in, size_t fan_out) {
        const S bound = static_cast<S>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
        return uniform(std::move(shape), rng, -bound, bound);
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t dim(size_t axis) const { return shape_.at(axis); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& raw() { return data_; }
    const std::vector<S>& raw() const { return data_; }

    S& operator[](size_t i) { return data_[i]; }
    S operator[](size_t i) const { return data_[i]; }

    S& at2(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    S at2(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
    S& at3(size_t i, size_t j, size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
    S at3(size_t i, size_t j, size_t k) const { return data_[(i * shape_[1] + j) * shape_[2] + k]; }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    S max_abs() const {
        S m = S(0);
        for (const S v : data_) m = std::max(m, static_cast<S>(std::abs(v)));
        return m;
    }

    S max_abs_diff(const TensorT& other) const {
        require_same_shape(other, "max_abs_diff");
        S m = S(0);
        for (size_t i = 0; i < data_.size(); ++i)
            m = std::max(m, static_cast<S>(std::abs(data_[i] - other.data_[i])));
        return m;
    }

    void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

    void add_scaled(const TensorT& other, S scale) {
        require_same_shape(other, "add_scaled");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
    }

    void scale_inplace(S factor) {
        for (auto& v : data_) v *= factor;
    }

    TensorT reshaped(std::vector<size_t> new_shape) const {
        if (checked_numel(new_shape) != numel())
            throw ShapeError("reshape from " + shape_string() + " changes element count");
        return TensorT(std::move(new_shape), data_);
    }

    TensorT transposed2d() const {
        if (rank() != 2) throw ShapeError("transpose requires rank-2 tensor, got " + shape_string());
        TensorT out({shape_[1], shape_[0]});
        for (size_t i = 0; i < shape_[0]; ++i)
            for (size_t j = 0; j < shape_[1]; ++j) out.at2(j, i) = at2(i, j);
        return out;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

    bool operator==(const TensorT& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

    std::string shape_string() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    void require_same_shape(const TensorT& other, const char* what) const {
        if (!same_shape(other))
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_string() + " vs " +
                             other.shape_string());
    }

private:
    static size_t checked_numel(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (const size_t d : shape) {
            if (d == 0) throw ShapeError("zero-length tensor dimension");
            n *= d;
        }
        return n;
    }

    std::vector<size_t> shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<float>;

// Named model weight. Frozen parameters (trainable == false) never receive
// optimizer updates; grad stays empty until a backward pass deposits one.
template <typename S>
struct ParameterT {
    std::string name;
    TensorT<S> value;
    TensorT<S> grad;  // empty means "no gradient yet"
    bool trainable = true;

    ParameterT() = default;
    ParameterT(std::string n, TensorT<S> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), trainable(train) {}

    void zero_grad() {
        if (!grad.empty()) grad.fill(S(0));
    }

    void accumulate_grad(const TensorT<S>& g) { accumulate_grad_scaled(g, S(1)); }

    void accumulate_grad_scaled(const TensorT<S>& g, S scale) {
        if (grad.empty()) grad = TensorT<S>::zeros(value.shape());
        grad.add_scaled(g, scale);
    }
};

using Parameter = ParameterT<float>;

}  // namespace flowcast
