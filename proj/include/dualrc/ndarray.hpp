#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dualrc/error.hpp"
#include "dualrc/memory.hpp"

namespace dualrc {

using Dims = std::vector<std::size_t>;
using Storage = std::vector<double, TrackingAllocator<double>>;

inline std::size_t dims_product(const Dims& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string dims_to_string(const Dims& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << ']';
    return os.str();
}

// Dense row-major float64 array. Plain value type; the autograd handle
// (Tensor) wraps one of these.
class NdArray {
public:
    NdArray() = default;

    explicit NdArray(Dims dims, double fill = 0.0)
        : dims_(std::move(dims)), data_(dims_product(dims_), fill) {}

    NdArray(Dims dims, std::span<const double> values) : dims_(std::move(dims)) {
        if (dims_product(dims_) != values.size())
            throw ShapeError("NdArray: " + std::to_string(values.size()) +
                             " values do not fill dims " + dims_to_string(dims_));
        data_.assign(values.begin(), values.end());
    }

    NdArray(Dims dims, std::initializer_list<double> values)
        : NdArray(std::move(dims), std::span<const double>(values.begin(), values.size())) {}

    static NdArray scalar(double v) { return NdArray(Dims{}, v); }

    const Dims& dims() const { return dims_; }
    std::size_t ndim() const { return dims_.size(); }
    std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return {data_.data(), data_.size()}; }
    std::span<const double> values() const { return {data_.data(), data_.size()}; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    template <class... Idx>
    std::size_t offset(Idx... idx) const {
        static_assert(sizeof...(Idx) > 0);
        const std::size_t index[] = {static_cast<std::size_t>(idx)...};
        if (sizeof...(Idx) != dims_.size())
            throw ShapeError("NdArray::offset: rank mismatch");
        std::size_t off = 0;
        for (std::size_t a = 0; a < dims_.size(); ++a) {
            if (index[a] >= dims_[a]) throw BoundsError("NdArray::offset: index out of range");
            off = off * dims_[a] + index[a];
        }
        return off;
    }

    template <class... Idx>
    double& at(Idx... idx) { return data_[offset(idx...)]; }
    template <class... Idx>
    double at(Idx... idx) const { return data_[offset(idx...)]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("NdArray::item: not a single-element array");
        return data_[0];
    }

    NdArray reshaped(Dims dims) const {
        if (dims_product(dims) != data_.size())
            throw ShapeError("NdArray::reshaped: " + dims_to_string(dims_) + " -> " +
                             dims_to_string(dims));
        NdArray out;
        out.dims_ = std::move(dims);
        out.data_ = data_;
        return out;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const NdArray& other) const {
        return dims_ == other.dims_ && data_ == other.data_;
    }

private:
    Dims dims_;
    Storage data_;
};

inline void require_same_dims(const NdArray& a, const NdArray& b, const char* what) {
    if (a.dims() != b.dims())
        throw ShapeError(std::string(what) + ": dims " + dims_to_string(a.dims()) + " vs " +
                         dims_to_string(b.dims()));
}

} // namespace dualrc
