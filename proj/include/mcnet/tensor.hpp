#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mcnet/common.hpp"

namespace mcnet {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Every buffer gets the same 64-byte alignment. Eigen's vectorized
// reductions split by pointer alignment, so ordinary allocations would make
// repeat runs differ in the last bits once the heap layout shifts.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    T* allocate(std::size_t n) {
        if (n == 0) return nullptr;
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
    friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense n-d array, row-major, contiguous. The heavy math goes through
// Eigen maps over the flat buffer; the shape is bookkeeping on top.
template <class S>
class Tensor {
public:
    using Scalar = S;
    using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatMap =
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
    using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

    static Tensor from(Shape shape, const std::vector<S>& data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DataError("tensor data size does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_.assign(data.begin(), data.end());
        return t;
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    bool grad_flag() const { return grad_flag_; }
    Tensor& set_grad_flag(bool f) {
        grad_flag_ = f;
        return *this;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    // Element access by multi-index, for tests and cold paths.
    S& at(std::initializer_list<int> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
    S at(std::initializer_list<int> idx) const {
        return data_[static_cast<std::size_t>(offset(idx))];
    }

    std::int64_t offset(std::initializer_list<int> idx) const {
        std::int64_t off = 0;
        std::size_t i = 0;
        for (int v : idx) {
            off = off * shape_[i] + v;
            ++i;
        }
        return off;
    }

    MatMap mat(std::int64_t rows, std::int64_t cols) { return MatMap(data(), rows, cols); }
    ConstMatMap mat(std::int64_t rows, std::int64_t cols) const {
        return ConstMatMap(data(), rows, cols);
    }
    VecMap vec() { return VecMap(data(), numel()); }
    ConstVecMap vec() const { return ConstVecMap(data(), numel()); }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out{shape_};
        for (std::int64_t i = 0; i < numel(); ++i)
            out[i] = static_cast<T>(data_[static_cast<std::size_t>(i)]);
        out.set_grad_flag(grad_flag_);
        return out;
    }

private:
    Shape shape_;
    std::vector<S, AlignedAllocator<S>> data_;
    bool grad_flag_ = false;
};

template <class S>
void check_shape(const Tensor<S>& t, const Shape& want, const char* what) {
    if (t.shape() != want)
        throw DataError(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                        shape_str(t.shape()));
}

template <class S>
void check_rank(const Tensor<S>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw DataError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
}

}  // namespace mcnet
