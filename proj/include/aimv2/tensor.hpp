#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace aimv2 {

// All arithmetic is 64-bit; gradient checking demands it and desk-scale
// models are small enough that there is no reason to drop precision.
using real = double;

// Dense row-major tensor. Plain value type: copy/assign copy the buffer.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        int64_t n = 1;
        for (int64_t d : shape_) {
            if (d < 0) {
                throw std::invalid_argument("Tensor: negative dimension");
            }
            n *= d;
        }
        data_.assign(static_cast<size_t>(n), 0.0);
    }

    Tensor(std::vector<int64_t> shape, std::vector<real> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        int64_t n = 1;
        for (int64_t d : shape_) {
            n *= d;
        }
        if (n != static_cast<int64_t>(data_.size())) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, real value) {
        Tensor t(std::move(shape));
        for (real& x : t.data_) {
            x = value;
        }
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    // Last dimension, and the number of rows when viewed as a matrix.
    int64_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }

    real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    real& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    real at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(real v) {
        for (real& x : data_) {
            x = v;
        }
    }

    void zero() { fill(0.0); }

    void add_(const Tensor& other) {
        if (!same_shape(other)) {
            throw std::invalid_argument("Tensor::add_: shape mismatch");
        }
        for (int64_t i = 0; i < numel(); ++i) {
            data_[static_cast<size_t>(i)] += other.data_[static_cast<size_t>(i)];
        }
    }

    void scale_(real s) {
        for (real& x : data_) {
            x *= s;
        }
    }

    bool all_finite() const {
        for (real x : data_) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<real> data_;
};

inline void check_matmul_dims(int64_t ak, int64_t bk, const char* who) {
    if (ak != bk) {
        throw std::invalid_argument(std::string(who) + ": inner dimensions disagree");
    }
}

// out[m,n] = sum_k a[m,k] * b[k,n]   (accumulates when accumulate=true)
inline void matmul(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    check_matmul_dims(k, b.rows(), "matmul");
    if (out.rows() != m || out.cols() != n) {
        throw std::invalid_argument("matmul: output shape mismatch");
    }
    if (!accumulate) {
        out.zero();
    }
    const real* ap = a.data();
    const real* bp = b.data();
    real* op = out.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const real av = ap[i * k + kk];
            const real* brow = bp + kk * n;
            real* orow = op + i * n;
            for (int64_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,n] = sum_k a[m,k] * b[n,k]   -- i.e. a * b^T
inline void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false) {
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    check_matmul_dims(k, b.cols(), "matmul_nt");
    if (out.rows() != m || out.cols() != n) {
        throw std::invalid_argument("matmul_nt: output shape mismatch");
    }
    if (!accumulate) {
        out.zero();
    }
    const real* ap = a.data();
    const real* bp = b.data();
    real* op = out.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            real acc = 0.0;
            const real* arow = ap + i * k;
            const real* brow = bp + j * k;
            for (int64_t kk = 0; kk < k; ++kk) {
                acc += arow[kk] * brow[kk];
            }
            op[i * n + j] += acc;
        }
    }
}

// out[m,n] = sum_k a[k,m] * b[k,n]   -- i.e. a^T * b
inline void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false) {
    const int64_t k = a.rows(), m = a.cols(), n = b.cols();
    check_matmul_dims(k, b.rows(), "matmul_tn");
    if (out.rows() != m || out.cols() != n) {
        throw std::invalid_argument("matmul_tn: output shape mismatch");
    }
    if (!accumulate) {
        out.zero();
    }
    const real* ap = a.data();
    const real* bp = b.data();
    real* op = out.data();
    for (int64_t kk = 0; kk < k; ++kk) {
        const real* arow = ap + kk * m;
        const real* brow = bp + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const real av = arow[i];
            real* orow = op + i * n;
            for (int64_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

inline void add_row_bias(Tensor& y, const Tensor& b) {
    const int64_t n = y.cols();
    if (b.numel() != n) {
        throw std::invalid_argument("add_row_bias: bias length mismatch");
    }
    for (int64_t i = 0; i < y.rows(); ++i) {
        for (int64_t j = 0; j < n; ++j) {
            y.at(i, j) += b[j];
        }
    }
}

// db += column sums of dy
inline void accumulate_bias_grad(const Tensor& dy, Tensor& db) {
    const int64_t n = dy.cols();
    if (db.numel() != n) {
        throw std::invalid_argument("accumulate_bias_grad: bias length mismatch");
    }
    for (int64_t i = 0; i < dy.rows(); ++i) {
        for (int64_t j = 0; j < n; ++j) {
            db[j] += dy.at(i, j);
        }
    }
}

} // namespace aimv2
