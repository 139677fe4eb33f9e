#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace awmp {

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 and 2 are the only
/// shapes the rest of the library produces.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw std::invalid_argument("Tensor: data length does not match shape");
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::size_t n = count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        std::size_t n = count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const {
        if (!is_scalar()) throw std::logic_error("Tensor::item on non-scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// --- shared kernels -------------------------------------------------------
//
// The plain (inference) path and the autodiff tape both call these, so the
// two paths produce bit-identical forward values.

/// C += A * B for row-major [m,k] x [k,n]. i-k-j order keeps the inner loop
/// contiguous in both B and C.
inline void matmul_accum(const double* a, const double* b, double* c,
                         std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " x " +
                                    b.shape_str());
    Tensor c = Tensor::zeros({a.shape()[0], b.shape()[1]});
    matmul_accum(a.data(), b.data(), c.data(), a.shape()[0], a.shape()[1], b.shape()[1]);
    return c;
}

/// y = x * B^T accumulation used by matmul backward (dA += dC * B^T).
inline void matmul_accum_bt(const double* dc, const double* b, double* da,
                            std::size_t m, std::size_t k, std::size_t n) {
    // dC is [m,n], B is [k,n], dA is [m,k]
    for (std::size_t i = 0; i < m; ++i) {
        const double* dcrow = dc + i * n;
        double* darow = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

/// dB += A^T * dC.  A is [m,k], dC is [m,n], dB is [k,n].
inline void matmul_accum_at(const double* a, const double* dc, double* db,
                            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* dcrow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dbrow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

inline double stable_softplus(double x) {
    // log(1 + e^x) without overflow for large |x|.
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Row-wise softmax with max shift, in place over a [rows, cols] buffer.
inline void softmax_rows_inplace(double* x, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = x + r * cols;
        double m = row[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - m);
            s += row[j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
    }
}

inline double logsumexp(std::span<const double> x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
    os << t.shape_str() << '{';
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? ", " : "") << t[i];
    return os << '}';
}

}  // namespace awmp
