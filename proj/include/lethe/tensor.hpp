#pragma once

// Dense row-major tensors over f32 (training) or f64 (verification), plus the
// matmul kernels everything else is built on. Accumulation order within each
// output element is fixed (ascending k), so results are bitwise identical for
// any thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "lethe/common.hpp"

namespace lethe {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class S>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<S> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shp, S fill = S{0})
        : shape(std::move(shp)) {
        data.assign(numel_of(shape), fill);
    }

    Tensor(std::vector<std::size_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (numel_of(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& shp) {
        std::size_t n = 1;
        for (std::size_t d : shp) n *= d;
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool is_scalar() const { return numel() == 1; }

    S& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    S at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool finite() const {
        for (S v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            out.data[i] = static_cast<T>(data[i]);
        }
        return out;
    }
};

namespace detail {

// Runs fn(row) for row in [0, rows), split contiguously across threads.
inline void parallel_rows(std::size_t rows, const std::function<void(std::size_t, std::size_t)>& fn) {
    const int nthreads = thread_count();
    if (nthreads <= 1 || rows < 64) {
        fn(0, rows);
        return;
    }
    const std::size_t n = static_cast<std::size_t>(nthreads);
    std::vector<std::thread> pool;
    pool.reserve(n);
    const std::size_t chunk = (rows + n - 1) / n;
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t lo = std::min(rows, t * chunk);
        const std::size_t hi = std::min(rows, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(fn, lo, hi);
    }
    for (auto& th : pool) th.join();
}

} // namespace detail

// C[m x n] = A[m x k] * B[k x n]
template <class S>
Tensor<S> matmul_nn(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<S> c({m, n});
    detail::parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            S* crow = c.data.data() + i * n;
            const S* arow = a.data.data() + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const S av = arow[kk];
                const S* brow = b.data.data() + kk * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
    return c;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    if (a.shape.size() != 2) {
        throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape));
    }
    const std::size_t m = a.shape[0], n = a.shape[1];
    Tensor<S> t({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            t.data[j * m + i] = a.data[i * n + j];
        }
    }
    return t;
}

// C[m x n] = A[m x k] * B[n x k]^T
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1]) {
        throw ShapeError("matmul_nt shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    return matmul_nn(a, transpose(b));
}

// C[m x n] = A[k x m]^T * B[k x n]
template <class S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[0] != b.shape[0]) {
        throw ShapeError("matmul_tn shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    const std::size_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor<S> c({m, n});
    detail::parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            S* crow = c.data.data() + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const S av = a.data[kk * m + i];
                const S* brow = b.data.data() + kk * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
    return c;
}

} // namespace lethe
