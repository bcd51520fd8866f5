#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace countlab {

/// Dense row-major matrix owning its storage.
template <class T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T{}) {}

    T* row(int r) noexcept { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
    const T* row(int r) const noexcept {
        return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
    }
    std::span<T> row_span(int r) noexcept { return {row(r), static_cast<std::size_t>(cols)}; }
    std::span<const T> row_span(int r) const noexcept { return {row(r), static_cast<std::size_t>(cols)}; }
    T& operator()(int r, int c) noexcept { return row(r)[c]; }
    const T& operator()(int r, int c) const noexcept { return row(r)[c]; }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

namespace kernel {

// Every kernel processes one output row at a time with a fixed accumulation
// order, so a row's result never depends on how many rows are in the batch.

template <class T>
inline T dot(const T* a, const T* b, int n) noexcept {
    T acc{};
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, int n) noexcept {
#pragma omp simd
    for (int i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

/// y = x W (+ bias) for one row; W is m x n row-major.
template <class T>
inline void row_matmul(const T* x, const T* w, const T* bias, T* y, int m, int n) noexcept {
    if (bias != nullptr) {
        std::copy(bias, bias + n, y);
    } else {
        std::fill(y, y + n, T{});
    }
    for (int k = 0; k < m; ++k) {
        const T xk = x[k];
        if (xk != T{}) {
            axpy(xk, w + static_cast<std::size_t>(k) * static_cast<std::size_t>(n), y, n);
        }
    }
}

/// Y = X W (+ bias); X is rows x m.
template <class T>
inline void matmul(const Matrix<T>& x, const T* w, const T* bias, Matrix<T>& y, int n) {
    if (y.rows != x.rows || y.cols != n) {
        y = Matrix<T>(x.rows, n);
    }
    for (int t = 0; t < x.rows; ++t) {
        row_matmul(x.row(t), w, bias, y.row(t), x.cols, n);
    }
}

/// dx (+)= dy W^T for one row; W is m x n, dy has n entries, dx has m.
template <class T>
inline void row_matmul_bt(const T* dy, const T* w, T* dx, int m, int n, bool accumulate) noexcept {
    for (int k = 0; k < m; ++k) {
        const T v = dot(dy, w + static_cast<std::size_t>(k) * static_cast<std::size_t>(n), n);
        dx[k] = accumulate ? dx[k] + v : v;
    }
}

/// dW += X^T dY restricted to the given rows.
template <class T>
inline void accumulate_outer(const Matrix<T>& x, const Matrix<T>& dy, T* dw) noexcept {
    const int m = x.cols;
    const int n = dy.cols;
    for (int t = 0; t < x.rows; ++t) {
        const T* xr = x.row(t);
        const T* gr = dy.row(t);
        for (int k = 0; k < m; ++k) {
            if (xr[k] != T{}) {
                axpy(xr[k], gr, dw + static_cast<std::size_t>(k) * static_cast<std::size_t>(n), n);
            }
        }
    }
}

template <class T>
inline void add_rows_sum(const Matrix<T>& dy, T* db) noexcept {
    for (int t = 0; t < dy.rows; ++t) {
        axpy(T{1}, dy.row(t), db, dy.cols);
    }
}

} // namespace kernel

/// Numerically stable softmax (max subtraction) evaluated in double.
template <class T>
std::vector<double> softmax(std::span<const T> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) {
        return out;
    }
    double mx = -INFINITY;
    for (const T v : logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += out[i];
    }
    for (double& p : out) {
        p /= sum;
    }
    return out;
}

} // namespace countlab
