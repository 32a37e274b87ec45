#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace langcal {

/// Dense row-major matrix of doubles. The workhorse container for batched
/// network evaluation and the small D x D mobility algebra.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    void resize(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        data.assign(r * c, 0.0);
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
        return t;
    }
};

// C = alpha * A * B (+ C if accumulate). Rows of C are computed independently,
// so the result does not depend on how callers parallelize over them.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false,
             double alpha = 1.0);

// C = alpha * A * B^T (+ C). B is packed transposed once so the inner loop stays
// contiguous.
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false,
             double alpha = 1.0);

// C = alpha * A^T * B (+ C).
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false,
             double alpha = 1.0);

/// Lower Cholesky factor of a symmetric positive-definite matrix.
/// Throws std::runtime_error if a pivot is not positive.
Matrix cholesky_lower(const Matrix& a);

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix via
/// cyclic Jacobi rotations. Intended for small D.
void symmetric_eigen(const Matrix& a, std::vector<double>& eigenvalues, Matrix& eigenvectors);

/// Solve the least-squares problem min ||A x - b|| via normal equations with
/// Cholesky. A must have full column rank.
std::vector<double> least_squares(const Matrix& a, std::span<const double> b);

inline void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace langcal
