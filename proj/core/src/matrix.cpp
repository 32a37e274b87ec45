#include "langcal/matrix.hpp"

#include "langcal/threading.hpp"

#include <algorithm>
#include <cstring>

namespace langcal {

namespace {

// Row-major inner kernel: C[i0:i1) = alpha * A[i0:i1) * B (+C). k in the middle
// so the j loop vectorizes.
void gemm_nn_rows(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate, double alpha,
                  std::size_t i0, std::size_t i1) {
    const std::size_t K = a.cols, N = b.cols;
    for (std::size_t i = i0; i < i1; ++i) {
        double* ci = c.data.data() + i * N;
        if (!accumulate) std::memset(ci, 0, N * sizeof(double));
        const double* ai = a.data.data() + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double aik = alpha * ai[k];
            const double* bk = b.data.data() + k * N;
            for (std::size_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

}  // namespace

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate, double alpha) {
    require(a.cols == b.rows, "gemm_nn: inner dimension mismatch");
    if (c.rows != a.rows || c.cols != b.cols) c.resize(a.rows, b.cols);
    const std::size_t flops = 2 * a.rows * a.cols * b.cols;
    if (flops < (1u << 20)) {
        gemm_nn_rows(a, b, c, accumulate, alpha, 0, a.rows);
    } else {
        parallel_for_ranges(a.rows, [&](std::size_t i0, std::size_t i1) {
            gemm_nn_rows(a, b, c, accumulate, alpha, i0, i1);
        });
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate, double alpha) {
    require(a.cols == b.cols, "gemm_nt: inner dimension mismatch");
    Matrix bt = b.transposed();
    gemm_nn(a, bt, c, accumulate, alpha);
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate, double alpha) {
    require(a.rows == b.rows, "gemm_tn: inner dimension mismatch");
    Matrix at = a.transposed();
    gemm_nn(at, b, c, accumulate, alpha);
}

Matrix cholesky_lower(const Matrix& a) {
    require(a.rows == a.cols, "cholesky: matrix must be square");
    const std::size_t n = a.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (d <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

void symmetric_eigen(const Matrix& a, std::vector<double>& eigenvalues, Matrix& eigenvectors) {
    require(a.rows == a.cols, "symmetric_eigen: matrix must be square");
    const std::size_t n = a.rows;
    Matrix m = a;
    eigenvectors.resize(n, n);
    for (std::size_t i = 0; i < n; ++i) eigenvectors(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += m(p, q) * m(p, q);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(m(p, q)) < 1e-300) continue;
                const double theta = (m(q, q) - m(p, p)) / (2.0 * m(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double cs = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * cs;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = cs * mkp - sn * mkq;
                    m(k, q) = sn * mkp + cs * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = cs * mpk - sn * mqk;
                    m(q, k) = sn * mpk + cs * mqk;
                    const double vkp = eigenvectors(k, p), vkq = eigenvectors(k, q);
                    eigenvectors(k, p) = cs * vkp - sn * vkq;
                    eigenvectors(k, q) = sn * vkp + cs * vkq;
                }
            }
        }
    }
    eigenvalues.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = m(i, i);

    // sort ascending, permuting eigenvector columns alongside
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return eigenvalues[x] < eigenvalues[y]; });
    std::vector<double> ev(n);
    Matrix vec(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        ev[j] = eigenvalues[order[j]];
        for (std::size_t i = 0; i < n; ++i) vec(i, j) = eigenvectors(i, order[j]);
    }
    eigenvalues = std::move(ev);
    eigenvectors = std::move(vec);
}

std::vector<double> least_squares(const Matrix& a, std::span<const double> b) {
    require(a.rows == b.size(), "least_squares: rhs length mismatch");
    const std::size_t n = a.cols;
    Matrix ata(n, n);
    std::vector<double> atb(n, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t p = 0; p < n; ++p) {
            atb[p] += a(i, p) * b[i];
            for (std::size_t q = 0; q < n; ++q) ata(p, q) += a(i, p) * a(i, q);
        }
    }
    Matrix l = cholesky_lower(ata);
    // forward then backward substitution
    std::vector<double> y(n), x(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = atb[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
        x[ii] = s / l(ii, ii);
    }
    return x;
}

}  // namespace langcal
