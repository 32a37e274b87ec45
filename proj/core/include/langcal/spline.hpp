#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace langcal {

/// Cubic spline interpolant with not-a-knot end conditions (for 3 nodes, the
/// interpolating parabola). Passes through every data point; derivative() is
/// the analytic derivative of the piecewise cubic, one-sided at the boundary
/// nodes. Not-a-knot keeps the boundary derivative free of the curvature
/// artifact a natural (zero second derivative) end condition would inject.
class CubicSpline {
public:
    CubicSpline() = default;

    void build(std::span<const double> x, std::span<const double> y) {
        if (x.size() != y.size() || x.size() < 3)
            throw std::invalid_argument("spline: need >= 3 matching nodes");
        for (std::size_t i = 1; i < x.size(); ++i)
            if (!(x[i] > x[i - 1])) throw std::invalid_argument("spline: nodes must increase");
        x_.assign(x.begin(), x.end());
        y_.assign(y.begin(), y.end());
        const std::size_t n = x_.size();
        m_.assign(n, 0.0);

        if (n == 3) {
            // single parabola through the three points
            const double h0 = x_[1] - x_[0], h1 = x_[2] - x_[1];
            const double dd = ((y_[2] - y_[1]) / h1 - (y_[1] - y_[0]) / h0) / (h0 + h1);
            m_.assign(3, 2.0 * dd);
            return;
        }

        // Interior equations h_{i-1} M_{i-1} + 2(h_{i-1}+h_i) M_i + h_i M_{i+1} = rhs_i
        // with M_0, M_{n-1} eliminated through the not-a-knot conditions
        //   M_0 = (1 + h0/h1) M_1 - (h0/h1) M_2,
        //   M_{n-1} = (1 + h_{n-2}/h_{n-3}) M_{n-2} - (h_{n-2}/h_{n-3}) M_{n-3}.
        const std::size_t k = n - 2;  // unknowns M_1..M_{n-2}
        std::vector<double> lower(k, 0.0), diag(k, 0.0), upper(k, 0.0), rhs(k, 0.0);
        auto h = [&](std::size_t i) { return x_[i + 1] - x_[i]; };
        for (std::size_t i = 1; i + 1 < n; ++i) {
            const double h0 = h(i - 1), h1 = h(i);
            const std::size_t r = i - 1;
            lower[r] = h0;
            diag[r] = 2.0 * (h0 + h1);
            upper[r] = h1;
            rhs[r] = 6.0 * ((y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0);
        }
        {
            const double r0 = h(0) / h(1);
            diag[0] += lower[0] * (1.0 + r0);
            upper[0] -= lower[0] * r0;
            lower[0] = 0.0;
            const double r1 = h(n - 2) / h(n - 3);
            diag[k - 1] += upper[k - 1] * (1.0 + r1);
            lower[k - 1] -= upper[k - 1] * r1;
            upper[k - 1] = 0.0;
        }
        for (std::size_t r = 1; r < k; ++r) {
            const double w = lower[r] / diag[r - 1];
            diag[r] -= w * upper[r - 1];
            rhs[r] -= w * rhs[r - 1];
        }
        std::vector<double> sol(k, 0.0);
        sol[k - 1] = rhs[k - 1] / diag[k - 1];
        for (std::size_t r = k - 1; r-- > 0;) sol[r] = (rhs[r] - upper[r] * sol[r + 1]) / diag[r];
        for (std::size_t i = 0; i < k; ++i) m_[i + 1] = sol[i];
        m_[0] = (1.0 + h(0) / h(1)) * m_[1] - (h(0) / h(1)) * m_[2];
        m_[n - 1] = (1.0 + h(n - 2) / h(n - 3)) * m_[n - 2] - (h(n - 2) / h(n - 3)) * m_[n - 3];
    }

    double value(double t) const {
        const std::size_t i = interval(t);
        const double h = x_[i + 1] - x_[i];
        const double a = (x_[i + 1] - t) / h, b = (t - x_[i]) / h;
        return a * y_[i] + b * y_[i + 1] +
               ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
    }

    double derivative(double t) const {
        const std::size_t i = interval(t);
        const double h = x_[i + 1] - x_[i];
        const double a = (x_[i + 1] - t) / h, b = (t - x_[i]) / h;
        return (y_[i + 1] - y_[i]) / h +
               ((3.0 * b * b - 1.0) * m_[i + 1] - (3.0 * a * a - 1.0) * m_[i]) * h / 6.0;
    }

private:
    std::size_t interval(double t) const {
        if (t <= x_.front()) return 0;
        if (t >= x_[x_.size() - 2]) return x_.size() - 2;
        std::size_t lo = 0, hi = x_.size() - 2;
        while (lo < hi) {
            const std::size_t mid = (lo + hi + 1) / 2;
            if (x_[mid] <= t)
                lo = mid;
            else
                hi = mid - 1;
        }
        return lo;
    }

    std::vector<double> x_, y_, m_;  // m_ = second derivatives at nodes
};

}  // namespace langcal
