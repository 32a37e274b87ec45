#include "langcal/specfun.hpp"

#include <cmath>
#include <stdexcept>

namespace langcal::specfun {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

bool is_nonpositive_integer(double v) {
    return v <= 1e-12 && std::fabs(v - std::round(v)) < 1e-12;
}

}  // namespace

double log_gamma(double x) {
    if (!(x > 0.0)) throw std::domain_error("log_gamma: requires x > 0");
    // Lanczos, g = 7, 9 coefficients.
    static const double c[9] = {0.99999999999980993,     676.5203681218851,
                                -1259.1392167224028,     771.32342877765313,
                                -176.61502916214059,     12.507343278686905,
                                -0.13857109526572012,    9.9843695780195716e-6,
                                1.5056327351493116e-7};
    if (x < 0.5) return log_gamma(x + 1.0) - std::log(x);
    const double xm1 = x - 1.0;
    double sum = c[0];
    for (int i = 1; i < 9; ++i) sum += c[i] / (xm1 + i);
    const double t = xm1 + 7.5;
    return kLogSqrt2Pi + (xm1 + 0.5) * std::log(t) - t + std::log(sum);
}

double gamma_fn(double x) { return std::exp(log_gamma(x)); }

SpecFunResult bessel_i(double nu, double x) {
    if (nu < -1.0) throw std::domain_error("bessel_i: requires nu >= -1");
    if (x < 0.0) throw std::domain_error("bessel_i: requires x >= 0");

    if (x == 0.0) {
        if (nu == 0.0) return {1.0, false};
        if (nu > 0.0 || nu == -1.0) return {0.0, false};
        throw std::domain_error("bessel_i: diverges at x = 0 for nu in (-1, 0)");
    }

    if (x <= 30.0) {
        // Direct power series: all terms positive, no cancellation.
        // Skip k = 0 when 1/Gamma(nu+1) vanishes (nu = -1 exactly).
        double sum = 0.0;
        int k0 = is_nonpositive_integer(nu + 1.0) ? 1 : 0;
        double term = std::exp((2.0 * k0 + nu) * std::log(0.5 * x) - log_gamma(k0 + 1.0) -
                               log_gamma(k0 + nu + 1.0));
        const double q = 0.25 * x * x;
        for (int k = k0; k < 500; ++k) {
            sum += term;
            term *= q / ((k + 1.0) * (k + nu + 1.0));
            if (term < sum * 1e-17 && 2.0 * k > x) break;
        }
        return {sum, false};
    }

    // Streaming log-sum-exp over the series terms; returns log I_nu(x).
    const double log_half_x = std::log(0.5 * x);
    const int k_peak = static_cast<int>(0.5 * (-nu + std::sqrt(nu * nu + x * x))) + 1;
    double running_max = -1e300;
    double scaled_sum = 0.0;
    for (int k = (is_nonpositive_integer(nu + 1.0) ? 1 : 0); k < k_peak + 100000; ++k) {
        const double lt =
            (2.0 * k + nu) * log_half_x - log_gamma(k + 1.0) - log_gamma(k + nu + 1.0);
        if (lt > running_max) {
            scaled_sum = scaled_sum * std::exp(running_max - lt) + 1.0;
            running_max = lt;
        } else {
            scaled_sum += std::exp(lt - running_max);
            if (k > k_peak && lt < running_max - 45.0) break;
        }
    }
    return {running_max + std::log(scaled_sum), true};
}

double bessel_i_ratio(double nu, double x) {
    if (!(nu > 0.0)) throw std::domain_error("bessel_i_ratio: requires nu > 0");
    if (x < 0.0) throw std::domain_error("bessel_i_ratio: requires x >= 0");
    if (x == 0.0) return 0.0;

    // Perron's continued fraction for I_nu(x)/I_{nu-1}(x):
    //   x / (2nu + x - (2nu+1)x / (2nu+1+2x - (2nu+3)x / (2nu+2+2x - ...)))
    // evaluated by the modified Lentz algorithm.
    const double tiny = 1e-300;
    double f = tiny, C = f, D = 0.0;
    for (int j = 1; j <= 100000; ++j) {
        double a, b;
        if (j == 1) {
            a = x;
            b = 2.0 * nu + x;
        } else {
            a = -(2.0 * nu + 2.0 * j - 3.0) * x;
            b = 2.0 * nu + j - 1.0 + 2.0 * x;
        }
        D = b + a * D;
        if (std::fabs(D) < tiny) D = tiny;
        C = b + a / C;
        if (std::fabs(C) < tiny) C = tiny;
        D = 1.0 / D;
        const double delta = C * D;
        f *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) return f;
    }
    throw std::runtime_error("bessel_i_ratio: continued fraction did not converge");
}

double hyp1f1(double a, double b, double z) {
    if (is_nonpositive_integer(b)) throw std::domain_error("hyp1f1: b must not be a nonpositive integer");
    if (z == 0.0) return 1.0;
    if (z < 0.0 && !is_nonpositive_integer(a)) {
        // Kummer transform keeps the series terms positive for a, b > 0.
        return std::exp(z) * hyp1f1(b - a, b, -z);
    }
    double term = 1.0, sum = 1.0;
    for (int k = 0; k < 10000; ++k) {
        term *= (a + k) / ((b + k) * (k + 1.0)) * z;
        sum += term;
        if (std::fabs(term) <= 1e-16 * std::fabs(sum)) return sum;
    }
    throw std::runtime_error("hyp1f1: series did not converge within the iteration cap");
}

double hyp2f1(double a, double b, double c, double z) {
    if (!(c > 0.0)) throw std::domain_error("hyp2f1: requires c > 0");
    if (!(z >= 0.0 && z < 1.0)) throw std::domain_error("hyp2f1: requires z in [0, 1)");
    double term = 1.0, sum = 1.0;
    for (int k = 0; k < 10000; ++k) {
        term *= (a + k) * (b + k) / ((c + k) * (k + 1.0)) * z;
        sum += term;
        if (std::fabs(term) <= 1e-16 * std::fabs(sum)) return sum;
    }
    throw std::runtime_error("hyp2f1: series stalled (z too close to 1)");
}

}  // namespace langcal::specfun
