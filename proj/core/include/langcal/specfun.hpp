#pragma once

namespace langcal::specfun {

/// Value of a special function, possibly returned in log form when the
/// unscaled value would overflow. When log_scaled is true, exp(value) is the
/// function value.
struct SpecFunResult {
    double value = 0.0;
    bool log_scaled = false;
};

/// ln Gamma(x) for x > 0. Lanczos approximation (g = 7, 9 coefficients) with
/// the recurrence ln Gamma(x) = ln Gamma(x+1) - ln x below 0.5.
double log_gamma(double x);

/// Gamma(x) for x > 0.
double gamma_fn(double x);

/// Modified Bessel function of the first kind I_nu(x), nu >= -1, x >= 0.
/// Power series for x <= 30; log-scaled streaming series for larger x.
SpecFunResult bessel_i(double nu, double x);

/// Ratio I_nu(x) / I_{nu-1}(x) for nu > 0, x >= 0, evaluated by Perron's
/// continued fraction. Never overflows; usable up to x ~ 1e4 and beyond.
double bessel_i_ratio(double nu, double x);

/// Kummer confluent hypergeometric 1F1(a; b; z). Direct series for z >= 0 or
/// terminating polynomial a; Kummer transform 1F1(a;b;z) = e^z 1F1(b-a;b;-z)
/// otherwise.
double hyp1f1(double a, double b, double z);

/// Gauss hypergeometric 2F1(a, b; c; z) for c > 0 and z in [0, 1).
double hyp2f1(double a, double b, double c, double z);

}  // namespace langcal::specfun
