#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

namespace langcal {

/// Adaptive Gauss-Kronrod (G7, K15) quadrature on [a, b].
/// Bisects until the local Kronrod-Gauss discrepancy meets the tolerance.
inline double integrate_gk15(const std::function<double(double)>& f, double a, double b,
                             double rel_tol = 1e-10, double abs_tol = 1e-14, int max_depth = 40) {
    // K15 nodes (positive half) and weights; G7 weights on the odd entries.
    static const double xk[8] = {0.0,
                                 0.2077849550078985,
                                 0.4058451513773972,
                                 0.5860872354676911,
                                 0.7415311855993945,
                                 0.8648644233597691,
                                 0.9491079123427585,
                                 0.9914553711208126};
    static const double wk[8] = {0.2094821410847278, 0.2044329400752989, 0.1903505780647854,
                                 0.1690047266392679, 0.1406532597155259, 0.1047900103222502,
                                 0.0630920926299785, 0.0229353220105292};
    static const double wg[4] = {0.4179591836734694, 0.3818300505051189, 0.2797053914892767,
                                 0.1294849661688697};

    struct Panel {
        static void eval(const std::function<double(double)>& f, double a, double b, double& k,
                         double& g) {
            const double c = 0.5 * (a + b), h = 0.5 * (b - a);
            double fk = wk[0] * f(c);
            double fg = wg[0] * f(c);
            for (int i = 1; i < 8; ++i) {
                const double fv = f(c + h * xk[i]) + f(c - h * xk[i]);
                fk += wk[i] * fv;
                if (i % 2 == 0) fg += wg[i / 2] * fv;
            }
            k = fk * h;
            g = fg * h;
        }
    };

    std::function<double(double, double, int)> rec = [&](double lo, double hi,
                                                         int depth) -> double {
        double k, g;
        Panel::eval(f, lo, hi, k, g);
        const double err = std::fabs(k - g);
        if (err <= abs_tol + rel_tol * std::fabs(k) || depth >= max_depth) {
            if (depth >= max_depth && err > 1e3 * (abs_tol + rel_tol * std::fabs(k)))
                throw std::runtime_error("integrate_gk15: adaptive refinement failed");
            return k;
        }
        const double mid = 0.5 * (lo + hi);
        return rec(lo, mid, depth + 1) + rec(mid, hi, depth + 1);
    };
    return rec(a, b, 0);
}

}  // namespace langcal
