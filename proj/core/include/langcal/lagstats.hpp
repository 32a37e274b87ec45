#pragma once

#include "langcal/matrix.hpp"
#include "langcal/sde.hpp"

#include <string>
#include <utility>
#include <vector>

namespace langcal {

/// Vector-valued monomial observable. Component c evaluates
/// prod_d x_d^exponents[c][d]; gradients and Hessians are closed-form.
struct Observable {
    std::string name;
    std::vector<std::vector<unsigned>> exponents;  // one row per component

    std::size_t dim() const { return exponents.size(); }
    std::size_t state_dim() const { return exponents.empty() ? 0 : exponents[0].size(); }
    void value(std::span<const double> x, std::span<double> out) const;
    void gradient(std::span<const double> x, Matrix& out) const;  // dim() x D
    void hessian(std::span<const double> x, std::size_t component, Matrix& out) const;  // D x D
};

Observable coordinate_observable(std::size_t state_dim);
Observable monomial_observable(std::string name, std::vector<unsigned> exponents);

/// Observables plus the ordered channel index pairs (m, n) used in fitting.
/// The coordinate observable is always present at index 0.
struct ObservableLibrary {
    std::vector<Observable> observables;
    std::vector<std::pair<std::size_t, std::size_t>> channels;

    std::size_t state_dim() const { return observables.front().state_dim(); }
};

/// The 18-channel benchmark library: phi_m in {x, y, x^2, xy, y^2, x^3, x^2 y,
/// x y^2, y^3}, phi_n in {x, y}, all scalar, plus the vector coordinate
/// observable at index 0.
ObservableLibrary affine2d_observable_library();

/// 1D library with scalar power observables x^alpha for the given integer
/// alphas (coordinate channel (x, x) plus (x^alpha, x) channels).
ObservableLibrary power_observable_library(const std::vector<unsigned>& alphas);

/// Per-channel matrix-valued lag curves and their spline-derivative estimates.
struct CorrelationCurveSet {
    struct Channel {
        std::size_t m = 0, n = 0;
        std::vector<Matrix> c;      // one d_m x d_n matrix per lag-grid point
        std::vector<Matrix> cdot;   // derivative on the positive lags only
        Matrix cdot0;               // one-sided derivative at 0+
    };

    std::vector<double> lag_grid;        // {0} followed by the positive lags
    std::vector<std::size_t> lag_steps;  // in saved steps
    std::vector<std::size_t> pair_counts;
    std::vector<Channel> channels;
    double saved_dt = 0.0;
    bool has_derivatives = false;

    const Channel& channel(std::size_t m, std::size_t n) const;
};

/// Uncentered empirical lagged cross-moments over all within-trajectory pairs:
/// C_{m,n}(tau) = (1/N_tau) sum phi_m(x_{k+tau}) phi_n(x_k)^T. Computes the
/// coordinate channel (0,0) plus every fitted channel in the library.
/// Throws when any lag has fewer than min_pairs admissible pairs.
CorrelationCurveSet empirical_correlation(const TrajectoryEnsemble& ens,
                                          const ObservableLibrary& lib,
                                          const std::vector<double>& positive_lags,
                                          std::size_t min_pairs = 30);

/// Fill entrywise natural-cubic-spline derivatives over {0} + lags; the 0+
/// entry is the spline's one-sided derivative at the origin.
void derivative_curves(CorrelationCurveSet& curves);

struct MeanMobility {
    Matrix phi;                           // symmetric part clipped to the PSD cone
    std::vector<double> sym_eigenvalues;  // of the raw estimate, ascending
    std::vector<double> lag_grid;
};

/// Constant baseline Phi = -Cdot_{x,x}(0+). Symmetric-part eigenvalues below
/// -1e-6 raise an error; values in [-1e-6, 0) are clipped to zero.
MeanMobility estimate_phi(const CorrelationCurveSet& curves);

/// Plot-ready CSV: channel_m, channel_n, entry_row, entry_col, tau, C, Cdot,
/// n_pairs.
void write_curves_csv(const CorrelationCurveSet& curves, const std::string& path);

/// Default benchmark lag grid {0.05, 0.10, ..., 1.00}.
std::vector<double> default_lag_grid();

}  // namespace langcal
