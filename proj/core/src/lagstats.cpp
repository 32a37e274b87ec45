#include "langcal/lagstats.hpp"

#include "langcal/spline.hpp"
#include "langcal/threading.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace langcal {

namespace {

double int_pow(double x, unsigned e) {
    double r = 1.0;
    while (e > 0) {
        if (e & 1u) r *= x;
        x *= x;
        e >>= 1u;
    }
    return r;
}

}  // namespace

void Observable::value(std::span<const double> x, std::span<double> out) const {
    for (std::size_t c = 0; c < exponents.size(); ++c) {
        double v = 1.0;
        for (std::size_t d = 0; d < x.size(); ++d) v *= int_pow(x[d], exponents[c][d]);
        out[c] = v;
    }
}

void Observable::gradient(std::span<const double> x, Matrix& out) const {
    const std::size_t D = state_dim();
    if (out.rows != dim() || out.cols != D) out.resize(dim(), D);
    for (std::size_t c = 0; c < exponents.size(); ++c) {
        for (std::size_t j = 0; j < D; ++j) {
            const unsigned ej = exponents[c][j];
            if (ej == 0) {
                out(c, j) = 0.0;
                continue;
            }
            double v = ej * int_pow(x[j], ej - 1);
            for (std::size_t d = 0; d < D; ++d)
                if (d != j) v *= int_pow(x[d], exponents[c][d]);
            out(c, j) = v;
        }
    }
}

void Observable::hessian(std::span<const double> x, std::size_t component, Matrix& out) const {
    const std::size_t D = state_dim();
    if (out.rows != D || out.cols != D) out.resize(D, D);
    const auto& e = exponents[component];
    for (std::size_t i = 0; i < D; ++i) {
        for (std::size_t j = 0; j < D; ++j) {
            double v;
            if (i == j) {
                if (e[i] < 2) {
                    out(i, j) = 0.0;
                    continue;
                }
                v = static_cast<double>(e[i]) * (e[i] - 1) * int_pow(x[i], e[i] - 2);
                for (std::size_t d = 0; d < D; ++d)
                    if (d != i) v *= int_pow(x[d], e[d]);
            } else {
                if (e[i] == 0 || e[j] == 0) {
                    out(i, j) = 0.0;
                    continue;
                }
                v = static_cast<double>(e[i]) * e[j] * int_pow(x[i], e[i] - 1) *
                    int_pow(x[j], e[j] - 1);
                for (std::size_t d = 0; d < D; ++d)
                    if (d != i && d != j) v *= int_pow(x[d], e[d]);
            }
            out(i, j) = v;
        }
    }
}

Observable coordinate_observable(std::size_t state_dim) {
    Observable obs;
    obs.name = "x";
    obs.exponents.resize(state_dim, std::vector<unsigned>(state_dim, 0));
    for (std::size_t d = 0; d < state_dim; ++d) obs.exponents[d][d] = 1;
    return obs;
}

Observable monomial_observable(std::string name, std::vector<unsigned> exponents) {
    Observable obs;
    obs.name = std::move(name);
    obs.exponents = {std::move(exponents)};
    return obs;
}

ObservableLibrary affine2d_observable_library() {
    ObservableLibrary lib;
    lib.observables.push_back(coordinate_observable(2));
    const std::vector<std::pair<std::string, std::vector<unsigned>>> defs = {
        {"x", {1, 0}},   {"y", {0, 1}},   {"x2", {2, 0}},  {"xy", {1, 1}},  {"y2", {0, 2}},
        {"x3", {3, 0}},  {"x2y", {2, 1}}, {"xy2", {1, 2}}, {"y3", {0, 3}}};
    for (const auto& [name, exps] : defs)
        lib.observables.push_back(monomial_observable(name, exps));
    // channels: every phi_m against phi_n in {x, y}
    for (std::size_t m = 1; m < lib.observables.size(); ++m)
        for (std::size_t n = 1; n <= 2; ++n) lib.channels.emplace_back(m, n);
    return lib;
}

ObservableLibrary power_observable_library(const std::vector<unsigned>& alphas) {
    ObservableLibrary lib;
    lib.observables.push_back(coordinate_observable(1));
    // The coordinate channel is kept out of the fitted set: for affine
    // conditional means it lies in the operator nullspace and its residual
    // target is pure noise. It still feeds the Phi estimate via channel (0,0).
    for (unsigned a : alphas) {
        lib.observables.push_back(monomial_observable("x^" + std::to_string(a), {a}));
        lib.channels.emplace_back(lib.observables.size() - 1, 0);
    }
    return lib;
}

const CorrelationCurveSet::Channel& CorrelationCurveSet::channel(std::size_t m,
                                                                 std::size_t n) const {
    for (const auto& ch : channels)
        if (ch.m == m && ch.n == n) return ch;
    throw std::invalid_argument("correlation channel not computed");
}

CorrelationCurveSet empirical_correlation(const TrajectoryEnsemble& ens,
                                          const ObservableLibrary& lib,
                                          const std::vector<double>& positive_lags,
                                          std::size_t min_pairs) {
    require(!positive_lags.empty(), "empirical_correlation: need at least one positive lag");
    const double sdt = ens.saved_dt();
    CorrelationCurveSet curves;
    curves.saved_dt = sdt;
    curves.lag_grid.push_back(0.0);
    curves.lag_steps.push_back(0);
    for (double tau : positive_lags) {
        require(tau > 0, "empirical_correlation: lags must be positive");
        const double ratio = tau / sdt;
        const auto steps = static_cast<std::size_t>(std::llround(ratio));
        if (steps == 0 || std::fabs(ratio - static_cast<double>(steps)) > 1e-6)
            throw std::invalid_argument("empirical_correlation: lag not on the saved grid");
        curves.lag_grid.push_back(tau);
        curves.lag_steps.push_back(steps);
    }

    // channel set = coordinate channel + fitted channels
    std::vector<std::pair<std::size_t, std::size_t>> wanted = {{0, 0}};
    for (auto ch : lib.channels)
        if (ch != std::make_pair(std::size_t(0), std::size_t(0))) wanted.push_back(ch);

    const std::size_t n_lags = curves.lag_grid.size();
    curves.pair_counts.assign(n_lags, 0);
    curves.channels.resize(wanted.size());
    for (std::size_t c = 0; c < wanted.size(); ++c) {
        auto& ch = curves.channels[c];
        ch.m = wanted[c].first;
        ch.n = wanted[c].second;
        const std::size_t dm = lib.observables[ch.m].dim();
        const std::size_t dn = lib.observables[ch.n].dim();
        ch.c.assign(n_lags, Matrix(dm, dn));
    }

    const std::size_t n_obs = lib.observables.size();
    std::vector<std::size_t> obs_offset(n_obs + 1, 0);
    for (std::size_t o = 0; o < n_obs; ++o)
        obs_offset[o + 1] = obs_offset[o] + lib.observables[o].dim();
    const std::size_t obs_total = obs_offset[n_obs];

    // Accumulate per lag in parallel; each lag owns its accumulators so the
    // reduction order is fixed.
    parallel_for_ranges(n_lags, [&](std::size_t l0, std::size_t l1) {
        std::vector<double> phi_t(obs_total), phi_0(obs_total);
        for (std::size_t l = l0; l < l1; ++l) {
            const std::size_t steps = curves.lag_steps[l];
            std::size_t count = 0;
            for (std::size_t t = 0; t < ens.n_traj(); ++t) {
                const std::size_t len = ens.n_samples(t);
                if (len <= steps) continue;
                for (std::size_t k = 0; k + steps < len; ++k) {
                    const auto xt = ens.state(t, k + steps);
                    const auto x0 = ens.state(t, k);
                    for (std::size_t o = 0; o < n_obs; ++o) {
                        lib.observables[o].value(
                            xt, {phi_t.data() + obs_offset[o], lib.observables[o].dim()});
                        lib.observables[o].value(
                            x0, {phi_0.data() + obs_offset[o], lib.observables[o].dim()});
                    }
                    for (auto& ch : curves.channels) {
                        const double* pm = phi_t.data() + obs_offset[ch.m];
                        const double* pn = phi_0.data() + obs_offset[ch.n];
                        Matrix& acc = ch.c[l];
                        for (std::size_t a = 0; a < acc.rows; ++a)
                            for (std::size_t b = 0; b < acc.cols; ++b)
                                acc(a, b) += pm[a] * pn[b];
                    }
                    ++count;
                }
            }
            curves.pair_counts[l] = count;
        }
    });

    for (std::size_t l = 0; l < n_lags; ++l) {
        if (curves.pair_counts[l] < min_pairs)
            throw std::runtime_error("empirical_correlation: fewer than " +
                                     std::to_string(min_pairs) + " pairs at lag " +
                                     std::to_string(curves.lag_grid[l]));
        for (auto& ch : curves.channels)
            for (auto& v : ch.c[l].data) v /= static_cast<double>(curves.pair_counts[l]);
    }
    return curves;
}

void derivative_curves(CorrelationCurveSet& curves) {
    const std::size_t n_lags = curves.lag_grid.size();
    require(n_lags >= 4, "derivative_curves: need at least 4 grid points including 0");
    for (auto& ch : curves.channels) {
        const std::size_t dm = ch.c[0].rows, dn = ch.c[0].cols;
        ch.cdot.assign(n_lags - 1, Matrix(dm, dn));
        ch.cdot0.resize(dm, dn);
        std::vector<double> y(n_lags);
        for (std::size_t a = 0; a < dm; ++a) {
            for (std::size_t b = 0; b < dn; ++b) {
                for (std::size_t l = 0; l < n_lags; ++l) y[l] = ch.c[l](a, b);
                CubicSpline spline;
                spline.build(curves.lag_grid, y);
                ch.cdot0(a, b) = spline.derivative(0.0);
                for (std::size_t l = 1; l < n_lags; ++l)
                    ch.cdot[l - 1](a, b) = spline.derivative(curves.lag_grid[l]);
            }
        }
    }
    curves.has_derivatives = true;
}

MeanMobility estimate_phi(const CorrelationCurveSet& curves) {
    require(curves.has_derivatives, "estimate_phi: derivative curves not filled");
    const auto& coord = curves.channel(0, 0);
    MeanMobility result;
    result.lag_grid = curves.lag_grid;
    const std::size_t D = coord.cdot0.rows;
    Matrix phi(D, D);
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) phi(i, j) = -coord.cdot0(i, j);

    // split, clip the symmetric part, reassemble
    Matrix sym(D, D), anti(D, D);
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            sym(i, j) = 0.5 * (phi(i, j) + phi(j, i));
            anti(i, j) = 0.5 * (phi(i, j) - phi(j, i));
        }
    Matrix vec;
    symmetric_eigen(sym, result.sym_eigenvalues, vec);
    if (result.sym_eigenvalues.front() < -1e-6)
        throw std::runtime_error("estimate_phi: symmetric part indefinite (min eigenvalue " +
                                 std::to_string(result.sym_eigenvalues.front()) + ")");
    Matrix clipped(D, D);
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < D; ++k)
                s += vec(i, k) * std::max(result.sym_eigenvalues[k], 0.0) * vec(j, k);
            clipped(i, j) = s + anti(i, j);
        }
    result.phi = std::move(clipped);
    return result;
}

void write_curves_csv(const CorrelationCurveSet& curves, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "channel_m,channel_n,entry_row,entry_col,tau,C,Cdot,n_pairs\n";
    char buf[96];
    for (const auto& ch : curves.channels) {
        for (std::size_t l = 0; l < curves.lag_grid.size(); ++l) {
            for (std::size_t a = 0; a < ch.c[l].rows; ++a) {
                for (std::size_t b = 0; b < ch.c[l].cols; ++b) {
                    double cdot = std::nan("");
                    if (curves.has_derivatives)
                        cdot = (l == 0) ? ch.cdot0(a, b) : ch.cdot[l - 1](a, b);
                    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.12g,%.12g,%.12g,%zu\n",
                                  ch.m, ch.n, a, b, curves.lag_grid[l], ch.c[l](a, b), cdot,
                                  curves.pair_counts[l]);
                    os << buf;
                }
            }
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<double> default_lag_grid() {
    std::vector<double> lags;
    for (int i = 1; i <= 20; ++i) lags.push_back(0.05 * i);
    return lags;
}

}  // namespace langcal
