#pragma once

#include "langcal/sde.hpp"

#include <optional>
#include <string>
#include <vector>

namespace langcal {

/// Closed-form CIR quantities: stationary and transition densities and
/// scores, conditional power moments, lagged power-coordinate correlations
/// and their derivatives, and the K_alpha kernel of the affine inverse
/// problem. Dimensionless parameters nu = kappa*theta/gamma, beta = kappa/gamma.
class CirClosedForms {
public:
    explicit CirClosedForms(const CirParams& params);

    const CirParams& params() const { return params_; }
    double nu() const { return nu_; }
    double beta() const { return beta_; }
    double lag_decay(double t) const;        // z = exp(-kappa t)
    double lag_concentration(double t) const;  // c_t = beta / (1 - z)

    double stationary_log_density(double x) const;
    double stationary_density(double x) const;
    double stationary_score(double x) const;  // (nu - 1)/x - beta
    double stationary_moment(double alpha) const;

    double transition_log_density(double x, double x0, double t) const;
    double transition_density(double x, double x0, double t) const;

    /// d/dx0 log p_t(x | x0), through the overflow-safe Bessel ratio.
    double conditional_score(double x, double x0, double t) const;

    /// E[X_t^alpha | X_0 = x0] via Kummer's 1F1.
    double conditional_moment(double alpha, double t, double x0) const;

    /// C_{alpha,1}(t) = E[X_t^alpha X_0] and its exact time derivative.
    double power_coordinate_correlation(double alpha, double t) const;
    double correlation_derivative(double alpha, double t) const;

    /// K_alpha(t); identically zero for the coordinate channel alpha = 1.
    double k_alpha(double alpha, double t) const;

    /// <X_t^alpha s(X_0)> (stationary lagged score correlation).
    double score_correlation(double alpha, double t) const;

    /// Residual target E_{alpha,1}(t), computed by the reduced form -gamma K_alpha.
    double residual(double alpha, double t) const;
    /// Same residual by the defining subtraction Cdot - Phi <X_t^alpha s(X_0)>.
    double residual_by_subtraction(double alpha, double t) const;

    double phi() const { return params_.theta * params_.gamma; }  // <M> = theta gamma
    double mobility(double x) const { return params_.gamma * x; }

private:
    CirParams params_;
    double nu_, beta_;
};

struct CirInverseRow {
    double alpha = 0.0;
    double t = 0.0;
    double k_alpha = 0.0;        // analytic K_alpha(t)
    double operator_unit = 0.0;  // A_{t,alpha,1} for the unit correction (x - theta)
    double operator_se = 0.0;    // between-trajectory standard error (MC path only)
    double residual = 0.0;       // target E_{alpha,1}(t)
};

struct CirInverseResult {
    double a = 0.0;
    std::vector<CirInverseRow> rows;
};

/// Exact least-squares recovery of the affine coefficient from the analytic
/// kernel and residuals; returns a = gamma up to rounding. Throws when the
/// design is degenerate (all K_alpha vanish, e.g. only alpha = 1 supplied).
CirInverseResult solve_affine_inverse_analytic(const CirClosedForms& cf,
                                               const std::vector<double>& alphas,
                                               const std::vector<double>& t_grid);

/// Monte Carlo recovery: empirical correlation-derivative residuals from the
/// ensemble combined with the analytic conditional score.
CirInverseResult solve_affine_inverse_mc(const CirClosedForms& cf, const TrajectoryEnsemble& ens,
                                         const std::vector<double>& alphas,
                                         const std::vector<double>& t_grid);

struct CirBenchmarkReport {
    CirParams params;
    std::vector<double> alphas, t_grid;
    CirInverseResult analytic;
    std::optional<CirInverseResult> monte_carlo;
};

void write_cir_report(const CirBenchmarkReport& report, const std::string& path);

}  // namespace langcal
