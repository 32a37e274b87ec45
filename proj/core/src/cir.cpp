#include "langcal/cir.hpp"

#include "langcal/lagstats.hpp"
#include "langcal/specfun.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace langcal {

using specfun::bessel_i;
using specfun::bessel_i_ratio;
using specfun::hyp1f1;
using specfun::hyp2f1;
using specfun::log_gamma;

CirClosedForms::CirClosedForms(const CirParams& params) : params_(params) {
    require(params.kappa > 0 && params.theta > 0 && params.gamma > 0,
            "CirClosedForms: parameters must be positive");
    if (params.kappa * params.theta < params.gamma)
        throw std::invalid_argument("CirClosedForms: Feller condition kappa*theta >= gamma");
    nu_ = params.kappa * params.theta / params.gamma;
    beta_ = params.kappa / params.gamma;
}

double CirClosedForms::lag_decay(double t) const { return std::exp(-params_.kappa * t); }

double CirClosedForms::lag_concentration(double t) const {
    require(t > 0, "lag_concentration: t must be positive");
    return beta_ / (1.0 - lag_decay(t));
}

double CirClosedForms::stationary_log_density(double x) const {
    if (!(x > 0)) throw std::domain_error("cir stationary density: x must be positive");
    return nu_ * std::log(beta_) - log_gamma(nu_) + (nu_ - 1.0) * std::log(x) - beta_ * x;
}

double CirClosedForms::stationary_density(double x) const {
    return std::exp(stationary_log_density(x));
}

double CirClosedForms::stationary_score(double x) const {
    if (!(x > 0)) throw std::domain_error("cir stationary score: x must be positive");
    return (nu_ - 1.0) / x - beta_;
}

double CirClosedForms::stationary_moment(double alpha) const {
    require(alpha + nu_ > 0, "stationary_moment: requires alpha + nu > 0");
    return std::pow(beta_, -alpha) * std::exp(log_gamma(alpha + nu_) - log_gamma(nu_));
}

double CirClosedForms::transition_log_density(double x, double x0, double t) const {
    if (!(x > 0 && x0 > 0 && t > 0))
        throw std::domain_error("cir transition density: requires x, x0, t > 0");
    const double z = lag_decay(t);
    const double ct = lag_concentration(t);
    const double u = ct * z * x0;
    const double v = ct * x;
    const auto bessel = bessel_i(nu_ - 1.0, 2.0 * std::sqrt(u * v));
    const double log_bessel = bessel.log_scaled ? bessel.value : std::log(bessel.value);
    return std::log(ct) - (u + v) + 0.5 * (nu_ - 1.0) * (std::log(v) - std::log(u)) + log_bessel;
}

double CirClosedForms::transition_density(double x, double x0, double t) const {
    return std::exp(transition_log_density(x, x0, t));
}

double CirClosedForms::conditional_score(double x, double x0, double t) const {
    if (!(x > 0 && x0 > 0 && t > 0))
        throw std::domain_error("cir conditional score: requires x, x0, t > 0");
    const double z = lag_decay(t);
    const double ct = lag_concentration(t);
    const double arg = 2.0 * ct * std::sqrt(z * x0 * x);
    const double ratio = bessel_i_ratio(nu_, arg);
    return ct * z * (-1.0 + std::sqrt(x / (z * x0)) * ratio);
}

double CirClosedForms::conditional_moment(double alpha, double t, double x0) const {
    require(alpha + nu_ > 0, "conditional_moment: requires alpha + nu > 0");
    if (!(x0 > 0 && t > 0)) throw std::domain_error("conditional_moment: requires x0, t > 0");
    const double z = lag_decay(t);
    const double ct = lag_concentration(t);
    return std::pow(ct, -alpha) * std::exp(log_gamma(alpha + nu_) - log_gamma(nu_)) *
           hyp1f1(-alpha, nu_, -ct * z * x0);
}

double CirClosedForms::power_coordinate_correlation(double alpha, double t) const {
    require(alpha + nu_ > 0, "power_coordinate_correlation: requires alpha + nu > 0");
    const double z = lag_decay(t);
    return std::pow(beta_, -(alpha + 1.0)) * std::exp(log_gamma(alpha + nu_) - log_gamma(nu_)) *
           (nu_ + alpha * z);
}

double CirClosedForms::correlation_derivative(double alpha, double t) const {
    require(alpha + nu_ > 0, "correlation_derivative: requires alpha + nu > 0");
    const double z = lag_decay(t);
    return -alpha * params_.theta * params_.gamma *
           std::pow(params_.kappa / params_.gamma, 1.0 - alpha) *
           std::exp(log_gamma(alpha + nu_) - log_gamma(nu_ + 1.0)) * z;
}

double CirClosedForms::k_alpha(double alpha, double t) const {
    require(alpha + nu_ > 0, "k_alpha: requires alpha + nu > 0");
    const double z = lag_decay(t);
    return alpha * params_.theta * z * std::pow(beta_, 1.0 - alpha) *
           std::exp(log_gamma(alpha + nu_) - log_gamma(nu_ + 1.0)) *
           (1.0 - hyp2f1(1.0 - alpha, 1.0, nu_ + 1.0, z));
}

double CirClosedForms::score_correlation(double alpha, double t) const {
    const double z = lag_decay(t);
    return -alpha * z * std::pow(beta_, 1.0 - alpha) *
           std::exp(log_gamma(alpha + nu_) - log_gamma(nu_ + 1.0)) *
           hyp2f1(1.0 - alpha, 1.0, nu_ + 1.0, z);
}

double CirClosedForms::residual(double alpha, double t) const {
    return -params_.gamma * k_alpha(alpha, t);
}

double CirClosedForms::residual_by_subtraction(double alpha, double t) const {
    return correlation_derivative(alpha, t) - phi() * score_correlation(alpha, t);
}

namespace {

double least_squares_scalar(const std::vector<CirInverseRow>& rows) {
    // model: operator_unit * a == residual
    double num = 0.0, den = 0.0;
    for (const auto& row : rows) {
        num += row.operator_unit * row.residual;
        den += row.operator_unit * row.operator_unit;
    }
    if (den < 1e-24)
        throw std::runtime_error(
            "cir affine inverse: degenerate design, all channels in the nullspace "
            "(supply an observable with alpha != 1)");
    return num / den;
}

}  // namespace

CirInverseResult solve_affine_inverse_analytic(const CirClosedForms& cf,
                                               const std::vector<double>& alphas,
                                               const std::vector<double>& t_grid) {
    require(!alphas.empty() && !t_grid.empty(), "affine inverse: empty design");
    CirInverseResult result;
    for (double alpha : alphas) {
        for (double t : t_grid) {
            CirInverseRow row;
            row.alpha = alpha;
            row.t = t;
            row.k_alpha = cf.k_alpha(alpha, t);
            row.operator_unit = -row.k_alpha;  // A[delta M_a] = -a K_alpha
            row.residual = cf.residual(alpha, t);
            result.rows.push_back(row);
        }
    }
    result.a = least_squares_scalar(result.rows);
    return result;
}

CirInverseResult solve_affine_inverse_mc(const CirClosedForms& cf, const TrajectoryEnsemble& ens,
                                         const std::vector<double>& alphas,
                                         const std::vector<double>& t_grid) {
    require(ens.dim == 1, "cir mc inverse: ensemble must be one-dimensional");
    std::vector<unsigned> powers;
    for (double alpha : alphas) {
        const auto p = static_cast<unsigned>(std::llround(alpha));
        require(std::fabs(alpha - p) < 1e-12 && p >= 1,
                "cir mc inverse: Monte Carlo path supports positive integer alpha");
        powers.push_back(p);
    }

    // empirical correlation curves + spline derivatives on {0} + t_grid
    const auto lib = power_observable_library(powers);
    auto curves = empirical_correlation(ens, lib, t_grid);
    derivative_curves(curves);

    const double theta = cf.params().theta;
    CirInverseResult result;
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        const double alpha = alphas[ai];
        for (std::size_t li = 0; li < t_grid.size(); ++li) {
            const double t = t_grid[li];
            const auto steps = curves.lag_steps[li + 1];

            // A[unit] = -<X_t^a s_{t|0} (X_0 - theta)> and G = Phi <X_t^a s(X_0)>,
            // both with the analytic scores; SE by between-trajectory batch means
            std::vector<double> traj_op(ens.n_traj(), 0.0);
            std::vector<std::size_t> traj_n(ens.n_traj(), 0);
            double gbar = 0.0;
            std::size_t n = 0;
            for (std::size_t tr = 0; tr < ens.n_traj(); ++tr) {
                const std::size_t len = ens.n_samples(tr);
                for (std::size_t k = 0; k + steps < len; ++k) {
                    const double x0 = ens.state(tr, k)[0];
                    const double xt = ens.state(tr, k + steps)[0];
                    const double phi_m = std::pow(xt, alpha);
                    traj_op[tr] -= phi_m * cf.conditional_score(xt, x0, t) * (x0 - theta);
                    gbar += phi_m * cf.stationary_score(x0);
                    ++traj_n[tr];
                }
                n += traj_n[tr];
            }
            double op = 0.0;
            for (std::size_t tr = 0; tr < ens.n_traj(); ++tr) op += traj_op[tr];
            op /= static_cast<double>(n);
            gbar *= cf.phi() / static_cast<double>(n);

            double se2 = 0.0;
            if (ens.n_traj() >= 2) {
                for (std::size_t tr = 0; tr < ens.n_traj(); ++tr) {
                    if (traj_n[tr] == 0) continue;
                    const double w = static_cast<double>(traj_n[tr]) / static_cast<double>(n);
                    const double m = traj_op[tr] / static_cast<double>(traj_n[tr]);
                    se2 += w * w * (m - op) * (m - op);
                }
                se2 *= static_cast<double>(ens.n_traj()) / static_cast<double>(ens.n_traj() - 1);
            }

            CirInverseRow row;
            row.alpha = alpha;
            row.t = t;
            row.k_alpha = cf.k_alpha(alpha, t);
            row.operator_unit = op;
            row.operator_se = std::sqrt(se2);
            row.residual = curves.channel(1 + ai, 0).cdot[li](0, 0) - gbar;
            result.rows.push_back(row);
        }
    }
    result.a = least_squares_scalar(result.rows);
    return result;
}

void write_cir_report(const CirBenchmarkReport& report, const std::string& path) {
    using nlohmann::json;
    auto rows_to_json = [](const CirInverseResult& r) {
        json rows = json::array();
        for (const auto& row : r.rows)
            rows.push_back(json{{"alpha", row.alpha},
                                {"t", row.t},
                                {"k_alpha", row.k_alpha},
                                {"operator_unit", row.operator_unit},
                                {"operator_se", row.operator_se},
                                {"residual", row.residual}});
        return json{{"a", r.a}, {"rows", rows}};
    };
    json j{{"system", "cir"},
           {"params",
            {{"kappa", report.params.kappa},
             {"theta", report.params.theta},
             {"gamma", report.params.gamma}}},
           {"alphas", report.alphas},
           {"t_grid", report.t_grid},
           {"analytic", rows_to_json(report.analytic)}};
    if (report.monte_carlo) j["monte_carlo"] = rows_to_json(*report.monte_carlo);
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

}  // namespace langcal
