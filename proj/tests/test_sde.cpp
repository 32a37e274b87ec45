#include "langcal/sde.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace langcal;

namespace {

// Plain lagged moment <x_i(t+tau) x_j(t)> over all within-trajectory pairs.
double lagged_moment(const TrajectoryEnsemble& ens, std::size_t i, std::size_t j, double tau) {
    const auto steps = static_cast<std::size_t>(std::llround(tau / ens.saved_dt()));
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t) {
        const std::size_t len = ens.n_samples(t);
        for (std::size_t k = 0; k + steps < len; ++k) {
            sum += ens.state(t, k + steps)[i] * ens.state(t, k)[j];
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

double sample_moment(const TrajectoryEnsemble& ens, int power) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t) {
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            sum += std::pow(ens.state(t, k)[0], power);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

}  // namespace

TEST_CASE("integrate: zero drift and noise keeps the state constant") {
    DiffusionSpec spec;
    spec.dim = 2;
    spec.drift = [](std::span<const double>, std::span<double> out) { out[0] = out[1] = 0.0; };
    spec.noise_amplitude = [](std::span<const double>, Matrix& b) {
        if (b.rows != 2) b.resize(2, 2);
        b.fill(0.0);
    };
    const double x0[2] = {0.7, -1.3};
    const auto ens = integrate(spec, {x0, 2}, 100, 0.01, 10, 42);
    REQUIRE(ens.n_samples(0) == 11);
    for (std::size_t k = 0; k < ens.n_samples(0); ++k) {
        CHECK(ens.state(0, k)[0] == 0.7);
        CHECK(ens.state(0, k)[1] == -1.3);
    }
}

TEST_CASE("integrate: deterministic linear drift matches exp(-t)") {
    DiffusionSpec spec;
    spec.dim = 1;
    spec.drift = [](std::span<const double> x, std::span<double> out) { out[0] = -x[0]; };
    spec.noise_amplitude = [](std::span<const double>, Matrix& b) {
        if (b.rows != 1) b.resize(1, 1);
        b(0, 0) = 0.0;
    };
    const double x0 = 1.0;
    const auto ens = integrate(spec, {&x0, 1}, 10000, 1e-4, 10000, 0);
    const double final_value = ens.state(0, ens.n_samples(0) - 1)[0];
    CHECK(std::fabs(final_value - std::exp(-1.0)) < 1e-3);
}

TEST_CASE("integrate: divergence cap raises with context") {
    DiffusionSpec spec;
    spec.dim = 1;
    spec.drift = [](std::span<const double> x, std::span<double> out) {
        out[0] = x[0] * x[0] * x[0];
    };
    spec.noise_amplitude = [](std::span<const double>, Matrix& b) {
        if (b.rows != 1) b.resize(1, 1);
        b(0, 0) = 0.0;
    };
    const double x0 = 2.0;
    CHECK_THROWS_AS(integrate(spec, {&x0, 1}, 100000, 0.01, 1, 0), std::runtime_error);
}

TEST_CASE("cir_spec: drift fixed point, degenerate noise at zero, Feller check") {
    const CirParams p{1.0, 1.0, 0.5};
    const auto spec = cir_spec(p);
    double x = p.theta, mu = 0.0;
    spec.drift({&x, 1}, {&mu, 1});
    CHECK(mu == 0.0);
    Matrix b(1, 1);
    x = 0.0;
    spec.noise_amplitude({&x, 1}, b);
    CHECK(b(0, 0) == 0.0);
    CHECK_THROWS_AS(cir_spec(CirParams{1.0, 0.3, 0.5}), std::invalid_argument);
}

TEST_CASE("cir ensemble: positivity, stationary mean and variance" * doctest::timeout(120)) {
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 500.0;
    cfg.seed = 7;
    const auto ens = generate_reference_dataset(CirParams{1.0, 1.0, 0.5}, cfg);
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) REQUIRE(ens.state(t, k)[0] > 0.0);
    // Gamma stationary law: mean = theta, variance = theta*gamma/kappa
    const double mean = sample_moment(ens, 1);
    const double var = sample_moment(ens, 2) - mean * mean;
    CHECK(std::fabs(mean - 1.0) < 0.05);
    CHECK(std::fabs(var - 0.5) < 0.17);
}

TEST_CASE("affine2d_spec: drift at origin, noise at origin, potential gradient") {
    const Affine2dParams p;
    const auto spec = affine2d_spec(p);
    const double origin[2] = {0.0, 0.0};
    double mu[2];
    spec.drift({origin, 2}, {mu, 2});
    CHECK(mu[0] == 0.0);
    CHECK(mu[1] == 0.0);
    Matrix b(2, 2);
    spec.noise_amplitude({origin, 2}, b);
    CHECK(b(0, 0) == doctest::Approx(0.60));
    CHECK(b(0, 1) == doctest::Approx(0.10));
    CHECK(b(1, 0) == doctest::Approx(0.08));
    CHECK(b(1, 1) == doctest::Approx(0.55));

    const auto grad = affine2d_potential_gradient(p, 1.0, 0.0);
    CHECK(grad[0] == doctest::Approx(2.0));
    CHECK(grad[1] == doctest::Approx(0.0));
    // finite-difference cross-check at a generic point
    const double h = 1e-6, px = 0.8, py = -0.6;
    auto u = [&](double x, double y) {
        return p.quartic_x * x * x * x * x + p.cross * x * x * y * y +
               p.quartic_y * y * y * y * y + p.quad_x * x * x + p.quad_y * y * y;
    };
    const auto g = affine2d_potential_gradient(p, px, py);
    CHECK(g[0] == doctest::Approx((u(px + h, py) - u(px - h, py)) / (2 * h)).epsilon(1e-6));
    CHECK(g[1] == doctest::Approx((u(px, py + h) - u(px, py - h)) / (2 * h)).epsilon(1e-6));
}

TEST_CASE("paper preset metadata round-trips through generation") {
    const auto preset = paper_data_preset();
    CHECK(preset.dt == 1e-3);
    CHECK(preset.save_every == 1e-2);
    CHECK(preset.n_traj == 36);
    CHECK(preset.horizon == 3000.0);
    CHECK(preset.burn_in_fraction == 0.10);

    DataConfig cfg = preset;
    cfg.n_traj = 2;
    cfg.horizon = 1.0;  // keep the check cheap; step sizes are what matters
    const auto ens = generate_reference_dataset(OuParams{}, cfg);
    CHECK(ens.dt_integration == 1e-3);
    CHECK(ens.save_stride == 10);
    CHECK(ens.saved_dt() == doctest::Approx(1e-2));
}

TEST_CASE("burn-in: zero fraction retains all samples") {
    DataConfig cfg;
    cfg.n_traj = 1;
    cfg.horizon = 1.0;
    cfg.burn_in_fraction = 0.0;
    const auto all = generate_reference_dataset(OuParams{}, cfg);
    CHECK(all.n_samples(0) == 101);
    cfg.burn_in_fraction = 0.10;
    const auto trimmed = generate_reference_dataset(OuParams{}, cfg);
    CHECK(trimmed.n_samples(0) == 90);
}

TEST_CASE("reproducibility: identical seed and config give bit-identical ensembles") {
    DataConfig cfg;
    cfg.n_traj = 3;
    cfg.horizon = 5.0;
    cfg.seed = 99;
    const auto a = generate_reference_dataset(Affine2dParams{}, cfg);
    const auto b = generate_reference_dataset(Affine2dParams{}, cfg);
    REQUIRE(a.n_traj() == b.n_traj());
    for (std::size_t t = 0; t < a.n_traj(); ++t) CHECK(a.states[t] == b.states[t]);
}

TEST_CASE("OU ensemble: lagged autocorrelation fits exp(-tau)" * doctest::timeout(120)) {
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 500.0;
    cfg.seed = 3;
    const auto ens = generate_reference_dataset(OuParams{1, 1.0, 1.0}, cfg);
    const double c0 = lagged_moment(ens, 0, 0, 0.0);
    double ss_res = 0.0, ss_tot = 0.0, mean_ref = 0.0;
    std::vector<double> taus, ref;
    for (double tau = 0.1; tau <= 1.0 + 1e-9; tau += 0.1) {
        taus.push_back(tau);
        ref.push_back(std::exp(-tau));
        mean_ref += ref.back();
    }
    mean_ref /= static_cast<double>(ref.size());
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double c = lagged_moment(ens, 0, 0, taus[i]) / c0;
        ss_res += (c - ref[i]) * (c - ref[i]);
        ss_tot += (ref[i] - mean_ref) * (ref[i] - mean_ref);
    }
    CHECK(1.0 - ss_res / ss_tot > 0.99);
}

TEST_CASE("weak order: OU stationary variance bias scales linearly in dt" * doctest::timeout(300)) {
    // Euler-Maruyama on dx = -kappa x dt + sqrt(2 gamma) dW has discrete
    // stationary variance (gamma/kappa)/(1 - kappa dt / 2); the bias relative
    // to gamma/kappa is kappa dt / 2 + O(dt^2).
    const double kappa = 10.0, gamma = 1.0, exact = gamma / kappa;
    DiffusionSpec spec = ou_spec(OuParams{1, kappa, gamma});
    const std::vector<double> dts = {1e-2, 5e-3, 2.5e-3};
    const std::vector<double> horizons = {4000.0, 12000.0, 50000.0};
    for (std::size_t i = 0; i < dts.size(); ++i) {
        DataConfig cfg;
        cfg.n_traj = 2;
        cfg.horizon = horizons[i];
        cfg.dt = dts[i];
        cfg.save_every = dts[i];
        cfg.seed = 11 + i;
        const auto ens = generate_ensemble(spec, cfg);
        const double mean = sample_moment(ens, 1);
        const double var = sample_moment(ens, 2) - mean * mean;
        const double predicted_bias = exact * kappa * dts[i] / 2.0;
        const double measured_bias = var - exact;
        CHECK(measured_bias > 0.25 * predicted_bias);
        CHECK(measured_bias < 2.2 * predicted_bias);
    }
}

TEST_CASE("score-based form with antisymmetric mobility preserves the Gaussian law"
          * doctest::timeout(300)) {
    // dx = M s(x) dt + sqrt(2) dW with s(x) = -x and M = I + R keeps N(0, I)
    // invariant; R != 0 shows up as cross-correlation asymmetry.
    auto build = [](double r) {
        DiffusionSpec spec;
        spec.dim = 2;
        spec.drift = [r](std::span<const double> x, std::span<double> out) {
            out[0] = -x[0] + r * x[1];
            out[1] = -r * x[0] - x[1];
        };
        spec.noise_amplitude = [](std::span<const double>, Matrix& b) {
            if (b.rows != 2) b.resize(2, 2);
            b.fill(0.0);
            b(0, 0) = b(1, 1) = std::sqrt(2.0);
        };
        return spec;
    };
    DataConfig cfg;
    cfg.n_traj = 4;
    cfg.horizon = 500.0;
    cfg.seed = 17;

    const auto ens = generate_ensemble(build(0.8), cfg);
    const double n_eff = cfg.n_traj * cfg.horizon * (1.0 - cfg.burn_in_fraction) / 2.0;
    const double se_mean = 1.0 / std::sqrt(n_eff);
    CHECK(std::fabs(sample_moment(ens, 1)) < 3.0 * se_mean);
    const double var_x = lagged_moment(ens, 0, 0, 0.0);
    const double var_y = lagged_moment(ens, 1, 1, 0.0);
    const double se_var = std::sqrt(2.0 / n_eff);
    CHECK(std::fabs(var_x - 1.0) < 3.0 * se_var);
    CHECK(std::fabs(var_y - 1.0) < 3.0 * se_var);

    const double tau = 0.3;
    const double asym = lagged_moment(ens, 0, 1, tau) - lagged_moment(ens, 1, 0, tau);
    const double expected = 2.0 * std::exp(-tau) * std::sin(0.8 * tau);  // e^{-A tau} entries
    CHECK(std::fabs(asym - expected) < 0.1 * expected);

    const auto sym = generate_ensemble(build(0.0), cfg);
    const double asym0 = lagged_moment(sym, 0, 1, tau) - lagged_moment(sym, 1, 0, tau);
    CHECK(std::fabs(asym0) < 5.0 * se_var);
}

TEST_CASE("binary trajectory file round-trips exactly") {
    DataConfig cfg;
    cfg.n_traj = 2;
    cfg.horizon = 2.0;
    cfg.seed = 5;
    const auto ens = generate_reference_dataset(Affine2dParams{}, cfg);
    const auto path = std::filesystem::temp_directory_path() / "langcal_test_traj.bin";
    write_ensemble_binary(ens, path.string());
    const auto back = read_ensemble_binary(path.string());
    CHECK(back.dim == ens.dim);
    CHECK(back.dt_integration == ens.dt_integration);
    CHECK(back.save_stride == ens.save_stride);
    CHECK(back.burn_in_fraction == ens.burn_in_fraction);
    CHECK(back.seed == ens.seed);
    REQUIRE(back.n_traj() == ens.n_traj());
    for (std::size_t t = 0; t < ens.n_traj(); ++t) CHECK(back.states[t] == ens.states[t]);
    std::filesystem::remove(path);
}
