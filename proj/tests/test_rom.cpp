#include "langcal/rom.hpp"

#include "langcal/cir.hpp"
#include "langcal/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

using namespace langcal;

namespace {

double sample_moment(const TrajectoryEnsemble& ens, std::size_t coord, int power) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            sum += std::pow(ens.state(t, k)[coord], power);
            ++n;
        }
    return sum / static_cast<double>(n);
}

double lagged_moment(const TrajectoryEnsemble& ens, std::size_t i, std::size_t j, double tau) {
    const auto steps = static_cast<std::size_t>(std::llround(tau / ens.saved_dt()));
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k + steps < ens.n_samples(t); ++k) {
            sum += ens.state(t, k + steps)[i] * ens.state(t, k)[j];
            ++n;
        }
    return sum / static_cast<double>(n);
}

StationaryScoreModel quick_score_model(std::uint64_t seed) {
    Matrix samples(4000, 2);
    Rng rng(seed);
    for (auto& v : samples.data) v = rng.normal();
    ScoreTrainConfig cfg;
    cfg.hidden = {16, 16};
    cfg.epochs = 3;
    cfg.samples_per_epoch = 2048;
    cfg.seed = seed;
    return train_stationary_score(samples, NoiseSchedule{0.05, 0.05}, cfg);
}

}  // namespace

TEST_CASE("constant closure with Gaussian score is the OU process" * doctest::timeout(120)) {
    Matrix phi(1, 1);
    phi(0, 0) = 1.0;
    const auto rom = make_constant_rom(
        1, [](std::span<const double> x, std::span<double> s) { s[0] = -x[0]; }, phi);
    DataConfig cfg;
    cfg.n_traj = 4;
    cfg.horizon = 400.0;
    cfg.seed = 401;
    const auto ens = simulate_rom(rom, cfg);
    // dx = -x dt + sqrt(2) dW: unit stationary variance
    const double mean = sample_moment(ens, 0, 1);
    const double var = sample_moment(ens, 0, 2) - mean * mean;
    const double n_eff = 4.0 * 360.0 / 2.0;
    CHECK(std::fabs(mean) < 3.0 / std::sqrt(n_eff));
    CHECK(std::fabs(var - 1.0) < 3.0 * std::sqrt(2.0 / n_eff));
}

TEST_CASE("CIR-equivalent ROM reproduces the Gamma stationary law" * doctest::timeout(300)) {
    const CirParams params{1.0, 1.0, 0.5};
    const CirClosedForms cf(params);
    auto rom = make_rom(
        1,
        [&](std::span<const double> x, std::span<double> s) { s[0] = cf.stationary_score(x[0]); },
        [&](std::span<const double> x, Matrix& m, std::span<double> div) {
            if (m.rows != 1) m.resize(1, 1);
            m(0, 0) = params.gamma * x[0];
            div[0] = params.gamma;  // d/dx (gamma x)
        });
    rom.positivity_floor = 1e-12;
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 500.0;
    cfg.seed = 403;
    const auto ens = simulate_rom(rom, cfg);
    const double mean = sample_moment(ens, 0, 1);
    const double var = sample_moment(ens, 0, 2) - mean * mean;
    const double n_eff = 8.0 * 450.0 / 2.0;
    // Gamma(nu=2, beta=2): mean 1, variance 1/2; se(var) ~ sqrt(5.25/n_eff)
    CHECK(std::fabs(mean - 1.0) < 3.0 * std::sqrt(0.5 / n_eff));
    CHECK(std::fabs(var - 0.5) < 3.0 * std::sqrt(5.25 / n_eff));
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) REQUIRE(ens.state(t, k)[0] > 0.0);
}

TEST_CASE("drift assembly: hand-built mobility with known divergence") {
    const auto rom = make_rom(
        2, [](std::span<const double> x, std::span<double> s) { s[0] = -x[0]; s[1] = -x[1]; },
        [](std::span<const double> x, Matrix& m, std::span<double> div) {
            if (m.rows != 2) m.resize(2, 2);
            m(0, 0) = 1.2 + x[0] * x[0];
            m(0, 1) = 0.3 + x[0] * x[1];
            m(1, 0) = 0.3 - x[0] * x[1];
            m(1, 1) = 0.9 + x[1] * x[1];
            div[0] = 2.0 * x[0] + x[0];  // d_x M00 + d_y M01
            div[1] = -x[1] + 2.0 * x[1];  // d_x M10 + d_y M11
        });
    const auto spec = rom.to_diffusion();
    const double x[2] = {0.7, -0.4};
    double drift[2];
    spec.drift({x, 2}, {drift, 2});
    // M(x) s(x) + div M with s = -x
    const double m00 = 1.2 + 0.49, m01 = 0.3 - 0.28, m10 = 0.3 + 0.28, m11 = 0.9 + 0.16;
    CHECK(drift[0] == doctest::Approx(-(m00 * 0.7 + m01 * -0.4) + 3 * 0.7).epsilon(1e-12));
    CHECK(drift[1] == doctest::Approx(-(m10 * 0.7 + m11 * -0.4) + -0.4).epsilon(1e-12));
    // noise factor satisfies Sigma Sigma^T = Sym M
    Matrix b;
    spec.noise_amplitude({x, 2}, b);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < 2; ++k) dot += b(i, k) * b(j, k);
            const double sym = 0.5 * ((i == 0 ? (j == 0 ? m00 : m01) : (j == 0 ? m10 : m11)) +
                                      (j == 0 ? (i == 0 ? m00 : m01) : (i == 0 ? m10 : m11)));
            CHECK(dot == doctest::Approx(2.0 * sym).epsilon(1e-10));
        }
}

TEST_CASE("antisymmetric mobility preserves the Gaussian law and induces currents"
          * doctest::timeout(300)) {
    const double r = 0.8;
    auto rom = make_rom(
        2, [](std::span<const double> x, std::span<double> s) { s[0] = -x[0]; s[1] = -x[1]; },
        [r](std::span<const double>, Matrix& m, std::span<double> div) {
            if (m.rows != 2) m.resize(2, 2);
            m(0, 0) = m(1, 1) = 1.0;
            m(0, 1) = -r;
            m(1, 0) = r;
            div[0] = div[1] = 0.0;
        });
    DataConfig cfg;
    cfg.n_traj = 4;
    cfg.horizon = 500.0;
    cfg.seed = 405;
    const auto ens = simulate_rom(rom, cfg);
    const double n_eff = 4.0 * 450.0 / 2.0;
    for (std::size_t k = 0; k < 2; ++k) {
        const double var = lagged_moment(ens, k, k, 0.0);
        CHECK(std::fabs(var - 1.0) < 3.0 * std::sqrt(2.0 / n_eff));
    }
    const double tau = 0.3;
    const double asym = lagged_moment(ens, 0, 1, tau) - lagged_moment(ens, 1, 0, tau);
    CHECK(std::fabs(asym) > 5.0 * std::sqrt(2.0 / n_eff));  // well above the noise floor
}

TEST_CASE("learned ROM with zero network equals the constant closure path"
          * doctest::timeout(120)) {
    Matrix phi(2, 2);
    phi(0, 0) = 0.8;
    phi(0, 1) = 0.25;
    phi(1, 0) = -0.05;
    phi(1, 1) = 0.6;
    const auto score = quick_score_model(407);
    const auto mobility = make_mobility_model(phi, score.transform, {16, 16}, 1e-4, 409);
    // The zero-initialized network pins M at the projected baseline, so the
    // effective drift and noise factor coincide with the constant closure up
    // to the epsilon floor.
    Rng rng(411);
    Matrix m, d_sym, r_anti;
    Matrix sym(2, 2);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            sym(i, j) = 0.5 * (mobility.phi(i, j) + mobility.phi(j, i));
    const Matrix sigma_const = cholesky_lower(sym);
    for (int rep = 0; rep < 50; ++rep) {
        const double x[2] = {rng.normal(), rng.normal()};
        double div[2], s[2];
        mobility.evaluate_with_divergence({x, 2}, m, d_sym, r_anti, {div, 2});
        score.score({x, 2}, {s, 2});
        const double s_norm = std::sqrt(s[0] * s[0] + s[1] * s[1]);
        for (std::size_t i = 0; i < 2; ++i) {
            double drift_learned = div[i], drift_const = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                drift_learned += m(i, j) * s[j];
                drift_const += mobility.phi(i, j) * s[j];
            }
            CHECK(std::fabs(drift_learned - drift_const) <=
                  mobility.epsilon_floor * s_norm + 1e-10);
        }
        const Matrix sigma = cholesky_lower(d_sym);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(sigma.data[i] == doctest::Approx(sigma_const.data[i]).epsilon(1e-3).scale(1e-2));
    }
}

TEST_CASE("validate: identical data gives exactly zero distances") {
    DataConfig cfg;
    cfg.n_traj = 2;
    cfg.horizon = 30.0;
    cfg.seed = 413;
    const auto ens = generate_reference_dataset(OuParams{1, 1.0, 1.0}, cfg);
    ObservableLibrary lib = power_observable_library({2});
    const auto report = validate(ens, {{"self", &ens}}, lib, {0.1, 0.2, 0.3, 0.4});
    const auto& entry = report.entry("self");
    CHECK(entry.marginals[0].l1 == 0.0);
    CHECK(entry.marginals[0].ks == 0.0);
    for (double rmse : entry.channel_rmse) CHECK(rmse == 0.0);
}

TEST_CASE("validate: constant closure loses the quadratic channel on CIR"
          * doctest::timeout(600)) {
    const CirParams params{1.0, 1.0, 0.5};
    const CirClosedForms cf(params);
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 500.0;
    cfg.seed = 415;
    const auto reference = generate_reference_dataset(params, cfg);

    auto exact = make_rom(
        1,
        [&](std::span<const double> x, std::span<double> s) { s[0] = cf.stationary_score(x[0]); },
        [&](std::span<const double> x, Matrix& m, std::span<double> div) {
            if (m.rows != 1) m.resize(1, 1);
            m(0, 0) = params.gamma * x[0];
            div[0] = params.gamma;
        });
    exact.positivity_floor = 1e-12;
    Matrix phi(1, 1);
    phi(0, 0) = cf.phi();
    auto constant = make_constant_rom(
        1,
        [&](std::span<const double> x, std::span<double> s) { s[0] = cf.stationary_score(x[0]); },
        phi);
    constant.positivity_floor = 1e-12;

    DataConfig sim = cfg;
    sim.seed = 417;
    const auto rom_ens = simulate_rom(exact, sim);
    sim.seed = 419;
    const auto base_ens = simulate_rom(constant, sim);

    const auto lib = power_observable_library({2});
    const auto report = validate(reference, {{"rom", &rom_ens}, {"baseline", &base_ens}}, lib,
                                 default_lag_grid());
    // channel 0 is (x^2, x): the exact mobility must beat the constant closure
    const double rom_rmse = report.entry("rom").channel_rmse[0];
    const double base_rmse = report.entry("baseline").channel_rmse[0];
    CHECK(rom_rmse < base_rmse);
    const auto [wins, total] = report.channel_wins("rom", "baseline");
    CHECK(total == 1);
    CHECK(wins == 1);
    // the exact-mobility ROM preserves the invariant density tightly; the
    // constant closure's 0.5/x - 1 drift is stiff near the boundary, so its
    // Euler-Maruyama marginal carries a visible dt bias
    CHECK(report.entry("rom").marginals[0].ks < 0.05);
    CHECK(report.entry("baseline").marginals[0].ks < 0.2);
}

TEST_CASE("validation report round-trips through JSON") {
    ValidationReport report;
    report.channels = {{1, 0}, {2, 0}};
    report.channel_names = {"x^2|x", "x^3|x"};
    report.lag_grid = {0.1, 0.2};
    ValidationEntry e;
    e.name = "rom";
    e.marginals = {{0.01, 0.02}};
    e.channel_rmse = {0.5, 0.25};
    report.entries.push_back(e);
    const std::string path = "/tmp/langcal_test_report.json";
    write_validation_report(report, path);
    const auto back = read_validation_report(path);
    CHECK(back.channels == report.channels);
    CHECK(back.channel_names == report.channel_names);
    CHECK(back.lag_grid == report.lag_grid);
    CHECK(back.entries[0].name == "rom");
    CHECK(back.entries[0].marginals[0].l1 == 0.01);
    CHECK(back.entries[0].marginals[0].ks == 0.02);
    CHECK(back.entries[0].channel_rmse == e.channel_rmse);
    std::remove(path.c_str());
}

TEST_CASE("marginal and correlation CSV exports" * doctest::timeout(120)) {
    DataConfig cfg;
    cfg.n_traj = 2;
    cfg.horizon = 50.0;
    cfg.seed = 421;
    const auto a = generate_reference_dataset(OuParams{1, 1.0, 1.0}, cfg);
    cfg.seed = 423;
    const auto b = generate_reference_dataset(OuParams{1, 1.0, 1.0}, cfg);
    const auto lib = power_observable_library({2});
    write_marginals_csv(a, {{"rom", &b}}, "/tmp/langcal_test_marg.csv");
    write_correlation_comparison_csv(a, {{"rom", &b}}, lib, {0.1, 0.2}, "/tmp/langcal_test_corr.csv");
    std::ifstream m("/tmp/langcal_test_marg.csv");
    std::string header;
    std::getline(m, header);
    CHECK(header == "coord,bin_center,ref_density,rom_density");
    std::ifstream c("/tmp/langcal_test_corr.csv");
    std::getline(c, header);
    CHECK(header == "m,n,tau,ref,rom");
    std::remove("/tmp/langcal_test_marg.csv");
    std::remove("/tmp/langcal_test_corr.csv");
}
