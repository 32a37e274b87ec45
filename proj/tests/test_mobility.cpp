#include "langcal/mobility.hpp"

#include "langcal/cir.hpp"
#include "langcal/rng.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>

using namespace langcal;

namespace {

Standardization identity_transform(std::size_t d) {
    Standardization tr;
    tr.mean.assign(d, 0.0);
    tr.scale.assign(d, 1.0);
    return tr;
}

Matrix test_phi_2d() {
    Matrix phi(2, 2);
    phi(0, 0) = 0.8;
    phi(0, 1) = 0.25;
    phi(1, 0) = -0.05;
    phi(1, 1) = 0.6;
    return phi;
}

void randomize_parameters(Mlp& net, double scale, std::uint64_t seed) {
    auto params = get_parameters(net);
    Rng rng(seed);
    for (auto& p : params) p += scale * rng.normal();
    set_parameters(net, params);
}

}  // namespace

TEST_CASE("gamma_baseline: coordinate observable reduces to Phi^T score") {
    const Matrix phi = test_phi_2d();
    const auto obs = coordinate_observable(2);
    const double x[2] = {0.4, -0.9};
    const double score[2] = {-0.4, 0.9};
    double out[2];
    gamma_baseline(phi, obs, {x, 2}, {score, 2}, {out, 2});
    for (std::size_t b = 0; b < 2; ++b) {
        double expected = 0.0;
        for (std::size_t i = 0; i < 2; ++i) expected += phi(i, b) * score[i];
        CHECK(out[b] == doctest::Approx(expected).epsilon(1e-14));
    }
}

TEST_CASE("gamma_baseline: quadratic observable in 1D") {
    // phi_n(x) = x^2, Phi = c: gamma = 2c + 2c x s(x)
    Matrix phi(1, 1);
    phi(0, 0) = 0.7;
    const auto obs = monomial_observable("x2", {2});
    for (double x : {-1.2, 0.3, 2.0}) {
        const double s = 0.5 - x;  // arbitrary score value
        double out;
        gamma_baseline(phi, obs, {&x, 1}, {&s, 1}, {&out, 1});
        CHECK(out == doctest::Approx(2 * 0.7 + 2 * 0.7 * x * s).epsilon(1e-14));
    }
}

TEST_CASE("residual targets vanish for an exactly constant-closure system"
          * doctest::timeout(300)) {
    // OU with unit mobility: M = Phi = 1, delta M = 0, so E ~ 0 on all channels.
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 600.0;
    cfg.seed = 201;
    const auto ens = generate_reference_dataset(OuParams{1, 1.0, 1.0}, cfg);
    const auto lib = power_observable_library({2, 3});
    auto curves = empirical_correlation(ens, lib, default_lag_grid());
    derivative_curves(curves);
    Matrix phi(1, 1);
    phi(0, 0) = 1.0;
    const auto targets = residual_targets(
        curves, phi, lib, [](std::span<const double> x, std::span<double> s) { s[0] = -x[0]; },
        ens);
    // residuals should be small against the overall correlation-derivative
    // scale (some individual channels, e.g. <x_t^2 x_0>, vanish identically
    // for a Gaussian process and carry no scale of their own)
    double cdot_scale = 0.0;
    for (const auto& ch : targets.channels)
        for (std::size_t li = 0; li < targets.lags.size(); ++li)
            cdot_scale = std::max(cdot_scale,
                                  std::fabs(curves.channel(ch.m, ch.n).cdot[li](0, 0)));
    for (const auto& ch : targets.channels)
        for (const auto& e : ch.e) CHECK(std::fabs(e(0, 0)) < 0.07 * cdot_scale);
}

TEST_CASE("residual targets match the CIR closed forms" * doctest::timeout(300)) {
    const CirParams params{1.0, 1.0, 0.5};
    const CirClosedForms cf(params);
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 1200.0;
    cfg.seed = 203;
    const auto ens = generate_reference_dataset(params, cfg);
    const auto lib = power_observable_library({1, 2});
    auto curves = empirical_correlation(ens, lib, default_lag_grid());
    derivative_curves(curves);
    Matrix phi(1, 1);
    phi(0, 0) = cf.phi();
    const auto targets = residual_targets(
        curves, phi, lib,
        [&](std::span<const double> x, std::span<double> s) { s[0] = cf.stationary_score(x[0]); },
        ens);
    // coordinate channel (alpha = 1): E ~ -gamma K_1 = 0. The score has heavy
    // tails at nu = 2, so the bound is loose.
    const auto& coord = targets.channel(1, 0);
    for (const auto& e : coord.e) CHECK(std::fabs(e(0, 0)) < 0.05);
    // quadratic channel: E_{2,1}(t) ~ -gamma K_2(t). The spline derivative is
    // noisiest at the last grid node, so the sharp comparison stays interior.
    const auto& quad = targets.channel(2, 0);
    for (std::size_t li = 0; li < targets.lags.size(); ++li) {
        const double expected = cf.residual(2.0, targets.lags[li]);
        if (targets.lags[li] <= 0.8 + 1e-9)
            CHECK(quad.e[li](0, 0) == doctest::Approx(expected).epsilon(0.16).scale(0.02));
        else
            CHECK(quad.e[li](0, 0) == doctest::Approx(expected).epsilon(0.3).scale(0.05));
    }
}

TEST_CASE("apply_operator: zero correction, exact linearity") {
    Rng rng(205);
    const std::size_t n = 200;
    Matrix x0(n, 1), xt(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        x0(i, 0) = 1.0 + 0.3 * rng.normal();
        xt(i, 0) = 1.0 + 0.3 * rng.normal();
    }
    const auto pairs = LaggedPairSet::from_matrices(0.2, std::move(x0), std::move(xt));
    const auto cond = [](std::span<const double> a, std::span<const double> b, double,
                         std::span<double> out) { out[0] = 0.7 * b[0] - 0.4 * a[0]; };
    const auto obs_m = monomial_observable("x2", {2});
    const auto obs_n = coordinate_observable(1);

    auto field = [](double slope, double offset) {
        return [slope, offset](std::span<const double> x, Matrix& m) {
            if (m.rows != 1) m.resize(1, 1);
            m(0, 0) = slope * x[0] + offset;
        };
    };
    const double zero = apply_operator(field(0, 0), pairs, cond, obs_m, obs_n)(0, 0);
    CHECK(zero == 0.0);
    const double a1 = apply_operator(field(1.0, 0.0), pairs, cond, obs_m, obs_n)(0, 0);
    const double a2 = apply_operator(field(0.0, 1.0), pairs, cond, obs_m, obs_n)(0, 0);
    const double combo = apply_operator(field(2.5, -1.5), pairs, cond, obs_m, obs_n)(0, 0);
    CHECK(combo == doctest::Approx(2.5 * a1 - 1.5 * a2).epsilon(1e-12));
}

TEST_CASE("apply_operator: CIR affine family reproduces -a K_alpha" * doctest::timeout(300)) {
    const CirParams params{1.0, 1.0, 0.5};
    const CirClosedForms cf(params);
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 800.0;
    cfg.seed = 207;
    const auto ens = generate_reference_dataset(params, cfg);
    const auto sets = extract_lagged_pairs(ens, {0.3});
    const ConditionalScoreFn cond = [&](std::span<const double> x0, std::span<const double> xt,
                                        double t, std::span<double> out) {
        out[0] = cf.conditional_score(xt[0], x0[0], t);
    };
    const double a = 0.8;
    const auto delta = [&](std::span<const double> x, Matrix& m) {
        if (m.rows != 1) m.resize(1, 1);
        m(0, 0) = a * (x[0] - params.theta);
    };
    const double op = apply_operator(delta, sets[0], cond, monomial_observable("x2", {2}),
                                     coordinate_observable(1))(0, 0);
    CHECK(op == doctest::Approx(-a * cf.k_alpha(2.0, 0.3)).epsilon(0.08));
}

TEST_CASE("central identity on OU: operator with constant M matches spline Cdot"
          * doctest::timeout(300)) {
    const double kappa = 1.0, gamma = 1.0;
    DataConfig cfg;
    cfg.n_traj = 8;
    cfg.horizon = 800.0;
    cfg.seed = 209;
    const auto ens = generate_reference_dataset(OuParams{1, kappa, gamma}, cfg);
    ObservableLibrary lib;
    lib.observables.push_back(coordinate_observable(1));
    lib.channels.emplace_back(0, 0);
    auto curves = empirical_correlation(ens, lib, default_lag_grid());
    derivative_curves(curves);
    const ConditionalScoreFn cond = [&](std::span<const double> x0, std::span<const double> xt,
                                        double t, std::span<double> out) {
        out[0] = oracles::ou_conditional_score(kappa, gamma, t, x0[0], xt[0]);
    };
    const auto mobility = [&](std::span<const double>, Matrix& m) {
        if (m.rows != 1) m.resize(1, 1);
        m(0, 0) = gamma;  // exact constant mobility of the OU process
    };
    const auto sets = extract_lagged_pairs(ens, default_lag_grid());
    for (std::size_t li = 0; li < sets.size(); ++li) {
        const double tau = sets[li].lag();
        if (tau < 0.1 - 1e-9 || tau > 1.0 + 1e-9) continue;
        const double rhs = apply_operator(mobility, sets[li], cond, lib.observables[0],
                                          lib.observables[0])(0, 0);
        const double lhs = curves.channels[0].cdot[li](0, 0);
        CHECK(rhs == doctest::Approx(lhs).epsilon(0.05));
    }
}

TEST_CASE("mobility model: zero network reproduces the projected baseline") {
    const Matrix phi = test_phi_2d();
    const auto model = make_mobility_model(phi, identity_transform(2), {16, 16}, 1e-4, 11);
    Matrix m, ds, ra;
    double div[2];
    const double x[2] = {0.7, -1.1};
    model.evaluate_with_divergence({x, 2}, m, ds, ra, {div, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(m.data[i] == doctest::Approx(phi.data[i]).epsilon(1e-10));
    CHECK(div[0] == doctest::Approx(0.0).scale(1.0));
    CHECK(div[1] == doctest::Approx(0.0).scale(1.0));
    Matrix dm;
    model.delta_m({x, 2}, dm);
    for (double v : dm.data) CHECK(std::fabs(v) < 1e-12);
}

TEST_CASE("mobility model: PSD floor and exact antisymmetry at random states") {
    const Matrix phi = test_phi_2d();
    auto model = make_mobility_model(phi, identity_transform(2), {32, 32}, 1e-4, 13);
    randomize_parameters(model.net, 0.3, 14);
    Rng rng(15);
    Matrix m, ds, ra, vec;
    std::vector<double> eig;
    for (int rep = 0; rep < 10000; ++rep) {
        const double x[2] = {2.0 * rng.normal(), 2.0 * rng.normal()};
        model.evaluate({x, 2}, m, ds, ra);
        symmetric_eigen(ds, eig, vec);
        CHECK(eig.front() >= model.epsilon_floor - 1e-12);
        CHECK(ra(0, 0) == 0.0);
        CHECK(ra(1, 1) == 0.0);
        CHECK(ra(0, 1) == -ra(1, 0));
        // M = D + R exactly
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(m.data[i] == doctest::Approx(ds.data[i] + ra.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("mobility divergence matches central finite differences") {
    const Matrix phi = test_phi_2d();
    Standardization tr;
    tr.mean = {0.2, -0.1};
    tr.scale = {1.3, 0.8};
    auto model = make_mobility_model(phi, tr, {24, 24}, 1e-4, 17);
    randomize_parameters(model.net, 0.4, 18);
    Rng rng(19);
    Matrix mp, mm, ds, ra, m;
    for (int rep = 0; rep < 20; ++rep) {
        double x[2] = {rng.normal(), rng.normal()};
        double div[2];
        model.evaluate_with_divergence({x, 2}, m, ds, ra, {div, 2});
        const double h = 1e-5;
        double fd[2] = {0.0, 0.0};
        for (std::size_t j = 0; j < 2; ++j) {
            double xp[2] = {x[0], x[1]}, xm[2] = {x[0], x[1]};
            xp[j] += h;
            xm[j] -= h;
            model.evaluate({xp, 2}, mp, ds, ra);
            model.evaluate({xm, 2}, mm, ds, ra);
            for (std::size_t i = 0; i < 2; ++i)
                fd[i] += (mp(i, j) - mm(i, j)) / (2.0 * h);
        }
        for (std::size_t i = 0; i < 2; ++i)
            CHECK(div[i] == doctest::Approx(fd[i]).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("mobility_loss gradients agree with finite differences") {
    const std::size_t d = 2;
    const Matrix phi = test_phi_2d();
    auto model = make_mobility_model(phi, identity_transform(d), {8, 8}, 1e-3, 21);
    randomize_parameters(model.net, 0.3, 22);

    ObservableLibrary lib;
    lib.observables.push_back(coordinate_observable(d));
    lib.observables.push_back(monomial_observable("x2", {2, 0}));
    lib.observables.push_back(monomial_observable("xy", {1, 1}));
    lib.channels = {{1, 0}, {2, 0}};

    Rng rng(23);
    MobilityTrainingData data;
    ResidualTargetSet targets;
    targets.lags = {0.1, 0.2};
    targets.lag_weights = {1.0, 0.7};
    targets.channels.resize(lib.channels.size());
    for (std::size_t c = 0; c < lib.channels.size(); ++c) {
        targets.channels[c].m = lib.channels[c].first;
        targets.channels[c].n = lib.channels[c].second;
        targets.channels[c].scale = 0.8;
    }
    for (std::size_t li = 0; li < 2; ++li) {
        Matrix x0(32, d), xt(32, d), s(32, d);
        for (auto* mat : {&x0, &xt, &s})
            for (auto& v : mat->data) v = rng.normal();
        data.lags.push_back(targets.lags[li]);
        data.x0.push_back(std::move(x0));
        data.xt.push_back(std::move(xt));
        data.cond_score.push_back(std::move(s));
        for (std::size_t c = 0; c < lib.channels.size(); ++c) {
            Matrix e(lib.observables[lib.channels[c].first].dim(),
                     lib.observables[lib.channels[c].second].dim());
            for (auto& v : e.data) v = rng.normal();
            targets.channels[c].e.push_back(std::move(e));
        }
    }
    Matrix anchors(40, d);
    for (auto& v : anchors.data) v = rng.normal();

    MobilityBatch batch;
    batch.lag_indices = {0, 1};
    batch.pair_rows.resize(2);
    for (std::size_t r = 0; r < 32; ++r) {
        batch.pair_rows[0].push_back(r);
        batch.pair_rows[1].push_back(31 - r);
    }
    for (std::size_t r = 0; r < 40; ++r) batch.anchor_rows.push_back(r);

    MobilityTrainConfig cfg;
    cfg.lambda_mean = 0.9;

    Gradients grads;
    grads.match_shape(model.net);
    const double loss =
        mobility_loss(model, targets, data, lib, anchors, batch, cfg, &grads);
    CHECK(std::isfinite(loss));
    const auto flat = flatten_gradients(grads);
    auto params = get_parameters(model.net);
    Rng pick(29);
    const double h = 1e-6;
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t idx = pick.below(params.size());
        const double orig = params[idx];
        params[idx] = orig + h;
        set_parameters(model.net, params);
        const double lp = mobility_loss(model, targets, data, lib, anchors, batch, cfg, nullptr);
        params[idx] = orig - h;
        set_parameters(model.net, params);
        const double lm = mobility_loss(model, targets, data, lib, anchors, batch, cfg, nullptr);
        params[idx] = orig;
        set_parameters(model.net, params);
        const double fd = (lp - lm) / (2.0 * h);
        CHECK(flat[idx] == doctest::Approx(fd).epsilon(1e-4).scale(std::max(1.0, std::fabs(fd))));
    }
}

TEST_CASE("train_mobility: zero targets keep the correction near zero"
          * doctest::timeout(300)) {
    const std::size_t d = 1;
    Matrix phi(1, 1);
    phi(0, 0) = 0.5;
    ObservableLibrary lib = power_observable_library({2});

    Rng rng(31);
    ResidualTargetSet targets;
    MobilityTrainingData data;
    std::vector<double> lags = {0.1, 0.2, 0.3, 0.4};
    targets.lags = lags;
    for (double tau : lags) targets.lag_weights.push_back(1.0 / (1.0 + tau / 0.25));
    targets.channels.resize(lib.channels.size());
    for (std::size_t c = 0; c < lib.channels.size(); ++c) {
        targets.channels[c].m = lib.channels[c].first;
        targets.channels[c].n = lib.channels[c].second;
        targets.channels[c].scale = 1.0;
    }
    for (std::size_t li = 0; li < lags.size(); ++li) {
        Matrix x0(512, d), xt(512, d), s(512, d);
        for (std::size_t i = 0; i < 512; ++i) {
            x0(i, 0) = 1.0 + 0.5 * rng.normal();
            xt(i, 0) = 1.0 + 0.5 * rng.normal();
            s(i, 0) = rng.normal();
        }
        data.lags.push_back(lags[li]);
        data.x0.push_back(std::move(x0));
        data.xt.push_back(std::move(xt));
        data.cond_score.push_back(std::move(s));
        for (auto& ch : targets.channels) ch.e.emplace_back(1, 1);  // zero targets
    }
    Matrix anchors(2048, d);
    for (auto& v : anchors.data) v = 1.0 + 0.5 * rng.normal();

    MobilityTrainConfig cfg;
    cfg.hidden = {32, 32};
    cfg.epochs = 40;
    cfg.pairs_per_lag = 512;
    cfg.batch_per_lag = 128;
    cfg.anchor_batch = 256;
    cfg.seed = 33;
    Standardization tr;
    tr.mean = {1.0};
    tr.scale = {0.5};
    const auto model = train_mobility(targets, data, lib, phi, tr, anchors, cfg);
    const Matrix mean_dm = mean_delta_m(model, anchors);
    double phi_norm = 0.0, dm_norm = 0.0;
    for (double v : phi.data) phi_norm += v * v;
    Matrix dm;
    for (std::size_t r = 0; r < 512; ++r) {
        model.delta_m(anchors.row(r), dm);
        dm_norm += dm(0, 0) * dm(0, 0);
    }
    dm_norm = std::sqrt(dm_norm / 512.0);
    CHECK(dm_norm < 0.05 * std::sqrt(phi_norm));
    CHECK(std::fabs(mean_dm(0, 0)) < 0.1 * std::sqrt(phi_norm));
}

TEST_CASE("train_mobility: CIR affine correction recovered within 10%"
          * doctest::timeout(900)) {
    const CirParams params{1.0, 1.0, 0.5};
    const CirClosedForms cf(params);
    DataConfig dcfg;
    dcfg.n_traj = 8;
    dcfg.horizon = 1200.0;
    dcfg.seed = 301;
    const auto ens = generate_reference_dataset(params, dcfg);
    const auto lib = power_observable_library({2, 3});
    std::vector<double> lags;
    for (int i = 1; i <= 10; ++i) lags.push_back(0.1 * i);
    auto curves = empirical_correlation(ens, lib, lags);
    derivative_curves(curves);
    Matrix phi(1, 1);
    phi(0, 0) = cf.phi();
    const auto targets = residual_targets(
        curves, phi, lib,
        [&](std::span<const double> x, std::span<double> s) { s[0] = cf.stationary_score(x[0]); },
        ens);
    const ConditionalScoreFn cond = [&](std::span<const double> x0, std::span<const double> xt,
                                        double t, std::span<double> out) {
        out[0] = cf.conditional_score(xt[0], x0[0], t);
    };
    const auto sets = extract_lagged_pairs(ens, lags);
    const auto data = sample_training_pairs(sets, cond, 8192, 303);
    const Matrix samples = ensemble_samples(ens);
    const auto tr = fit_standardization(samples);

    MobilityTrainConfig cfg;
    cfg.hidden = {32, 32};
    cfg.epochs = 150;
    cfg.lr = 3e-3;
    cfg.lr_final = 1e-4;
    cfg.pairs_per_lag = 8192;
    cfg.batch_per_lag = 2048;
    cfg.anchor_batch = 512;
    cfg.seed = 305;
    const auto model = train_mobility(targets, data, lib, phi, tr, samples, cfg);

    // regress learned delta M on (x - theta) over the stationary bulk
    Matrix dm;
    double sxx = 0.0, sxy = 0.0;
    for (double x = 0.4; x <= 2.2; x += 0.05) {
        model.delta_m({&x, 1}, dm);
        sxx += (x - params.theta) * (x - params.theta);
        sxy += (x - params.theta) * dm(0, 0);
    }
    const double slope = sxy / sxx;
    CHECK(slope == doctest::Approx(params.gamma).epsilon(0.10));

    // mean-constraint efficacy (spec: <= 0.1 ||Phi||_F over anchors)
    const Matrix mean_dm = mean_delta_m(model, samples);
    CHECK(std::fabs(mean_dm(0, 0)) <= 0.1 * cf.phi());

    // training residual decreased materially from the zero-correction start
    CHECK(model.residual_loss_history.back() < model.residual_loss_at_zero);

    SUBCASE("checkpoint round-trip") {
        save_mobility(model, "/tmp/langcal_test_mob");
        const auto back = load_mobility("/tmp/langcal_test_mob");
        Matrix a, b, ds, ra;
        const double x = 1.3;
        model.evaluate({&x, 1}, a, ds, ra);
        back.evaluate({&x, 1}, b, ds, ra);
        CHECK(a(0, 0) == b(0, 0));
        CHECK(back.residual_loss_at_zero == model.residual_loss_at_zero);
        std::remove("/tmp/langcal_test_mob.ckpt");
        std::remove("/tmp/langcal_test_mob.json");
    }
}
