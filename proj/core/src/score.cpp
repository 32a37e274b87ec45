#include "langcal/score.hpp"

#include "langcal/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace langcal {

using nlohmann::json;

Standardization fit_standardization(const Matrix& samples) {
    require(samples.rows >= 2, "fit_standardization: need at least 2 samples");
    const std::size_t D = samples.cols;
    Standardization tr;
    tr.mean.assign(D, 0.0);
    tr.scale.assign(D, 0.0);
    for (std::size_t i = 0; i < samples.rows; ++i)
        for (std::size_t d = 0; d < D; ++d) tr.mean[d] += samples(i, d);
    for (double& m : tr.mean) m /= static_cast<double>(samples.rows);
    for (std::size_t i = 0; i < samples.rows; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            const double c = samples(i, d) - tr.mean[d];
            tr.scale[d] += c * c;
        }
    for (double& s : tr.scale) s = std::max(std::sqrt(s / static_cast<double>(samples.rows)), 1e-12);
    return tr;
}

LaggedPairSet LaggedPairSet::from_ensemble(const TrajectoryEnsemble& ens, double lag) {
    require(lag > 0, "lagged pairs: lag must be positive");
    const double ratio = lag / ens.saved_dt();
    const auto steps = static_cast<std::size_t>(std::llround(ratio));
    if (steps == 0 || std::fabs(ratio - static_cast<double>(steps)) > 1e-6)
        throw std::invalid_argument("lagged pairs: lag not on the saved sampling grid");
    LaggedPairSet set;
    set.lag_ = lag;
    set.lag_steps_ = steps;
    set.dim_ = ens.dim;
    set.ens_ = &ens;
    set.traj_of_pair_.resize(ens.n_traj());
    std::size_t total = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t) {
        const std::size_t len = ens.n_samples(t);
        total += (len > steps) ? len - steps : 0;
        set.traj_of_pair_[t] = total;
    }
    set.size_ = total;
    return set;
}

LaggedPairSet LaggedPairSet::from_matrices(double lag, Matrix x0, Matrix xt) {
    require(x0.rows == xt.rows && x0.cols == xt.cols, "lagged pairs: matrix shape mismatch");
    LaggedPairSet set;
    set.lag_ = lag;
    set.dim_ = x0.cols;
    set.size_ = x0.rows;
    set.own_x0_ = std::move(x0);
    set.own_xt_ = std::move(xt);
    return set;
}

std::pair<std::size_t, std::size_t> LaggedPairSet::locate(std::size_t i) const {
    const auto it = std::upper_bound(traj_of_pair_.begin(), traj_of_pair_.end(), i);
    const auto t = static_cast<std::size_t>(it - traj_of_pair_.begin());
    const std::size_t base = (t == 0) ? 0 : traj_of_pair_[t - 1];
    return {t, i - base};
}

std::span<const double> LaggedPairSet::x0(std::size_t i) const {
    if (ens_ == nullptr) return own_x0_.row(i);
    const auto [t, k] = locate(i);
    return ens_->state(t, k);
}

std::span<const double> LaggedPairSet::xt(std::size_t i) const {
    if (ens_ == nullptr) return own_xt_.row(i);
    const auto [t, k] = locate(i);
    return ens_->state(t, k + lag_steps_);
}

std::vector<LaggedPairSet> extract_lagged_pairs(const TrajectoryEnsemble& ens,
                                                const std::vector<double>& lags) {
    require(!lags.empty(), "extract_lagged_pairs: empty lag set");
    std::vector<LaggedPairSet> sets;
    sets.reserve(lags.size());
    for (double lag : lags) sets.push_back(LaggedPairSet::from_ensemble(ens, lag));
    return sets;
}

Matrix ensemble_samples(const TrajectoryEnsemble& ens) {
    Matrix samples(ens.total_samples(), ens.dim);
    std::size_t row = 0;
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            const auto x = ens.state(t, k);
            std::copy(x.begin(), x.end(), samples.row(row).begin());
            ++row;
        }
    return samples;
}

namespace {

double draw_sigma(const NoiseSchedule& schedule, Rng& rng) {
    if (schedule.fixed()) return schedule.sigma_min;
    const double lo = std::log(schedule.sigma_min), hi = std::log(schedule.sigma_max);
    return std::exp(rng.uniform(lo, hi));
}

// validation membership by fixed index rule; modulus from the configured split
std::size_t validation_modulus(double fraction) {
    if (fraction <= 0.0) return 0;
    return std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(1.0 / fraction)));
}

std::size_t draw_train_index(Rng& rng, std::size_t n, std::size_t val_mod) {
    for (;;) {
        const std::size_t i = rng.below(n);
        if (val_mod == 0 || i % val_mod != 0) return i;
    }
}

[[noreturn]] void abort_nonfinite(const char* what, std::size_t epoch, double loss) {
    throw std::runtime_error(std::string(what) + ": non-finite loss " + std::to_string(loss) +
                             " at epoch " + std::to_string(epoch));
}

// Arithmetic mean of the weights over the last polyak_tail fraction of epochs;
// averages out the optimizer's stationary noise around the optimum.
struct PolyakAverager {
    std::size_t first_epoch, count = 0;
    std::vector<double> sum;

    PolyakAverager(const ScoreTrainConfig& cfg)
        : first_epoch(cfg.polyak_tail <= 0.0
                          ? cfg.epochs
                          : cfg.epochs - std::min<std::size_t>(
                                cfg.epochs, static_cast<std::size_t>(cfg.polyak_tail * cfg.epochs) + 1)) {}

    void observe(const Mlp& net, std::size_t epoch) {
        if (epoch < first_epoch) return;
        const auto params = get_parameters(net);
        if (sum.empty()) sum.assign(params.size(), 0.0);
        for (std::size_t i = 0; i < params.size(); ++i) sum[i] += params[i];
        ++count;
    }

    void finalize(Mlp& net) const {
        if (count == 0) return;
        std::vector<double> avg(sum.size());
        for (std::size_t i = 0; i < sum.size(); ++i) avg[i] = sum[i] / static_cast<double>(count);
        set_parameters(net, avg);
    }
};

}  // namespace

StationaryScoreModel train_stationary_score(const Matrix& samples, const NoiseSchedule& schedule,
                                            const ScoreTrainConfig& cfg) {
    require(samples.rows >= 2, "train_stationary_score: need samples");
    const std::size_t N = samples.rows, D = samples.cols;

    StationaryScoreModel model;
    model.schedule = schedule;
    model.transform = fit_standardization(samples);
    Matrix u(N, D);
    for (std::size_t i = 0; i < N; ++i)
        model.transform.to_standardized(samples.row(i), u.row(i));

    std::vector<std::size_t> widths = {D + 1};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(D);
    // The net learns the residual around the exact standardized-Gaussian
    // denoiser -sigma*u/(1+sigma^2); zero-init of the last layer starts
    // training at that base.
    model.net = make_mlp(widths, cfg.seed, /*zero_init_last=*/true);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    AdamState adam(acfg);

    Rng rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    Rng val_rng(cfg.seed ^ 0x517CC1B727220A95ull);
    const std::size_t val_mod = validation_modulus(cfg.validation_fraction);
    const std::size_t budget = cfg.samples_per_epoch == 0 ? N : cfg.samples_per_epoch;
    const std::size_t n_steps = (budget + cfg.batch_size - 1) / cfg.batch_size;

    Matrix batch, dy;
    Gradients grads;
    grads.match_shape(model.net);
    ForwardCache cache;
    std::vector<double> sigmas, noise;

    // Rows come in antithetic pairs (+xi, -xi) sharing the clean sample.
    auto run_batch = [&](std::size_t B, Rng& source, bool train, std::size_t epoch) {
        B += B % 2;
        batch.resize(B, D + 1);
        sigmas.assign(B, 0.0);
        noise.assign(B * D, 0.0);
        for (std::size_t r = 0; r < B; r += 2) {
            const std::size_t idx = train ? draw_train_index(source, N, val_mod)
                                          : (val_mod ? source.below(N / val_mod) * val_mod
                                                     : source.below(N));
            const double sigma = draw_sigma(schedule, source);
            sigmas[r] = sigmas[r + 1] = sigma;
            for (std::size_t d = 0; d < D; ++d) {
                const double xi = source.normal();
                noise[r * D + d] = xi;
                noise[(r + 1) * D + d] = -xi;
                batch(r, d) = u(idx, d) + sigma * xi;
                batch(r + 1, d) = u(idx, d) - sigma * xi;
            }
            batch(r, D) = sigma;
            batch(r + 1, D) = sigma;
        }
        forward(model.net, batch, cache);
        const Matrix& out = cache.post.back();
        dy.resize(B, D);
        double loss = 0.0;
        for (std::size_t r = 0; r < B; ++r) {
            const double sigma = sigmas[r];
            const double base_scale = -sigma / (1.0 + sigma * sigma);
            for (std::size_t d = 0; d < D; ++d) {
                const double resid = out(r, d) + base_scale * batch(r, d) + noise[r * D + d];
                loss += resid * resid;
                dy(r, d) = 2.0 * resid / static_cast<double>(B);
            }
        }
        loss /= static_cast<double>(B);
        if (!std::isfinite(loss)) abort_nonfinite("train_stationary_score", epoch, loss);
        if (train) {
            grads.zero();
            backward(model.net, cache, dy, grads);
            adam_step(adam, model.net, grads);
        }
        return loss;
    };

    PolyakAverager averager(cfg);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.cfg.lr = cfg.epoch_lr(epoch);
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < n_steps; ++s)
            epoch_loss += run_batch(cfg.batch_size, rng, true, epoch);
        model.train_loss.push_back(epoch_loss / static_cast<double>(n_steps));
        if (val_mod)
            model.val_loss.push_back(
                run_batch(std::min<std::size_t>(4096, N / val_mod), val_rng, false, epoch));
        averager.observe(model.net, epoch);
    }
    averager.finalize(model.net);
    return model;
}

StationaryScoreModel train_stationary_score(const TrajectoryEnsemble& ens,
                                            const NoiseSchedule& schedule,
                                            const ScoreTrainConfig& cfg) {
    return train_stationary_score(ensemble_samples(ens), schedule, cfg);
}

void StationaryScoreModel::score(std::span<const double> x, std::span<double> out) const {
    Matrix batch(1, transform.dim());
    std::copy(x.begin(), x.end(), batch.row(0).begin());
    const Matrix s = score_batch(batch);
    std::copy(s.data.begin(), s.data.end(), out.begin());
}

Matrix StationaryScoreModel::score_batch(const Matrix& x) const {
    const std::size_t D = transform.dim();
    require(x.cols == D, "score_batch: dimension mismatch");
    Matrix batch(x.rows, D + 1);
    for (std::size_t i = 0; i < x.rows; ++i) {
        transform.to_standardized(x.row(i), batch.row(i));
        batch(i, D) = schedule.sigma_min;
    }
    Matrix out = forward(net, batch);
    const double sigma = schedule.sigma_min;
    const double base_scale = -sigma / (1.0 + sigma * sigma);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t d = 0; d < D; ++d)
            out(i, d) = (out(i, d) + base_scale * batch(i, d)) / (sigma * transform.scale[d]);
    return out;
}

JointScoreModel train_joint_score(const std::vector<LaggedPairSet>& pairs,
                                  const NoiseSchedule& schedule, const ScoreTrainConfig& cfg,
                                  const Standardization& transform) {
    require(!pairs.empty(), "train_joint_score: no lag sets");
    const std::size_t D = pairs[0].dim();
    for (const auto& p : pairs) {
        require(p.dim() == D, "train_joint_score: mixed dimensions");
        require(p.size() >= 2, "train_joint_score: empty lag set");
    }

    JointScoreModel model;
    model.schedule = schedule;
    model.transform = transform;
    for (const auto& p : pairs) model.lags.push_back(p.lag());
    model.lag_scale = *std::max_element(model.lags.begin(), model.lags.end());

    std::vector<std::size_t> widths = {2 * D + 2};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(2 * D);
    model.net = make_mlp(widths, cfg.seed, /*zero_init_last=*/true);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    AdamState adam(acfg);

    Rng rng(cfg.seed ^ 0xD1B54A32D192ED03ull);
    Rng val_rng(cfg.seed ^ 0x8CB92BA72F3D8DD7ull);
    const std::size_t val_mod = validation_modulus(cfg.validation_fraction);
    const std::size_t n_lags = pairs.size();
    const std::size_t group = std::max<std::size_t>(1, std::min(cfg.lags_per_batch, n_lags));
    const std::size_t chunk = std::max<std::size_t>(1, cfg.batch_size / group);
    const std::size_t n_chunks = std::max<std::size_t>(1, cfg.pairs_per_lag / chunk);

    Matrix batch, dy;
    Gradients grads;
    grads.match_shape(model.net);
    ForwardCache cache;
    std::vector<double> sigmas, noise, u0(D), ut(D);

    // Each pair fills two antithetic rows r and r+1.
    auto fill_rows = [&](std::size_t r, const LaggedPairSet& set, std::size_t idx, double sigma,
                         Rng& source) {
        transform.to_standardized(set.x0(idx), u0);
        transform.to_standardized(set.xt(idx), ut);
        sigmas[r] = sigmas[r + 1] = sigma;
        for (std::size_t d = 0; d < D; ++d) {
            const double xi0 = source.normal(), xit = source.normal();
            noise[r * 2 * D + d] = xi0;
            noise[r * 2 * D + D + d] = xit;
            noise[(r + 1) * 2 * D + d] = -xi0;
            noise[(r + 1) * 2 * D + D + d] = -xit;
            batch(r, d) = u0[d] + sigma * xi0;
            batch(r, D + d) = ut[d] + sigma * xit;
            batch(r + 1, d) = u0[d] - sigma * xi0;
            batch(r + 1, D + d) = ut[d] - sigma * xit;
        }
        batch(r, 2 * D) = batch(r + 1, 2 * D) = set.lag() / model.lag_scale;
        batch(r, 2 * D + 1) = batch(r + 1, 2 * D + 1) = sigma;
    };

    auto run_batch = [&](bool train, std::size_t epoch) {
        const std::size_t B = batch.rows;
        forward(model.net, batch, cache);
        const Matrix& out = cache.post.back();
        dy.resize(B, 2 * D);
        double loss = 0.0;
        for (std::size_t r = 0; r < B; ++r) {
            const double sigma = sigmas[r];
            const double base_scale = -sigma / (1.0 + sigma * sigma);
            for (std::size_t d = 0; d < 2 * D; ++d) {
                const double resid = out(r, d) + base_scale * batch(r, d) + noise[r * 2 * D + d];
                loss += resid * resid;
                dy(r, d) = 2.0 * resid / static_cast<double>(B);
            }
        }
        loss /= static_cast<double>(B);
        if (!std::isfinite(loss)) abort_nonfinite("train_joint_score", epoch, loss);
        if (train) {
            grads.zero();
            backward(model.net, cache, dy, grads);
            adam_step(adam, model.net, grads);
        }
        return loss;
    };

    std::vector<std::size_t> lag_order(n_lags);
    for (std::size_t i = 0; i < n_lags; ++i) lag_order[i] = i;
    PolyakAverager averager(cfg);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.cfg.lr = cfg.epoch_lr(epoch);
        for (std::size_t i = n_lags; i > 1; --i)
            std::swap(lag_order[i - 1], lag_order[rng.below(i)]);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t c = 0; c < n_chunks; ++c) {
            for (std::size_t g0 = 0; g0 < n_lags; g0 += group) {
                const std::size_t g1 = std::min(g0 + group, n_lags);
                batch.resize((g1 - g0) * (chunk / 2) * 2, 2 * D + 2);
                sigmas.assign(batch.rows, 0.0);
                noise.assign(batch.rows * 2 * D, 0.0);
                std::size_t r = 0;
                for (std::size_t g = g0; g < g1; ++g) {
                    const auto& set = pairs[lag_order[g]];
                    for (std::size_t q = 0; q < chunk / 2; ++q, r += 2)
                        fill_rows(r, set, draw_train_index(rng, set.size(), val_mod),
                                  draw_sigma(schedule, rng), rng);
                }
                epoch_loss += run_batch(true, epoch);
                ++steps;
            }
        }
        model.train_loss.push_back(epoch_loss / static_cast<double>(steps));
        if (val_mod) {
            const std::size_t per_lag = 256;
            batch.resize(n_lags * per_lag * 2, 2 * D + 2);
            sigmas.assign(batch.rows, 0.0);
            noise.assign(batch.rows * 2 * D, 0.0);
            std::size_t r = 0;
            for (const auto& set : pairs)
                for (std::size_t q = 0; q < per_lag; ++q, r += 2)
                    fill_rows(r, set, val_rng.below(set.size() / val_mod) * val_mod,
                              draw_sigma(schedule, val_rng), val_rng);
            model.val_loss.push_back(run_batch(false, epoch));
        }
        averager.observe(model.net, epoch);
    }
    averager.finalize(model.net);
    return model;
}

Matrix JointScoreModel::q0_batch(const Matrix& x0, const Matrix& xt, double t) const {
    const std::size_t D = transform.dim();
    require(x0.rows == xt.rows && x0.cols == D && xt.cols == D, "q0_batch: shape mismatch");
    Matrix batch(x0.rows, 2 * D + 2);
    for (std::size_t i = 0; i < x0.rows; ++i) {
        const auto row = batch.row(i);
        transform.to_standardized(x0.row(i), row.first(D));
        transform.to_standardized(xt.row(i), row.subspan(D, D));
        batch(i, 2 * D) = t / lag_scale;
        batch(i, 2 * D + 1) = schedule.sigma_min;
    }
    const Matrix out = forward(net, batch);
    const double sigma = schedule.sigma_min;
    const double base_scale = -sigma / (1.0 + sigma * sigma);
    Matrix q0(x0.rows, D);
    for (std::size_t i = 0; i < x0.rows; ++i)
        for (std::size_t d = 0; d < D; ++d)
            q0(i, d) = (out(i, d) + base_scale * batch(i, d)) / (sigma * transform.scale[d]);
    return q0;
}

Matrix conditional_score_batch(const JointScoreModel& joint, const StationaryScoreModel& stat,
                               const Matrix& x0, const Matrix& xt, double t) {
    const double lo = *std::min_element(joint.lags.begin(), joint.lags.end());
    const double hi = *std::max_element(joint.lags.begin(), joint.lags.end());
    if (t < lo - 1e-9 || t > hi + 1e-9)
        throw std::invalid_argument("conditional_score: lag outside the trained range");
    Matrix q0 = joint.q0_batch(x0, xt, t);
    const Matrix s = stat.score_batch(x0);
    for (std::size_t i = 0; i < q0.data.size(); ++i) q0.data[i] -= s.data[i];
    return q0;
}

void conditional_score(const JointScoreModel& joint, const StationaryScoreModel& stat,
                       std::span<const double> x0, std::span<const double> xt, double t,
                       std::span<double> out) {
    Matrix m0(1, x0.size()), mt(1, xt.size());
    std::copy(x0.begin(), x0.end(), m0.row(0).begin());
    std::copy(xt.begin(), xt.end(), mt.row(0).begin());
    const Matrix s = conditional_score_batch(joint, stat, m0, mt, t);
    std::copy(s.data.begin(), s.data.end(), out.begin());
}

namespace {

json schedule_to_json(const NoiseSchedule& s) {
    return json{{"sigma_min", s.sigma_min}, {"sigma_max", s.sigma_max}};
}

NoiseSchedule schedule_from_json(const json& j) {
    return NoiseSchedule{j.at("sigma_min").get<double>(), j.at("sigma_max").get<double>()};
}

json transform_to_json(const Standardization& t) {
    return json{{"mean", t.mean}, {"scale", t.scale}};
}

Standardization transform_from_json(const json& j) {
    Standardization t;
    t.mean = j.at("mean").get<std::vector<double>>();
    t.scale = j.at("scale").get<std::vector<double>>();
    return t;
}

json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    json j;
    is >> j;
    return j;
}

void dump_json(const json& j, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

}  // namespace

void save_stationary_score(const StationaryScoreModel& model, const std::string& prefix) {
    save_mlp(model.net, prefix + ".ckpt");
    dump_json(json{{"kind", "stationary_score"},
                   {"schedule", schedule_to_json(model.schedule)},
                   {"transform", transform_to_json(model.transform)},
                   {"train_loss", model.train_loss},
                   {"val_loss", model.val_loss}},
              prefix + ".json");
}

StationaryScoreModel load_stationary_score(const std::string& prefix) {
    StationaryScoreModel model;
    model.net = load_mlp(prefix + ".ckpt");
    const json j = load_json(prefix + ".json");
    model.schedule = schedule_from_json(j.at("schedule"));
    model.transform = transform_from_json(j.at("transform"));
    model.train_loss = j.at("train_loss").get<std::vector<double>>();
    model.val_loss = j.at("val_loss").get<std::vector<double>>();
    return model;
}

void save_joint_score(const JointScoreModel& model, const std::string& prefix) {
    save_mlp(model.net, prefix + ".ckpt");
    dump_json(json{{"kind", "joint_score"},
                   {"schedule", schedule_to_json(model.schedule)},
                   {"transform", transform_to_json(model.transform)},
                   {"lags", model.lags},
                   {"lag_scale", model.lag_scale},
                   {"train_loss", model.train_loss},
                   {"val_loss", model.val_loss}},
              prefix + ".json");
}

JointScoreModel load_joint_score(const std::string& prefix) {
    JointScoreModel model;
    model.net = load_mlp(prefix + ".ckpt");
    const json j = load_json(prefix + ".json");
    model.schedule = schedule_from_json(j.at("schedule"));
    model.transform = transform_from_json(j.at("transform"));
    model.lags = j.at("lags").get<std::vector<double>>();
    model.lag_scale = j.at("lag_scale").get<double>();
    model.train_loss = j.at("train_loss").get<std::vector<double>>();
    model.val_loss = j.at("val_loss").get<std::vector<double>>();
    return model;
}

}  // namespace langcal
