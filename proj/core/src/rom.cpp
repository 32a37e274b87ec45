#include "langcal/rom.hpp"

#include "langcal/rng.hpp"
#include "langcal/threading.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace langcal {

DiffusionSpec RomSpec::to_diffusion() const {
    DiffusionSpec spec;
    spec.dim = dim;
    spec.divergence_cap = divergence_cap;
    spec.positivity_floor = positivity_floor;
    const auto score_fn = score;
    const auto mobility_fn = mobility;
    const std::size_t d = dim;
    spec.drift = [score_fn, mobility_fn, d](std::span<const double> x, std::span<double> out) {
        Matrix m;
        std::vector<double> div(d), s(d);
        mobility_fn(x, m, div);
        score_fn(x, s);
        for (std::size_t i = 0; i < d; ++i) {
            double v = div[i];
            for (std::size_t j = 0; j < d; ++j) v += m(i, j) * s[j];
            out[i] = v;
        }
    };
    spec.noise_amplitude = [mobility_fn, d](std::span<const double> x, Matrix& b) {
        Matrix m;
        std::vector<double> div(d);
        mobility_fn(x, m, div);
        Matrix sym(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) sym(i, j) = 0.5 * (m(i, j) + m(j, i));
        const Matrix l = cholesky_lower(sym);
        if (b.rows != d) b.resize(d, d);
        const double s2 = std::sqrt(2.0);
        for (std::size_t i = 0; i < d * d; ++i) b.data[i] = s2 * l.data[i];
    };
    return spec;
}

RomSpec make_rom(std::size_t dim,
                 std::function<void(std::span<const double>, std::span<double>)> score,
                 std::function<void(std::span<const double>, Matrix&, std::span<double>)> mobility) {
    RomSpec rom;
    rom.dim = dim;
    rom.score = std::move(score);
    rom.mobility = std::move(mobility);
    return rom;
}

RomSpec make_constant_rom(std::size_t dim,
                          std::function<void(std::span<const double>, std::span<double>)> score,
                          const Matrix& phi) {
    require(phi.rows == dim && phi.cols == dim, "make_constant_rom: phi shape mismatch");
    // fail fast if Sym(phi) is not factorizable (signals a projection bug upstream)
    {
        Matrix sym(dim, dim);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) sym(i, j) = 0.5 * (phi(i, j) + phi(j, i));
        cholesky_lower(sym);
    }
    RomSpec rom;
    rom.dim = dim;
    rom.score = std::move(score);
    rom.mobility = [phi, dim](std::span<const double>, Matrix& m, std::span<double> div) {
        m = phi;
        std::fill(div.begin(), div.end(), 0.0);
    };
    return rom;
}

TrajectoryEnsemble simulate_rom(const RomSpec& rom, const DataConfig& cfg) {
    return generate_ensemble(rom.to_diffusion(), cfg);
}

TrajectoryEnsemble simulate_rom(const StationaryScoreModel& score, const MobilityModel* mobility,
                                const Matrix& phi, const DataConfig& cfg, double divergence_cap) {
    const std::size_t d = score.transform.dim();
    require(phi.rows == d && phi.cols == d, "simulate_rom: phi shape mismatch");
    const double ratio = cfg.save_every / cfg.dt;
    const auto save_stride = static_cast<std::size_t>(std::llround(ratio));
    require(std::fabs(ratio - static_cast<double>(save_stride)) < 1e-9,
            "simulate_rom: save_every must be a multiple of dt");
    const auto n_steps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.dt));

    Matrix sigma_const;
    if (mobility == nullptr) {
        Matrix sym(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) sym(i, j) = 0.5 * (phi(i, j) + phi(j, i));
        sigma_const = cholesky_lower(sym);
    }

    const std::size_t n_traj = cfg.n_traj;
    std::vector<Rng> rngs;
    Matrix states(n_traj, d);
    for (std::size_t t = 0; t < n_traj; ++t) {
        rngs.push_back(Rng::stream(cfg.seed, t));
        for (std::size_t k = 0; k < d; ++k) states(t, k) = rngs[t].normal();
    }

    TrajectoryEnsemble ens;
    ens.dim = d;
    ens.dt_integration = cfg.dt;
    ens.save_stride = save_stride;
    ens.burn_in_fraction = cfg.burn_in_fraction;
    ens.seed = cfg.seed;
    ens.states.resize(n_traj);
    for (auto& traj : ens.states) {
        traj.reserve((n_steps / save_stride + 1) * d);
    }
    for (std::size_t t = 0; t < n_traj; ++t)
        ens.states[t].insert(ens.states[t].end(), states.row(t).begin(), states.row(t).end());

    const double sqrt_dt = std::sqrt(cfg.dt);
    const double sqrt2 = std::sqrt(2.0);
    Matrix scores, divs, d_sym(d, d);
    std::vector<Matrix> ms;
    std::vector<double> xi(d);
    for (std::size_t step = 1; step <= n_steps; ++step) {
        scores = score.score_batch(states);
        if (mobility != nullptr) mobility->evaluate_batch_with_divergence(states, ms, divs);
        for (std::size_t t = 0; t < n_traj; ++t) {
            Matrix sigma;
            const Matrix* m;
            if (mobility != nullptr) {
                m = &ms[t];
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        d_sym(i, j) = 0.5 * ((*m)(i, j) + (*m)(j, i));
                sigma = cholesky_lower(d_sym);
            } else {
                m = &phi;
                sigma = sigma_const;
            }
            for (std::size_t k = 0; k < d; ++k) xi[k] = rngs[t].normal();
            for (std::size_t i = 0; i < d; ++i) {
                double drift = (mobility != nullptr) ? divs(t, i) : 0.0;
                for (std::size_t j = 0; j < d; ++j) drift += (*m)(i, j) * scores(t, j);
                double noise = 0.0;
                for (std::size_t j = 0; j < d; ++j) noise += sigma(i, j) * xi[j];
                states(t, i) += drift * cfg.dt + sqrt2 * noise * sqrt_dt;
                if (!std::isfinite(states(t, i)) || std::fabs(states(t, i)) > divergence_cap) {
                    char msg[128];
                    std::snprintf(msg, sizeof msg,
                                  "simulate_rom: trajectory %zu diverged at step %zu", t, step);
                    throw std::runtime_error(msg);
                }
            }
        }
        if (step % save_stride == 0)
            for (std::size_t t = 0; t < n_traj; ++t)
                ens.states[t].insert(ens.states[t].end(), states.row(t).begin(),
                                     states.row(t).end());
    }

    for (auto& traj : ens.states) {
        const std::size_t n = traj.size() / d;
        const auto drop = static_cast<std::size_t>(std::ceil(cfg.burn_in_fraction * n));
        if (n - drop < 2) throw std::runtime_error("simulate_rom: fewer than 2 samples after burn-in");
        traj.erase(traj.begin(), traj.begin() + static_cast<std::ptrdiff_t>(drop * d));
    }
    return ens;
}

namespace {

struct Histogram {
    std::vector<double> edges;  // size bins + 1
    std::vector<double> mass;   // size bins, normalized

    static Histogram reference_bins(std::span<const double> values, std::size_t bins) {
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        var /= static_cast<double>(values.size());
        const double lo = mean - 4.0 * std::sqrt(var), hi = mean + 4.0 * std::sqrt(var);
        Histogram h;
        h.edges.resize(bins + 1);
        for (std::size_t i = 0; i <= bins; ++i)
            h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
        return h;
    }

    void fill(std::span<const double> values) {
        mass.assign(edges.size() - 1, 0.0);
        const double lo = edges.front(), hi = edges.back();
        const double w = (hi - lo) / static_cast<double>(mass.size());
        for (double v : values) {
            auto bin = static_cast<std::ptrdiff_t>((v - lo) / w);
            bin = std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(mass.size()) - 1);
            mass[static_cast<std::size_t>(bin)] += 1.0;
        }
        for (auto& v : mass) v /= static_cast<double>(values.size());
    }
};

std::vector<double> coordinate_values(const TrajectoryEnsemble& ens, std::size_t coord) {
    std::vector<double> values;
    values.reserve(ens.total_samples());
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) values.push_back(ens.state(t, k)[coord]);
    return values;
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double ks = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double v = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= v) ++i;  // ties advance both sides
        while (j < b.size() && b[j] <= v) ++j;
        const double fa = static_cast<double>(i) / static_cast<double>(a.size());
        const double fb = static_cast<double>(j) / static_cast<double>(b.size());
        ks = std::max(ks, std::fabs(fa - fb));
    }
    return ks;
}

}  // namespace

const ValidationEntry& ValidationReport::entry(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return e;
    throw std::invalid_argument("validation entry not found: " + name);
}

std::pair<std::size_t, std::size_t> ValidationReport::channel_wins(
    const std::string& name, const std::string& baseline,
    const std::function<bool(std::size_t, std::size_t)>& skip_channel) const {
    const auto& a = entry(name);
    const auto& b = entry(baseline);
    std::size_t wins = 0, total = 0;
    for (std::size_t c = 0; c < channels.size(); ++c) {
        if (skip_channel && skip_channel(channels[c].first, channels[c].second)) continue;
        ++total;
        if (a.channel_rmse[c] < b.channel_rmse[c]) ++wins;
    }
    return {wins, total};
}

ValidationReport validate(const TrajectoryEnsemble& reference,
                          const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                          const ObservableLibrary& lib, const std::vector<double>& lags) {
    ValidationReport report;
    report.channels = lib.channels;
    for (auto [m, n] : lib.channels)
        report.channel_names.push_back(lib.observables[m].name + "|" + lib.observables[n].name);
    report.lag_grid = lags;

    const std::size_t d = reference.dim;
    std::vector<Histogram> ref_hist(d);
    std::vector<std::vector<double>> ref_values(d);
    for (std::size_t k = 0; k < d; ++k) {
        ref_values[k] = coordinate_values(reference, k);
        ref_hist[k] = Histogram::reference_bins(ref_values[k], 100);
        ref_hist[k].fill(ref_values[k]);
    }
    const auto ref_curves = empirical_correlation(reference, lib, lags);

    for (const auto& [name, ens] : models) {
        require(ens->dim == d, "validate: dimension mismatch");
        ValidationEntry entry;
        entry.name = name;
        for (std::size_t k = 0; k < d; ++k) {
            auto values = coordinate_values(*ens, k);
            Histogram h;
            h.edges = ref_hist[k].edges;
            h.fill(values);
            MarginalStat stat;
            for (std::size_t b = 0; b < h.mass.size(); ++b)
                stat.l1 += std::fabs(h.mass[b] - ref_hist[k].mass[b]);
            stat.ks = ks_statistic(ref_values[k], std::move(values));
            entry.marginals.push_back(stat);
        }
        const auto curves = empirical_correlation(*ens, lib, lags);
        for (auto [m, n] : lib.channels) {
            const auto& ref_ch = ref_curves.channel(m, n);
            const auto& mod_ch = curves.channel(m, n);
            double sq = 0.0;
            std::size_t count = 0;
            for (std::size_t l = 1; l < ref_ch.c.size(); ++l) {  // positive lags
                for (std::size_t i = 0; i < ref_ch.c[l].data.size(); ++i) {
                    const double diff = mod_ch.c[l].data[i] - ref_ch.c[l].data[i];
                    sq += diff * diff;
                    ++count;
                }
            }
            entry.channel_rmse.push_back(std::sqrt(sq / static_cast<double>(count)));
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

void write_validation_report(const ValidationReport& report, const std::string& path) {
    using nlohmann::json;
    json entries = json::array();
    for (const auto& e : report.entries) {
        json marginals = json::array();
        for (const auto& m : e.marginals) marginals.push_back({{"l1", m.l1}, {"ks", m.ks}});
        entries.push_back(
            {{"name", e.name}, {"marginals", marginals}, {"channel_rmse", e.channel_rmse}});
    }
    json channels = json::array();
    for (std::size_t c = 0; c < report.channels.size(); ++c)
        channels.push_back({{"m", report.channels[c].first},
                            {"n", report.channels[c].second},
                            {"name", report.channel_names[c]}});
    const json j{{"kind", "validation_report"},
                 {"channels", channels},
                 {"lag_grid", report.lag_grid},
                 {"entries", entries}};
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

ValidationReport read_validation_report(const std::string& path) {
    using nlohmann::json;
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    json j;
    is >> j;
    ValidationReport report;
    for (const auto& c : j.at("channels")) {
        report.channels.emplace_back(c.at("m").get<std::size_t>(), c.at("n").get<std::size_t>());
        report.channel_names.push_back(c.at("name").get<std::string>());
    }
    report.lag_grid = j.at("lag_grid").get<std::vector<double>>();
    for (const auto& e : j.at("entries")) {
        ValidationEntry entry;
        entry.name = e.at("name").get<std::string>();
        for (const auto& m : e.at("marginals"))
            entry.marginals.push_back({m.at("l1").get<double>(), m.at("ks").get<double>()});
        entry.channel_rmse = e.at("channel_rmse").get<std::vector<double>>();
        report.entries.push_back(std::move(entry));
    }
    return report;
}

void write_marginals_csv(const TrajectoryEnsemble& reference,
                         const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                         const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "coord,bin_center,ref_density";
    for (const auto& [name, ens] : models) os << ',' << name << "_density";
    os << "\n";
    for (std::size_t k = 0; k < reference.dim; ++k) {
        const auto ref_values = coordinate_values(reference, k);
        Histogram ref = Histogram::reference_bins(ref_values, 100);
        ref.fill(ref_values);
        const double w = ref.edges[1] - ref.edges[0];
        std::vector<Histogram> hists;
        for (const auto& [name, ens] : models) {
            Histogram h;
            h.edges = ref.edges;
            h.fill(coordinate_values(*ens, k));
            hists.push_back(std::move(h));
        }
        for (std::size_t b = 0; b < ref.mass.size(); ++b) {
            os << k << ',' << 0.5 * (ref.edges[b] + ref.edges[b + 1]) << ',' << ref.mass[b] / w;
            for (const auto& h : hists) os << ',' << h.mass[b] / w;
            os << "\n";
        }
    }
}

void write_correlation_comparison_csv(const TrajectoryEnsemble& reference,
                                      const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                                      const ObservableLibrary& lib,
                                      const std::vector<double>& lags, const std::string& path) {
    const auto ref_curves = empirical_correlation(reference, lib, lags);
    std::vector<CorrelationCurveSet> model_curves;
    for (const auto& [name, ens] : models)
        model_curves.push_back(empirical_correlation(*ens, lib, lags));

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "m,n,tau,ref";
    for (const auto& [name, ens] : models) os << ',' << name;
    os << "\n";
    for (auto [m, n] : lib.channels) {
        const auto& ref_ch = ref_curves.channel(m, n);
        for (std::size_t l = 0; l < ref_curves.lag_grid.size(); ++l) {
            os << m << ',' << n << ',' << ref_curves.lag_grid[l] << ',' << ref_ch.c[l](0, 0);
            for (const auto& curves : model_curves)
                os << ',' << curves.channel(m, n).c[l](0, 0);
            os << "\n";
        }
    }
}

}  // namespace langcal
