#include "langcal/sde.hpp"

#include "langcal/rng.hpp"
#include "langcal/threading.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace langcal {

std::size_t TrajectoryEnsemble::total_samples() const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < n_traj(); ++t) n += n_samples(t);
    return n;
}

DiffusionSpec cir_spec(const CirParams& p) {
    require(p.kappa > 0 && p.theta > 0 && p.gamma > 0, "cir_spec: parameters must be positive");
    if (p.kappa * p.theta < p.gamma)
        throw std::invalid_argument("cir_spec: Feller condition kappa*theta >= gamma violated");
    DiffusionSpec spec;
    spec.dim = 1;
    const double kappa = p.kappa, theta = p.theta, gamma = p.gamma;
    spec.drift = [kappa, theta](std::span<const double> x, std::span<double> out) {
        out[0] = kappa * (theta - x[0]);
    };
    spec.noise_amplitude = [gamma](std::span<const double> x, Matrix& b) {
        if (b.rows != 1) b.resize(1, 1);
        b(0, 0) = std::sqrt(2.0 * gamma * std::max(x[0], 0.0));
    };
    spec.positivity_floor = 1e-12;
    return spec;
}

DiffusionSpec ou_spec(const OuParams& p) {
    require(p.kappa > 0 && p.gamma > 0 && p.dim >= 1, "ou_spec: invalid parameters");
    DiffusionSpec spec;
    spec.dim = p.dim;
    const double kappa = p.kappa;
    const double amp = std::sqrt(2.0 * p.gamma);
    spec.drift = [kappa](std::span<const double> x, std::span<double> out) {
        for (std::size_t d = 0; d < x.size(); ++d) out[d] = -kappa * x[d];
    };
    spec.noise_amplitude = [amp, dim = p.dim](std::span<const double>, Matrix& b) {
        if (b.rows != dim) b.resize(dim, dim);
        b.fill(0.0);
        for (std::size_t d = 0; d < dim; ++d) b(d, d) = amp;
    };
    return spec;
}

std::array<double, 2> affine2d_potential_gradient(const Affine2dParams& p, double x, double y) {
    return {4.0 * p.quartic_x * x * x * x + 2.0 * p.cross * x * y * y + 2.0 * p.quad_x * x,
            4.0 * p.quartic_y * y * y * y + 2.0 * p.cross * x * x * y + 2.0 * p.quad_y * y};
}

DiffusionSpec affine2d_spec(const Affine2dParams& p) {
    DiffusionSpec spec;
    spec.dim = 2;
    spec.drift = [p](std::span<const double> x, std::span<double> out) {
        const auto grad = affine2d_potential_gradient(p, x[0], x[1]);
        out[0] = -grad[0] - p.omega * x[1];
        out[1] = -grad[1] + p.omega * x[0];
    };
    spec.noise_amplitude = [p](std::span<const double> x, Matrix& b) {
        if (b.rows != 2) b.resize(2, 2);
        for (int i = 0; i < 4; ++i)
            b.data[i] = p.b0[i] + x[0] * p.b1[i] + x[1] * p.b2[i];
    };
    return spec;
}

DiffusionSpec make_system(const SystemParams& p) {
    if (const auto* c = std::get_if<CirParams>(&p)) return cir_spec(*c);
    if (const auto* a = std::get_if<Affine2dParams>(&p)) return affine2d_spec(*a);
    return ou_spec(std::get<OuParams>(p));
}

namespace {

// Integrates into `out` (pre-sized), saving every save_stride-th state starting
// with the initial one. Returns the index of the offending step on divergence.
void integrate_into(const DiffusionSpec& spec, std::span<const double> x0, std::size_t n_steps,
                    double dt, std::size_t save_stride, Rng& rng, std::vector<double>& out) {
    const std::size_t dim = spec.dim;
    std::vector<double> x(x0.begin(), x0.end());
    std::vector<double> mu(dim), xi(dim);
    Matrix b(dim, dim);
    const double sqrt_dt = std::sqrt(dt);

    // Reflect boundary crossings (x -> |x|, Higham-Mao) rather than clipping:
    // a clip parks samples at the floor itself, where score-weighted
    // statistics of square-root diffusions blow up.
    auto clamp_floor = [&] {
        if (spec.positivity_floor)
            for (auto& v : x) v = std::max(*spec.positivity_floor, std::fabs(v));
    };
    clamp_floor();

    out.clear();
    out.reserve((n_steps / save_stride + 1) * dim);
    out.insert(out.end(), x.begin(), x.end());

    for (std::size_t step = 1; step <= n_steps; ++step) {
        spec.drift(x, mu);
        spec.noise_amplitude(x, b);
        for (std::size_t d = 0; d < dim; ++d) xi[d] = rng.normal();
        for (std::size_t i = 0; i < dim; ++i) {
            double noise = 0.0;
            for (std::size_t j = 0; j < dim; ++j) noise += b(i, j) * xi[j];
            x[i] += mu[i] * dt + noise * sqrt_dt;
        }
        clamp_floor();
        for (std::size_t i = 0; i < dim; ++i) {
            if (!std::isfinite(x[i]) || std::fabs(x[i]) > spec.divergence_cap) {
                char msg[128];
                std::snprintf(msg, sizeof msg,
                              "integrate: coordinate %zu diverged at step %zu (|x| > %g)", i, step,
                              spec.divergence_cap);
                throw std::runtime_error(msg);
            }
        }
        if (step % save_stride == 0) out.insert(out.end(), x.begin(), x.end());
    }
}

}  // namespace

TrajectoryEnsemble integrate(const DiffusionSpec& spec, std::span<const double> x0,
                             std::size_t n_steps, double dt, std::size_t save_stride,
                             std::uint64_t seed) {
    require(dt > 0, "integrate: dt must be positive");
    require(save_stride >= 1, "integrate: save_stride must be >= 1");
    require(x0.size() == spec.dim, "integrate: x0 dimension mismatch");
    TrajectoryEnsemble ens;
    ens.dim = spec.dim;
    ens.dt_integration = dt;
    ens.save_stride = save_stride;
    ens.burn_in_fraction = 0.0;
    ens.seed = seed;
    ens.states.resize(1);
    Rng rng = Rng::stream(seed, 0);
    integrate_into(spec, x0, n_steps, dt, save_stride, rng, ens.states[0]);
    return ens;
}

DataConfig paper_data_preset() { return DataConfig{36, 3000.0, 1e-3, 1e-2, 0.10, 1}; }
DataConfig desk_data_preset() { return DataConfig{8, 500.0, 1e-3, 1e-2, 0.10, 1}; }

TrajectoryEnsemble generate_ensemble(const DiffusionSpec& spec, const DataConfig& cfg) {
    require(cfg.n_traj >= 1, "generate_ensemble: need at least one trajectory");
    require(cfg.dt > 0 && cfg.save_every > 0, "generate_ensemble: invalid time steps");
    require(cfg.burn_in_fraction >= 0 && cfg.burn_in_fraction < 1,
            "generate_ensemble: burn_in_fraction must be in [0, 1)");
    const double ratio = cfg.save_every / cfg.dt;
    const auto save_stride = static_cast<std::size_t>(std::llround(ratio));
    require(std::fabs(ratio - static_cast<double>(save_stride)) < 1e-9,
            "generate_ensemble: save_every must be a multiple of dt");

    const auto n_steps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.dt));
    TrajectoryEnsemble ens;
    ens.dim = spec.dim;
    ens.dt_integration = cfg.dt;
    ens.save_stride = save_stride;
    ens.burn_in_fraction = cfg.burn_in_fraction;
    ens.seed = cfg.seed;
    ens.states.resize(cfg.n_traj);

    std::vector<std::string> errors(cfg.n_traj);
    parallel_for_ranges(cfg.n_traj, [&](std::size_t t0, std::size_t t1) {
        for (std::size_t t = t0; t < t1; ++t) {
            Rng rng = Rng::stream(cfg.seed, t);
            std::vector<double> x0(spec.dim);
            for (auto& v : x0) v = rng.normal();
            try {
                integrate_into(spec, x0, n_steps, cfg.dt, save_stride, rng, ens.states[t]);
            } catch (const std::exception& e) {
                errors[t] = e.what();
            }
        }
    });
    for (std::size_t t = 0; t < cfg.n_traj; ++t)
        if (!errors[t].empty())
            throw std::runtime_error("trajectory " + std::to_string(t) + ": " + errors[t]);

    // Discard burn-in from the saved samples.
    for (auto& traj : ens.states) {
        const std::size_t n = traj.size() / ens.dim;
        const auto drop = static_cast<std::size_t>(std::ceil(cfg.burn_in_fraction * n));
        if (n - drop < 2)
            throw std::runtime_error("generate_ensemble: fewer than 2 samples after burn-in");
        traj.erase(traj.begin(), traj.begin() + static_cast<std::ptrdiff_t>(drop * ens.dim));
    }
    return ens;
}

TrajectoryEnsemble generate_reference_dataset(const SystemParams& params, const DataConfig& cfg) {
    return generate_ensemble(make_system(params), cfg);
}

namespace {

constexpr char kTrajMagic[8] = {'L', 'G', 'C', 'T', 'R', 'A', 'J', '1'};

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("trajectory file truncated");
    return v;
}

}  // namespace

void write_ensemble_binary(const TrajectoryEnsemble& ens, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kTrajMagic, 8);
    write_pod<std::uint32_t>(os, 1);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ens.dim));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ens.n_traj()));
    write_pod<double>(os, ens.dt_integration);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ens.save_stride));
    write_pod<double>(os, ens.burn_in_fraction);
    write_pod<std::uint64_t>(os, ens.seed);
    for (const auto& traj : ens.states) {
        write_pod<std::uint64_t>(os, traj.size() / ens.dim);
        os.write(reinterpret_cast<const char*>(traj.data()),
                 static_cast<std::streamsize>(traj.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

TrajectoryEnsemble read_ensemble_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kTrajMagic, 8) != 0)
        throw std::runtime_error("not a trajectory file: " + path);
    const auto version = read_pod<std::uint32_t>(is);
    if (version != 1) throw std::runtime_error("unsupported trajectory file version");
    TrajectoryEnsemble ens;
    ens.dim = read_pod<std::uint32_t>(is);
    const auto n_traj = read_pod<std::uint32_t>(is);
    ens.dt_integration = read_pod<double>(is);
    ens.save_stride = read_pod<std::uint32_t>(is);
    ens.burn_in_fraction = read_pod<double>(is);
    ens.seed = read_pod<std::uint64_t>(is);
    ens.states.resize(n_traj);
    for (auto& traj : ens.states) {
        const auto n = read_pod<std::uint64_t>(is);
        traj.resize(n * ens.dim);
        is.read(reinterpret_cast<char*>(traj.data()),
                static_cast<std::streamsize>(traj.size() * sizeof(double)));
        if (!is) throw std::runtime_error("trajectory file truncated: " + path);
    }
    return ens;
}

void write_ensemble_csv(const TrajectoryEnsemble& ens, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "traj_id,t";
    for (std::size_t d = 0; d < ens.dim; ++d) os << ",x_" << (d + 1);
    os << "\n";
    char buf[32];
    const double sdt = ens.saved_dt();
    for (std::size_t t = 0; t < ens.n_traj(); ++t) {
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            os << t << ',' << static_cast<double>(k) * sdt;
            const auto x = ens.state(t, k);
            for (std::size_t d = 0; d < ens.dim; ++d) {
                std::snprintf(buf, sizeof buf, ",%.17g", x[d]);
                os << buf;
            }
            os << "\n";
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace langcal
