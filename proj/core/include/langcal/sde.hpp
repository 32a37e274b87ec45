#pragma once

#include "langcal/matrix.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace langcal {

/// Ito diffusion dx = drift(x) dt + noise_amplitude(x) dW. The noise field is
/// the full matrix multiplying dW (i.e. B(x), or sqrt(2) Sigma(x) in the
/// score-based convention).
struct DiffusionSpec {
    std::size_t dim = 1;
    std::function<void(std::span<const double>, std::span<double>)> drift;
    std::function<void(std::span<const double>, Matrix&)> noise_amplitude;
    std::optional<double> positivity_floor;  // reflection floor applied per coordinate
    double divergence_cap = 1e6;
};

/// Uniformly sampled multi-trajectory record. states[t] holds the saved
/// samples of trajectory t, sample-major: states[t][k*dim + d].
struct TrajectoryEnsemble {
    std::size_t dim = 0;
    double dt_integration = 0.0;
    std::size_t save_stride = 1;
    double burn_in_fraction = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> states;

    std::size_t n_traj() const { return states.size(); }
    double saved_dt() const { return dt_integration * static_cast<double>(save_stride); }
    std::size_t n_samples(std::size_t t) const { return states[t].size() / dim; }
    std::span<const double> state(std::size_t t, std::size_t k) const {
        return {states[t].data() + k * dim, dim};
    }
    std::size_t total_samples() const;
};

struct CirParams {
    double kappa = 1.0;
    double theta = 1.0;
    double gamma = 0.5;
};

struct OuParams {
    std::size_t dim = 1;
    double kappa = 1.0;
    double gamma = 1.0;
};

/// 2D confining potential U plus rotation, with affine multiplicative noise
/// B(x) = B0 + x B1 + y B2. Defaults are the benchmark values.
struct Affine2dParams {
    double omega = 1.1;
    std::array<double, 4> b0 = {0.60, 0.10, 0.08, 0.55};
    std::array<double, 4> b1 = {0.36, 0.12, 0.15, -0.06};
    std::array<double, 4> b2 = {-0.09, 0.21, 0.18, 0.30};
    // U(x,y) = qx x^4 + cxy x^2 y^2 + qy y^4 + hx x^2 + hy y^2
    double quartic_x = 0.25;
    double cross = 0.5;
    double quartic_y = 0.25;
    double quad_x = 0.5;
    double quad_y = 0.5;
};

using SystemParams = std::variant<CirParams, Affine2dParams, OuParams>;

DiffusionSpec cir_spec(const CirParams& p);
DiffusionSpec affine2d_spec(const Affine2dParams& p);
DiffusionSpec ou_spec(const OuParams& p);
DiffusionSpec make_system(const SystemParams& p);

/// Gradient of the affine-2d potential (needed by tests and diagnostics).
std::array<double, 2> affine2d_potential_gradient(const Affine2dParams& p, double x, double y);

/// Euler-Maruyama integration of a single trajectory. The initial state is
/// saved, then every save_stride-th step. Throws std::runtime_error when any
/// coordinate exceeds spec.divergence_cap.
TrajectoryEnsemble integrate(const DiffusionSpec& spec, std::span<const double> x0,
                             std::size_t n_steps, double dt, std::size_t save_stride,
                             std::uint64_t seed);

struct DataConfig {
    std::size_t n_traj = 8;
    double horizon = 500.0;       // total integrated time per trajectory
    double dt = 1e-3;             // integration step
    double save_every = 1e-2;     // saved sampling interval (multiple of dt)
    double burn_in_fraction = 0.10;
    std::uint64_t seed = 1;
};

/// Full-scale reference preset: 36 trajectories to T = 3000, dt = 1e-3, saved
/// every 1e-2, first 10% discarded.
DataConfig paper_data_preset();
/// Reduced preset for workstation runs.
DataConfig desk_data_preset();

/// Generate an ensemble: trajectories integrated in parallel with independent
/// streams derived from (seed, trajectory index), burn-in discarded.
TrajectoryEnsemble generate_ensemble(const DiffusionSpec& spec, const DataConfig& cfg);
TrajectoryEnsemble generate_reference_dataset(const SystemParams& params, const DataConfig& cfg);

/// Columnar binary trajectory file (little-endian doubles).
void write_ensemble_binary(const TrajectoryEnsemble& ens, const std::string& path);
TrajectoryEnsemble read_ensemble_binary(const std::string& path);

/// CSV export, one row per saved time: traj_id, t, x_1..x_D.
void write_ensemble_csv(const TrajectoryEnsemble& ens, const std::string& path);

}  // namespace langcal
