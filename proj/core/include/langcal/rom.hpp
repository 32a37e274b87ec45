#pragma once

#include "langcal/lagstats.hpp"
#include "langcal/matrix.hpp"
#include "langcal/mobility.hpp"
#include "langcal/score.hpp"
#include "langcal/sde.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace langcal {

/// Score-based Langevin reduced model dx = [M(x) s(x) + div M(x)] dt
/// + sqrt(2) Sigma(x) dW with Sigma(x) Sigma(x)^T = Sym M(x).
struct RomSpec {
    std::size_t dim = 1;
    std::function<void(std::span<const double>, std::span<double>)> score;
    /// Fills M and div M at x.
    std::function<void(std::span<const double>, Matrix&, std::span<double>)> mobility;
    std::optional<double> positivity_floor;  // for square-root-type scores
    double divergence_cap = 1e6;

    /// Drift/noise closures for the generic integrator; the noise factor is the
    /// per-state Cholesky of Sym M (constant closures precompute it once).
    DiffusionSpec to_diffusion() const;
};

/// Generic builder from callbacks (analytic oracles).
RomSpec make_rom(std::size_t dim,
                 std::function<void(std::span<const double>, std::span<double>)> score,
                 std::function<void(std::span<const double>, Matrix&, std::span<double>)> mobility);

/// Constant-mobility closure: drift Phi s(x), constant noise chol(Sym Phi).
RomSpec make_constant_rom(std::size_t dim,
                          std::function<void(std::span<const double>, std::span<double>)> score,
                          const Matrix& phi);

/// Simulate a callback ROM with the generic integrator.
TrajectoryEnsemble simulate_rom(const RomSpec& rom, const DataConfig& cfg);

/// Simulate the learned ROM (or, with a null mobility, the constant closure
/// around phi) with all trajectories advanced in lockstep so network
/// evaluations are batched. Results are bit-identical to the per-trajectory
/// path for the same seed.
TrajectoryEnsemble simulate_rom(const StationaryScoreModel& score, const MobilityModel* mobility,
                                const Matrix& phi, const DataConfig& cfg,
                                double divergence_cap = 1e6);

struct MarginalStat {
    double l1 = 0.0;  // histogram L1 distance, shared reference bins
    double ks = 0.0;  // two-sample Kolmogorov-Smirnov statistic
};

struct ValidationEntry {
    std::string name;
    std::vector<MarginalStat> marginals;  // per coordinate
    std::vector<double> channel_rmse;     // per fitted channel, over the lag grid
};

struct ValidationReport {
    std::vector<std::pair<std::size_t, std::size_t>> channels;
    std::vector<std::string> channel_names;
    std::vector<double> lag_grid;
    std::vector<ValidationEntry> entries;

    const ValidationEntry& entry(const std::string& name) const;
    /// (wins, comparable) of `name` against `baseline` by channel RMSE,
    /// skipping channels for which skip_channel returns true.
    std::pair<std::size_t, std::size_t> channel_wins(
        const std::string& name, const std::string& baseline,
        const std::function<bool(std::size_t, std::size_t)>& skip_channel = nullptr) const;
};

/// Histogram L1 / KS marginal distances (reference-defined bins: 100 bins over
/// mean +/- 4 std per coordinate) and per-channel correlation-curve RMSEs for
/// each candidate ensemble against the reference.
ValidationReport validate(const TrajectoryEnsemble& reference,
                          const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                          const ObservableLibrary& lib, const std::vector<double>& lags);

void write_validation_report(const ValidationReport& report, const std::string& path);
ValidationReport read_validation_report(const std::string& path);

/// Plot-ready CSVs: marginal densities (coord, bin_center, then one density
/// column per ensemble) and correlation curves (m, n, tau, then one column per
/// ensemble).
void write_marginals_csv(const TrajectoryEnsemble& reference,
                         const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                         const std::string& path);
void write_correlation_comparison_csv(const TrajectoryEnsemble& reference,
                                      const std::vector<std::pair<std::string, const TrajectoryEnsemble*>>& models,
                                      const ObservableLibrary& lib,
                                      const std::vector<double>& lags, const std::string& path);

}  // namespace langcal
