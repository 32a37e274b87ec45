#pragma once

#include "langcal/matrix.hpp"
#include "langcal/net.hpp"
#include "langcal/sde.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace langcal {

/// Noise levels for denoising score matching. Equal bounds give the
/// fixed-sigma scheme used by the benchmark preset; otherwise sigma is drawn
/// log-uniformly from [sigma_min, sigma_max]. The loss weight is sigma^2.
struct NoiseSchedule {
    double sigma_min = 0.05;
    double sigma_max = 0.05;

    bool fixed() const { return sigma_max <= sigma_min; }
};

/// Per-coordinate affine map u = (x - mean) / scale fitted on training data.
/// Scores learned in u-space map back by s_x = s_u / scale.
struct Standardization {
    std::vector<double> mean, scale;

    std::size_t dim() const { return mean.size(); }
    void to_standardized(std::span<const double> x, std::span<double> u) const {
        for (std::size_t d = 0; d < mean.size(); ++d) u[d] = (x[d] - mean[d]) / scale[d];
    }
};

Standardization fit_standardization(const Matrix& samples);

/// Stationary (x_0, x_t) pairs at one fixed lag. Either a zero-copy view over
/// a TrajectoryEnsemble (which must outlive the set) or owned matrices.
class LaggedPairSet {
public:
    static LaggedPairSet from_ensemble(const TrajectoryEnsemble& ens, double lag);
    static LaggedPairSet from_matrices(double lag, Matrix x0, Matrix xt);

    double lag() const { return lag_; }
    std::size_t lag_steps() const { return lag_steps_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return size_; }
    std::span<const double> x0(std::size_t i) const;
    std::span<const double> xt(std::size_t i) const;

private:
    double lag_ = 0.0;
    std::size_t lag_steps_ = 0;
    std::size_t dim_ = 0;
    std::size_t size_ = 0;
    const TrajectoryEnsemble* ens_ = nullptr;
    std::vector<std::size_t> traj_of_pair_;  // cumulative pair counts per trajectory
    Matrix own_x0_, own_xt_;

    std::pair<std::size_t, std::size_t> locate(std::size_t i) const;
};

/// All admissible within-trajectory pairs for each requested positive lag.
/// Lags must sit on the saved sampling grid.
std::vector<LaggedPairSet> extract_lagged_pairs(const TrajectoryEnsemble& ens,
                                                const std::vector<double>& lags);

struct ScoreTrainConfig {
    std::vector<std::size_t> hidden = {128, 64};
    std::size_t epochs = 100;
    double lr = 3e-4;
    double lr_final = 0.0;  // > 0 enables geometric decay from lr to lr_final
    double weight_decay = 0.0;
    std::size_t batch_size = 2048;
    std::size_t samples_per_epoch = 65536;  // stationary training budget per epoch
    std::size_t pairs_per_lag = 8192;       // joint training budget per lag per epoch
    std::size_t lags_per_batch = 4;
    double validation_fraction = 0.1;
    double polyak_tail = 0.3;  // fraction of final epochs whose weights are averaged
    std::uint64_t seed = 1234;

    double epoch_lr(std::size_t epoch) const {
        if (lr_final <= 0.0 || lr_final >= lr || epochs < 2) return lr;
        const double f = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
        return lr * std::pow(lr_final / lr, f);
    }
};

/// Noise-conditioned stationary score model s(x) ~ grad log p_ss(x),
/// evaluated at the smallest trained noise level. The net regresses the
/// denoising direction sigma * s (unit-variance target); score_batch divides
/// the scaling back out.
struct StationaryScoreModel {
    Mlp net;  // (u, sigma) -> sigma * standardized score
    NoiseSchedule schedule;
    Standardization transform;
    std::vector<double> train_loss, val_loss;

    void score(std::span<const double> x, std::span<double> out) const;
    Matrix score_batch(const Matrix& x) const;  // one state per row
};

/// Lag-conditioned joint score model over pair space; block q0 is the
/// x0-gradient of the smoothed joint log-density.
struct JointScoreModel {
    Mlp net;  // (u0, ut, t / lag_scale, sigma) -> sigma * (q0, qt) standardized
    NoiseSchedule schedule;
    Standardization transform;
    std::vector<double> lags;
    double lag_scale = 1.0;
    std::vector<double> train_loss, val_loss;

    Matrix q0_batch(const Matrix& x0, const Matrix& xt, double t) const;
};

StationaryScoreModel train_stationary_score(const Matrix& samples, const NoiseSchedule& schedule,
                                            const ScoreTrainConfig& cfg);
StationaryScoreModel train_stationary_score(const TrajectoryEnsemble& ens,
                                            const NoiseSchedule& schedule,
                                            const ScoreTrainConfig& cfg);

JointScoreModel train_joint_score(const std::vector<LaggedPairSet>& pairs,
                                  const NoiseSchedule& schedule, const ScoreTrainConfig& cfg,
                                  const Standardization& transform);

/// Conditional transition score s_{t|0}(x_t | x_0) = q0(x0, xt, t) - s(x0),
/// evaluated at the trained sigma_min. Throws if t is outside the trained lag
/// range.
Matrix conditional_score_batch(const JointScoreModel& joint, const StationaryScoreModel& stat,
                               const Matrix& x0, const Matrix& xt, double t);
void conditional_score(const JointScoreModel& joint, const StationaryScoreModel& stat,
                       std::span<const double> x0, std::span<const double> xt, double t,
                       std::span<double> out);

/// Flatten every post-burn-in sample of the ensemble into an N x D matrix.
Matrix ensemble_samples(const TrajectoryEnsemble& ens);

/// Checkpoint = net checkpoint + JSON sidecar (transform, schedule, lags).
void save_stationary_score(const StationaryScoreModel& model, const std::string& prefix);
StationaryScoreModel load_stationary_score(const std::string& prefix);
void save_joint_score(const JointScoreModel& model, const std::string& prefix);
JointScoreModel load_joint_score(const std::string& prefix);

}  // namespace langcal
