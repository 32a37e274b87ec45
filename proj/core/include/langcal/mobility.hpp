#pragma once

#include "langcal/lagstats.hpp"
#include "langcal/matrix.hpp"
#include "langcal/net.hpp"
#include "langcal/score.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace langcal {

/// Analytic conditional score callback used by oracle paths:
/// out = s_{t|0}(x_t | x_0).
using ConditionalScoreFn =
    std::function<void(std::span<const double> x0, std::span<const double> xt, double t,
                       std::span<double> out)>;

/// Constant-plus-neural mobility field. The net maps the standardized state to
/// D(D+1)/2 Cholesky entries and D(D-1)/2 circulation entries; the assembled
/// field is M(x) = L(x) L(x)^T + eps I + R(x), whose symmetric part is positive
/// definite by construction. Zero net output reproduces the projected constant
/// baseline exactly, so delta M := M - phi vanishes at initialization.
struct MobilityModel {
    Matrix phi;              // PSD-projected baseline (raw units)
    Mlp net;
    double epsilon_floor = 1e-4;
    Standardization transform;
    Matrix chol_base;                // L0 with L0 L0^T = Sym(phi) - eps I
    std::vector<double> diag_shift;  // softplus pre-activations reproducing diag(L0)
    std::vector<double> anti_base;   // strictly-lower entries of Anti(phi)
    std::vector<double> residual_loss_history, mean_penalty_history;
    double residual_loss_at_zero = 0.0;

    std::size_t dim() const { return phi.rows; }

    void evaluate(std::span<const double> x, Matrix& m, Matrix& d_sym, Matrix& r_anti) const;
    /// As evaluate(), additionally filling (div M)_i = sum_j d M_ij / d x_j
    /// through the exact input-Jacobian of the network.
    void evaluate_with_divergence(std::span<const double> x, Matrix& m, Matrix& d_sym,
                                  Matrix& r_anti, std::span<double> div_m) const;
    /// Batched variant: one network pass for all states (rows); ms[r] is the
    /// mobility at row r and divs row r its divergence.
    void evaluate_batch_with_divergence(const Matrix& states, std::vector<Matrix>& ms,
                                        Matrix& divs) const;
    void delta_m(std::span<const double> x, Matrix& out) const;
};

/// Fresh model at the constant baseline (zero-initialized final layer).
MobilityModel make_mobility_model(const Matrix& phi_estimate, const Standardization& transform,
                                  const std::vector<std::size_t>& hidden, double epsilon_floor,
                                  std::uint64_t seed);

/// Conjugate-observable baseline gamma_n(x) = Phi : Hess(phi_n) + grad(phi_n) Phi^T s(x)
/// for one observable component set; out has obs.dim() entries.
void gamma_baseline(const Matrix& phi, const Observable& obs, std::span<const double> x,
                    std::span<const double> score, std::span<double> out);

/// Residual targets E_{m,n}(tau) = Cdot_{m,n}(tau) - G_{m,n}(tau) with the
/// per-channel Frobenius scale S_{m,n} (max over lags, floored) and lag
/// weights w_tau = 1 / (1 + tau / median(tau)).
struct ResidualTargetSet {
    struct Channel {
        std::size_t m = 0, n = 0;
        std::vector<Matrix> e;  // one d_m x d_n target per lag
        double scale = 1.0;
    };
    std::vector<double> lags;
    std::vector<double> lag_weights;
    std::vector<Channel> channels;

    const Channel& channel(std::size_t m, std::size_t n) const;
};

ResidualTargetSet residual_targets(const CorrelationCurveSet& curves, const Matrix& phi,
                                   const ObservableLibrary& lib,
                                   const StationaryScoreModel& score_model,
                                   const TrajectoryEnsemble& ens);
/// Oracle variant with an analytic stationary score callback.
ResidualTargetSet residual_targets(const CorrelationCurveSet& curves, const Matrix& phi,
                                   const ObservableLibrary& lib,
                                   const std::function<void(std::span<const double>, std::span<double>)>& score,
                                   const TrajectoryEnsemble& ens);

/// Empirical residual operator A_{m,n}(tau) = -(1/B) sum phi_m(x_t)
/// s_{t|0}^T dM(x_0) grad phi_n(x_0)^T for an arbitrary matrix field dM.
Matrix apply_operator(const std::function<void(std::span<const double>, Matrix&)>& delta_m,
                      const LaggedPairSet& pairs, const ConditionalScoreFn& cond_score,
                      const Observable& phi_m, const Observable& phi_n);

/// Pair pools with precomputed conditional scores, sampled once per training
/// run (the conditional score does not depend on the mobility parameters).
struct MobilityTrainingData {
    std::vector<double> lags;
    std::vector<Matrix> x0, xt, cond_score;  // per lag, one row per sampled pair
};

MobilityTrainingData sample_training_pairs(const std::vector<LaggedPairSet>& pairs,
                                           const JointScoreModel& joint,
                                           const StationaryScoreModel& stat,
                                           std::size_t per_lag, std::uint64_t seed);
MobilityTrainingData sample_training_pairs(const std::vector<LaggedPairSet>& pairs,
                                           const ConditionalScoreFn& cond_score,
                                           std::size_t per_lag, std::uint64_t seed);

struct MobilityTrainConfig {
    std::vector<std::size_t> hidden = {128, 128};
    std::size_t epochs = 250;
    double lr = 3e-4;
    double lr_final = 0.0;     // > 0 enables geometric decay from lr to lr_final
    double polyak_tail = 0.3;  // fraction of final epochs whose weights are averaged
    double weight_decay = 1e-6;  // decoupled (the regularizer R(theta))
    double lambda_mean = 1.0;
    double epsilon_floor = 1e-4;
    std::size_t pairs_per_lag = 32768;  // per epoch; capped by the sampled pool
    std::size_t lags_per_batch = 4;
    std::size_t batch_per_lag = 512;
    std::size_t anchor_total = 32768;  // resampled every epoch
    std::size_t anchor_batch = 1024;
    std::uint64_t seed = 7777;

    double epoch_lr(std::size_t epoch) const {
        if (lr_final <= 0.0 || lr_final >= lr || epochs < 2) return lr;
        const double f = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
        return lr * std::pow(lr_final / lr, f);
    }
};

/// One-step objective on an explicit batch; fills parameter gradients when
/// grads is non-null. Exposed so the gradient path can be checked against
/// finite differences.
struct MobilityBatch {
    std::vector<std::size_t> lag_indices;
    std::vector<std::vector<std::size_t>> pair_rows;  // per entry of lag_indices
    std::vector<std::size_t> anchor_rows;
};

double mobility_loss(const MobilityModel& model, const ResidualTargetSet& targets,
                     const MobilityTrainingData& data, const ObservableLibrary& lib,
                     const Matrix& anchors, const MobilityBatch& batch,
                     const MobilityTrainConfig& cfg, Gradients* grads,
                     double* residual_part = nullptr, double* penalty_part = nullptr);

/// Thrown when training hits a non-finite loss; carries the last finite state.
struct MobilityTrainError : std::runtime_error {
    MobilityTrainError(const std::string& what, MobilityModel last_good_model)
        : std::runtime_error(what), last_good(std::move(last_good_model)) {}
    MobilityModel last_good;
};

/// Minimize the channel-residual loss plus the mean-correction penalty over
/// the sampled pair pools. anchors: stationary states for the mean penalty.
MobilityModel train_mobility(const ResidualTargetSet& targets, const MobilityTrainingData& data,
                             const ObservableLibrary& lib, const Matrix& phi_estimate,
                             const Standardization& transform, const Matrix& anchors,
                             const MobilityTrainConfig& cfg);

/// Average of delta M over the given states.
Matrix mean_delta_m(const MobilityModel& model, const Matrix& states);

/// Checkpoint: net + JSON sidecar (phi, epsilon, transform, loss history).
void save_mobility(const MobilityModel& model, const std::string& prefix);
MobilityModel load_mobility(const std::string& prefix);

}  // namespace langcal
