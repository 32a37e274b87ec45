#include "langcal/mobility.hpp"

#include "langcal/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace langcal {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_inv(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::size_t tri_count(std::size_t d) { return d * (d + 1) / 2; }
std::size_t strict_count(std::size_t d) { return d * (d - 1) / 2; }

// Assemble L, R, M from one row of net outputs; optionally keep the diagonal
// pre-activations for the backward pass.
void assemble(const MobilityModel& model, std::span<const double> h, Matrix& l, Matrix& m,
              std::vector<double>* diag_pre) {
    const std::size_t d = model.dim();
    l.resize(d, d);
    std::size_t k = 0;
    if (diag_pre) diag_pre->assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j, ++k) {
            if (i == j) {
                const double pre = h[k] + model.diag_shift[i];
                if (diag_pre) (*diag_pre)[i] = pre;
                l(i, i) = softplus(pre);
            } else {
                l(i, j) = h[k] + model.chol_base(i, j);
            }
        }
    }
    m.resize(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = (i == j) ? model.epsilon_floor : 0.0;
            for (std::size_t q = 0; q <= std::min(i, j); ++q) s += l(i, q) * l(j, q);
            m(i, j) = s;
        }
    std::size_t k2 = 0;
    for (std::size_t i = 1; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j, ++k2) {
            const double r = h[tri_count(d) + k2] + model.anti_base[k2];
            m(i, j) += r;
            m(j, i) -= r;
        }
}

// dL/dh for one row given G = dL/dM.
void backprop_row(const MobilityModel& model, const Matrix& l, const std::vector<double>& diag_pre,
                  const Matrix& g, std::span<double> dh) {
    const std::size_t d = model.dim();
    // symmetric chain: T = (G + G^T) L
    Matrix t(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t q = 0; q < d; ++q) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += (g(i, j) + g(j, i)) * l(j, q);
            t(i, q) = s;
        }
    std::size_t k = 0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j <= i; ++j, ++k)
            dh[k] = (i == j) ? t(i, i) * sigmoid(diag_pre[i]) : t(i, j);
    std::size_t k2 = 0;
    for (std::size_t i = 1; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j, ++k2) dh[tri_count(d) + k2] = g(i, j) - g(j, i);
}

void split_parts(const Matrix& m, Matrix& d_sym, Matrix& r_anti) {
    const std::size_t d = m.rows;
    d_sym.resize(d, d);
    r_anti.resize(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            d_sym(i, j) = 0.5 * (m(i, j) + m(j, i));
            r_anti(i, j) = 0.5 * (m(i, j) - m(j, i));
        }
}

}  // namespace

MobilityModel make_mobility_model(const Matrix& phi_estimate, const Standardization& transform,
                                  const std::vector<std::size_t>& hidden, double epsilon_floor,
                                  std::uint64_t seed) {
    const std::size_t d = phi_estimate.rows;
    require(phi_estimate.cols == d, "make_mobility_model: phi must be square");
    require(transform.dim() == d, "make_mobility_model: transform dimension mismatch");
    require(epsilon_floor > 0, "make_mobility_model: epsilon_floor must be positive");

    MobilityModel model;
    model.epsilon_floor = epsilon_floor;
    model.transform = transform;

    // Split phi; floor symmetric eigenvalues at 2 eps so Sym(phi) - eps I stays
    // safely factorizable.
    Matrix sym(d, d), anti(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            sym(i, j) = 0.5 * (phi_estimate(i, j) + phi_estimate(j, i));
            anti(i, j) = 0.5 * (phi_estimate(i, j) - phi_estimate(j, i));
        }
    std::vector<double> eig;
    Matrix vec;
    symmetric_eigen(sym, eig, vec);
    Matrix floored(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k)
                s += vec(i, k) * std::max(eig[k], 2.0 * epsilon_floor) * vec(j, k);
            floored(i, j) = s;
        }
    model.phi.resize(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) model.phi(i, j) = floored(i, j) + anti(i, j);

    Matrix base = floored;
    for (std::size_t i = 0; i < d; ++i) base(i, i) -= epsilon_floor;
    model.chol_base = cholesky_lower(base);
    model.diag_shift.resize(d);
    for (std::size_t i = 0; i < d; ++i) model.diag_shift[i] = softplus_inv(model.chol_base(i, i));
    model.anti_base.resize(strict_count(d));
    std::size_t k2 = 0;
    for (std::size_t i = 1; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j, ++k2) model.anti_base[k2] = anti(i, j);

    std::vector<std::size_t> widths = {d};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(tri_count(d) + strict_count(d));
    model.net = make_mlp(widths, seed, /*zero_init_last=*/true);
    return model;
}

void MobilityModel::evaluate(std::span<const double> x, Matrix& m, Matrix& d_sym,
                             Matrix& r_anti) const {
    Matrix u(1, dim());
    transform.to_standardized(x, u.row(0));
    const Matrix h = forward(net, u);
    Matrix l;
    assemble(*this, h.row(0), l, m, nullptr);
    split_parts(m, d_sym, r_anti);
}

namespace {

// dM_ij/dL_pq = delta_ip L_jq + delta_jp L_iq, so
// (div M)_i gains  delta_ip sum_xj L(xj,q) Jhat(a,xj)  +  L(i,q) Jhat(a,p)
// with Jhat(a,xj) = act_a J(a,xj) / scale_xj.
void divergence_from_jacobian(const MobilityModel& model, const Matrix& l,
                              const std::vector<double>& diag_pre, const Matrix& j,
                              std::span<double> div_m) {
    const std::size_t d = model.dim();
    std::fill(div_m.begin(), div_m.end(), 0.0);
    std::size_t k = 0;
    for (std::size_t p = 0; p < d; ++p) {
        for (std::size_t q = 0; q <= p; ++q, ++k) {
            const double act = (p == q) ? sigmoid(diag_pre[p]) : 1.0;
            double contraction = 0.0;
            for (std::size_t xj = q; xj < d; ++xj)
                contraction += l(xj, q) * act * j(k, xj) / model.transform.scale[xj];
            div_m[p] += contraction;
            const double jp = act * j(k, p) / model.transform.scale[p];
            for (std::size_t i = q; i < d; ++i) div_m[i] += l(i, q) * jp;
        }
    }
    std::size_t k2 = 0;
    for (std::size_t p = 1; p < d; ++p)
        for (std::size_t q = 0; q < p; ++q, ++k2) {
            const std::size_t a = tri_count(d) + k2;
            div_m[p] += j(a, q) / model.transform.scale[q];
            div_m[q] -= j(a, p) / model.transform.scale[p];
        }
}

}  // namespace

void MobilityModel::evaluate_with_divergence(std::span<const double> x, Matrix& m, Matrix& d_sym,
                                             Matrix& r_anti, std::span<double> div_m) const {
    const std::size_t d = dim();
    Matrix u(1, d);
    transform.to_standardized(x, u.row(0));
    const Matrix h = forward(net, u);
    Matrix l;
    std::vector<double> diag_pre;
    assemble(*this, h.row(0), l, m, &diag_pre);
    split_parts(m, d_sym, r_anti);
    const auto jac = input_jacobians(net, u);
    divergence_from_jacobian(*this, l, diag_pre, jac[0], div_m);
}

void MobilityModel::evaluate_batch_with_divergence(const Matrix& states, std::vector<Matrix>& ms,
                                                   Matrix& divs) const {
    const std::size_t d = dim(), n = states.rows;
    Matrix u(n, d);
    for (std::size_t r = 0; r < n; ++r) transform.to_standardized(states.row(r), u.row(r));
    const Matrix h = forward(net, u);
    const auto jac = input_jacobians(net, u);
    ms.resize(n);
    divs.resize(n, d);
    Matrix l;
    std::vector<double> diag_pre;
    for (std::size_t r = 0; r < n; ++r) {
        assemble(*this, h.row(r), l, ms[r], &diag_pre);
        divergence_from_jacobian(*this, l, diag_pre, jac[r], divs.row(r));
    }
}

void MobilityModel::delta_m(std::span<const double> x, Matrix& out) const {
    Matrix m, d_sym, r_anti;
    evaluate(x, m, d_sym, r_anti);
    out.resize(dim(), dim());
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = m.data[i] - phi.data[i];
}

void gamma_baseline(const Matrix& phi, const Observable& obs, std::span<const double> x,
                    std::span<const double> score, std::span<double> out) {
    const std::size_t d = phi.rows;
    Matrix grad, hess;
    obs.gradient(x, grad);
    for (std::size_t b = 0; b < obs.dim(); ++b) {
        obs.hessian(x, b, hess);
        double v = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) v += phi(i, j) * hess(i, j);
        for (std::size_t j = 0; j < d; ++j) {
            double phis = 0.0;
            for (std::size_t i = 0; i < d; ++i) phis += phi(i, j) * score[i];
            v += grad(b, j) * phis;
        }
        out[b] = v;
    }
}

const ResidualTargetSet::Channel& ResidualTargetSet::channel(std::size_t m, std::size_t n) const {
    for (const auto& ch : channels)
        if (ch.m == m && ch.n == n) return ch;
    throw std::invalid_argument("residual channel not present");
}

namespace {

ResidualTargetSet residual_targets_impl(
    const CorrelationCurveSet& curves, const Matrix& phi, const ObservableLibrary& lib,
    const std::function<Matrix(const Matrix&)>& score_batch_fn, const TrajectoryEnsemble& ens) {
    require(curves.has_derivatives, "residual_targets: derivative curves not filled");
    const std::size_t n_lags = curves.lag_grid.size() - 1;
    require(n_lags >= 1, "residual_targets: no positive lags");

    ResidualTargetSet targets;
    targets.lags.assign(curves.lag_grid.begin() + 1, curves.lag_grid.end());
    {
        std::vector<double> sorted = targets.lags;
        std::sort(sorted.begin(), sorted.end());
        const double median = (sorted.size() % 2 == 1)
                                  ? sorted[sorted.size() / 2]
                                  : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
        for (double tau : targets.lags) targets.lag_weights.push_back(1.0 / (1.0 + tau / median));
    }

    // stationary scores and conjugate observables at every sample
    const Matrix samples = ensemble_samples(ens);
    const Matrix scores = score_batch_fn(samples);

    std::vector<std::size_t> unique_n;
    for (auto [m, n] : lib.channels)
        if (std::find(unique_n.begin(), unique_n.end(), n) == unique_n.end())
            unique_n.push_back(n);
    std::vector<std::size_t> n_offset(lib.observables.size(), 0);
    std::size_t gamma_width = 0;
    for (auto n : unique_n) {
        n_offset[n] = gamma_width;
        gamma_width += lib.observables[n].dim();
    }
    Matrix gammas(samples.rows, gamma_width);
    for (std::size_t r = 0; r < samples.rows; ++r)
        for (auto n : unique_n)
            gamma_baseline(phi, lib.observables[n], samples.row(r), scores.row(r),
                           gammas.row(r).subspan(n_offset[n], lib.observables[n].dim()));

    // per-trajectory flat sample offsets
    std::vector<std::size_t> base(ens.n_traj() + 1, 0);
    for (std::size_t t = 0; t < ens.n_traj(); ++t) base[t + 1] = base[t] + ens.n_samples(t);

    targets.channels.resize(lib.channels.size());
    for (std::size_t c = 0; c < lib.channels.size(); ++c) {
        targets.channels[c].m = lib.channels[c].first;
        targets.channels[c].n = lib.channels[c].second;
    }

    std::vector<double> phi_vals;
    for (std::size_t li = 0; li < n_lags; ++li) {
        const std::size_t steps = curves.lag_steps[li + 1];
        // G_{m,n} accumulators
        std::vector<Matrix> g(lib.channels.size());
        for (std::size_t c = 0; c < lib.channels.size(); ++c)
            g[c].resize(lib.observables[lib.channels[c].first].dim(),
                        lib.observables[lib.channels[c].second].dim());
        std::size_t count = 0;
        for (std::size_t t = 0; t < ens.n_traj(); ++t) {
            const std::size_t len = ens.n_samples(t);
            for (std::size_t k = 0; k + steps < len; ++k) {
                const auto xt = ens.state(t, k + steps);
                const std::size_t row0 = base[t] + k;
                for (std::size_t c = 0; c < lib.channels.size(); ++c) {
                    const auto& obs_m = lib.observables[lib.channels[c].first];
                    const std::size_t n = lib.channels[c].second;
                    phi_vals.resize(obs_m.dim());
                    obs_m.value(xt, phi_vals);
                    const auto gamma_row =
                        gammas.row(row0).subspan(n_offset[n], lib.observables[n].dim());
                    for (std::size_t a = 0; a < g[c].rows; ++a)
                        for (std::size_t b = 0; b < g[c].cols; ++b)
                            g[c](a, b) += phi_vals[a] * gamma_row[b];
                }
                ++count;
            }
        }
        for (std::size_t c = 0; c < lib.channels.size(); ++c) {
            for (auto& v : g[c].data) v /= static_cast<double>(count);
            const auto& cdot =
                curves.channel(lib.channels[c].first, lib.channels[c].second).cdot[li];
            Matrix e(g[c].rows, g[c].cols);
            for (std::size_t i = 0; i < e.data.size(); ++i)
                e.data[i] = cdot.data[i] - g[c].data[i];
            targets.channels[c].e.push_back(std::move(e));
        }
    }

    for (auto& ch : targets.channels) {
        double scale = 0.0;
        for (const auto& e : ch.e) {
            double f = 0.0;
            for (double v : e.data) f += v * v;
            scale = std::max(scale, std::sqrt(f));
        }
        ch.scale = std::max(scale, 1e-8);
    }
    return targets;
}

}  // namespace

ResidualTargetSet residual_targets(const CorrelationCurveSet& curves, const Matrix& phi,
                                   const ObservableLibrary& lib,
                                   const StationaryScoreModel& score_model,
                                   const TrajectoryEnsemble& ens) {
    return residual_targets_impl(
        curves, phi, lib, [&](const Matrix& x) { return score_model.score_batch(x); }, ens);
}

ResidualTargetSet residual_targets(
    const CorrelationCurveSet& curves, const Matrix& phi, const ObservableLibrary& lib,
    const std::function<void(std::span<const double>, std::span<double>)>& score,
    const TrajectoryEnsemble& ens) {
    return residual_targets_impl(
        curves, phi, lib,
        [&](const Matrix& x) {
            Matrix s(x.rows, x.cols);
            for (std::size_t r = 0; r < x.rows; ++r) score(x.row(r), s.row(r));
            return s;
        },
        ens);
}

Matrix apply_operator(const std::function<void(std::span<const double>, Matrix&)>& delta_m,
                      const LaggedPairSet& pairs, const ConditionalScoreFn& cond_score,
                      const Observable& phi_m, const Observable& phi_n) {
    const std::size_t d = pairs.dim();
    Matrix result(phi_m.dim(), phi_n.dim());
    Matrix dm, grad_n;
    std::vector<double> s(d), phim(phi_m.dim());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto x0 = pairs.x0(i);
        const auto xt = pairs.xt(i);
        cond_score(x0, xt, pairs.lag(), s);
        delta_m(x0, dm);
        phi_m.value(xt, phim);
        phi_n.gradient(x0, grad_n);
        for (std::size_t b = 0; b < phi_n.dim(); ++b) {
            double q = 0.0;
            for (std::size_t ii = 0; ii < d; ++ii)
                for (std::size_t jj = 0; jj < d; ++jj)
                    q += s[ii] * dm(ii, jj) * grad_n(b, jj);
            for (std::size_t a = 0; a < phi_m.dim(); ++a) result(a, b) -= phim[a] * q;
        }
    }
    for (auto& v : result.data) v /= static_cast<double>(pairs.size());
    return result;
}

namespace {

MobilityTrainingData sample_pairs_impl(
    const std::vector<LaggedPairSet>& pairs, std::size_t per_lag, std::uint64_t seed,
    const std::function<Matrix(const Matrix&, const Matrix&, double)>& cond_batch) {
    require(!pairs.empty(), "sample_training_pairs: no lag sets");
    const std::size_t d = pairs[0].dim();
    MobilityTrainingData data;
    Rng rng(seed ^ 0xC2B2AE3D27D4EB4Full);
    for (const auto& set : pairs) {
        const std::size_t n = std::min(per_lag, set.size());
        Matrix x0(n, d), xt(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t idx = rng.below(set.size());
            const auto a = set.x0(idx);
            const auto b = set.xt(idx);
            std::copy(a.begin(), a.end(), x0.row(r).begin());
            std::copy(b.begin(), b.end(), xt.row(r).begin());
        }
        data.lags.push_back(set.lag());
        data.cond_score.push_back(cond_batch(x0, xt, set.lag()));
        data.x0.push_back(std::move(x0));
        data.xt.push_back(std::move(xt));
    }
    return data;
}

}  // namespace

MobilityTrainingData sample_training_pairs(const std::vector<LaggedPairSet>& pairs,
                                           const JointScoreModel& joint,
                                           const StationaryScoreModel& stat, std::size_t per_lag,
                                           std::uint64_t seed) {
    return sample_pairs_impl(pairs, per_lag, seed,
                             [&](const Matrix& x0, const Matrix& xt, double t) {
                                 return conditional_score_batch(joint, stat, x0, xt, t);
                             });
}

MobilityTrainingData sample_training_pairs(const std::vector<LaggedPairSet>& pairs,
                                           const ConditionalScoreFn& cond_score,
                                           std::size_t per_lag, std::uint64_t seed) {
    return sample_pairs_impl(pairs, per_lag, seed,
                             [&](const Matrix& x0, const Matrix& xt, double t) {
                                 Matrix s(x0.rows, x0.cols);
                                 for (std::size_t r = 0; r < x0.rows; ++r)
                                     cond_score(x0.row(r), xt.row(r), t, s.row(r));
                                 return s;
                             });
}

double mobility_loss(const MobilityModel& model, const ResidualTargetSet& targets,
                     const MobilityTrainingData& data, const ObservableLibrary& lib,
                     const Matrix& anchors, const MobilityBatch& batch,
                     const MobilityTrainConfig& cfg, Gradients* grads, double* residual_part,
                     double* penalty_part) {
    const std::size_t d = model.dim();
    const std::size_t n_out = model.net.output_dim();

    std::size_t n_pair_rows = 0;
    for (const auto& rows : batch.pair_rows) n_pair_rows += rows.size();
    const std::size_t n_anchor = batch.anchor_rows.size();
    const std::size_t total = n_pair_rows + n_anchor;
    require(total > 0, "mobility_loss: empty batch");

    Matrix u(total, d);
    {
        std::size_t r = 0;
        for (std::size_t g = 0; g < batch.lag_indices.size(); ++g) {
            const Matrix& x0 = data.x0[batch.lag_indices[g]];
            for (auto row : batch.pair_rows[g])
                model.transform.to_standardized(x0.row(row), u.row(r++));
        }
        for (auto row : batch.anchor_rows)
            model.transform.to_standardized(anchors.row(row), u.row(r++));
    }

    ForwardCache cache;
    forward(model.net, u, cache);
    const Matrix& h = cache.post.back();

    // assemble delta M per row
    std::vector<Matrix> l_rows(total), dm_rows(total);
    std::vector<std::vector<double>> pre_rows(total);
    Matrix m_work;
    for (std::size_t r = 0; r < total; ++r) {
        assemble(model, h.row(r), l_rows[r], m_work, &pre_rows[r]);
        dm_rows[r].resize(d, d);
        for (std::size_t i = 0; i < d * d; ++i)
            dm_rows[r].data[i] = m_work.data[i] - model.phi.data[i];
    }

    std::vector<Matrix> dl_dm(total, Matrix(d, d));
    double residual_loss = 0.0;

    // channel residuals per lag in the batch
    Matrix grad_n;
    std::vector<double> phim;
    std::size_t row_base = 0;
    for (std::size_t g = 0; g < batch.lag_indices.size(); ++g) {
        const std::size_t li = batch.lag_indices[g];
        const auto& rows = batch.pair_rows[g];
        const double b_count = static_cast<double>(rows.size());
        const double w_tau = targets.lag_weights[li];
        const Matrix& x0 = data.x0[li];
        const Matrix& xt = data.xt[li];
        const Matrix& s = data.cond_score[li];

        for (std::size_t c = 0; c < targets.channels.size(); ++c) {
            const auto& ch = targets.channels[c];
            const auto& obs_m = lib.observables[ch.m];
            const auto& obs_n = lib.observables[ch.n];
            const Matrix& e = ch.e[li];
            Matrix a_hat(obs_m.dim(), obs_n.dim());
            phim.resize(obs_m.dim());

            for (std::size_t rr = 0; rr < rows.size(); ++rr) {
                const std::size_t row = rows[rr];
                const Matrix& dm = dm_rows[row_base + rr];
                obs_m.value(xt.row(row), phim);
                obs_n.gradient(x0.row(row), grad_n);
                for (std::size_t b = 0; b < obs_n.dim(); ++b) {
                    double q = 0.0;
                    for (std::size_t ii = 0; ii < d; ++ii)
                        for (std::size_t jj = 0; jj < d; ++jj)
                            q += s(row, ii) * dm(ii, jj) * grad_n(b, jj);
                    for (std::size_t a = 0; a < obs_m.dim(); ++a)
                        a_hat(a, b) -= phim[a] * q / b_count;
                }
            }

            const double inv_s2 = 1.0 / (ch.scale * ch.scale);
            for (std::size_t i = 0; i < a_hat.data.size(); ++i) {
                const double diff = e.data[i] - a_hat.data[i];
                residual_loss += w_tau * diff * diff * inv_s2;
            }

            if (grads) {
                // dL/d a_hat = -2 w (E - A)/S^2; d a_hat/d dm = -phi_m s g / B
                for (std::size_t rr = 0; rr < rows.size(); ++rr) {
                    const std::size_t row = rows[rr];
                    obs_m.value(xt.row(row), phim);
                    obs_n.gradient(x0.row(row), grad_n);
                    Matrix& gmat = dl_dm[row_base + rr];
                    for (std::size_t a = 0; a < obs_m.dim(); ++a)
                        for (std::size_t b = 0; b < obs_n.dim(); ++b) {
                            const double coeff = 2.0 * w_tau *
                                                 (e(a, b) - a_hat(a, b)) * inv_s2 * phim[a] /
                                                 b_count;
                            for (std::size_t ii = 0; ii < d; ++ii)
                                for (std::size_t jj = 0; jj < d; ++jj)
                                    gmat(ii, jj) += coeff * s(row, ii) * grad_n(b, jj);
                        }
                }
            }
        }
        row_base += rows.size();
    }

    // mean-correction penalty over the anchor slice
    double penalty = 0.0;
    if (n_anchor > 0 && cfg.lambda_mean > 0.0) {
        Matrix mean_dm(d, d);
        for (std::size_t r = 0; r < n_anchor; ++r)
            for (std::size_t i = 0; i < d * d; ++i)
                mean_dm.data[i] += dm_rows[n_pair_rows + r].data[i];
        for (auto& v : mean_dm.data) v /= static_cast<double>(n_anchor);
        for (double v : mean_dm.data) penalty += cfg.lambda_mean * v * v;
        if (grads) {
            for (std::size_t r = 0; r < n_anchor; ++r)
                for (std::size_t i = 0; i < d * d; ++i)
                    dl_dm[n_pair_rows + r].data[i] +=
                        2.0 * cfg.lambda_mean * mean_dm.data[i] / static_cast<double>(n_anchor);
        }
    }

    if (grads) {
        Matrix dy(total, n_out);
        for (std::size_t r = 0; r < total; ++r)
            backprop_row(model, l_rows[r], pre_rows[r], dl_dm[r], dy.row(r));
        grads->zero();
        backward(model.net, cache, dy, *grads);
    }

    if (residual_part) *residual_part = residual_loss;
    if (penalty_part) *penalty_part = penalty;
    return residual_loss + penalty;
}

MobilityModel train_mobility(const ResidualTargetSet& targets, const MobilityTrainingData& data,
                             const ObservableLibrary& lib, const Matrix& phi_estimate,
                             const Standardization& transform, const Matrix& anchors,
                             const MobilityTrainConfig& cfg) {
    require(data.lags.size() == targets.lags.size(), "train_mobility: lag grids differ");
    for (std::size_t i = 0; i < data.lags.size(); ++i)
        require(std::fabs(data.lags[i] - targets.lags[i]) < 1e-9,
                "train_mobility: lag grids differ");
    require(anchors.rows > 0, "train_mobility: empty anchor pool");

    MobilityModel model = make_mobility_model(phi_estimate, transform, cfg.hidden,
                                              cfg.epsilon_floor, cfg.seed);

    // residual loss of the zero correction (A == 0 for every channel)
    model.residual_loss_at_zero = 0.0;
    for (const auto& ch : targets.channels)
        for (std::size_t li = 0; li < targets.lags.size(); ++li) {
            double f = 0.0;
            for (double v : ch.e[li].data) f += v * v;
            model.residual_loss_at_zero += targets.lag_weights[li] * f / (ch.scale * ch.scale);
        }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    AdamState adam(acfg);
    Gradients grads;
    grads.match_shape(model.net);

    Rng rng(cfg.seed ^ 0xA24BAED4963EE407ull);
    const std::size_t n_lags = data.lags.size();
    const std::size_t group = std::max<std::size_t>(1, std::min(cfg.lags_per_batch, n_lags));
    std::vector<std::size_t> lag_order(n_lags);
    for (std::size_t i = 0; i < n_lags; ++i) lag_order[i] = i;

    std::vector<std::vector<std::size_t>> pools(n_lags);
    for (std::size_t li = 0; li < n_lags; ++li) {
        pools[li].resize(std::min<std::size_t>(cfg.pairs_per_lag, data.x0[li].rows));
        for (std::size_t i = 0; i < pools[li].size(); ++i) pools[li][i] = i % data.x0[li].rows;
    }

    std::vector<double> last_good = get_parameters(model.net);
    const std::size_t tail_start =
        cfg.polyak_tail <= 0.0
            ? cfg.epochs
            : cfg.epochs - std::min<std::size_t>(
                  cfg.epochs, static_cast<std::size_t>(cfg.polyak_tail * cfg.epochs) + 1);
    std::vector<double> tail_sum;
    std::size_t tail_count = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.cfg.lr = cfg.epoch_lr(epoch);
        // reshuffle pair pools and resample the anchor pool
        for (auto& pool : pools)
            for (std::size_t i = pool.size(); i > 1; --i)
                std::swap(pool[i - 1], pool[rng.below(i)]);
        for (std::size_t i = n_lags; i > 1; --i)
            std::swap(lag_order[i - 1], lag_order[rng.below(i)]);
        std::vector<std::size_t> epoch_anchors(std::min<std::size_t>(cfg.anchor_total, anchors.rows));
        for (auto& a : epoch_anchors) a = rng.below(anchors.rows);

        const std::size_t n_chunks =
            std::max<std::size_t>(1, pools[0].size() / std::max<std::size_t>(1, cfg.batch_per_lag));
        double epoch_residual = 0.0, epoch_penalty = 0.0;
        std::size_t steps = 0;
        for (std::size_t chunk = 0; chunk < n_chunks; ++chunk) {
            for (std::size_t g0 = 0; g0 < n_lags; g0 += group) {
                MobilityBatch batch;
                for (std::size_t g = g0; g < std::min(g0 + group, n_lags); ++g) {
                    const std::size_t li = lag_order[g];
                    batch.lag_indices.push_back(li);
                    std::vector<std::size_t> rows;
                    for (std::size_t q = 0; q < cfg.batch_per_lag; ++q)
                        rows.push_back(pools[li][(chunk * cfg.batch_per_lag + q) % pools[li].size()]);
                    batch.pair_rows.push_back(std::move(rows));
                }
                for (std::size_t q = 0; q < cfg.anchor_batch; ++q)
                    batch.anchor_rows.push_back(epoch_anchors[rng.below(epoch_anchors.size())]);

                double res = 0.0, pen = 0.0;
                const double loss = mobility_loss(model, targets, data, lib, anchors, batch, cfg,
                                                  &grads, &res, &pen);
                if (!std::isfinite(loss)) {
                    set_parameters(model.net, last_good);
                    throw MobilityTrainError("train_mobility: non-finite loss at epoch " +
                                                 std::to_string(epoch) +
                                                 "; parameters rolled back to the last finite epoch",
                                             std::move(model));
                }
                adam_step(adam, model.net, grads);
                epoch_residual += res;
                epoch_penalty += pen;
                ++steps;
            }
        }
        model.residual_loss_history.push_back(epoch_residual / static_cast<double>(steps));
        model.mean_penalty_history.push_back(epoch_penalty / static_cast<double>(steps));
        last_good = get_parameters(model.net);
        if (epoch >= tail_start) {
            if (tail_sum.empty()) tail_sum.assign(last_good.size(), 0.0);
            for (std::size_t i = 0; i < last_good.size(); ++i) tail_sum[i] += last_good[i];
            ++tail_count;
        }
    }
    if (tail_count > 0) {
        for (auto& v : tail_sum) v /= static_cast<double>(tail_count);
        set_parameters(model.net, tail_sum);
    }
    return model;
}

Matrix mean_delta_m(const MobilityModel& model, const Matrix& states) {
    const std::size_t d = model.dim();
    Matrix sum(d, d), dm;
    for (std::size_t r = 0; r < states.rows; ++r) {
        model.delta_m(states.row(r), dm);
        for (std::size_t i = 0; i < d * d; ++i) sum.data[i] += dm.data[i];
    }
    for (auto& v : sum.data) v /= static_cast<double>(states.rows);
    return sum;
}

void save_mobility(const MobilityModel& model, const std::string& prefix) {
    using nlohmann::json;
    save_mlp(model.net, prefix + ".ckpt");
    json j{{"kind", "mobility"},
           {"phi", model.phi.data},
           {"dim", model.dim()},
           {"epsilon_floor", model.epsilon_floor},
           {"transform", {{"mean", model.transform.mean}, {"scale", model.transform.scale}}},
           {"residual_loss_history", model.residual_loss_history},
           {"mean_penalty_history", model.mean_penalty_history},
           {"residual_loss_at_zero", model.residual_loss_at_zero}};
    std::ofstream os(prefix + ".json");
    if (!os) throw std::runtime_error("cannot open for writing: " + prefix + ".json");
    os << j.dump(2) << "\n";
}

MobilityModel load_mobility(const std::string& prefix) {
    using nlohmann::json;
    std::ifstream is(prefix + ".json");
    if (!is) throw std::runtime_error("cannot open: " + prefix + ".json");
    json j;
    is >> j;
    const auto dim = j.at("dim").get<std::size_t>();
    Matrix phi(dim, dim);
    phi.data = j.at("phi").get<std::vector<double>>();
    Standardization tr;
    tr.mean = j.at("transform").at("mean").get<std::vector<double>>();
    tr.scale = j.at("transform").at("scale").get<std::vector<double>>();
    MobilityModel model = make_mobility_model(phi, tr, {1}, j.at("epsilon_floor").get<double>(), 0);
    model.net = load_mlp(prefix + ".ckpt");
    model.residual_loss_history = j.at("residual_loss_history").get<std::vector<double>>();
    model.mean_penalty_history = j.at("mean_penalty_history").get<std::vector<double>>();
    model.residual_loss_at_zero = j.at("residual_loss_at_zero").get<double>();
    return model;
}

}  // namespace langcal
