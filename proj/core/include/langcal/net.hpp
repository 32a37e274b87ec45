#pragma once

#include "langcal/matrix.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace langcal {

enum class Activation : std::uint32_t { silu = 0, identity = 1 };

/// Fully connected network: affine layers with a smooth nonlinearity on the
/// hidden layers and a linear output layer.
struct Mlp {
    std::vector<std::size_t> widths;            // input, hidden..., output
    std::vector<Matrix> weights;                // layer l: widths[l+1] x widths[l]
    std::vector<std::vector<double>> biases;    // layer l: widths[l+1]
    Activation activation = Activation::silu;

    std::size_t n_layers() const { return weights.size(); }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t output_dim() const { return widths.back(); }
    std::size_t parameter_count() const;
};

/// Glorot-uniform initialization from a deterministic stream. When
/// zero_init_last is set the final layer starts at exactly zero, so the
/// network output is identically zero at initialization.
Mlp make_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed,
             bool zero_init_last = false, Activation activation = Activation::silu);

struct ForwardCache {
    std::vector<Matrix> pre;    // pre-activations z_l
    std::vector<Matrix> post;   // post[0] = input, post[l+1] = layer-l activations
};

Matrix forward(const Mlp& net, const Matrix& batch);
void forward(const Mlp& net, const Matrix& batch, ForwardCache& cache);

/// Per-parameter gradient accumulators shaped like the network.
struct Gradients {
    std::vector<Matrix> weights;
    std::vector<std::vector<double>> biases;

    void match_shape(const Mlp& net);
    void zero();
    void axpy(double alpha, const Gradients& other);  // this += alpha * other
};

/// Backpropagate dloss/doutput through the cached forward pass, accumulating
/// parameter gradients and (optionally) dloss/dinput.
void backward(const Mlp& net, const ForwardCache& cache, const Matrix& dloss_doutput,
              Gradients& grads, Matrix* dloss_dinput = nullptr);

/// Gradients of a scalar loss over a batch. The loss callback receives the
/// network output and must fill dloss/doutput, returning the loss value.
Gradients grad_params(const Mlp& net,
                      const std::function<double(const Matrix& y, Matrix& dy)>& loss,
                      const Matrix& batch, double* loss_value = nullptr);

/// Per-sample Jacobians of outputs with respect to inputs (d_out x d_in each).
std::vector<Matrix> input_jacobians(const Mlp& net, const Matrix& batch);

/// Flat parameter access, used by optimizers and finite-difference checks.
std::vector<double> get_parameters(const Mlp& net);
void set_parameters(Mlp& net, std::span<const double> flat);
std::vector<double> flatten_gradients(const Gradients& grads);

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled, applied to weight matrices only
};

struct AdamState {
    AdamConfig cfg;
    std::size_t step = 0;
    Gradients m, v;

    explicit AdamState(const AdamConfig& c = {}) : cfg(c) {}
};

/// Standard bias-corrected Adam update with decoupled multiplicative weight
/// decay.
void adam_step(AdamState& state, Mlp& net, const Gradients& grads);

/// Versioned binary checkpoint (widths, activation tag, flat parameters).
void save_mlp(const Mlp& net, const std::string& path);
Mlp load_mlp(const std::string& path);

}  // namespace langcal
