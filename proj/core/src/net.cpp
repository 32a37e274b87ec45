#include "langcal/net.hpp"

#include "langcal/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace langcal {

namespace {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void apply_activation(Activation act, const Matrix& z, Matrix& a) {
    a.resize(z.rows, z.cols);
    if (act == Activation::identity) {
        a.data = z.data;
        return;
    }
    for (std::size_t i = 0; i < z.data.size(); ++i) {
        const double s = sigmoid(z.data[i]);
        a.data[i] = z.data[i] * s;
    }
}

// dz = da * act'(z), elementwise
void activation_backward(Activation act, const Matrix& z, Matrix& da) {
    if (act == Activation::identity) return;
    for (std::size_t i = 0; i < z.data.size(); ++i) {
        const double s = sigmoid(z.data[i]);
        da.data[i] *= s * (1.0 + z.data[i] * (1.0 - s));
    }
}

}  // namespace

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += (widths[l] + 1) * widths[l + 1];
    return n;
}

Mlp make_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed, bool zero_init_last,
             Activation activation) {
    require(widths.size() >= 2, "make_mlp: need at least input and output widths");
    Mlp net;
    net.widths = widths;
    net.activation = activation;
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        Matrix w(widths[l + 1], widths[l]);
        const bool last = (l + 2 == widths.size());
        if (!(last && zero_init_last)) {
            const double limit = std::sqrt(6.0 / static_cast<double>(widths[l] + widths[l + 1]));
            for (auto& v : w.data) v = rng.uniform(-limit, limit);
        }
        net.weights.push_back(std::move(w));
        net.biases.emplace_back(widths[l + 1], 0.0);
    }
    return net;
}

void forward(const Mlp& net, const Matrix& batch, ForwardCache& cache) {
    require(batch.cols == net.input_dim(), "forward: batch width mismatch");
    const std::size_t L = net.n_layers();
    cache.pre.resize(L);
    cache.post.resize(L + 1);
    cache.post[0] = batch;
    for (std::size_t l = 0; l < L; ++l) {
        Matrix& z = cache.pre[l];
        gemm_nt(cache.post[l], net.weights[l], z);
        const auto& b = net.biases[l];
        for (std::size_t i = 0; i < z.rows; ++i) {
            double* zi = z.data.data() + i * z.cols;
            for (std::size_t j = 0; j < z.cols; ++j) zi[j] += b[j];
        }
        if (l + 1 < L)
            apply_activation(net.activation, z, cache.post[l + 1]);
        else
            cache.post[l + 1] = z;  // linear output layer
    }
}

Matrix forward(const Mlp& net, const Matrix& batch) {
    ForwardCache cache;
    forward(net, batch, cache);
    return cache.post.back();
}

void Gradients::match_shape(const Mlp& net) {
    weights.resize(net.n_layers());
    biases.resize(net.n_layers());
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        weights[l].resize(net.weights[l].rows, net.weights[l].cols);
        biases[l].assign(net.biases[l].size(), 0.0);
    }
}

void Gradients::zero() {
    for (auto& w : weights) w.fill(0.0);
    for (auto& b : biases) std::fill(b.begin(), b.end(), 0.0);
}

void Gradients::axpy(double alpha, const Gradients& other) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
        for (std::size_t i = 0; i < weights[l].data.size(); ++i)
            weights[l].data[i] += alpha * other.weights[l].data[i];
        for (std::size_t i = 0; i < biases[l].size(); ++i)
            biases[l][i] += alpha * other.biases[l][i];
    }
}

void backward(const Mlp& net, const ForwardCache& cache, const Matrix& dloss_doutput,
              Gradients& grads, Matrix* dloss_dinput) {
    const std::size_t L = net.n_layers();
    if (grads.weights.size() != L) grads.match_shape(net);
    Matrix delta = dloss_doutput;  // dL/dz for the current layer (output is linear)
    for (std::size_t l = L; l-- > 0;) {
        gemm_tn(delta, cache.post[l], grads.weights[l], /*accumulate=*/true);
        auto& db = grads.biases[l];
        for (std::size_t i = 0; i < delta.rows; ++i) {
            const double* di = delta.data.data() + i * delta.cols;
            for (std::size_t j = 0; j < delta.cols; ++j) db[j] += di[j];
        }
        if (l == 0) {
            if (dloss_dinput) gemm_nn(delta, net.weights[0], *dloss_dinput);
            break;
        }
        Matrix da;
        gemm_nn(delta, net.weights[l], da);
        activation_backward(net.activation, cache.pre[l - 1], da);
        delta = std::move(da);
    }
}

Gradients grad_params(const Mlp& net,
                      const std::function<double(const Matrix& y, Matrix& dy)>& loss,
                      const Matrix& batch, double* loss_value) {
    ForwardCache cache;
    forward(net, batch, cache);
    Matrix dy(cache.post.back().rows, cache.post.back().cols);
    const double value = loss(cache.post.back(), dy);
    if (loss_value) *loss_value = value;
    Gradients grads;
    grads.match_shape(net);
    backward(net, cache, dy, grads);
    return grads;
}

std::vector<Matrix> input_jacobians(const Mlp& net, const Matrix& batch) {
    ForwardCache cache;
    forward(net, batch, cache);
    const std::size_t n = batch.rows, d_out = net.output_dim(), d_in = net.input_dim();
    std::vector<Matrix> jac(n, Matrix(d_out, d_in));
    Gradients scratch;
    scratch.match_shape(net);
    Matrix seed(n, d_out), dx(n, d_in);
    for (std::size_t o = 0; o < d_out; ++o) {
        seed.fill(0.0);
        for (std::size_t i = 0; i < n; ++i) seed(i, o) = 1.0;
        scratch.zero();
        backward(net, cache, seed, scratch, &dx);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d_in; ++j) jac[i](o, j) = dx(i, j);
    }
    return jac;
}

std::vector<double> get_parameters(const Mlp& net) {
    std::vector<double> flat;
    flat.reserve(net.parameter_count());
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        flat.insert(flat.end(), net.weights[l].data.begin(), net.weights[l].data.end());
        flat.insert(flat.end(), net.biases[l].begin(), net.biases[l].end());
    }
    return flat;
}

void set_parameters(Mlp& net, std::span<const double> flat) {
    require(flat.size() == net.parameter_count(), "set_parameters: size mismatch");
    std::size_t pos = 0;
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        std::copy_n(flat.begin() + pos, net.weights[l].data.size(), net.weights[l].data.begin());
        pos += net.weights[l].data.size();
        std::copy_n(flat.begin() + pos, net.biases[l].size(), net.biases[l].begin());
        pos += net.biases[l].size();
    }
}

std::vector<double> flatten_gradients(const Gradients& grads) {
    std::vector<double> flat;
    for (std::size_t l = 0; l < grads.weights.size(); ++l) {
        flat.insert(flat.end(), grads.weights[l].data.begin(), grads.weights[l].data.end());
        flat.insert(flat.end(), grads.biases[l].begin(), grads.biases[l].end());
    }
    return flat;
}

void adam_step(AdamState& state, Mlp& net, const Gradients& grads) {
    if (state.m.weights.empty()) {
        state.m.match_shape(net);
        state.v.match_shape(net);
    }
    state.step += 1;
    const auto& cfg = state.cfg;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    auto update = [&](double& p, double& m, double& v, double g, bool decay) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        if (decay && cfg.weight_decay > 0.0) p *= 1.0 - cfg.lr * cfg.weight_decay;
        p -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    };

    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        auto& w = net.weights[l].data;
        auto& gw = grads.weights[l].data;
        auto& mw = state.m.weights[l].data;
        auto& vw = state.v.weights[l].data;
        for (std::size_t i = 0; i < w.size(); ++i) update(w[i], mw[i], vw[i], gw[i], true);
        auto& b = net.biases[l];
        for (std::size_t i = 0; i < b.size(); ++i)
            update(b[i], state.m.biases[l][i], state.v.biases[l][i], grads.biases[l][i], false);
    }
}

namespace {
constexpr char kNetMagic[8] = {'L', 'G', 'C', 'N', 'E', 'T', '0', '1'};
}

void save_mlp(const Mlp& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kNetMagic, 8);
    const std::uint32_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), 4);
    const auto n = static_cast<std::uint32_t>(net.widths.size());
    os.write(reinterpret_cast<const char*>(&n), 4);
    for (auto w : net.widths) {
        const auto w32 = static_cast<std::uint32_t>(w);
        os.write(reinterpret_cast<const char*>(&w32), 4);
    }
    const auto act = static_cast<std::uint32_t>(net.activation);
    os.write(reinterpret_cast<const char*>(&act), 4);
    const auto params = get_parameters(net);
    os.write(reinterpret_cast<const char*>(params.data()),
             static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!os) throw std::runtime_error("write failed: " + path);
}

Mlp load_mlp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kNetMagic, 8) != 0)
        throw std::runtime_error("not a network checkpoint: " + path);
    std::uint32_t version = 0, n = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&n), 4);
    if (!is || version != 1 || n < 2) throw std::runtime_error("bad checkpoint header: " + path);
    std::vector<std::size_t> widths(n);
    for (auto& w : widths) {
        std::uint32_t w32 = 0;
        is.read(reinterpret_cast<char*>(&w32), 4);
        w = w32;
    }
    std::uint32_t act = 0;
    is.read(reinterpret_cast<char*>(&act), 4);
    Mlp net = make_mlp(widths, 0, false, static_cast<Activation>(act));
    std::vector<double> params(net.parameter_count());
    is.read(reinterpret_cast<char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated: " + path);
    set_parameters(net, params);
    return net;
}

}  // namespace langcal
