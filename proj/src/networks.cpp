#include "fmer/networks.hpp"

#include <cmath>
#include <stdexcept>

namespace fmer {

using ad::Dual;
using ad::Tensor;

Mlp Mlp::create(int in_dim, std::vector<int> hidden, int out_dim, Rng& rng, double final_scale) {
    if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("Mlp: bad dims");
    Mlp net;
    net.in_dim_ = in_dim;
    net.out_dim_ = out_dim;
    int fan_in = in_dim;
    for (int h : hidden) {
        LayerParams lp;
        lp.w = Tensor::zeros({fan_in, h});
        const double limit = std::sqrt(6.0 / fan_in);
        for (auto& x : lp.w.vec()) x = rng.uniform(-limit, limit);
        lp.b = Tensor::zeros({h});
        net.layers.push_back(std::move(lp));
        fan_in = h;
    }
    LayerParams out;
    out.w = Tensor::zeros({fan_in, out_dim});
    const double limit = std::sqrt(6.0 / fan_in) * final_scale;
    for (auto& x : out.w.vec()) x = rng.uniform(-limit, limit);
    out.b = Tensor::zeros({out_dim});
    net.layers.push_back(std::move(out));

    if (net.param_count() != expected_param_count(in_dim, hidden, out_dim))
        throw std::logic_error("Mlp: parameter count mismatch against closed form");
    return net;
}

std::int64_t Mlp::param_count() const {
    std::int64_t n = 0;
    for (const auto& lp : layers) n += lp.w.numel() + lp.b.numel();
    return n;
}

std::int64_t Mlp::expected_param_count(int in_dim, const std::vector<int>& hidden, int out_dim) {
    std::int64_t n = 0;
    int fan_in = in_dim;
    for (int h : hidden) {
        n += static_cast<std::int64_t>(fan_in + 1) * h;
        fan_in = h;
    }
    n += static_cast<std::int64_t>(fan_in + 1) * out_dim;
    return n;
}

Tensor Mlp::forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
        h = ad::mish(ad::add_rowvec(ad::matmul(h, layers[i].w), layers[i].b));
    const auto& out = layers.back();
    return ad::add_rowvec(ad::matmul(h, out.w), out.b);
}

Dual Mlp::forward(const Dual& x) const {
    Dual h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
        h = ad::dmish(ad::dadd_rowvec(ad::dmatmul(h, Dual::constant(layers[i].w)),
                                      Dual::constant(layers[i].b)));
    const auto& out = layers.back();
    return ad::dadd_rowvec(ad::dmatmul(h, Dual::constant(out.w)), Dual::constant(out.b));
}

std::vector<ad::Tensor*> Mlp::params() {
    std::vector<Tensor*> p;
    for (auto& lp : layers) {
        p.push_back(&lp.w);
        p.push_back(&lp.b);
    }
    return p;
}

std::vector<const ad::Tensor*> Mlp::params() const {
    std::vector<const Tensor*> p;
    for (const auto& lp : layers) {
        p.push_back(&lp.w);
        p.push_back(&lp.b);
    }
    return p;
}

VectorFieldNet::VectorFieldNet(int action_dim, int state_dim, std::vector<int> hidden, Rng& rng,
                               double final_scale)
    : action_dim_(action_dim), state_dim_(state_dim) {
    mlp = Mlp::create(action_dim + 1 + state_dim, std::move(hidden), action_dim, rng, final_scale);
}

ad::Tensor VectorFieldNet::eval(const Tensor& x, const Tensor& t, const Tensor& s) const {
    if (x.cols() != action_dim_ || t.cols() != 1 || s.cols() != state_dim_ ||
        x.rows() != t.rows() || x.rows() != s.rows())
        throw std::invalid_argument("VectorFieldNet::eval: bad shapes x" + x.shape_str() + " t" +
                                    t.shape_str() + " s" + s.shape_str());
    if (!x.all_finite() || !t.all_finite() || !s.all_finite())
        throw ad::NonFiniteError("VectorFieldNet::eval: non-finite input");
    return mlp.forward(ad::concat_cols(ad::concat_cols(x, t), s));
}

ad::Dual VectorFieldNet::eval_dual(const Dual& x, const Tensor& t, const Tensor& s) const {
    Dual in = ad::dconcat_cols(ad::dconcat_cols(x, Dual::constant(t)), Dual::constant(s));
    return mlp.forward(in);
}

CriticNet::CriticNet(int state_dim_, int action_dim_, std::vector<int> hidden, Rng& rng)
    : state_dim(state_dim_), action_dim(action_dim_) {
    // full-scale output init; critics regress unnormalized returns
    mlp = Mlp::create(state_dim + action_dim, std::move(hidden), 1, rng, 1.0);
}

ad::Tensor CriticNet::eval(const Tensor& s, const Tensor& a) const {
    if (s.cols() != state_dim || a.cols() != action_dim || s.rows() != a.rows())
        throw std::invalid_argument("CriticNet::eval: bad shapes s" + s.shape_str() + " a" +
                                    a.shape_str());
    return mlp.forward(ad::concat_cols(s, a));
}

void AdamState::step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads,
                     double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("AdamState::step: size mismatch");
    if (m.empty()) {
        for (const auto* p : params) {
            m.push_back(Tensor::zeros(p->shape()));
            v.push_back(Tensor::zeros(p->shape()));
        }
    }
    if (m.size() != params.size()) throw std::invalid_argument("AdamState::step: state size mismatch");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (!p.same_shape(g))
            throw std::invalid_argument("AdamState::step: grad shape " + g.shape_str() +
                                        " vs param " + p.shape_str());
        if (!g.all_finite()) throw ad::NonFiniteError("AdamState::step: non-finite gradient");
        double* mp = m[i].data();
        double* vp = v[i].data();
        double* pp = p.data();
        const double* gp = g.data();
        const std::int64_t n = p.numel();
        for (std::int64_t k = 0; k < n; ++k) {
            mp[k] = beta1 * mp[k] + (1.0 - beta1) * gp[k];
            vp[k] = beta2 * vp[k] + (1.0 - beta2) * gp[k] * gp[k];
            const double mhat = mp[k] / bc1;
            const double vhat = vp[k] / bc2;
            pp[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        p.gen = 0;  // parameters changed; any stale tape linkage is void
    }
}

void polyak_update(std::span<ad::Tensor* const> target, std::span<const ad::Tensor* const> online,
                   double tau) {
    if (target.size() != online.size()) throw std::invalid_argument("polyak_update: size mismatch");
    for (std::size_t i = 0; i < target.size(); ++i) {
        Tensor& t = *target[i];
        const Tensor& o = *online[i];
        if (!t.same_shape(o))
            throw std::invalid_argument("polyak_update: shape mismatch " + t.shape_str() + " vs " +
                                        o.shape_str());
        double* tp = t.data();
        const double* op = o.data();
        for (std::int64_t k = 0; k < t.numel(); ++k) tp[k] = (1.0 - tau) * tp[k] + tau * op[k];
        t.gen = 0;
    }
}

void polyak_update(Mlp& target, const Mlp& online, double tau) {
    auto tp = target.params();
    auto op = online.params();
    polyak_update(std::span<ad::Tensor* const>(tp.data(), tp.size()),
                  std::span<const ad::Tensor* const>(op.data(), op.size()), tau);
}

std::vector<double> flatten_params(const Mlp& net) {
    std::vector<double> flat;
    flat.reserve(net.param_count());
    for (const auto& lp : net.layers) {
        flat.insert(flat.end(), lp.w.vec().begin(), lp.w.vec().end());
        flat.insert(flat.end(), lp.b.vec().begin(), lp.b.vec().end());
    }
    return flat;
}

void set_params(Mlp& net, std::span<const double> flat) {
    if (static_cast<std::int64_t>(flat.size()) != net.param_count())
        throw std::invalid_argument("set_params: size mismatch");
    std::size_t off = 0;
    for (auto& lp : net.layers) {
        std::copy(flat.begin() + off, flat.begin() + off + lp.w.numel(), lp.w.vec().begin());
        off += lp.w.numel();
        lp.w.gen = 0;
        std::copy(flat.begin() + off, flat.begin() + off + lp.b.numel(), lp.b.vec().begin());
        off += lp.b.numel();
        lp.b.gen = 0;
    }
}

}  // namespace fmer
