#include "fmer/entropy.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>

namespace fmer {

using ad::Dual;
using ad::Tensor;

double gaussian_entropy(int d) {
    return 0.5 * d * (1.0 + std::log(2.0 * 3.141592653589793238462643));
}

double tanh_log_jacobian_expectation(int d, std::uint64_t seed, std::int64_t samples) {
    Rng rng(seed, 0x7a6e);
    double acc = 0.0;
    for (std::int64_t i = 0; i < samples; ++i) {
        double row = 0.0;
        for (int j = 0; j < d; ++j) {
            const double th = std::tanh(rng.normal());
            row += std::log1p(-th * th);
        }
        acc += row;
    }
    return acc / static_cast<double>(samples);
}

double tanh_log_jacobian_constant(int d) {
    // fixed stream and sample count: the constant must agree across runs
    static std::mutex mu;
    static std::map<int, double> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(d);
    if (it != cache.end()) return it->second;
    const double v = tanh_log_jacobian_expectation(d, 0x0d0a, 1 << 20);
    cache[d] = v;
    return v;
}

namespace detail {

HutchinsonEval hutchinson_eval(const VectorField& field, const Tensor& xt, const Tensor& t,
                               const Tensor& s, int probes, Rng& rng) {
    if (probes < 1) throw std::invalid_argument("hutchinson_eval: probes must be >= 1");
    HutchinsonEval out;
    for (int p = 0; p < probes; ++p) {
        Tensor eps = Tensor::rademacher(xt.shape(), rng);
        Dual res = field.eval_dual(Dual::seeded(xt, eps), t, s);
        Tensor div = ad::row_sum(ad::mul(eps, res.tangent_or_zeros()));
        if (p == 0) {
            out.v = std::move(res.val);
            out.div_rows = std::move(div);
        } else {
            out.div_rows = ad::add(out.div_rows, div);
        }
    }
    if (probes > 1) out.div_rows = ad::scale(out.div_rows, 1.0 / probes);
    return out;
}

}  // namespace detail

ad::Tensor hutchinson_divergence_rows(const VectorField& field, const Tensor& xt, const Tensor& t,
                                      const Tensor& s, int probes, Rng& rng) {
    return detail::hutchinson_eval(field, xt, t, s, probes, rng).div_rows;
}

ad::Tensor hutchinson_divergence(const VectorField& field, const Tensor& x, double t,
                                 const Tensor& s, int probes, Rng& rng) {
    Tensor xrow = x.rank() == 2 ? x : Tensor::from({1, static_cast<int>(x.numel())},
                                                   {x.vec().begin(), x.vec().end()});
    Tensor srow = s.rank() == 2 ? s : Tensor::from({1, static_cast<int>(s.numel())},
                                                   {s.vec().begin(), s.vec().end()});
    Tensor tcol = Tensor::full({1, 1}, t);
    Tensor rows = hutchinson_divergence_rows(field, xrow, tcol, srow, probes, rng);
    return ad::sum(rows);
}

namespace {

// eager tanh of a constant input
Tensor tanh_const(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
    return out;
}

// -mean_rows[ div - 2 <tanh(xt), v> ] from precomputed pieces
Tensor entropy_term(const Tensor& xt, const detail::HutchinsonEval& he) {
    Tensor corr = ad::row_sum(ad::mul(tanh_const(xt), he.v));  // [R]
    Tensor action_div = ad::sub(he.div_rows, ad::scale(corr, 2.0));
    return ad::neg(ad::mean(action_div));
}

}  // namespace

ad::Tensor entropy_loss(const VectorField& field, const Tensor& xt, const Tensor& t,
                        const Tensor& s, int probes, Rng& rng) {
    auto he = detail::hutchinson_eval(field, xt, t, s, probes, rng);
    return entropy_term(xt, he);
}

PolicyLossParts policy_loss_parts(const VectorField& field, const FlowBatch& fb,
                                  const Tensor& state_rows, const std::vector<double>& row_weights,
                                  int n_states, double alpha, int probes, Rng& rng,
                                  bool with_entropy) {
    PolicyLossParts parts;
    if (with_entropy) {
        auto he = detail::hutchinson_eval(field, fb.xt, fb.t, state_rows, probes, rng);
        Tensor sqerr = ad::row_sum(ad::square(ad::sub(he.v, fb.u)));
        Tensor w = Tensor::from({static_cast<int>(row_weights.size())},
                                std::vector<double>(row_weights.begin(), row_weights.end()));
        Tensor wcfm = ad::scale(ad::sum(ad::mul(sqerr, w)), 1.0 / n_states);
        Tensor ent = entropy_term(fb.xt, he);
        parts.wcfm = wcfm.value();
        parts.ent = ent.value();
        parts.total = ad::add(wcfm, ad::scale(ent, alpha));
    } else {
        Tensor wcfm = weighted_cfm_objective(field, fb, state_rows, row_weights, n_states);
        parts.wcfm = wcfm.value();
        parts.ent = 0.0;
        parts.total = std::move(wcfm);
    }
    return parts;
}

EntropyReport entropy_estimate(const VectorField& field, const Tensor& states, int n_steps,
                               int probes, Rng& rng) {
    const int r = states.rows();
    const int d = field.dim();
    if (n_steps < 1) throw std::invalid_argument("entropy_estimate: n_steps must be >= 1");

    Tensor x0 = Tensor::zeros({r, d});
    for (auto& v : x0.vec()) v = rng.normal();
    std::vector<Tensor> path;
    path.reserve(n_steps + 1);
    (void)euler_flow(field, x0, states, n_steps, &path);

    // per-row flow time and the piecewise-linear path point for it
    Tensor tcol = Tensor::zeros({r, 1});
    Tensor xt = Tensor::zeros({r, d});
    for (int i = 0; i < r; ++i) {
        const double t = rng.uniform();
        tcol[i] = t;
        int k = static_cast<int>(t * n_steps);
        if (k >= n_steps) k = n_steps - 1;
        const double frac = t * n_steps - k;
        for (int c = 0; c < d; ++c) {
            const double a = path[k].at(i, c);
            const double b = path[k + 1].at(i, c);
            xt.at(i, c) = a + frac * (b - a);
        }
    }

    auto he = detail::hutchinson_eval(field, xt, tcol, states, probes, rng);
    double div_mean = 0.0, act_div_mean = 0.0;
    for (int i = 0; i < r; ++i) {
        double corr = 0.0;
        for (int c = 0; c < d; ++c) corr += std::tanh(xt.at(i, c)) * he.v.at(i, c);
        div_mean += he.div_rows[i];
        act_div_mean += he.div_rows[i] - 2.0 * corr;
    }
    div_mean /= r;
    act_div_mean /= r;

    EntropyReport rep;
    rep.h0_latent = gaussian_entropy(d);
    rep.h0_action = rep.h0_latent + tanh_log_jacobian_constant(d);
    rep.h1_latent_estimate = rep.h0_latent + div_mean;
    rep.h1_action_estimate = rep.h0_action + act_div_mean;
    return rep;
}

std::pair<double, double> tanh_divergence_identity_check(const VectorField& field, const Tensor& x,
                                                         double t, const Tensor& s) {
    const int d = field.dim();
    if (x.numel() != d) throw std::invalid_argument("tanh_divergence_identity_check: bad x");
    if (d > 8) throw std::invalid_argument("tanh_divergence_identity_check: d > 8");
    Tensor xrow = x.rank() == 2 ? x : Tensor::from({1, d}, {x.vec().begin(), x.vec().end()});
    Tensor srow = s.rank() == 2 ? s : Tensor::from({1, static_cast<int>(s.numel())},
                                                   {s.vec().begin(), s.vec().end()});
    Tensor tcol = Tensor::full({1, 1}, t);

    for (int i = 0; i < d; ++i)
        if (std::abs(std::tanh(xrow[i])) > 0.999)
            throw std::invalid_argument(
                "tanh_divergence_identity_check: |tanh(x)| > 0.999, finite differences unstable");

    // rhs: exact latent trace minus the tanh correction
    auto f = [&](const Dual& v) { return field.eval_dual(v, tcol, srow); };
    const double trace = ad::exact_jacobian_trace(f, xrow);
    Tensor v0 = field.eval(xrow, tcol, srow);
    double corr = 0.0;
    for (int i = 0; i < d; ++i) corr += std::tanh(xrow[i]) * v0[i];
    const double rhs = trace - 2.0 * corr;

    // lhs: central finite differences of the induced action-space field
    // g(a) = (1 - a^2) . v(arctanh(a))
    const double h = 1e-5;
    auto g_i = [&](const Tensor& a, int i) {
        Tensor lat = Tensor::zeros({1, d});
        for (int c = 0; c < d; ++c) lat[c] = std::atanh(a[c]);
        Tensor v = field.eval(lat, tcol, srow);
        return (1.0 - a[i] * a[i]) * v[i];
    };
    Tensor a = Tensor::zeros({1, d});
    for (int i = 0; i < d; ++i) a[i] = std::tanh(xrow[i]);
    double lhs = 0.0;
    for (int i = 0; i < d; ++i) {
        Tensor ap = a, am = a;
        ap[i] += h;
        am[i] -= h;
        lhs += (g_i(ap, i) - g_i(am, i)) / (2.0 * h);
    }
    return {lhs, rhs};
}

}  // namespace fmer
