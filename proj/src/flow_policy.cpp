#include "fmer/flow_policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fmer {

using ad::Tensor;

namespace {
constexpr double kAtanhClamp = 1e-6;    // inset before inversion
constexpr double kActionInset = 1e-9;   // keeps sampled actions strictly inside the box
constexpr double kExpCap = 30.0;        // unnormalized weights stay finite
}  // namespace

FlowPathSample FlowPathSample::make(Tensor x0, Tensor x1, double t) {
    if (!x0.same_shape(x1)) throw std::invalid_argument("FlowPathSample: x0/x1 shape mismatch");
    FlowPathSample p;
    p.xt = Tensor::zeros(x0.shape());
    p.u_target = Tensor::zeros(x0.shape());
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
        p.xt[i] = (1.0 - t) * x0[i] + t * x1[i];
        p.u_target[i] = x1[i] - x0[i];
    }
    p.x0 = std::move(x0);
    p.x1 = std::move(x1);
    p.t = t;
    return p;
}

const char* weighting_mode_name(WeightingMode m) {
    switch (m) {
        case WeightingMode::Softmax: return "softmax";
        case WeightingMode::Unnormalized: return "unnormalized";
        case WeightingMode::Top1: return "top1";
    }
    return "?";
}

void CandidateSet::validate(WeightingMode mode) const {
    const int m = size();
    if (static_cast<int>(q_values.size()) != m || static_cast<int>(weights.size()) != m)
        throw std::invalid_argument("CandidateSet: size mismatch");
    for (std::int64_t i = 0; i < actions.numel(); ++i)
        if (!(std::abs(actions[i]) < 1.0))
            throw std::invalid_argument("CandidateSet: action not strictly inside (-1,1)");
    if (mode != WeightingMode::Unnormalized) {
        double s = 0.0;
        for (double w : weights) s += w;
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument("CandidateSet: weight vector not normalized (sum " +
                                        std::to_string(s) + ")");
    }
}

double latent_of_action(double a) {
    const double c = std::clamp(a, -(1.0 - kAtanhClamp), 1.0 - kAtanhClamp);
    return std::atanh(c);
}

Tensor latent_of_action(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = latent_of_action(a[i]);
    return out;
}

Tensor euler_flow(const VectorField& field, Tensor x0, const Tensor& states, int n_steps,
                  std::vector<Tensor>* path) {
    if (n_steps < 1) throw std::invalid_argument("euler_flow: n_steps must be >= 1");
    if (x0.rows() != states.rows())
        throw std::invalid_argument("euler_flow: row mismatch x0 " + x0.shape_str() + " states " +
                                    states.shape_str());
    const int rows = x0.rows();
    const double dt = 1.0 / n_steps;
    Tensor x = std::move(x0);
    if (path) path->push_back(x);
    for (int k = 0; k < n_steps; ++k) {
        Tensor tcol = Tensor::full({rows, 1}, static_cast<double>(k) / n_steps);
        Tensor v = field.eval(x, tcol, states);
        double* xp = x.data();
        const double* vp = v.data();
        for (std::int64_t i = 0; i < x.numel(); ++i) xp[i] += dt * vp[i];
        x.gen = 0;  // in-place update leaves no valid tape linkage
        if (!x.all_finite())
            throw ad::NonFiniteError("euler_flow: non-finite state after step " +
                                     std::to_string(k + 1) + " of " + std::to_string(n_steps));
        if (path) path->push_back(x);
    }
    return x;
}

std::pair<Tensor, Tensor> sample_action(const VectorField& field, const Tensor& s,
                                        const Tensor& x0, int n_steps) {
    Tensor x0row = x0.rank() == 2 ? x0 : Tensor::from({1, static_cast<int>(x0.numel())},
                                                      {x0.vec().begin(), x0.vec().end()});
    Tensor srow = s.rank() == 2 ? s : Tensor::from({1, static_cast<int>(s.numel())},
                                                   {s.vec().begin(), s.vec().end()});
    Tensor x1 = euler_flow(field, x0row, srow, n_steps);
    Tensor a = Tensor::zeros(x1.shape());
    for (std::int64_t i = 0; i < x1.numel(); ++i)
        a[i] = std::clamp(std::tanh(x1[i]), -(1.0 - kActionInset), 1.0 - kActionInset);
    return {std::move(a), std::move(x1)};
}

Tensor repeat_rows(const Tensor& rows, int m) {
    const int r = rows.rows(), c = rows.cols();
    Tensor out = Tensor::zeros({r * m, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < m; ++j)
            std::copy(rows.data() + static_cast<std::int64_t>(i) * c,
                      rows.data() + static_cast<std::int64_t>(i + 1) * c,
                      out.data() + (static_cast<std::int64_t>(i) * m + j) * c);
    return out;
}

CandidateBatch sample_candidates(const VectorField& field, const Tensor& states, int n_candidates,
                                 int n_steps, Rng& rng) {
    if (n_candidates < 1) throw std::invalid_argument("sample_candidates: need M >= 1");
    const int r = states.rows();
    const int d = field.dim();
    Tensor x0 = Tensor::zeros({r * n_candidates, d});
    for (auto& v : x0.vec()) v = rng.normal();
    Tensor srep = repeat_rows(states, n_candidates);
    CandidateBatch out;
    out.latents = euler_flow(field, std::move(x0), srep, n_steps);
    out.actions = Tensor::zeros(out.latents.shape());
    for (std::int64_t i = 0; i < out.latents.numel(); ++i)
        out.actions[i] =
            std::clamp(std::tanh(out.latents[i]), -(1.0 - kActionInset), 1.0 - kActionInset);
    return out;
}

std::vector<double> advantage_weights(const std::vector<double>& q_values, double tau,
                                      WeightingMode mode) {
    if (q_values.empty()) throw std::invalid_argument("advantage_weights: need M >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("advantage_weights: tau must be > 0");
    const int m = static_cast<int>(q_values.size());
    std::vector<double> w(m);

    if (mode == WeightingMode::Top1) {
        int best = 0;
        for (int j = 1; j < m; ++j)
            if (q_values[j] > q_values[best]) best = j;  // ties keep the lowest index
        std::fill(w.begin(), w.end(), 0.0);
        w[best] = 1.0;
        return w;
    }

    double mean = 0.0;
    for (double q : q_values) mean += q;
    mean /= m;

    if (mode == WeightingMode::Unnormalized) {
        for (int j = 0; j < m; ++j)
            w[j] = std::exp(std::min((q_values[j] - mean) / tau, kExpCap));
        return w;
    }

    // softmax, stabilized by the max advantage
    double zmax = -1e300;
    for (int j = 0; j < m; ++j) zmax = std::max(zmax, (q_values[j] - mean) / tau);
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
        w[j] = std::exp((q_values[j] - mean) / tau - zmax);
        denom += w[j];
    }
    for (auto& x : w) x /= denom;
    return w;
}

FlowBatch FlowBatch::make(Tensor x0, Tensor x1, Tensor t) {
    if (!x0.same_shape(x1)) throw std::invalid_argument("FlowBatch: x0/x1 shape mismatch");
    if (t.rows() != x0.rows() || t.cols() != 1)
        throw std::invalid_argument("FlowBatch: t must be [rows,1]");
    FlowBatch fb;
    const int rows = x0.rows(), d = x0.cols();
    fb.xt = Tensor::zeros(x0.shape());
    fb.u = Tensor::zeros(x0.shape());
    for (int r = 0; r < rows; ++r) {
        const double tr = t.at(r, 0);
        for (int c = 0; c < d; ++c) {
            fb.xt.at(r, c) = (1.0 - tr) * x0.at(r, c) + tr * x1.at(r, c);
            fb.u.at(r, c) = x1.at(r, c) - x0.at(r, c);
        }
    }
    fb.x0 = std::move(x0);
    fb.x1 = std::move(x1);
    fb.t = std::move(t);
    return fb;
}

FlowBatch draw_flow_batch(const Tensor& x1, Rng& rng) {
    const int rows = x1.rows(), d = x1.cols();
    Tensor t = Tensor::zeros({rows, 1});
    Tensor x0 = Tensor::zeros({rows, d});
    for (int r = 0; r < rows; ++r) {
        t[r] = rng.uniform();
        for (int c = 0; c < d; ++c) x0.at(r, c) = rng.normal();
    }
    return FlowBatch::make(std::move(x0), x1, std::move(t));
}

Tensor weighted_cfm_objective(const VectorField& field, const FlowBatch& fb,
                              const Tensor& state_rows, const std::vector<double>& row_weights,
                              int n_states) {
    if (static_cast<int>(row_weights.size()) != fb.xt.rows())
        throw std::invalid_argument("weighted_cfm_objective: weight count mismatch");
    Tensor v = field.eval(fb.xt, fb.t, state_rows);
    Tensor sqerr = ad::row_sum(ad::square(ad::sub(v, fb.u)));  // [R]
    Tensor w = Tensor::from({static_cast<int>(row_weights.size())},
                            std::vector<double>(row_weights.begin(), row_weights.end()));
    return ad::scale(ad::sum(ad::mul(sqerr, w)), 1.0 / n_states);
}

Tensor cfm_loss(const VectorField& field, const Tensor& states, const Tensor& actions, Rng& rng) {
    const int b = states.rows();
    if (actions.rows() != b) throw std::invalid_argument("cfm_loss: batch mismatch");
    Tensor x1 = latent_of_action(actions);
    for (std::int64_t i = 0; i < actions.numel(); ++i)
        if (!(std::abs(std::tanh(x1[i])) <= 1.0 - kAtanhClamp / 2))
            throw std::logic_error("cfm_loss: action escaped the clamp range");
    FlowBatch fb = draw_flow_batch(x1, rng);
    return weighted_cfm_objective(field, fb, states, std::vector<double>(b, 1.0), b);
}

Tensor wcfm_loss(const VectorField& field, const Tensor& states,
                 const std::vector<CandidateSet>& candidates, Rng& rng, WeightingMode mode) {
    const int b = states.rows();
    if (static_cast<int>(candidates.size()) != b)
        throw std::invalid_argument("wcfm_loss: one candidate set per state required");
    if (b == 0) throw std::invalid_argument("wcfm_loss: empty batch");
    const int m = candidates.front().size();
    const int d = field.dim();

    Tensor x1 = Tensor::zeros({b * m, d});
    std::vector<double> w(static_cast<std::size_t>(b) * m);
    for (int i = 0; i < b; ++i) {
        const CandidateSet& cs = candidates[i];
        cs.validate(mode);
        if (cs.size() != m) throw std::invalid_argument("wcfm_loss: ragged candidate sets");
        Tensor lat = latent_of_action(cs.actions);
        for (int j = 0; j < m; ++j) {
            for (int c = 0; c < d; ++c) x1.at(i * m + j, c) = lat.at(j, c);
            w[static_cast<std::size_t>(i) * m + j] = cs.weights[j];
        }
    }
    FlowBatch fb = draw_flow_batch(x1, rng);
    Tensor srep = repeat_rows(states, m);
    return weighted_cfm_objective(field, fb, srep, w, b);
}

}  // namespace fmer
