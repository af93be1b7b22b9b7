#include "fmer/critic.hpp"

#include <cmath>
#include <stdexcept>

#include "fmer/flow_policy.hpp"

namespace fmer {

using ad::Tensor;

CriticPair CriticPair::create(int state_dim, int action_dim, const std::vector<int>& hidden,
                              Rng& rng) {
    CriticPair pair;
    pair.q1 = CriticNet(state_dim, action_dim, hidden, rng);
    pair.q2 = CriticNet(state_dim, action_dim, hidden, rng);
    pair.q1_target = pair.q1;
    pair.q2_target = pair.q2;
    return pair;
}

void CriticPair::polyak(double tau) {
    polyak_update(q1_target.mlp, q1.mlp, tau);
    polyak_update(q2_target.mlp, q2.mlp, tau);
}

namespace {
std::vector<double> min_rows(const Tensor& a, const Tensor& b) {
    std::vector<double> out(a.rows());
    for (int i = 0; i < a.rows(); ++i) out[i] = std::min(a.at(i, 0), b.at(i, 0));
    return out;
}
}  // namespace

std::vector<double> CriticPair::min_target_q(const Tensor& s, const Tensor& a) const {
    return min_rows(q1_target.eval(s, a), q2_target.eval(s, a));
}

std::vector<double> CriticPair::min_online_q(const Tensor& s, const Tensor& a) const {
    return min_rows(q1.eval(s, a), q2.eval(s, a));
}

std::vector<double> bellman_targets(const CriticPair& pair, std::span<const double> rewards,
                                    const Tensor& s_next, std::span<const std::uint8_t> done,
                                    const VectorField& policy, int m_candidates, int ode_steps,
                                    double gamma, Rng& rng) {
    const int b = s_next.rows();
    if (static_cast<int>(rewards.size()) != b || static_cast<int>(done.size()) != b)
        throw std::invalid_argument("bellman_targets: batch size mismatch");
    if (m_candidates < 1) throw std::invalid_argument("bellman_targets: need M >= 1");

    CandidateBatch cand = sample_candidates(policy, s_next, m_candidates, ode_steps, rng);
    Tensor srep = repeat_rows(s_next, m_candidates);
    std::vector<double> qmin = pair.min_target_q(srep, cand.actions);

    std::vector<double> y(b);
    for (int i = 0; i < b; ++i) {
        int best = i * m_candidates;
        for (int j = 1; j < m_candidates; ++j)
            if (qmin[i * m_candidates + j] > qmin[best]) best = i * m_candidates + j;
        const double q = qmin[best];
        if (!std::isfinite(q)) throw ad::NonFiniteError("bellman_targets: non-finite Q value");
        y[i] = rewards[i] + gamma * (done[i] ? 0.0 : 1.0) * q;
    }
    return y;
}

double bellman_target(const CriticPair& pair, double reward, const Tensor& s_next, bool done,
                      const VectorField& policy, int m_candidates, int ode_steps, double gamma,
                      Rng& rng) {
    Tensor srow = s_next.rank() == 2
                      ? s_next
                      : Tensor::from({1, static_cast<int>(s_next.numel())},
                                     {s_next.vec().begin(), s_next.vec().end()});
    const double r[] = {reward};
    const std::uint8_t d[] = {done ? std::uint8_t{1} : std::uint8_t{0}};
    return bellman_targets(pair, r, srow, d, policy, m_candidates, ode_steps, gamma, rng)[0];
}

ad::Tensor critic_loss(const CriticPair& pair, const Tensor& s, const Tensor& a,
                       const std::vector<double>& targets) {
    const int b = s.rows();
    if (static_cast<int>(targets.size()) != b)
        throw std::invalid_argument("critic_loss: target count mismatch");
    Tensor y = Tensor::zeros({b, 1});
    for (int i = 0; i < b; ++i) y[i] = targets[i];
    Tensor e1 = ad::square(ad::sub(y, pair.q1.eval(s, a)));
    Tensor e2 = ad::square(ad::sub(y, pair.q2.eval(s, a)));
    return ad::mean(ad::add(e1, e2));
}

}  // namespace fmer
