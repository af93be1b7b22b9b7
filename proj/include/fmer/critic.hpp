#pragma once

#include <span>
#include <vector>

#include "fmer/field.hpp"
#include "fmer/networks.hpp"
#include "fmer/rng.hpp"

namespace fmer {

// Two online critics plus Polyak-tracked target copies; targets start equal
// to the online networks.
struct CriticPair {
    CriticNet q1, q2;
    CriticNet q1_target, q2_target;

    static CriticPair create(int state_dim, int action_dim, const std::vector<int>& hidden,
                             Rng& rng);
    void polyak(double tau);
    // min(Q1_target, Q2_target) per row, plain values
    std::vector<double> min_target_q(const ad::Tensor& s, const ad::Tensor& a) const;
    // min of the online critics per row
    std::vector<double> min_online_q(const ad::Tensor& s, const ad::Tensor& a) const;
};

// Clipped double-Q bootstrap targets with best-of-M candidate selection at
// the next state. Candidates come from the policy's ODE sampler; the best is
// argmax of the min target value, ties to the lowest index. Terminal
// transitions take y = r. Detached: call outside any tape.
std::vector<double> bellman_targets(const CriticPair& pair, std::span<const double> rewards,
                                    const ad::Tensor& s_next, std::span<const std::uint8_t> done,
                                    const VectorField& policy, int m_candidates, int ode_steps,
                                    double gamma, Rng& rng);

double bellman_target(const CriticPair& pair, double reward, const ad::Tensor& s_next, bool done,
                      const VectorField& policy, int m_candidates, int ode_steps, double gamma,
                      Rng& rng);

// mean over the batch of (y - Q1)^2 + (y - Q2)^2; both critics regress the
// same detached target
ad::Tensor critic_loss(const CriticPair& pair, const ad::Tensor& s, const ad::Tensor& a,
                       const std::vector<double>& targets);

}  // namespace fmer
