#pragma once

#include <utility>
#include <vector>

#include "fmer/autodiff.hpp"
#include "fmer/field.hpp"
#include "fmer/flow_policy.hpp"
#include "fmer/rng.hpp"

namespace fmer {

struct DivergenceEstimate {
    double latent_div = 0.0;
    double tanh_correction = 0.0;  // -2 <tanh(x), v>
    double action_div = 0.0;       // latent_div + tanh_correction
    int n_probes = 0;
};

struct EntropyReport {
    double h0_latent = 0.0;           // (d/2)(1 + ln 2pi)
    double h0_action = 0.0;           // h0_latent + E[sum_i log(1 - tanh^2(x0_i))]
    double h1_latent_estimate = 0.0;  // h0_latent + mean latent divergence on simulated paths
    double h1_action_estimate = 0.0;  // h0_action + mean action-space divergence
};

// (d/2)(1 + ln 2pi), the entropy of N(0, I_d)
double gaussian_entropy(int d);

// Monte-Carlo E[sum_i log(1 - tanh^2(x_i))], x ~ N(0, I_d); the constant
// shift between latent and action entropies
double tanh_log_jacobian_expectation(int d, std::uint64_t seed, std::int64_t samples);
// cached variant on a fixed stream so the constant is identical across runs
double tanh_log_jacobian_constant(int d);

namespace detail {
// One dual sweep shared by the losses: primal v plus per-row Hutchinson
// divergence (mean over `probes` Rademacher probes, probe draws row-major per
// probe). div_rows stays tape-connected.
struct HutchinsonEval {
    ad::Tensor v;         // [R, d]
    ad::Tensor div_rows;  // [R]
};
HutchinsonEval hutchinson_eval(const VectorField& field, const ad::Tensor& xt,
                               const ad::Tensor& t, const ad::Tensor& s, int probes, Rng& rng);
}  // namespace detail

// per-row divergence estimates; thin wrapper over the shared sweep
ad::Tensor hutchinson_divergence_rows(const VectorField& field, const ad::Tensor& xt,
                                      const ad::Tensor& t, const ad::Tensor& s, int probes,
                                      Rng& rng);

// single-point divergence estimate, tape-connected scalar
ad::Tensor hutchinson_divergence(const VectorField& field, const ad::Tensor& x, double t,
                                 const ad::Tensor& s, int probes, Rng& rng);

// L_ent = -mean_rows[ latent_div - 2 <tanh(xt), v> ]; differentiable w.r.t.
// the field parameters
ad::Tensor entropy_loss(const VectorField& field, const ad::Tensor& xt, const ad::Tensor& t,
                        const ad::Tensor& s, int probes, Rng& rng);

// Combined policy objective sharing one field evaluation between the weighted
// CFM term and the entropy term evaluated on the same interpolants.
struct PolicyLossParts {
    ad::Tensor total;  // wcfm + alpha * ent
    double wcfm = 0.0;
    double ent = 0.0;
};
PolicyLossParts policy_loss_parts(const VectorField& field, const FlowBatch& fb,
                                  const ad::Tensor& state_rows,
                                  const std::vector<double>& row_weights, int n_states,
                                  double alpha, int probes, Rng& rng, bool with_entropy);

// Entropy estimate along freshly simulated Euler paths: one x0 and one t per
// state, divergence evaluated at the path point for that t. Used for the dual
// temperature update and logging; not differentiated.
// Draw order: x0 rows, then per-row t, then probes.
EntropyReport entropy_estimate(const VectorField& field, const ad::Tensor& states, int n_steps,
                               int probes, Rng& rng);

// Both sides of the tanh divergence identity at one latent point: lhs is the
// central finite-difference divergence of the induced action-space field,
// rhs the latent divergence minus the tanh correction. Test oracle, d <= 8.
std::pair<double, double> tanh_divergence_identity_check(const VectorField& field,
                                                         const ad::Tensor& x, double t,
                                                         const ad::Tensor& s);

}  // namespace fmer
