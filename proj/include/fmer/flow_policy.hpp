#pragma once

#include <utility>
#include <vector>

#include "fmer/autodiff.hpp"
#include "fmer/field.hpp"
#include "fmer/rng.hpp"

namespace fmer {

// Straight-line conditional path between base noise and a latent target.
struct FlowPathSample {
    ad::Tensor x0;        // base noise
    ad::Tensor x1;        // latent target, arctanh of the action
    double t = 0.0;       // flow time in [0,1]
    ad::Tensor xt;        // (1-t) x0 + t x1
    ad::Tensor u_target;  // x1 - x0, constant in t

    static FlowPathSample make(ad::Tensor x0, ad::Tensor x1, double t);
};

enum class WeightingMode {
    Softmax,       // exp(A/tau) normalized per state
    Unnormalized,  // exp(A/tau) as-is
    Top1,          // one-hot at the best advantage
};

const char* weighting_mode_name(WeightingMode m);

// M candidates for one state with their values and weights.
struct CandidateSet {
    ad::Tensor state;              // [ds]
    ad::Tensor latents;            // [M, d]
    ad::Tensor actions;            // [M, d], tanh of latents
    std::vector<double> q_values;  // M
    std::vector<double> weights;   // M

    int size() const { return latents.rows(); }
    void validate(WeightingMode mode) const;
};

// arctanh with the action clamped to |a| <= 1 - 1e-6 first
ad::Tensor latent_of_action(const ad::Tensor& a);
double latent_of_action(double a);

// Euler integration of dx/dt = v(x, t, s) from t=0 to 1 over n_steps equal
// steps; x0 is [R,d], states [R,ds]. Appends all R-row intermediate states
// (n_steps+1 of them, including endpoints) to *path when given. Throws
// NonFiniteError naming the step index if the state leaves the finite range.
ad::Tensor euler_flow(const VectorField& field, ad::Tensor x0, const ad::Tensor& states,
                      int n_steps, std::vector<ad::Tensor>* path = nullptr);

// integrate one noise sample into an action: returns (action, terminal latent)
std::pair<ad::Tensor, ad::Tensor> sample_action(const VectorField& field, const ad::Tensor& s,
                                                const ad::Tensor& x0, int n_steps);

// each row of `rows` repeated m times consecutively
ad::Tensor repeat_rows(const ad::Tensor& rows, int m);

// M candidates per state in one batched integration. Rows are state-major:
// row r*M + j is candidate j of state r. Noise consumption order is
// (state, candidate, dim).
struct CandidateBatch {
    ad::Tensor latents;  // [R*M, d]
    ad::Tensor actions;  // [R*M, d]
};
CandidateBatch sample_candidates(const VectorField& field, const ad::Tensor& states,
                                 int n_candidates, int n_steps, Rng& rng);

// softmax / unnormalized / top-1 weights from candidate values; the advantage
// baseline is the candidate mean, which softmax shift-invariance makes
// equivalent to using raw values
std::vector<double> advantage_weights(const std::vector<double>& q_values, double tau,
                                      WeightingMode mode = WeightingMode::Softmax);

// Pre-drawn conditional path rows shared by the losses: xt and u are fixed
// inputs, only the field evaluation is differentiated.
struct FlowBatch {
    ad::Tensor x0;  // [R, d]
    ad::Tensor x1;  // [R, d]
    ad::Tensor t;   // [R, 1]
    ad::Tensor xt;  // [R, d]
    ad::Tensor u;   // [R, d]
    static FlowBatch make(ad::Tensor x0, ad::Tensor x1, ad::Tensor t);
};

// draws t ~ U[0,1] and x0 ~ N(0,I) per row (order: t, then x0 dims)
FlowBatch draw_flow_batch(const ad::Tensor& x1, Rng& rng);

// sum_rows w_r ||v(xt_r) - u_r||^2 / n_states, with row weights as given
ad::Tensor weighted_cfm_objective(const VectorField& field, const FlowBatch& fb,
                                  const ad::Tensor& state_rows,
                                  const std::vector<double>& row_weights, int n_states);

// behaviour-cloning CFM loss over a batch of (state, action) rows
ad::Tensor cfm_loss(const VectorField& field, const ad::Tensor& states, const ad::Tensor& actions,
                    Rng& rng);

// advantage-weighted CFM loss; fresh (t, x0) per candidate
ad::Tensor wcfm_loss(const VectorField& field, const ad::Tensor& states,
                     const std::vector<CandidateSet>& candidates, Rng& rng,
                     WeightingMode mode = WeightingMode::Softmax);

}  // namespace fmer
