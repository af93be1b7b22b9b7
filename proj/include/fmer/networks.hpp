#pragma once

#include <span>
#include <vector>

#include "fmer/autodiff.hpp"
#include "fmer/field.hpp"
#include "fmer/rng.hpp"

namespace fmer {

struct LayerParams {
    ad::Tensor w;  // [in, out]
    ad::Tensor b;  // [out]
};

// MLP with mish hidden activations and a linear output layer. Evaluation is a
// pure function of (input, params); batched rows.
class Mlp {
public:
    Mlp() = default;
    // He-uniform hidden init, final layer scaled down (near-zero output at
    // init). final_scale 0 gives an exactly-zero output layer.
    static Mlp create(int in_dim, std::vector<int> hidden, int out_dim, Rng& rng,
                      double final_scale = 0.01);

    ad::Tensor forward(const ad::Tensor& x) const;
    ad::Dual forward(const ad::Dual& x) const;

    int in_dim() const { return in_dim_; }
    int out_dim() const { return out_dim_; }
    std::int64_t param_count() const;
    static std::int64_t expected_param_count(int in_dim, const std::vector<int>& hidden, int out_dim);

    std::vector<ad::Tensor*> params();
    std::vector<const ad::Tensor*> params() const;

    std::vector<LayerParams> layers;

private:
    int in_dim_ = 0;
    int out_dim_ = 0;
};

// v(x, t, s) = mlp(concat(x, t, s)); the flow time enters as one raw scalar
// column.
class VectorFieldNet : public VectorField {
public:
    VectorFieldNet() = default;
    VectorFieldNet(int action_dim, int state_dim, std::vector<int> hidden, Rng& rng,
                   double final_scale = 0.01);

    int dim() const override { return action_dim_; }
    int state_dim() const { return state_dim_; }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor& t, const ad::Tensor& s) const override;
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor& t, const ad::Tensor& s) const override;

    Mlp mlp;

private:
    int action_dim_ = 0;
    int state_dim_ = 0;
};

// Q(s, a) = mlp(concat(s, a)) with scalar output per row.
class CriticNet {
public:
    CriticNet() = default;
    CriticNet(int state_dim, int action_dim, std::vector<int> hidden, Rng& rng);

    // returns [m, 1]
    ad::Tensor eval(const ad::Tensor& s, const ad::Tensor& a) const;

    Mlp mlp;
    int state_dim = 0;
    int action_dim = 0;
};

// Standard Adam with bias correction. Moments mirror parameter shapes; the
// learning rate is supplied per step so schedules stay with the caller.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<ad::Tensor> m;
    std::vector<ad::Tensor> v;

    void step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads, double lr);
};

// target <- (1 - tau) * target + tau * online
void polyak_update(std::span<ad::Tensor* const> target, std::span<const ad::Tensor* const> online,
                   double tau);
void polyak_update(Mlp& target, const Mlp& online, double tau);

std::vector<double> flatten_params(const Mlp& net);
void set_params(Mlp& net, std::span<const double> flat);

}  // namespace fmer
