#pragma once

#include "fmer/autodiff.hpp"

namespace fmer {

// Time-dependent, state-conditioned vector field v(x, t, s) on the latent
// space. Implemented by the policy network and by the analytic stub fields
// the entropy oracles use. Batched row convention: x is [m,d], t a [m,1]
// column of flow times, s [m,ds].
struct VectorField {
    virtual ~VectorField() = default;
    virtual int dim() const = 0;
    virtual ad::Tensor eval(const ad::Tensor& x, const ad::Tensor& t, const ad::Tensor& s) const = 0;
    // forward-mode variant; the tangent seeds on x only
    virtual ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor& t, const ad::Tensor& s) const = 0;
};

}  // namespace fmer
