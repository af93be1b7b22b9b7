#pragma once

#include <functional>
#include <utility>

#include "fmer/field.hpp"
#include "fmer/flow_policy.hpp"

namespace fmer {

// Analytic vector fields for the entropy and divergence oracles. Each matches
// its closed form exactly and ignores the state input.

// v(x) = c
class ConstantField : public VectorField {
public:
    explicit ConstantField(ad::Tensor c) : c_(std::move(c)) {}
    int dim() const override { return static_cast<int>(c_.numel()); }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor&, const ad::Tensor&) const override {
        return repeat_rows(ad::Tensor::from({1, dim()}, {c_.vec().begin(), c_.vec().end()}),
                           x.rows());
    }
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor& t, const ad::Tensor& s) const override {
        return ad::Dual::constant(eval(x.val, t, s));
    }

private:
    ad::Tensor c_;
};

// v(x) = A x (column convention); rows evaluate as x A^T
class LinearField : public VectorField {
public:
    explicit LinearField(const ad::Tensor& a) : at_(ad::Tensor::zeros(a.shape())) {
        if (a.rank() != 2 || a.rows() != a.cols())
            throw std::invalid_argument("LinearField: square matrix required");
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < a.cols(); ++j) at_.at(j, i) = a.at(i, j);
    }
    int dim() const override { return at_.rows(); }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::matmul(x, at_);
    }
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::dmatmul(x, ad::Dual::constant(at_));
    }

private:
    ad::Tensor at_;
};

// v(x) = x
class IdentityField : public VectorField {
public:
    explicit IdentityField(int d) : d_(d) {}
    int dim() const override { return d_; }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::scale(x, 1.0);
    }
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::dscale(x, 1.0);
    }

private:
    int d_;
};

// v(x) = a x elementwise (diagonal linear field)
class ScaleField : public VectorField {
public:
    ScaleField(int d, double a) : d_(d), a_(a) {}
    int dim() const override { return d_; }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::scale(x, a_);
    }
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor&, const ad::Tensor&) const override {
        return ad::dscale(x, a_);
    }

private:
    int d_;
    double a_;
};

// arbitrary closure over duals, for one-off oracles
class ClosureField : public VectorField {
public:
    using Fn = std::function<ad::Dual(const ad::Dual&, const ad::Tensor&, const ad::Tensor&)>;
    ClosureField(int d, Fn fn) : d_(d), fn_(std::move(fn)) {}
    int dim() const override { return d_; }
    ad::Tensor eval(const ad::Tensor& x, const ad::Tensor& t, const ad::Tensor& s) const override {
        return fn_(ad::Dual::constant(x), t, s).val;
    }
    ad::Dual eval_dual(const ad::Dual& x, const ad::Tensor& t, const ad::Tensor& s) const override {
        return fn_(x, t, s);
    }

private:
    int d_;
    Fn fn_;
};

}  // namespace fmer
