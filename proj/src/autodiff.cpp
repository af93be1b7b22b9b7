#include "fmer/autodiff.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <sstream>

namespace fmer::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using CArrMap = Eigen::Map<const Eigen::ArrayXd>;

ArrMap arr(Tensor& t) { return {t.data(), t.numel()}; }
CArrMap arr(const Tensor& t) { return {t.data(), t.numel()}; }
MatMap mat(Tensor& t) { return {t.data(), t.rows(), t.cols()}; }
CMatMap mat(const Tensor& t) { return {t.data(), t.rows(), t.cols()}; }

thread_local Tape* g_active = nullptr;
std::atomic<std::uint64_t> g_generation{1};

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

// ----- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    std::int64_t n = 1;
    for (int s : shape) {
        if (s < 0) throw std::invalid_argument("Tensor: negative extent");
        n *= s;
    }
    t.shape_ = std::move(shape);
    t.data_.assign(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.vec()) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.vec().assign(1, v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
    Tensor t = zeros(std::move(shape));
    if (t.vec().size() != data.size())
        throw std::invalid_argument("Tensor::from: shape/data size mismatch");
    t.vec().assign(data.begin(), data.end());
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.vec()) x = rng.normal();
    return t;
}

Tensor Tensor::rademacher(std::vector<int> shape, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.vec()) x = rng.rademacher();
    return t;
}

double Tensor::value() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::value: not a scalar, shape " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    if (data_.empty()) return true;
    return arr(*this).allFinite();
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

// ----- Tape ------------------------------------------------------------------

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Neg: return "neg";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Shift: return "shift";
        case Op::Square: return "square";
        case Op::Tanh: return "tanh";
        case Op::Softplus: return "softplus";
        case Op::Sigmoid: return "sigmoid";
        case Op::MatMul: return "matmul";
        case Op::AddRowVec: return "add_rowvec";
        case Op::ConcatCols: return "concat_cols";
        case Op::RowSum: return "row_sum";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
    }
    return "?";
}

Tape::Tape() : gen_(g_generation.fetch_add(1)) { nodes_.reserve(256); }
Tape::~Tape() = default;

std::int32_t Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::int32_t>(nodes_.size() - 1);
}

std::int32_t Tape::ensure_leaf(const Tensor& t) {
    if (t.gen == gen_) return t.node;
    if (!t.all_finite())
        throw NonFiniteError("non-finite value entering tape as leaf, shape " + t.shape_str());
    Node n;
    n.op = Op::Leaf;
    n.value = t;  // copies data; leaf bookkeeping fields are reset below
    n.value.node = -1;
    n.value.gen = 0;
    const std::int32_t id = push(std::move(n));
    t.node = id;
    t.gen = gen_;
    return id;
}

TapeScope::TapeScope() : prev_(g_active) { g_active = &tape_; }
TapeScope::~TapeScope() { g_active = prev_; }

Tape* active_tape() { return g_active; }

// ----- kernels ---------------------------------------------------------------

namespace kern {

// tanh through a vectorized exp: 1 - 2/(e^{2x}+1). Exact at the saturated
// ends (exp overflows to inf / underflows to 0).
void tanh_eval(const Tensor& x, Tensor& out) {
    arr(out) = 1.0 - 2.0 / ((2.0 * arr(x)).exp() + 1.0);
}

// log1p(exp(x)) with linear tail above 20
void softplus_eval(const Tensor& x, Tensor& out) {
    auto a = arr(x);
    arr(out) = (a > 20.0).select(a, a.exp().log1p());
}

void sigmoid_eval(const Tensor& x, Tensor& out) {
    arr(out) = 1.0 / (1.0 + (-arr(x)).exp());
}

Tensor forward(Op op, const Tensor* a, const Tensor* b, double c) {
    switch (op) {
        case Op::Add: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = arr(*a) + arr(*b);
            return out;
        }
        case Op::Sub: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = arr(*a) - arr(*b);
            return out;
        }
        case Op::Neg: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = -arr(*a);
            return out;
        }
        case Op::Mul: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = arr(*a) * arr(*b);
            return out;
        }
        case Op::Scale: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = c * arr(*a);
            return out;
        }
        case Op::Shift: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = arr(*a) + c;
            return out;
        }
        case Op::Square: {
            Tensor out = Tensor::zeros(a->shape());
            arr(out) = arr(*a).square();
            return out;
        }
        case Op::Tanh: {
            Tensor out = Tensor::zeros(a->shape());
            tanh_eval(*a, out);
            return out;
        }
        case Op::Softplus: {
            Tensor out = Tensor::zeros(a->shape());
            softplus_eval(*a, out);
            return out;
        }
        case Op::Sigmoid: {
            Tensor out = Tensor::zeros(a->shape());
            sigmoid_eval(*a, out);
            return out;
        }
        case Op::MatMul: {
            Tensor out = Tensor::zeros({a->rows(), b->cols()});
            mat(out).noalias() = mat(*a) * mat(*b);
            return out;
        }
        case Op::AddRowVec: {
            Tensor out = Tensor::zeros(a->shape());
            mat(out) = mat(*a).rowwise() + Eigen::Map<const Eigen::RowVectorXd>(b->data(), b->numel());
            return out;
        }
        case Op::ConcatCols: {
            Tensor out = Tensor::zeros({a->rows(), a->cols() + b->cols()});
            mat(out).leftCols(a->cols()) = mat(*a);
            mat(out).rightCols(b->cols()) = mat(*b);
            return out;
        }
        case Op::RowSum: {
            // reductions are sequential on purpose: Eigen's vectorized redux
            // changes summation order with buffer alignment, which breaks the
            // bit-reproducibility contract
            Tensor out = Tensor::zeros({a->rows()});
            const int rows = a->rows(), cols = a->cols();
            const double* p = a->data();
            for (int r = 0; r < rows; ++r) {
                double s = 0.0;
                for (int c2 = 0; c2 < cols; ++c2) s += p[static_cast<std::int64_t>(r) * cols + c2];
                out[r] = s;
            }
            return out;
        }
        case Op::Sum: {
            double s = 0.0;
            const double* p = a->data();
            const std::int64_t n = a->numel();
            for (std::int64_t i = 0; i < n; ++i) s += p[i];
            return Tensor::scalar(s);
        }
        case Op::Mean: {
            double s = 0.0;
            const double* p = a->data();
            const std::int64_t n = a->numel();
            for (std::int64_t i = 0; i < n; ++i) s += p[i];
            return Tensor::scalar(s / static_cast<double>(n));
        }
        case Op::Leaf:
            break;
    }
    throw std::logic_error("kern::forward: bad op");
}

}  // namespace kern

double Tape::replay_max_deviation() const {
    double worst = 0.0;
    for (const Node& n : nodes_) {
        if (n.op == Op::Leaf) continue;
        const Tensor* a = n.a >= 0 ? &nodes_[n.a].value : nullptr;
        const Tensor* b = n.b >= 0 ? &nodes_[n.b].value : nullptr;
        Tensor redo = kern::forward(n.op, a, b, n.scalar);
        for (std::int64_t i = 0; i < redo.numel(); ++i) {
            const double d = std::abs(redo[i] - n.value[i]);
            if (d > worst) worst = d;
        }
    }
    return worst;
}

// ----- recording layer -------------------------------------------------------

namespace {

Tensor run_op(Op op, const Tensor* a, const Tensor* b, double c = 0.0) {
    Tensor out = kern::forward(op, a, b, c);
    Tape* t = g_active;
    if (!t) return out;
    Node n;
    n.op = op;
    n.a = a ? t->ensure_leaf(*a) : -1;
    n.b = b ? t->ensure_leaf(*b) : -1;
    n.scalar = c;
    if (!out.all_finite())
        throw NonFiniteError(std::string("non-finite result from taped op '") + op_name(op) + "'");
    n.value = out;
    const std::int32_t id = t->push(std::move(n));
    out.node = id;
    out.gen = t->generation();
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    return run_op(Op::Add, &a, &b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    return run_op(Op::Sub, &a, &b);
}
Tensor neg(const Tensor& a) { return run_op(Op::Neg, &a, nullptr); }
Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    return run_op(Op::Mul, &a, &b);
}
Tensor scale(const Tensor& a, double c) { return run_op(Op::Scale, &a, nullptr, c); }
Tensor shift(const Tensor& a, double c) { return run_op(Op::Shift, &a, nullptr, c); }
Tensor square(const Tensor& a) { return run_op(Op::Square, &a, nullptr); }
Tensor tanh(const Tensor& a) { return run_op(Op::Tanh, &a, nullptr); }
Tensor softplus(const Tensor& a) { return run_op(Op::Softplus, &a, nullptr); }
Tensor sigmoid(const Tensor& a) { return run_op(Op::Sigmoid, &a, nullptr); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    require(a.cols() == b.rows(),
            "matmul: inner dims " + a.shape_str() + " vs " + b.shape_str());
    return run_op(Op::MatMul, &a, &b);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require(m.rank() == 2 && v.rank() == 1 && m.cols() == v.cols(),
            "add_rowvec: want [m,n] + [n], got " + m.shape_str() + " + " + v.shape_str());
    return run_op(Op::AddRowVec, &m, &v);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.rows() == b.rows(),
            "concat_cols: row mismatch " + a.shape_str() + " vs " + b.shape_str());
    return run_op(Op::ConcatCols, &a, &b);
}

Tensor row_sum(const Tensor& m) {
    require(m.rank() == 2, "row_sum: rank-2 operand required");
    return run_op(Op::RowSum, &m, nullptr);
}

Tensor sum(const Tensor& a) { return run_op(Op::Sum, &a, nullptr); }
Tensor mean(const Tensor& a) { return run_op(Op::Mean, &a, nullptr); }

Tensor mish(const Tensor& a) { return mul(a, tanh(softplus(a))); }

// ----- reverse sweep ----------------------------------------------------------

namespace {

void accumulate(Tensor& slot, Tensor&& contrib) {
    if (slot.numel() == 0) {
        slot = std::move(contrib);
    } else {
        arr(slot) += arr(contrib);
    }
}

// adjoint contributions of a single node into its inputs
void backward_node(const Tape& tape, const Node& n, const Tensor& g, std::vector<Tensor>& adj) {
    auto in_a = [&]() -> const Tensor& { return tape.node(n.a).value; };
    auto in_b = [&]() -> const Tensor& { return tape.node(n.b).value; };
    switch (n.op) {
        case Op::Leaf:
            return;
        case Op::Add:
            accumulate(adj[n.a], Tensor(g));
            accumulate(adj[n.b], Tensor(g));
            return;
        case Op::Sub: {
            accumulate(adj[n.a], Tensor(g));
            Tensor nb = Tensor::zeros(g.shape());
            arr(nb) = -arr(g);
            accumulate(adj[n.b], std::move(nb));
            return;
        }
        case Op::Neg: {
            Tensor na = Tensor::zeros(g.shape());
            arr(na) = -arr(g);
            accumulate(adj[n.a], std::move(na));
            return;
        }
        case Op::Mul: {
            Tensor da = Tensor::zeros(g.shape());
            arr(da) = arr(g) * arr(in_b());
            accumulate(adj[n.a], std::move(da));
            Tensor db = Tensor::zeros(g.shape());
            arr(db) = arr(g) * arr(in_a());
            accumulate(adj[n.b], std::move(db));
            return;
        }
        case Op::Scale: {
            Tensor da = Tensor::zeros(g.shape());
            arr(da) = n.scalar * arr(g);
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::Shift:
            accumulate(adj[n.a], Tensor(g));
            return;
        case Op::Square: {
            Tensor da = Tensor::zeros(g.shape());
            arr(da) = 2.0 * arr(g) * arr(in_a());
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::Tanh: {
            Tensor da = Tensor::zeros(g.shape());
            arr(da) = arr(g) * (1.0 - arr(n.value).square());
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::Softplus: {
            Tensor sig = Tensor::zeros(g.shape());
            kern::sigmoid_eval(in_a(), sig);
            arr(sig) *= arr(g);
            accumulate(adj[n.a], std::move(sig));
            return;
        }
        case Op::Sigmoid: {
            Tensor da = Tensor::zeros(g.shape());
            arr(da) = arr(g) * arr(n.value) * (1.0 - arr(n.value));
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::MatMul: {
            const Tensor& A = in_a();
            const Tensor& B = in_b();
            Tensor da = Tensor::zeros(A.shape());
            mat(da).noalias() = mat(g) * mat(B).transpose();
            accumulate(adj[n.a], std::move(da));
            Tensor db = Tensor::zeros(B.shape());
            mat(db).noalias() = mat(A).transpose() * mat(g);
            accumulate(adj[n.b], std::move(db));
            return;
        }
        case Op::AddRowVec: {
            accumulate(adj[n.a], Tensor(g));
            Tensor dv = Tensor::zeros(in_b().shape());
            const int rows = g.rows(), cols = g.cols();
            const double* p = g.data();
            for (int r = 0; r < rows; ++r)
                for (int c2 = 0; c2 < cols; ++c2) dv[c2] += p[static_cast<std::int64_t>(r) * cols + c2];
            accumulate(adj[n.b], std::move(dv));
            return;
        }
        case Op::ConcatCols: {
            const Tensor& A = in_a();
            const Tensor& B = in_b();
            Tensor da = Tensor::zeros(A.shape());
            mat(da) = mat(g).leftCols(A.cols());
            accumulate(adj[n.a], std::move(da));
            Tensor db = Tensor::zeros(B.shape());
            mat(db) = mat(g).rightCols(B.cols());
            accumulate(adj[n.b], std::move(db));
            return;
        }
        case Op::RowSum: {
            const Tensor& A = in_a();
            Tensor da = Tensor::zeros(A.shape());
            mat(da).colwise() = Eigen::Map<const Eigen::VectorXd>(g.data(), g.numel());
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::Sum: {
            Tensor da = Tensor::full(in_a().shape(), g.value());
            accumulate(adj[n.a], std::move(da));
            return;
        }
        case Op::Mean: {
            const Tensor& A = in_a();
            Tensor da = Tensor::full(A.shape(), g.value() / static_cast<double>(A.numel()));
            accumulate(adj[n.a], std::move(da));
            return;
        }
    }
}

}  // namespace

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor* const> params, bool strict) {
    Tape* t = g_active;
    if (!t) throw std::logic_error("grad: no active tape");
    if (loss.numel() != 1)
        throw std::invalid_argument("grad: loss must be a scalar, got shape " + loss.shape_str());
    if (loss.gen != t->generation())
        throw std::logic_error("grad: loss was not recorded on the active tape");

    std::vector<Tensor> adj(t->size());
    adj[loss.node] = Tensor::full(loss.shape(), 1.0);
    for (std::int32_t i = loss.node; i >= 0; --i) {
        if (adj[i].numel() == 0) continue;
        backward_node(*t, t->node(i), adj[i], adj);
    }

    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Tensor* p : params) {
        if (p->gen == t->generation() && adj[p->node].numel() != 0) {
            out.push_back(std::move(adj[p->node]));
        } else if (strict) {
            throw std::invalid_argument("grad: parameter detached from the graph (strict mode)");
        } else {
            out.push_back(Tensor::zeros(p->shape()));
        }
    }
    return out;
}

std::vector<Tensor> grad(const Tensor& loss, std::initializer_list<const Tensor*> params,
                         bool strict) {
    std::vector<const Tensor*> v(params);
    return grad(loss, std::span<const Tensor* const>(v.data(), v.size()), strict);
}

// ----- dual arithmetic --------------------------------------------------------

void watch(const Tensor& t) {
    if (g_active) g_active->ensure_leaf(t);
}

Dual Dual::constant(const Tensor& v) {
    watch(v);
    return Dual{v, std::nullopt};
}

Dual Dual::seeded(Tensor v, Tensor t) {
    watch(v);
    watch(t);
    return Dual{std::move(v), std::move(t)};
}

Tensor Dual::tangent_or_zeros() const { return tan ? *tan : Tensor::zeros(val.shape()); }

Dual dadd(const Dual& a, const Dual& b) {
    std::optional<Tensor> t;
    if (a.tan && b.tan) t = add(*a.tan, *b.tan);
    else if (a.tan) t = *a.tan;
    else if (b.tan) t = *b.tan;
    return {add(a.val, b.val), std::move(t)};
}

Dual dsub(const Dual& a, const Dual& b) {
    std::optional<Tensor> t;
    if (a.tan && b.tan) t = sub(*a.tan, *b.tan);
    else if (a.tan) t = *a.tan;
    else if (b.tan) t = neg(*b.tan);
    return {sub(a.val, b.val), std::move(t)};
}

Dual dneg(const Dual& a) {
    return {neg(a.val), a.tan ? std::optional<Tensor>(neg(*a.tan)) : std::nullopt};
}

Dual dmul(const Dual& a, const Dual& b) {
    std::optional<Tensor> t;
    if (a.tan && b.tan) t = add(mul(*a.tan, b.val), mul(a.val, *b.tan));
    else if (a.tan) t = mul(*a.tan, b.val);
    else if (b.tan) t = mul(a.val, *b.tan);
    return {mul(a.val, b.val), std::move(t)};
}

Dual dscale(const Dual& a, double c) {
    return {scale(a.val, c), a.tan ? std::optional<Tensor>(scale(*a.tan, c)) : std::nullopt};
}

Dual dshift(const Dual& a, double c) { return {shift(a.val, c), a.tan}; }

Dual dsquare(const Dual& a) {
    std::optional<Tensor> t;
    if (a.tan) t = scale(mul(a.val, *a.tan), 2.0);
    return {square(a.val), std::move(t)};
}

Dual dtanh(const Dual& a) {
    Tensor y = tanh(a.val);
    std::optional<Tensor> t;
    if (a.tan) t = mul(shift(neg(square(y)), 1.0), *a.tan);
    return {std::move(y), std::move(t)};
}

Dual dsoftplus(const Dual& a) {
    std::optional<Tensor> t;
    if (a.tan) t = mul(sigmoid(a.val), *a.tan);
    return {softplus(a.val), std::move(t)};
}

Dual dsigmoid(const Dual& a) {
    Tensor y = sigmoid(a.val);
    std::optional<Tensor> t;
    if (a.tan) t = mul(mul(y, shift(neg(y), 1.0)), *a.tan);
    return {std::move(y), std::move(t)};
}

Dual dmatmul(const Dual& a, const Dual& b) {
    std::optional<Tensor> t;
    if (a.tan && b.tan) t = add(matmul(*a.tan, b.val), matmul(a.val, *b.tan));
    else if (a.tan) t = matmul(*a.tan, b.val);
    else if (b.tan) t = matmul(a.val, *b.tan);
    return {matmul(a.val, b.val), std::move(t)};
}

Dual dadd_rowvec(const Dual& m, const Dual& v) {
    std::optional<Tensor> t;
    if (m.tan && v.tan) t = add_rowvec(*m.tan, *v.tan);
    else if (m.tan) t = *m.tan;
    else if (v.tan) t = add_rowvec(Tensor::zeros(m.val.shape()), *v.tan);
    return {add_rowvec(m.val, v.val), std::move(t)};
}

Dual dconcat_cols(const Dual& a, const Dual& b) {
    std::optional<Tensor> t;
    if (a.tan || b.tan) {
        Tensor ta = a.tan ? *a.tan : Tensor::zeros(a.val.shape());
        Tensor tb = b.tan ? *b.tan : Tensor::zeros(b.val.shape());
        t = concat_cols(ta, tb);
    }
    return {concat_cols(a.val, b.val), std::move(t)};
}

Dual drow_sum(const Dual& m) {
    return {row_sum(m.val), m.tan ? std::optional<Tensor>(row_sum(*m.tan)) : std::nullopt};
}

Dual dsum(const Dual& a) {
    return {sum(a.val), a.tan ? std::optional<Tensor>(sum(*a.tan)) : std::nullopt};
}

Dual dmean(const Dual& a) {
    return {mean(a.val), a.tan ? std::optional<Tensor>(mean(*a.tan)) : std::nullopt};
}

Dual dmish(const Dual& a) { return dmul(a, dtanh(dsoftplus(a))); }

}  // namespace fmer::ad
