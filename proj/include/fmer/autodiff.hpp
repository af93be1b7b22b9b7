#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmer/rng.hpp"

namespace fmer::ad {

class Tape;

// Thrown when a non-finite value enters or leaves a taped operation, and by
// the training loop's abort path.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// All tensor buffers share one alignment so vectorized kernels take identical
// code paths for identical shapes; otherwise results shift in the last ulp
// with allocator luck and bit-reproducibility is lost.
template <class T, std::size_t Align>
struct AlignedAllocator {
    using value_type = T;
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
    bool operator==(const AlignedAllocator&) const { return true; }
};

using DataVec = std::vector<double, AlignedAllocator<double, 64>>;

// Dense row-major f64 tensor of rank 0 (scalar), 1 or 2. The node/gen pair
// links a value into the currently active tape; it is bookkeeping only and
// invalidated automatically once that tape dies (generation counter).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v);
    static Tensor from(std::vector<int> shape, std::vector<double> data);
    static Tensor randn(std::vector<int> shape, Rng& rng);
    static Tensor rademacher(std::vector<int> shape, Rng& rng);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool is_scalar() const { return data_.size() == 1; }

    int rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : 1); }
    int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    DataVec& vec() { return data_; }
    const DataVec& vec() const { return data_; }

    double value() const;                 // scalar access; throws if numel != 1
    double operator[](std::int64_t i) const { return data_[i]; }
    double& operator[](std::int64_t i) { return data_[i]; }
    double at(int r, int c) const { return data_[static_cast<std::int64_t>(r) * cols() + c]; }
    double& at(int r, int c) { return data_[static_cast<std::int64_t>(r) * cols() + c]; }

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;

    // tape bookkeeping, managed by the recording layer
    mutable std::int32_t node = -1;
    mutable std::uint64_t gen = 0;

private:
    std::vector<int> shape_;
    DataVec data_;
};

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Neg,
    Mul,
    Scale,      // c * x
    Shift,      // x + c
    Square,
    Tanh,
    Softplus,
    Sigmoid,
    MatMul,     // [m,k] x [k,n] -> [m,n]
    AddRowVec,  // [m,n] + [n] broadcast over rows
    ConcatCols, // [m,a] ++ [m,b] -> [m,a+b]
    RowSum,     // [m,n] -> [m]
    Sum,        // -> scalar
    Mean,       // -> scalar
};

const char* op_name(Op op);

struct Node {
    Op op = Op::Leaf;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double scalar = 0.0;
    Tensor value;
};

// Ordered record of primitive operations. Nodes are appended in execution
// order, so the record is already a topological order; the reverse sweep
// walks it backwards.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::int32_t i) const { return nodes_[i]; }
    std::uint64_t generation() const { return gen_; }

    // recomputes every non-leaf node from its recorded inputs and returns the
    // largest absolute deviation from the recorded value (0.0 when the replay
    // is bit-identical)
    double replay_max_deviation() const;

    std::int32_t push(Node n);
    std::int32_t ensure_leaf(const Tensor& t);

private:
    std::vector<Node> nodes_;
    std::uint64_t gen_;
};

// Activates a fresh tape for the current thread for the lifetime of the
// scope. Tensor ops record onto it; without an active scope they evaluate
// eagerly.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

Tape* active_tape();

// ----- primitive operations ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor row_sum(const Tensor& m);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// x * tanh(softplus(x)), recorded as its three constituent primitives
Tensor mish(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }

// ----- reverse mode ---------------------------------------------------------

// d(loss)/d(param) for each param, in order. `loss` must be a scalar recorded
// on the active tape. Params that never participated get zero gradients, or
// an error in strict mode.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor* const> params,
                         bool strict = false);
std::vector<Tensor> grad(const Tensor& loss, std::initializer_list<const Tensor*> params,
                         bool strict = false);

// ----- forward mode ---------------------------------------------------------

// Dual value for tangent propagation. A missing tangent is a structural zero.
// All tangent arithmetic is expressed through the primitives above, so when a
// tape is active the tangent stays differentiable (forward-over-reverse).
struct Dual {
    Tensor val;
    std::optional<Tensor> tan;

    // registers v as a tape leaf first (when a tape is active), so gradients
    // can later be taken w.r.t. the caller's tensor
    static Dual constant(const Tensor& v);
    static Dual seeded(Tensor v, Tensor t);
    Tensor tangent_or_zeros() const;
};

// registers a tensor as a leaf on the active tape (no-op without one)
void watch(const Tensor& t);

Dual dadd(const Dual& a, const Dual& b);
Dual dsub(const Dual& a, const Dual& b);
Dual dneg(const Dual& a);
Dual dmul(const Dual& a, const Dual& b);
Dual dscale(const Dual& a, double c);
Dual dshift(const Dual& a, double c);
Dual dsquare(const Dual& a);
Dual dtanh(const Dual& a);
Dual dsoftplus(const Dual& a);
Dual dsigmoid(const Dual& a);
Dual dmatmul(const Dual& a, const Dual& b);
Dual dadd_rowvec(const Dual& m, const Dual& v);
Dual dconcat_cols(const Dual& a, const Dual& b);
Dual drow_sum(const Dual& m);
Dual dsum(const Dual& a);
Dual dmean(const Dual& a);
Dual dmish(const Dual& a);

// (df/dx) . tangent at x. The result is tape-connected whenever a tape is
// active, so gradients w.r.t. parameters flow through it.
template <class F>
Tensor jvp(F&& f, const Tensor& x, const Tensor& tangent) {
    if (!x.same_shape(tangent))
        throw std::invalid_argument("jvp: tangent shape " + tangent.shape_str() +
                                    " does not match input shape " + x.shape_str());
    Dual out = f(Dual::seeded(x, tangent));
    return out.tangent_or_zeros();
}

// Exact Jacobian trace via d basis-vector JVPs. Test oracle; refuses large d.
template <class F>
double exact_jacobian_trace(F&& f, const Tensor& x) {
    const std::int64_t d = x.numel();
    if (d > 32)
        throw std::invalid_argument("exact_jacobian_trace: dim " + std::to_string(d) +
                                    " exceeds the oracle cap of 32");
    double tr = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        Tensor e = Tensor::zeros(x.shape());
        e[i] = 1.0;
        tr += jvp(f, x, e)[i];
    }
    return tr;
}

}  // namespace fmer::ad
