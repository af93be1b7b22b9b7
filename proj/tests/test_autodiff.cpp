#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fmer/autodiff.hpp"
#include "fmer/rng.hpp"
#include "oracles.hpp"

using namespace fmer;
using namespace fmer::ad;

namespace {

// tiny 2-layer mish MLP expressed directly in primitives; the params vector
// is flat [W1 (n*h), b1 (h), W2 (h*m), b2 (m)]
struct TinyMlp {
    int n, h, m;
    std::vector<double> flat;

    static TinyMlp random(int n, int h, int m, Rng& rng) {
        TinyMlp net{n, h, m, {}};
        net.flat.resize(static_cast<std::size_t>(n * h + h + h * m + m));
        for (auto& w : net.flat) w = 0.5 * rng.normal();
        return net;
    }

    // forward as duals so the same definition serves grad, jvp and trace tests
    Dual forward(const Dual& x, const std::vector<double>& p) const {
        auto slice = [&](int off, int len, std::vector<int> shape) {
            return Tensor::from(std::move(shape),
                                std::vector<double>(p.begin() + off, p.begin() + off + len));
        };
        Tensor w1 = slice(0, n * h, {n, h});
        Tensor b1 = slice(n * h, h, {h});
        Tensor w2 = slice(n * h + h, h * m, {h, m});
        Tensor b2 = slice(n * h + h + h * m, m, {m});
        Dual z1 = dmish(dadd_rowvec(dmatmul(x, Dual::constant(w1)), Dual::constant(b1)));
        return dadd_rowvec(dmatmul(z1, Dual::constant(w2)), Dual::constant(b2));
    }

    Tensor forward(const Tensor& x, const std::vector<double>& p) const {
        return forward(Dual::constant(x), p).val;
    }
};

double scalar_loss_of_params(const TinyMlp& net, const Tensor& x, const std::vector<double>& p) {
    return sum(square(net.forward(x, p))).value();
}

}  // namespace

TEST_CASE("grad: sum of squares") {
    TapeScope scope;
    Tensor p = Tensor::from({3}, {1, 2, 3});
    Tensor loss = sum(mul(p, p));
    auto g = grad(loss, {&p});
    CHECK(g[0][0] == doctest::Approx(2.0));
    CHECK(g[0][1] == doctest::Approx(4.0));
    CHECK(g[0][2] == doctest::Approx(6.0));
}

TEST_CASE("grad: tanh at zero") {
    TapeScope scope;
    Tensor p = Tensor::from({1}, {0.0});
    Tensor loss = tanh(p);
    auto g = grad(loss, {&p});
    CHECK(g[0][0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("grad: random mish MLP matches finite differences") {
    Rng rng(7);
    TinyMlp net = TinyMlp::random(4, 8, 3, rng);
    Tensor x = Tensor::randn({1, 4}, rng);

    std::vector<double> analytic;
    {
        TapeScope scope;
        // parameters as individual taped tensors
        auto slice = [&](int off, int len, std::vector<int> shape) {
            return Tensor::from(std::move(shape),
                                std::vector<double>(net.flat.begin() + off,
                                                    net.flat.begin() + off + len));
        };
        Tensor w1 = slice(0, 4 * 8, {4, 8});
        Tensor b1 = slice(4 * 8, 8, {8});
        Tensor w2 = slice(4 * 8 + 8, 8 * 3, {8, 3});
        Tensor b2 = slice(4 * 8 + 8 + 8 * 3, 3, {3});
        Tensor out = add_rowvec(matmul(mish(add_rowvec(matmul(x, w1), b1)), w2), b2);
        Tensor loss = sum(square(out));
        auto g = grad(loss, {&w1, &b1, &w2, &b2});
        for (const auto& t : g)
            analytic.insert(analytic.end(), t.vec().begin(), t.vec().end());
    }

    auto fd = oracles::fd_grad([&](const std::vector<double>& p) {
        return scalar_loss_of_params(net, x, p);
    }, net.flat);
    CHECK(oracles::rel_err(analytic, fd) < 1e-4);
}

TEST_CASE("grad errors: non-scalar loss, detached param in strict mode") {
    TapeScope scope;
    Tensor p = Tensor::from({2}, {1, 2});
    Tensor v = mul(p, p);
    CHECK_THROWS_AS((void)grad(v, {&p}), std::invalid_argument);

    Tensor loss = sum(v);
    Tensor unused = Tensor::from({2}, {5, 5});
    auto g = grad(loss, {&unused});
    CHECK(g[0][0] == 0.0);
    CHECK(g[0][1] == 0.0);
    CHECK_THROWS_AS((void)grad(loss, {&unused}, true), std::invalid_argument);
}

TEST_CASE("tape rejects non-finite values") {
    TapeScope scope;
    Tensor bad = Tensor::from({2}, {1.0, std::nan("")});
    Tensor ok = Tensor::from({2}, {1.0, 2.0});
    CHECK_THROWS_AS((void)add(bad, ok), NonFiniteError);
}

TEST_CASE("jvp: matrix field, identity, tanh") {
    Tensor A = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto linear = [&](const Dual& x) { return dmatmul(x, Dual::constant(A)); };
    // row-vector convention: x [1,2] times A^T gives A.x; use A transposed
    Tensor At = Tensor::from({2, 2}, {1, 3, 2, 4});
    auto linear_Ax = [&](const Dual& x) { return dmatmul(x, Dual::constant(At)); };
    Tensor x = Tensor::from({1, 2}, {0.3, -0.7});
    Tensor t = Tensor::from({1, 2}, {1, 0});
    Tensor out = jvp(linear_Ax, x, t);
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == doctest::Approx(3.0));
    (void)linear;

    auto identity = [](const Dual& x) { return x; };
    Tensor t2 = Tensor::from({1, 2}, {0.25, -1.5});
    Tensor out2 = jvp(identity, x, t2);
    CHECK(out2[0] == doctest::Approx(0.25));
    CHECK(out2[1] == doctest::Approx(-1.5));

    auto th = [](const Dual& x) { return dtanh(x); };
    Tensor x3 = Tensor::from({1}, {0.5});
    Tensor t3 = Tensor::from({1}, {1.0});
    Tensor out3 = jvp(th, x3, t3);
    const double want = 1.0 - std::tanh(0.5) * std::tanh(0.5);
    CHECK(out3[0] == doctest::Approx(want).epsilon(1e-9));
    CHECK(want == doctest::Approx(0.786448).epsilon(1e-5));
}

TEST_CASE("jvp rejects mismatched tangent shape") {
    auto identity = [](const Dual& x) { return x; };
    Tensor x = Tensor::from({1, 2}, {1, 2});
    Tensor t = Tensor::from({1, 3}, {1, 2, 3});
    CHECK_THROWS_AS((void)jvp(identity, x, t), std::invalid_argument);
}

TEST_CASE("exact_jacobian_trace: identity, matrix, dimension cap") {
    auto identity = [](const Dual& x) { return x; };
    Tensor x = Tensor::from({1, 3}, {0.1, 0.2, 0.3});
    CHECK(exact_jacobian_trace(identity, x) == doctest::Approx(3.0));

    Tensor At = Tensor::from({2, 2}, {1, 3, 2, 4});
    auto linear = [&](const Dual& v) { return dmatmul(v, Dual::constant(At)); };
    Tensor x2 = Tensor::from({1, 2}, {5.0, -2.0});
    CHECK(exact_jacobian_trace(linear, x2) == doctest::Approx(5.0));

    Tensor big = Tensor::zeros({1, 33});
    CHECK_THROWS_AS((void)exact_jacobian_trace(identity, big), std::invalid_argument);
}

TEST_CASE("exact trace equals full Rademacher enumeration for random MLP") {
    Rng rng(11);
    for (int rep = 0; rep < 4; ++rep) {
        TinyMlp net = TinyMlp::random(4, 10, 4, rng);
        Tensor x = Tensor::randn({1, 4}, rng);
        auto f = [&](const Dual& v) { return net.forward(v, net.flat); };
        const double tr = exact_jacobian_trace(f, x);

        // enumerate all 2^4 Rademacher probes
        double acc = 0.0;
        for (int bits = 0; bits < 16; ++bits) {
            Tensor eps = Tensor::zeros({1, 4});
            for (int i = 0; i < 4; ++i) eps[i] = (bits >> i) & 1 ? 1.0 : -1.0;
            Tensor je = jvp(f, x, eps);
            double dot = 0.0;
            for (int i = 0; i < 4; ++i) dot += eps[i] * je[i];
            acc += dot;
        }
        CHECK(std::abs(acc / 16.0 - tr) < 1e-10);
    }
}

TEST_CASE("every primitive gradient matches finite differences") {
    Rng rng(23);
    // scalar loss built on top of each primitive; FD over all input entries
    struct Case {
        const char* name;
        int nin;  // tensors
        std::function<Tensor(const std::vector<Tensor>&)> apply;
        std::function<std::vector<Tensor>(Rng&)> make;
    };
    auto vec4 = [](Rng& r) {
        Tensor t = Tensor::randn({4}, r);
        return std::vector<Tensor>{t};
    };
    auto two_vec4 = [](Rng& r) {
        return std::vector<Tensor>{Tensor::randn({4}, r), Tensor::randn({4}, r)};
    };
    std::vector<Case> cases = {
        {"add", 2, [](const auto& in) { return sum(square(add(in[0], in[1]))); }, two_vec4},
        {"sub", 2, [](const auto& in) { return sum(square(sub(in[0], in[1]))); }, two_vec4},
        {"neg", 1, [](const auto& in) { return sum(square(neg(in[0]))); }, vec4},
        {"mul", 2, [](const auto& in) { return sum(square(mul(in[0], in[1]))); }, two_vec4},
        {"scale", 1, [](const auto& in) { return sum(square(scale(in[0], -1.7))); }, vec4},
        {"shift", 1, [](const auto& in) { return sum(square(shift(in[0], 0.9))); }, vec4},
        {"square", 1, [](const auto& in) { return sum(square(square(in[0]))); }, vec4},
        {"tanh", 1, [](const auto& in) { return sum(square(tanh(in[0]))); }, vec4},
        {"softplus", 1, [](const auto& in) { return sum(square(softplus(in[0]))); }, vec4},
        {"sigmoid", 1, [](const auto& in) { return sum(square(sigmoid(in[0]))); }, vec4},
        {"mish", 1, [](const auto& in) { return sum(square(mish(in[0]))); }, vec4},
        {"matmul", 2,
         [](const auto& in) { return sum(square(matmul(in[0], in[1]))); },
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({4, 2}, r)};
         }},
        {"add_rowvec", 2,
         [](const auto& in) { return sum(square(add_rowvec(in[0], in[1]))); },
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({4}, r)};
         }},
        {"concat_cols", 2,
         [](const auto& in) { return sum(square(concat_cols(in[0], in[1]))); },
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({3, 2}, r), Tensor::randn({3, 3}, r)};
         }},
        {"row_sum", 1,
         [](const auto& in) { return sum(square(row_sum(in[0]))); },
         [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r)}; }},
        {"sum", 1, [](const auto& in) { return square(sum(in[0])); }, vec4},
        {"mean", 1, [](const auto& in) { return square(mean(in[0])); }, vec4},
    };

    for (const auto& c : cases) {
        CAPTURE(c.name);
        for (int rep = 0; rep < 100; ++rep) {
            std::vector<Tensor> in = c.make(rng);
            std::vector<double> analytic;
            {
                TapeScope scope;
                Tensor loss = c.apply(in);
                std::vector<const Tensor*> ptrs;
                for (auto& t : in) ptrs.push_back(&t);
                auto g = grad(loss, std::span<const Tensor* const>(ptrs.data(), ptrs.size()));
                for (const auto& t : g)
                    analytic.insert(analytic.end(), t.vec().begin(), t.vec().end());
            }
            // flatten, FD, compare
            std::vector<double> flat;
            std::vector<std::pair<int, int>> layout;  // tensor index, offset
            for (const auto& t : in) flat.insert(flat.end(), t.vec().begin(), t.vec().end());
            auto eval = [&](const std::vector<double>& p) {
                std::vector<Tensor> mod = in;
                std::size_t off = 0;
                for (auto& t : mod) {
                    std::copy(p.begin() + off, p.begin() + off + t.numel(), t.vec().begin());
                    t.gen = 0;  // force re-registration as fresh leaves
                    off += t.numel();
                }
                return c.apply(mod).value();
            };
            auto fd = oracles::fd_grad(eval, flat);
            const double err = oracles::rel_err(analytic, fd, 1e-6);
            if (err >= 1e-4) { CAPTURE(rep); }
            REQUIRE(err < 1e-4);
            (void)layout;
        }
    }
}

TEST_CASE("JVP/VJP duality on random composite graphs") {
    Rng rng(37);
    for (int rep = 0; rep < 25; ++rep) {
        TinyMlp net = TinyMlp::random(3, 6, 3, rng);
        auto f = [&](const Dual& v) {
            Dual h = net.forward(v, net.flat);
            return dadd(dtanh(h), dmul(dsigmoid(h), Dual::constant(Tensor::randn({1, 3}, rng))));
        };
        // freeze the random constant per instance
        Tensor cmat = Tensor::randn({1, 3}, rng);
        auto g = [&](const Dual& v) {
            Dual h = net.forward(v, net.flat);
            return dadd(dtanh(h), dmul(dsigmoid(h), Dual::constant(cmat)));
        };
        (void)f;

        Tensor x = Tensor::randn({1, 3}, rng);
        Tensor tangent = Tensor::randn({1, 3}, rng);
        Tensor cotangent = Tensor::randn({1, 3}, rng);

        Tensor jv = jvp(g, x, tangent);
        double lhs = 0.0;  // cotangent . JVP(tangent)
        for (int i = 0; i < 3; ++i) lhs += cotangent[i] * jv[i];

        double rhs = 0.0;  // tangent . VJP(cotangent)
        {
            TapeScope scope;
            Tensor y = g(Dual::constant(x)).val;
            Tensor s = sum(mul(y, cotangent));
            auto gx = grad(s, {&x});
            for (int i = 0; i < 3; ++i) rhs += tangent[i] * gx[0][i];
        }
        CHECK(std::abs(lhs - rhs) < 1e-10);
    }
}

TEST_CASE("determinism: identical seeds produce bit-identical gradients") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        TinyMlp net = TinyMlp::random(4, 12, 2, rng);
        Tensor x = Tensor::randn({2, 4}, rng);
        TapeScope scope;
        Tensor xx = x;
        auto slice = [&](int off, int len, std::vector<int> shape) {
            return Tensor::from(std::move(shape),
                                std::vector<double>(net.flat.begin() + off,
                                                    net.flat.begin() + off + len));
        };
        Tensor w1 = slice(0, 4 * 12, {4, 12});
        Tensor b1 = slice(4 * 12, 12, {12});
        Tensor w2 = slice(4 * 12 + 12, 12 * 2, {12, 2});
        Tensor b2 = slice(4 * 12 + 12 + 12 * 2, 2, {2});
        Tensor loss = mean(square(add_rowvec(matmul(mish(add_rowvec(matmul(xx, w1), b1)), w2), b2)));
        auto g = grad(loss, {&w1, &b1, &w2, &b2});
        std::vector<double> flat;
        for (const auto& t : g) flat.insert(flat.end(), t.vec().begin(), t.vec().end());
        return flat;
    };
    auto a = run(99);
    auto b = run(99);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("tape replay reproduces forward values bit-identically") {
    Rng rng(5);
    TapeScope scope;
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({4, 4}, rng);
    Tensor y = mean(square(mish(matmul(x, w))));
    (void)y;
    CHECK(scope.tape().replay_max_deviation() == 0.0);
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
    TapeScope scope;
    Tensor p = Tensor::from({2}, {3.0, -1.0});
    Tensor loss = sum(mul(p, p));  // same tensor twice: d/dp = 2p
    auto g = grad(loss, {&p});
    CHECK(g[0][0] == doctest::Approx(6.0));
    CHECK(g[0][1] == doctest::Approx(-2.0));
}

TEST_CASE("jvp result stays differentiable w.r.t. parameters") {
    // d/dw of (d/dx [w * x^2]) . t = d/dw (2 w x t) = 2 x t
    TapeScope scope;
    Tensor w = Tensor::from({1}, {1.5});
    Tensor x = Tensor::from({1}, {0.7});
    Tensor t = Tensor::from({1}, {1.0});
    auto f = [&](const Dual& v) { return dmul(Dual::constant(w), dsquare(v)); };
    Tensor jv = jvp(f, x, t);
    Tensor loss = sum(jv);
    auto g = grad(loss, {&w});
    CHECK(g[0][0] == doctest::Approx(2.0 * 0.7).epsilon(1e-12));
}
