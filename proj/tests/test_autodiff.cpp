#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "kiim/autodiff.hpp"

using namespace kiim::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// central finite differences of a scalar-valued graph builder
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-6) {
    Tensor g(x.shape());
    Tensor xp = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        double orig = xp[i];
        xp[i] = orig + h;
        double fp = f(xp);
        xp[i] = orig - h;
        double fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
    REQUIRE(a.same_shape(b));
    for (int64_t i = 0; i < a.size(); ++i) {
        double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-4});
        CHECK(std::abs(a[i] - b[i]) / denom < tol);
    }
}

// builds the graph with x as the only trainable leaf and checks autodiff
// gradients against finite differences
void grad_check(const std::function<Var(const Var&)>& builder, const Tensor& x0, double tol = 1e-6) {
    Var x = leaf(x0);
    Var out = builder(x);
    backward(out);
    Tensor analytic = x->grad;
    Tensor numeric = numeric_grad(
        [&](const Tensor& xv) {
            Var xi = leaf(xv);
            return builder(xi)->val[0];
        },
        x0);
    check_close(analytic, numeric, tol);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Rng rng(11);
    Tensor x = random_tensor({3, 5}, rng);
    grad_check([](const Var& v) { return sum(mul(v, v)); }, x);
    grad_check([](const Var& v) { return sum(relu(v)); }, x, 1e-4);
    grad_check([](const Var& v) { return sum(gelu(v)); }, x);
    grad_check([](const Var& v) { return sum(sigmoid(v)); }, x);
    grad_check([](const Var& v) { return mean(add_scalar(mul_scalar(v, 3.0), -0.5)); }, x);
}

TEST_CASE("blend and scale_by gradients including scalar parameter") {
    Rng rng(12);
    Tensor a0 = random_tensor({4, 4}, rng);
    Tensor b0 = random_tensor({4, 4}, rng);

    Var a = leaf(a0);
    Var b = leaf(b0);
    Var al = leaf(Tensor::scalar(0.8));
    Var out = sum(mul(blend(a, b, al), blend(a, b, al)));
    backward(out);

    auto eval = [&](const Tensor& av, const Tensor& bv, double alv) {
        Var aa = constant(av), bb = constant(bv), aal = constant(Tensor::scalar(alv));
        Tensor m = blend(aa, bb, aal)->val;
        double s = 0.0;
        for (int64_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
        return s;
    };
    double h = 1e-6;
    double fd_alpha = (eval(a0, b0, 0.8 + h) - eval(a0, b0, 0.8 - h)) / (2 * h);
    CHECK(std::abs(al->grad[0] - fd_alpha) < 1e-5 * std::max(1.0, std::abs(fd_alpha)));

    Tensor fd_a = numeric_grad([&](const Tensor& av) { return eval(av, b0, 0.8); }, a0);
    check_close(a->grad, fd_a, 1e-6);
}

TEST_CASE("matmul linear softmax layernorm gradients") {
    Rng rng(13);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor w0 = random_tensor({6, 3}, rng);
    Tensor b0 = random_tensor({3}, rng);

    grad_check([&](const Var& v) { return sum(matmul(v, constant(w0))); }, x);
    grad_check([&](const Var& v) { return sum(mul(linear(v, constant(w0), constant(b0)),
                                                  linear(v, constant(w0), constant(b0)))); },
               x);

    // weight and bias gradients
    {
        Var xv = constant(x), w = leaf(w0), b = leaf(b0);
        Var out = sum(mul(linear(xv, w, b), linear(xv, w, b)));
        backward(out);
        auto evalw = [&](const Tensor& wv) {
            Tensor m = linear(constant(x), constant(wv), constant(b0))->val;
            double s = 0;
            for (int64_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
            return s;
        };
        check_close(w->grad, numeric_grad(evalw, w0), 1e-6);
    }

    grad_check([](const Var& v) { return sum(mul(softmax_rows(v), softmax_rows(v))); }, x, 1e-5);
    grad_check([](const Var& v) { return sum(mul(log_softmax_rows(v), log_softmax_rows(v))); }, x, 1e-5);

    Tensor gain = random_tensor({6}, rng, 0.5, 1.5);
    Tensor bias = random_tensor({6}, rng);
    grad_check(
        [&](const Var& v) {
            Var ln = layer_norm(v, constant(gain), constant(bias));
            return sum(mul(ln, ln));
        },
        x, 1e-4);
}

TEST_CASE("softmax_vec and at_index gradients") {
    Rng rng(14);
    Tensor w = random_tensor({2}, rng);
    grad_check(
        [](const Var& v) {
            Var u = softmax_vec(v);
            return mul(at_index(u, 0), at_index(u, 1));
        },
        w, 1e-5);
}

TEST_CASE("gather reshape concat upsample gradients") {
    Rng rng(15);
    Tensor x = random_tensor({6, 3}, rng);
    grad_check([](const Var& v) { return sum(mul(gather_rows(v, {5, 0, 0, 2}), gather_rows(v, {5, 0, 0, 2}))); },
               x);
    grad_check([](const Var& v) { return sum(mul(reshape(v, {3, 6}), reshape(v, {3, 6}))); }, x);

    Tensor y = random_tensor({2, 4, 4}, rng);
    grad_check([](const Var& v) { return sum(mul(upsample_nearest2(v), upsample_nearest2(v))); }, y);
    Tensor z0 = random_tensor({3, 4, 4}, rng);
    grad_check([&](const Var& v) { return sum(mul(concat_channels(v, constant(z0)), concat_channels(v, constant(z0)))); },
               y);

    Tensor a0 = random_tensor({1, 4, 4}, rng);
    grad_check([&](const Var& v) { return sum(mul(mul_channel_broadcast(v, constant(a0)), v)); }, y);
    {
        Var xx = constant(y), aa = leaf(a0);
        Var out = sum(mul(mul_channel_broadcast(xx, aa), mul_channel_broadcast(xx, aa)));
        backward(out);
        Tensor fd = numeric_grad(
            [&](const Tensor& av) {
                Tensor m = mul_channel_broadcast(constant(y), constant(av))->val;
                double s = 0;
                for (int64_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
                return s;
            },
            a0);
        check_close(aa->grad, fd, 1e-6);
    }
}

TEST_CASE("chw/rows permutations are inverse and differentiable") {
    Rng rng(16);
    Tensor x = random_tensor({3, 2, 4}, rng);
    Var v = constant(x);
    Var back = rows_to_chw(chw_to_rows(v), 3, 2, 4);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(back->val[i] == x[i]);
    grad_check([](const Var& t) { return sum(mul(chw_to_rows(t), chw_to_rows(t))); }, x);
}

TEST_CASE("conv2d gradients w.r.t. input, weight and bias") {
    Rng rng(17);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b0 = random_tensor({3}, rng);

    grad_check([&](const Var& v) {
        Var c = conv2d(v, constant(w0), constant(b0), 1, 1);
        return sum(mul(c, c));
    },
               x, 1e-5);

    Var xv = constant(x), w = leaf(w0), b = leaf(b0);
    Var out = sum(mul(conv2d(xv, w, b, 1, 1), conv2d(xv, w, b, 1, 1)));
    backward(out);
    auto evalw = [&](const Tensor& wv) {
        Tensor m = conv2d(constant(x), constant(wv), constant(b0), 1, 1)->val;
        double s = 0;
        for (int64_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
        return s;
    };
    check_close(w->grad, numeric_grad(evalw, w0), 1e-5);

    // strided, unpadded (patch-embedding shape)
    Tensor xs = random_tensor({3, 8, 8}, rng);
    Tensor ws = random_tensor({4, 3, 4, 4}, rng, -0.5, 0.5);
    grad_check([&](const Var& v) {
        Var c = conv2d(v, constant(ws), constant(Tensor::zeros({4})), 4, 0);
        return sum(mul(c, c));
    },
               xs, 1e-5);
}

TEST_CASE("attention_blocks matches direct computation and differentiates") {
    Rng rng(18);
    const int n = 8, c = 4;
    Tensor q0 = random_tensor({n, c}, rng);
    Tensor k0 = random_tensor({n, c}, rng);
    Tensor v0 = random_tensor({n, c}, rng);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));

    // single block, single head: compare against explicit loops
    Tensor out = attention_blocks(constant(q0), constant(k0), constant(v0), n, 1, scale)->val;
    for (int i = 0; i < n; ++i) {
        std::vector<double> logits(n);
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int d = 0; d < c; ++d) s += q0.at2(i, d) * k0.at2(j, d);
            logits[j] = s * scale;
            mx = std::max(mx, logits[j]);
        }
        double z = 0;
        for (int j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
        for (int d = 0; d < c; ++d) {
            double acc = 0;
            for (int j = 0; j < n; ++j) acc += std::exp(logits[j] - mx) / z * v0.at2(j, d);
            CHECK(out.at2(i, d) == doctest::Approx(acc).epsilon(1e-12));
        }
    }

    // gradient through q, k, v (blocks of 4, 2 heads)
    auto build = [&](const Var& q, const Var& k, const Var& v) {
        Var a = attention_blocks(q, k, v, 4, 2, scale);
        return sum(mul(a, a));
    };
    Var q = leaf(q0), k = leaf(k0), v = leaf(v0);
    backward(build(q, k, v));
    auto evalq = [&](const Tensor& t) { return build(constant(t), constant(k0), constant(v0))->val[0]; };
    auto evalk = [&](const Tensor& t) { return build(constant(q0), constant(t), constant(v0))->val[0]; };
    auto evalv = [&](const Tensor& t) { return build(constant(q0), constant(k0), constant(t))->val[0]; };
    check_close(q->grad, numeric_grad(evalq, q0), 1e-5);
    check_close(k->grad, numeric_grad(evalk, k0), 1e-5);
    check_close(v->grad, numeric_grad(evalv, v0), 1e-5);
}

TEST_CASE("shared nodes accumulate gradients from all consumers") {
    Tensor x0({2}, {3.0, -1.0});
    Var x = leaf(x0);
    Var y = add(mul(x, x), mul_scalar(x, 2.0));  // x^2 + 2x, elementwise then summed
    backward(sum(y));
    CHECK(x->grad[0] == doctest::Approx(2 * 3.0 + 2.0));
    CHECK(x->grad[1] == doctest::Approx(2 * -1.0 + 2.0));
}
