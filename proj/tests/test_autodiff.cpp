// Finite-difference verification of every differentiable op, and behavior
// of the gradient_check harness itself.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mtdnn/gradcheck.hpp"
#include "mtdnn/ops.hpp"

using namespace mtdnn;
using Catch::Approx;

namespace {

void fill_normal(Param<double>& p, uint64_t seed, double sigma = 1.0) {
    Rng rng(seed);
    p.fill_normal(rng, sigma);
}

}  // namespace

TEST_CASE("gradient_check agrees with the closed form on a quadratic") {
    Param<double> theta("theta", {8});
    fill_normal(theta, 1);
    const auto loss = [&] {
        Tape<double> tape;
        auto x = tape.leaf(theta);
        auto y = scale(sum_all(mul(x, x)), 0.5);
        tape.backward(y);
        return y.item();
    };
    const auto fwd = [&] {
        double s = 0;
        for (double v : theta.value) s += v * v;
        return 0.5 * s;
    };
    auto report = gradient_check({&theta}, loss, fwd, {1e-5, 32, 0});
    CHECK(report.max_rel_err < 1e-8);
    CHECK(report.total_skipped == 0);
    // closed form: gradient equals theta itself
    loss();
    // grads accumulated twice (once in gradient_check, once here)
    for (size_t i = 0; i < theta.value.size(); ++i)
        CHECK(theta.grad[i] == Approx(2.0 * theta.value[i]));
}

TEST_CASE("gradient_check reports relu kinks as skipped") {
    Param<double> theta("theta", {3});
    theta.value = {0.0, 1.0, -1.0};  // coordinate 0 sits on the kink
    const auto analytic = [&] {
        Tape<double> tape;
        auto x = tape.leaf(theta);
        auto y = sum_all(relu(x));
        tape.backward(y);
        return y.item();
    };
    const auto fwd = [&] {
        Tensor<double> x = Tensor<double>::from({3}, theta.value);
        return sum_all(relu(x)).item();
    };
    auto report = gradient_check({&theta}, analytic, fwd, {1e-5, 32, 0});
    CHECK(report.total_skipped == 1);
    CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("gradient_check rejects an active dropout") {
    Param<double> theta("theta", {4});
    fill_normal(theta, 2);
    Rng drop_rng(0);
    const auto fwd = [&] {
        Tape<double> tape;
        auto x = tape.leaf(theta);
        auto y = sum_all(dropout(x, 0.5, drop_rng, Mode::Train));
        return y.item();
    };
    CHECK_THROWS_AS(gradient_check({&theta}, fwd, fwd, {1e-5, 32, 0}), ContractError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Param<double> a("a", {3, 4});
    Param<double> b("b", {4, 2});
    fill_normal(a, 10);
    fill_normal(b, 11);
    const auto analytic = [&] {
        Tape<double> tape;
        auto la = tape.leaf(a);
        auto lb = tape.leaf(b);
        auto y = sum_all(matmul(la, lb));
        tape.backward(y);
        return y.item();
    };
    const auto fwd = [&] {
        auto ta = Tensor<double>::from(a.shape, a.value);
        auto tb = Tensor<double>::from(b.shape, b.value);
        return sum_all(matmul(ta, tb)).item();
    };
    auto report = gradient_check({&a, &b}, analytic, fwd, {1e-5, 64, 3});
    CHECK(report.max_rel_err < 1e-4);
}

// One composite touching most ops: layer_norm(gelu(x W1 + b1)) W2, soft and
// hard losses, softmax, divergences, slicing, stacking.
TEST_CASE("composite graph gradients match finite differences") {
    Param<double> w1("w1", {6, 8});
    Param<double> b1("b1", {8});
    Param<double> g("g", {8});
    Param<double> bLn("bln", {8});
    Param<double> w2("w2", {8, 3});
    fill_normal(w1, 21, 0.7);
    fill_normal(b1, 22, 0.5);
    fill_normal(g, 23, 0.3);
    for (auto& v : g.value) v += 1.0;
    fill_normal(bLn, 24, 0.3);
    fill_normal(w2, 25, 0.7);
    auto x = Tensor<double>::uninit({4, 6});
    Rng xr(31);
    for (auto& v : x.vec()) v = xr.normal(0, 1);

    std::vector<Param<double>*> params = {&w1, &b1, &g, &bLn, &w2};
    const auto build = [&](Tape<double>* tape) {
        Tensor<double> tw1 = tape ? tape->leaf(w1) : Tensor<double>::from(w1.shape, w1.value);
        Tensor<double> tb1 = tape ? tape->leaf(b1) : Tensor<double>::from(b1.shape, b1.value);
        Tensor<double> tg = tape ? tape->leaf(g) : Tensor<double>::from(g.shape, g.value);
        Tensor<double> tbl = tape ? tape->leaf(bLn) : Tensor<double>::from(bLn.shape, bLn.value);
        Tensor<double> tw2 = tape ? tape->leaf(w2) : Tensor<double>::from(w2.shape, w2.value);
        auto h = layer_norm(gelu(add(matmul(x, tw1), tb1)), tg, tbl, 1e-5);
        auto logits = matmul(h, tw2);
        auto ce = cross_entropy(logits, {0, 2, 1, 0});
        auto probs = softmax(logits, 1);
        auto row0 = reshape(select_row(probs, 0), {1, 3});
        auto row1 = reshape(select_row(probs, 1), {1, 3});
        auto skl = divergence(Divergence::SymmetricKl, row0, row1);
        auto pooled = mtdnn::tanh(select_row(h, 0));
        auto sliced = slice_cols(h, 2, 5);
        return add(add(ce, scale(skl, 0.3)), scale(mean_all(sliced), 0.1) );
    };
    const auto analytic = [&] {
        Tape<double> tape;
        auto y = build(&tape);
        tape.backward(y);
        return y.item();
    };
    const auto fwd = [&] { return build(nullptr).item(); };
    auto report = gradient_check(params, analytic, fwd, {1e-5, 48, 7});
    INFO("max rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("stack, concat and lstm-style gate gradients") {
    // exercises the op set the LSTM cell is built from
    Param<double> a("a", {6});
    Param<double> b("b", {6});
    fill_normal(a, 41);
    fill_normal(b, 42);
    const auto build = [&](Tape<double>* tape) {
        Tensor<double> la = tape ? tape->leaf(a) : Tensor<double>::from(a.shape, a.value);
        Tensor<double> lb = tape ? tape->leaf(b) : Tensor<double>::from(b.shape, b.value);
        auto half = [](const Tensor<double>& v, int from, int to) {
            return reshape(slice_cols(reshape(v, {1, v.shape[0]}), from, to), {to - from});
        };
        auto gate = sigmoid(half(la, 0, 3));
        auto cand = mtdnn::tanh(half(la, 3, 6));
        auto c = mul(gate, cand);
        auto h = concat(c, mul(sigmoid(half(lb, 0, 3)), mtdnn::tanh(half(lb, 3, 6))));
        auto m = stack_rows<double>({h, h});
        return mean_all(mul(m, m));
    };
    const auto analytic = [&] {
        Tape<double> tape;
        auto y = build(&tape);
        tape.backward(y);
        return y.item();
    };
    const auto fwd = [&] { return build(nullptr).item(); };
    auto report = gradient_check({&a, &b}, analytic, fwd, {1e-5, 32, 9});
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("dropout scales kept entries and keeps gradients aligned") {
    Param<double> x("x", {1000});
    x.fill(1.0);
    Rng rng(5);
    Tape<double> tape;
    auto lx = tape.leaf(x);
    auto y = dropout(lx, 0.25, rng, Mode::Train);
    int kept = 0;
    for (double v : y.vec()) {
        if (v != 0.0) {
            CHECK(v == Approx(1.0 / 0.75));
            ++kept;
        }
    }
    CHECK(kept > 600);
    CHECK(kept < 900);
    tape.backward(mean_all(y));
    for (size_t i = 0; i < x.value.size(); ++i) {
        if (y.vec()[i] == 0.0)
            CHECK(x.grad[i] == 0.0);
        else
            CHECK(x.grad[i] == Approx(1.0 / 0.75 / 1000.0));
    }

    // eval mode is the identity
    Rng rng2(5);
    auto ident = dropout(Tensor<double>::from({3}, {1, 2, 3}), 0.9, rng2, Mode::Eval);
    CHECK(ident.vec() == std::vector<double>{1, 2, 3});
}
