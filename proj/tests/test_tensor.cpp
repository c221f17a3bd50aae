#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mtdnn/ops.hpp"
#include "mtdnn/optim.hpp"

using namespace mtdnn;
using Catch::Approx;

TEST_CASE("matmul identity and hand arithmetic") {
    auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto out = matmul(eye, a);
    CHECK(out.vec() == std::vector<double>{1, 2, 3, 4});

    auto ones = Tensor<double>::from({2, 1}, {1, 1});
    auto prod = matmul(a, ones);
    CHECK(prod.vec() == std::vector<double>{3, 7});
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("elementwise basics") {
    auto z = Tensor<double>::from({1}, {0.0});
    CHECK(gelu(z).item() == Approx(0.0).margin(1e-15));

    auto r = relu(Tensor<double>::from({2}, {-1, 2}));
    CHECK(r.vec() == std::vector<double>{0, 2});

    // tanh gradient at 0 is 1
    Tape<double> tape;
    Param<double> x("x", {1});
    x.value = {0.0};
    auto lx = tape.leaf(x);
    auto y = mtdnn::tanh(lx);
    tape.backward(y);
    CHECK(x.grad[0] == Approx(1.0));
}

TEST_CASE("bias broadcast add") {
    auto m = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2}, {10, 20});
    auto out = add(m, b);
    CHECK(out.vec() == std::vector<double>{11, 22, 13, 24});

    auto bad = Tensor<double>::from({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(m, bad), ShapeError);
}

TEST_CASE("softmax values and shift invariance") {
    auto s = softmax(Tensor<double>::from({2}, {0, 0}), 0);
    CHECK(s.vec()[0] == Approx(0.5));
    CHECK(s.vec()[1] == Approx(0.5));

    auto t = softmax(
        Tensor<double>::from({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
    CHECK(t.vec()[0] == Approx(1.0 / 6));
    CHECK(t.vec()[1] == Approx(1.0 / 3));
    CHECK(t.vec()[2] == Approx(1.0 / 2));

    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.normal(0, 3);
        const double c = rng.normal(0, 10);
        auto base = softmax(Tensor<double>::from({5}, v), 0);
        for (auto& x : v) x += c;
        auto shifted = softmax(Tensor<double>::from({5}, v), 0);
        double sum = 0;
        for (int i = 0; i < 5; ++i) {
            CHECK(shifted.vec()[size_t(i)] == Approx(base.vec()[size_t(i)]).margin(1e-12));
            CHECK(base.vec()[size_t(i)] > 0);
            CHECK(base.vec()[size_t(i)] < 1);
            sum += base.vec()[size_t(i)];
        }
        CHECK(sum == Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("softmax rows of a matrix each sum to one") {
    Rng rng(3);
    std::vector<double> v(12);
    for (auto& x : v) x = rng.normal(0, 2);
    auto p = softmax(Tensor<double>::from({3, 4}, v), 1);
    for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) s += p.vec()[size_t(i) * 4 + j];
        CHECK(s == Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("layer_norm examples") {
    auto gain = Tensor<double>::from({3}, {1, 1, 1});
    auto bias = Tensor<double>::zeros({3});
    auto out = layer_norm(Tensor<double>::from({1, 3}, {5, 5, 5}), gain, bias, 1e-5);
    for (double v : out.vec()) CHECK(v == Approx(0.0).margin(1e-9));

    auto g2 = Tensor<double>::from({2}, {1, 1});
    auto b2 = Tensor<double>::zeros({2});
    auto out2 = layer_norm(Tensor<double>::from({1, 2}, {1, 3}), g2, b2, 1e-12);
    CHECK(out2.vec()[0] == Approx(-1.0).margin(1e-5));
    CHECK(out2.vec()[1] == Approx(1.0).margin(1e-5));

    // normalized rows have mean 0, variance 1
    Rng rng(11);
    std::vector<double> v(4 * 8);
    for (auto& x : v) x = rng.normal(1.5, 2.0);
    auto g8 = Tensor<double>::from({8}, std::vector<double>(8, 1.0));
    auto b8 = Tensor<double>::zeros({8});
    auto norm = layer_norm(Tensor<double>::from({4, 8}, v), g8, b8, 1e-9);
    for (int i = 0; i < 4; ++i) {
        double mean = 0, var = 0;
        for (int j = 0; j < 8; ++j) mean += norm.vec()[size_t(i) * 8 + j];
        mean /= 8;
        for (int j = 0; j < 8; ++j) {
            const double d = norm.vec()[size_t(i) * 8 + j] - mean;
            var += d * d;
        }
        var /= 8;
        CHECK(mean == Approx(0.0).margin(1e-5));
        CHECK(var == Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("gather_rows repetition, bounds, gradient accumulation") {
    auto table = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
    auto out = gather_rows(table, {0, 0});
    CHECK(out.vec() == std::vector<double>{1, 2, 1, 2});

    try {
        gather_rows(table, {0, 3});
        FAIL("expected IndexError");
    } catch (const IndexError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("position 1") != std::string::npos);
    }

    // repeated id accumulates both upstream rows
    Tape<double> tape;
    Param<double> tab("t", {3, 2});
    tab.value = {1, 2, 3, 4, 5, 6};
    auto lt = tape.leaf(tab);
    auto g = gather_rows(lt, {1, 1});
    auto s = sum_all(mul(g, Tensor<double>::from({2, 2}, {1, 2, 3, 4})));
    tape.backward(s);
    CHECK(tab.grad == std::vector<double>{0, 0, 4, 6, 0, 0});
}

TEST_CASE("cross_entropy hard and soft targets") {
    auto logits = Tensor<double>::zeros({1, 4});
    CHECK(cross_entropy(logits, {2}).item() == Approx(std::log(4.0)));

    // soft one-hot equals hard
    Rng rng(5);
    std::vector<double> v(6);
    for (auto& x : v) x = rng.normal(0, 2);
    auto lg = Tensor<double>::from({2, 3}, v);
    const double hard = cross_entropy(lg, {1, 2}).item();
    std::vector<double> rows = {0, 1, 0, 0, 0, 1};
    const double soft = cross_entropy_soft(lg, rows).item();
    CHECK(std::abs(hard - soft) < 1e-9);

    // saturated margin
    auto big = Tensor<double>::from({1, 3}, {30, 0, 0});
    CHECK(cross_entropy(big, {0}).item() < 1e-9);

    CHECK_THROWS_AS(cross_entropy(logits, {4}), IndexError);
    std::vector<double> bad_rows = {0.5, 0.2, 0.2, 0.0};  // sums to 0.9
    CHECK_THROWS_AS(cross_entropy_soft(Tensor<double>::zeros({1, 4}), bad_rows), ContractError);
}

TEST_CASE("divergence values") {
    CHECK(divergence(Divergence::Mse, Tensor<double>::from({1}, {0.0}),
                     Tensor<double>::from({1}, {2.0}))
              .item() == Approx(4.0));

    auto p = Tensor<double>::from({3}, {0.2, 0.3, 0.5});
    CHECK(divergence(Divergence::Kl, p, p).item() == Approx(0.0).margin(1e-12));

    auto one_hot = Tensor<double>::from({2}, {1.0, 0.0});
    auto uniform = Tensor<double>::from({2}, {0.5, 0.5});
    CHECK(divergence(Divergence::Kl, one_hot, uniform).item() == Approx(std::log(2.0)));

    // q floored at 1e-12: finite, never NaN
    const double skl = divergence(Divergence::SymmetricKl, one_hot, uniform).item();
    CHECK(std::isfinite(skl));
    CHECK(skl == Approx(std::log(2.0) + 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12)));
}

TEST_CASE("backward analytic examples") {
    // y = sum(x * x), x = [1,2,3] -> grad [2,4,6]
    Tape<double> tape;
    Param<double> x("x", {3});
    x.value = {1, 2, 3};
    auto lx = tape.leaf(x);
    auto y = sum_all(mul(lx, lx));
    tape.backward(y);
    CHECK(x.grad == std::vector<double>{2, 4, 6});

    // chain rule: tanh(2x) at x=0 -> grad 2
    Tape<double> t2;
    Param<double> x2("x", {1});
    x2.value = {0.0};
    auto l2 = t2.leaf(x2);
    auto y2 = mtdnn::tanh(scale(l2, 2.0));
    t2.backward(y2);
    CHECK(x2.grad[0] == Approx(2.0));
}

TEST_CASE("tape contracts") {
    Tape<double> tape;
    Param<double> x("x", {2});
    x.value = {1, 2};
    auto lx = tape.leaf(x);
    auto y = sum_all(lx);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), ContractError);  // single-use tape

    Tape<double> t2;
    auto l2 = t2.leaf(x);
    CHECK_THROWS_AS(t2.backward(l2), ContractError);  // non-scalar loss

    // operands from different tapes
    Tape<double> t3, t4;
    auto a = t3.leaf(x);
    auto b = t4.leaf(x);
    CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("forward ops stay finite on finite inputs") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> v(16);
        for (auto& x : v) x = rng.normal(0, 50);
        auto t = Tensor<double>::from({4, 4}, v);
        for (const auto& out :
             {relu(t), mtdnn::tanh(t), gelu(t), sigmoid(t), softmax(t, 1), matmul(t, t)}) {
            for (double x : out.vec()) REQUIRE(std::isfinite(x));
        }
    }
}

TEST_CASE("adam update rules") {
    Param<double> p("p", {2});
    p.value = {1.0, -1.0};
    Adam<double> opt({&p}, AdamConfig{});

    // zero gradient at t=1: parameters unchanged
    p.zero_grad();
    opt.step();
    CHECK(p.value == std::vector<double>{1.0, -1.0});

    // constant gradient at t=1: update is about -lr * sign(g)
    Param<double> q("q", {2});
    q.value = {0.0, 0.0};
    AdamConfig cfg;
    cfg.lr = 1e-3;
    Adam<double> opt2({&q}, cfg);
    q.grad = {0.5, -0.25};
    opt2.step();
    CHECK(q.value[0] == Approx(-1e-3).epsilon(1e-4));
    CHECK(q.value[1] == Approx(1e-3).epsilon(1e-4));

    // determinism: identical runs produce bitwise-identical parameters
    auto run = [] {
        Param<double> r("r", {3});
        r.value = {0.3, -0.2, 0.9};
        Adam<double> o({&r}, AdamConfig{});
        Rng rng(42);
        for (int i = 0; i < 50; ++i) {
            for (auto& g : r.grad) g = rng.normal(0, 1);
            o.step();
        }
        return r.value;
    };
    const auto a = run();
    const auto b = run();
    CHECK(a == b);
}
