#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "awmp/autodiff.hpp"
#include "awmp/rng.hpp"
#include "awmp/tensor.hpp"

using namespace awmp;
using ad::Tape;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("forward op basics") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(0.0));
    REQUIRE(tape.value(tape.tanh(x)).item() == 0.0);

    Var logits = tape.leaf(Tensor::matrix(1, 2, {0.0, 0.0}));
    const Tensor& sm = tape.value(tape.softmax_rows(logits));
    REQUIRE(sm[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(sm[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax shift invariance") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const double x1 = rng.uniform(-5, 5), x2 = rng.uniform(-5, 5), c = rng.uniform(-50, 50);
        Tape tape;
        Var a = tape.leaf(Tensor::matrix(1, 2, {x1, x2}));
        Var b = tape.leaf(Tensor::matrix(1, 2, {c + x1, c + x2}));
        const Tensor& sa = tape.value(tape.softmax_rows(a));
        const Tensor& sb = tape.value(tape.softmax_rows(b));
        REQUIRE(sa[0] == Catch::Approx(sb[0]).margin(1e-12));
        REQUIRE(sa[1] == Catch::Approx(sb[1]).margin(1e-12));
    }
}

TEST_CASE("analytic gradients of simple ops") {
    SECTION("d(x^2)/dx at 3 is 6") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(3.0));
        Var y = tape.square(x);
        tape.backward(y);
        REQUIRE(tape.grad(x).item() == Catch::Approx(6.0));
    }
    SECTION("d tanh/dx at 0 is 1") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(0.0));
        tape.backward(tape.tanh(x));
        REQUIRE(tape.grad(x).item() == Catch::Approx(1.0));
    }
}

TEST_CASE("two-layer MLP gradients match finite differences") {
    Rng rng(11);
    Tensor w1 = random_tensor({3, 8}, rng);
    Tensor b1 = random_tensor({8}, rng);
    Tensor w2 = random_tensor({8, 1}, rng);
    Tensor b2 = random_tensor({1}, rng);
    const Tensor x = random_tensor({4, 3}, rng);

    auto build = [&](Tape& tape, std::vector<Var>& leaves) {
        leaves.push_back(tape.leaf(w1));
        leaves.push_back(tape.leaf(b1));
        leaves.push_back(tape.leaf(w2));
        leaves.push_back(tape.leaf(b2));
        Var h = tape.tanh(tape.add(tape.matmul(tape.constant(x), leaves[0]), leaves[1]));
        Var out = tape.add(tape.matmul(h, leaves[2]), leaves[3]);
        return tape.mean(tape.square(out));
    };

    Tape tape;
    std::vector<Var> leaves;
    Var loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    for (Var v : leaves) analytic.push_back(tape.grad(v));

    auto eval = [&]() {
        Tape t2;
        std::vector<Var> l2;
        return t2.value(build(t2, l2)).item();
    };
    const double err = ad::grad_check(eval, {&w1, &b1, &w2, &b2}, analytic, 1e-5);
    REQUIRE(err < 1e-4);
}

TEST_CASE("grad_check on sum of squares is tight") {
    Rng rng(3);
    Tensor p = random_tensor({5}, rng);
    Tape tape;
    Var leaf = tape.leaf(p);
    Var loss = tape.sum(tape.square(leaf));
    tape.backward(loss);
    auto eval = [&]() {
        Tape t;
        return t.value(t.sum(t.square(t.leaf(p)))).item();
    };
    REQUIRE(ad::grad_check(eval, {&p}, {tape.grad(leaf)}, 1e-5) < 1e-8);
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
    Rng rng(19);
    const Tensor p0 = random_tensor({6}, rng);

    Tape t1;
    Var x1 = t1.leaf(p0);
    Var la = t1.sum(t1.square(x1));
    t1.backward(la);
    const Tensor ga = t1.grad(x1);

    Tape t2;
    Var x2 = t2.leaf(p0);
    Var lb = t2.mean(t2.exp(x2));
    t2.backward(lb);
    const Tensor gb = t2.grad(x2);

    Tape t3;
    Var x3 = t3.leaf(p0);
    Var lsum = t3.add(t3.sum(t3.square(x3)), t3.mean(t3.exp(x3)));
    t3.backward(lsum);
    for (std::size_t i = 0; i < p0.size(); ++i)
        REQUIRE(t3.grad(x3)[i] == Catch::Approx(ga[i] + gb[i]).margin(1e-12));
}

TEST_CASE("log-softmax exponentiates back to softmax") {
    Rng rng(23);
    Tensor logits = random_tensor({5, 7}, rng, 3.0);
    Tape tape;
    Var x = tape.leaf(logits);
    const Tensor& direct = tape.value(tape.softmax_rows(x));
    const Tensor& via_log = tape.value(tape.exp(tape.log_softmax_rows(x)));
    for (std::size_t i = 0; i < direct.size(); ++i)
        REQUIRE(direct[i] == Catch::Approx(via_log[i]).margin(1e-12));
}

TEST_CASE("repeated backward over one tape is bit-identical") {
    Rng rng(29);
    Tensor p = random_tensor({4, 4}, rng);
    Tape tape;
    Var x = tape.leaf(p);
    Var loss = tape.mean(tape.square(tape.tanh(tape.matmul(x, x))));
    tape.backward(loss);
    const Tensor g1 = tape.grad(x);
    tape.backward(loss);
    const Tensor g2 = tape.grad(x);
    for (std::size_t i = 0; i < g1.size(); ++i) REQUIRE(g1[i] == g2[i]);
}

TEST_CASE("shape errors name the op") {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
    Var b = tape.leaf(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
    REQUIRE_THROWS_WITH(tape.matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));

    Var c = tape.leaf(Tensor::matrix(3, 2, std::vector<double>(6, 1.0)));
    REQUIRE_THROWS_WITH(tape.add(a, c), Catch::Matchers::ContainsSubstring("add"));

    REQUIRE_THROWS_WITH(tape.backward(a), Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("leaves off the path get exact zero gradients") {
    Tape tape;
    Var used = tape.leaf(Tensor::scalar(2.0));
    Var unused = tape.leaf(Tensor::scalar(5.0));
    tape.backward(tape.square(used));
    REQUIRE(tape.grad(unused).item() == 0.0);
}

TEST_CASE("broadcast add/mul match dense computation and FD gradients") {
    Rng rng(31);
    const std::size_t B = 4, N = 3;
    Tensor big = random_tensor({B, N}, rng);
    Tensor row = random_tensor({N}, rng);
    Tensor col = random_tensor({B, 1}, rng);

    auto loss_of = [&](Tape& tape, std::vector<Var>& leaves) {
        leaves.push_back(tape.leaf(big));
        leaves.push_back(tape.leaf(row));
        leaves.push_back(tape.leaf(col));
        Var z = tape.mul(tape.add(leaves[0], leaves[1]), leaves[2]);
        return tape.sum(tape.square(z));
    };
    Tape tape;
    std::vector<Var> leaves;
    Var loss = loss_of(tape, leaves);

    // dense check of the forward value
    double expect = 0.0;
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t j = 0; j < N; ++j) {
            const double z = (big(r, j) + row[j]) * col[r];
            expect += z * z;
        }
    REQUIRE(tape.value(loss).item() == Catch::Approx(expect).margin(1e-12));

    tape.backward(loss);
    std::vector<Tensor> analytic = {tape.grad(leaves[0]), tape.grad(leaves[1]),
                                    tape.grad(leaves[2])};
    auto eval = [&]() {
        Tape t;
        std::vector<Var> l;
        return t.value(loss_of(t, l)).item();
    };
    REQUIRE(ad::grad_check(eval, {&big, &row, &col}, analytic, 1e-6) < 1e-6);
}

TEST_CASE("min routes gradient to the smaller input, first on ties") {
    Tape tape;
    Var a = tape.leaf(Tensor::row({1.0, 5.0, 2.0}));
    Var b = tape.leaf(Tensor::row({2.0, 3.0, 2.0}));
    tape.backward(tape.sum(tape.min(a, b)));
    REQUIRE(tape.grad(a)[0] == 1.0);
    REQUIRE(tape.grad(b)[0] == 0.0);
    REQUIRE(tape.grad(a)[1] == 0.0);
    REQUIRE(tape.grad(b)[1] == 1.0);
    REQUIRE(tape.grad(a)[2] == 1.0);  // tie
    REQUIRE(tape.grad(b)[2] == 0.0);
}

TEST_CASE("slice, concat, logsumexp and reductions round-trip with FD") {
    Rng rng(37);
    Tensor m = random_tensor({3, 6}, rng, 2.0);
    auto build = [&](Tape& tape, std::vector<Var>& leaves) {
        leaves.push_back(tape.leaf(m));
        Var left = tape.slice_cols(leaves[0], 0, 3);
        Var right = tape.slice_cols(leaves[0], 3, 6);
        Var glued = tape.concat_cols({tape.softplus(left), tape.atanh(tape.clamp(right, -0.9, 0.9))});
        Var lse = tape.logsumexp_rows(glued);
        return tape.add(tape.mean(lse), tape.sum(tape.col_sum(tape.relu(glued))));
    };
    Tape tape;
    std::vector<Var> leaves;
    Var loss = build(tape, leaves);
    tape.backward(loss);
    auto eval = [&]() {
        Tape t;
        std::vector<Var> l;
        return t.value(build(t, l)).item();
    };
    // clamp kinks sit away from the sampled values, so FD stays clean
    REQUIRE(ad::grad_check(eval, {&m}, {tape.grad(leaves[0])}, 1e-6) < 1e-5);
}

TEST_CASE("logsumexp is stable for large inputs") {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix(1, 3, {1000.0, 1000.0, 1000.0}));
    REQUIRE(tape.value(tape.logsumexp_rows(x))[0] ==
            Catch::Approx(1000.0 + std::log(3.0)).margin(1e-9));
}
