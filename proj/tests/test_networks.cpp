#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "awmp/networks.hpp"
#include "awmp/rng.hpp"

using namespace awmp;

TEST_CASE("all-zero weights forward to the bias") {
    Rng rng(1);
    MlpParams p = MlpParams::make("t", 3, {5, 5}, 2, Head::linear, rng);
    for (Tensor& w : p.weights) w.fill(0.0);
    p.biases[0].fill(0.3);
    p.biases[1].fill(-0.7);
    p.biases[2] = Tensor::row({1.5, -2.5});
    const std::vector<double> out = p.forward1(std::vector<double>{9.0, -4.0, 2.0});
    REQUIRE(out[0] == Catch::Approx(1.5));
    REQUIRE(out[1] == Catch::Approx(-2.5));
}

TEST_CASE("softmax head lands on the simplex") {
    Rng rng(2);
    MlpParams p = MlpParams::make("prior", 4, {8}, 5, Head::softmax, rng);
    Rng xr(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(4);
        for (double& v : x) v = xr.uniform(-2, 2);
        const std::vector<double> out = p.forward1(x);
        double sum = 0.0;
        for (double v : out) {
            REQUIRE(v >= 0.0);
            sum += v;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("gaussian head clamps log-std columns") {
    Rng rng(4);
    MlpParams p = MlpParams::make("pol", 2, {4}, 4, Head::gaussian, rng);  // da=1, O=2? layout: 2 means + 2 logstds
    p.weights[1].fill(0.0);
    p.biases[1] = Tensor::row({50.0, -50.0, 50.0, -50.0});
    const std::vector<double> out = p.forward1(std::vector<double>{0.1, 0.2});
    REQUIRE(out[0] == 50.0);   // means untouched
    REQUIRE(out[1] == -50.0);
    REQUIRE(out[2] == kLogStdMax);
    REQUIRE(out[3] == kLogStdMin);
}

TEST_CASE("tape forward equals plain forward") {
    Rng rng(5);
    MlpParams p = MlpParams::make("q", 4, {16, 16}, 1, Head::linear, rng);
    Tensor x = Tensor::zeros({7, 4});
    Rng xr(6);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = xr.uniform(-1, 1);
    const Tensor plain = p.forward(x);
    ad::Tape tape;
    std::vector<ad::Var> leaves = p.register_leaves(tape);
    const Tensor& taped = tape.value(p.forward_tape(tape, leaves, tape.constant(x)));
    for (std::size_t i = 0; i < plain.size(); ++i) REQUIRE(plain[i] == taped[i]);
}

TEST_CASE("mlp gradient through two hidden layers checks out") {
    Rng rng(7);
    MlpParams p = MlpParams::make("q", 3, {6, 6}, 1, Head::linear, rng);
    Tensor x = Tensor::zeros({5, 3});
    Rng xr(8);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = xr.uniform(-1, 1);

    ad::Tape tape;
    std::vector<ad::Var> leaves = p.register_leaves(tape);
    ad::Var loss = tape.mean(tape.square(p.forward_tape(tape, leaves, tape.constant(x))));
    tape.backward(loss);
    std::vector<Tensor> analytic = p.collect_grads(tape, leaves);

    std::vector<Tensor*> params;
    p.for_each_param([&](Tensor& t) { params.push_back(&t); });
    auto eval = [&]() {
        ad::Tape t;
        std::vector<ad::Var> l = p.register_leaves(t);
        return t.value(t.mean(t.square(p.forward_tape(t, l, t.constant(x))))).item();
    };
    REQUIRE(ad::grad_check(eval, params, analytic, 1e-5) < 1e-4);
}

TEST_CASE("width mismatch is rejected") {
    Rng rng(9);
    MlpParams p = MlpParams::make("q", 3, {4}, 1, Head::linear, rng);
    Tensor bad = Tensor::zeros({2, 5});
    REQUIRE_THROWS_WITH(p.forward(bad), Catch::Matchers::ContainsSubstring("q"));
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    Rng rng(10);
    MlpParams p = MlpParams::make("n", 2, {3}, 1, Head::linear, rng);
    const MlpParams before = p;
    AdamState st = AdamState::make(p);
    std::vector<Tensor> zero_grads;
    p.for_each_param([&](Tensor& t) { zero_grads.push_back(Tensor::zeros(t.shape())); });
    adam_step(st, p, zero_grads);
    for (std::size_t l = 0; l < p.weights.size(); ++l)
        for (std::size_t i = 0; i < p.weights[l].size(); ++i)
            REQUIRE(p.weights[l][i] == before.weights[l][i]);
}

TEST_CASE("first adam step moves by about lr times sign of gradient") {
    Rng rng(11);
    MlpParams p = MlpParams::make("n", 1, {}, 1, Head::linear, rng);
    const double w0 = p.weights[0][0];
    AdamState st = AdamState::make(p, 3e-4);
    std::vector<Tensor> grads = {Tensor::matrix(1, 1, {7.3}), Tensor::row({-0.02})};
    adam_step(st, p, grads);
    REQUIRE(p.weights[0][0] - w0 == Catch::Approx(-3e-4).epsilon(1e-4));
    const double b_delta = p.biases[0][0] - 0.0;
    (void)b_delta;  // bias moved +lr-ish; direction check below
    REQUIRE(p.weights[0][0] < w0);
}

TEST_CASE("adam drives x^2 to zero, convergence step frozen from a reference run") {
    // With lr 3e-4 the per-step movement is about the learning rate, so from
    // x = 1 the first |x| < 1e-3 crossing lands near step 3,334; 2,000 steps
    // only reach ~0.4. Frozen expectations from running this very loop.
    MlpParams p;
    p.name = "x";
    p.weights.push_back(Tensor::matrix(1, 1, {1.0}));
    p.biases.push_back(Tensor::row({0.0}));
    AdamState st = AdamState::make(p, 3e-4);
    std::size_t first_below = 0;
    double at_2000 = 0.0;
    for (std::size_t step = 1; step <= 6000; ++step) {
        const double x = p.weights[0][0];
        std::vector<Tensor> grads = {Tensor::matrix(1, 1, {2.0 * x}), Tensor::row({0.0})};
        adam_step(st, p, grads);
        if (step == 2000) at_2000 = std::fabs(p.weights[0][0]);
        if (!first_below && std::fabs(p.weights[0][0]) < 1e-3) first_below = step;
    }
    REQUIRE(first_below > 2000);     // 2k steps cannot cover distance 1 at lr 3e-4
    REQUIRE(first_below <= 4000);
    REQUIRE(at_2000 < 0.5);
    REQUIRE(std::fabs(p.weights[0][0]) < 1e-3);
}

TEST_CASE("adam rejects non-finite gradients naming the network") {
    Rng rng(12);
    MlpParams p = MlpParams::make("badnet", 1, {}, 1, Head::linear, rng);
    AdamState st = AdamState::make(p);
    std::vector<Tensor> grads = {Tensor::matrix(1, 1, {std::nan("")}), Tensor::row({0.0})};
    REQUIRE_THROWS_WITH(adam_step(st, p, grads), Catch::Matchers::ContainsSubstring("badnet"));
}

TEST_CASE("polyak update blends toward online") {
    Rng rng(13);
    SECTION("tau = 1 copies") {
        TargetPair pair = TargetPair::make(MlpParams::make("n", 2, {3}, 1, Head::linear, rng), 1.0);
        pair.online.weights[0].fill(4.2);
        pair.update();
        for (std::size_t i = 0; i < pair.target.weights[0].size(); ++i)
            REQUIRE(pair.target.weights[0][i] == 4.2);
    }
    SECTION("tau_V = 0.005: 0 toward 1 gives 0.005") {
        MlpParams online = MlpParams::make("n", 1, {}, 1, Head::linear, rng);
        online.weights[0][0] = 1.0;
        MlpParams target = online;
        target.weights[0][0] = 0.0;
        polyak_update(online, target, 0.005);
        REQUIRE(target.weights[0][0] == Catch::Approx(0.005).margin(1e-15));
    }
    SECTION("tau_Q = 0.001: 2 toward 0 gives 1.998") {
        MlpParams online = MlpParams::make("n", 1, {}, 1, Head::linear, rng);
        online.weights[0][0] = 0.0;
        MlpParams target = online;
        target.weights[0][0] = 2.0;
        polyak_update(online, target, 0.001);
        REQUIRE(target.weights[0][0] == Catch::Approx(1.998).margin(1e-15));
    }
}

TEST_CASE("polyak is a contraction toward the online parameters") {
    Rng rng(14);
    MlpParams online = MlpParams::make("n", 3, {4}, 2, Head::linear, rng);
    MlpParams target = MlpParams::make("n", 3, {4}, 2, Head::linear, rng);
    const double tau = 0.13;
    std::vector<double> before;
    for (std::size_t l = 0; l < online.weights.size(); ++l)
        for (std::size_t i = 0; i < online.weights[l].size(); ++i)
            before.push_back(target.weights[l][i] - online.weights[l][i]);
    polyak_update(online, target, tau);
    std::size_t k = 0;
    for (std::size_t l = 0; l < online.weights.size(); ++l)
        for (std::size_t i = 0; i < online.weights[l].size(); ++i) {
            const double after = target.weights[l][i] - online.weights[l][i];
            REQUIRE(std::fabs(after) ==
                    Catch::Approx((1.0 - tau) * std::fabs(before[k++])).margin(1e-12));
        }
}

TEST_CASE("checkpoint round-trip is bit exact") {
    Rng rng(15);
    MlpParams a = MlpParams::make("policy", 3, {8, 8}, 4, Head::gaussian, rng, 1e-2);
    MlpParams b = MlpParams::make("q1", 4, {8}, 1, Head::linear, rng);
    std::ostringstream os(std::ios::binary);
    save_networks(os, {&a, &b});
    std::istringstream is(os.str(), std::ios::binary);
    const std::vector<MlpParams> loaded = load_networks(is);
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].name == "policy");
    REQUIRE(loaded[0].head == Head::gaussian);
    REQUIRE(loaded[1].name == "q1");
    for (std::size_t l = 0; l < a.weights.size(); ++l) {
        for (std::size_t i = 0; i < a.weights[l].size(); ++i)
            REQUIRE(loaded[0].weights[l][i] == a.weights[l][i]);
        for (std::size_t i = 0; i < a.biases[l].size(); ++i)
            REQUIRE(loaded[0].biases[l][i] == a.biases[l][i]);
    }
}

TEST_CASE("checkpoint loader rejects garbage") {
    std::istringstream is("not a checkpoint at all", std::ios::binary);
    REQUIRE_THROWS_WITH(load_networks(is), Catch::Matchers::ContainsSubstring("magic"));
}
