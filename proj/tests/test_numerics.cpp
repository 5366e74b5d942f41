#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "smf/graph.hpp"
#include "smf/tensor.hpp"

using namespace smf;

namespace {

std::string thrown(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

Parameter randp(const std::string& name, std::vector<long> shape, uint64_t seed, double std = 0.5) {
    Parameter p(name, Tensor(std::move(shape)));
    Rng rng(seed);
    rng.fill_normal(p.value, 0.0, std);
    return p;
}

// Projects a node to a scalar through a fixed random tensor so gradient
// structure stays generic.
int project_to_scalar(Graph& g, int node, uint64_t seed) {
    Tensor w(g.value(node).shape);
    Rng rng(seed);
    rng.fill_normal(w, 0.0, 1.0);
    return g.sum(g.mul(node, g.input(std::move(w))));
}

}  // namespace

TEST_CASE("tensor shape/data consistency") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), Error);
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.row_width() == 3);
    CHECK(Tensor::scalar(4.5)[0] == 4.5);
    CHECK(Tensor::full({2}, 7.0)[1] == 7.0);
    CHECK(t.shape_str() == "[2,3]");
}

TEST_CASE("topk indices: descending order, ties to lower index") {
    std::vector<double> v = {1.0, 5.0, 5.0, 3.0, -2.0};
    auto idx = topk_indices(v, 3);
    CHECK(idx == std::vector<long>{1, 2, 3});
    CHECK(topk_indices(v, 5) == std::vector<long>{1, 2, 3, 0, 4});
    CHECK_THROWS_AS(topk_indices(v, 6), Error);
}

TEST_CASE("rng determinism and gaussian sanity") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    Rng c(7);
    double mean = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += c.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(mix_seed(1, "a") != mix_seed(1, "b"));
    CHECK(mix_seed(1, "a") != mix_seed(2, "a"));
}

TEST_CASE("silu at zero is zero") {
    Graph g;
    int x = g.input(Tensor({3}, {0.0, 1.0, -1.0}));
    int y = g.silu(x);
    CHECK(g.value(y)[0] == 0.0);
    CHECK(g.value(y)[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("softmax of a constant row is uniform") {
    Graph g;
    int y = g.softmax(g.input(Tensor({1, 3}, {2.5, 2.5, 2.5})));
    for (int i = 0; i < 3; ++i) CHECK(g.value(y)[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax additive mask removes masked entries") {
    Graph g;
    Tensor mask({1, 3}, {0.0, kNegInf, 0.0});
    int y = g.softmax(g.input(Tensor({1, 3}, {1.0, 100.0, 1.0})), mask);
    CHECK(g.value(y)[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.value(y)[1] == 0.0);
    CHECK(g.value(y)[2] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("matmul of ones blocks") {
    Graph g;
    int y = g.matmul(g.input(Tensor::full({2, 3}, 1.0)), g.input(Tensor::full({3, 2}, 1.0)));
    CHECK(g.value(y).shape == std::vector<long>{2, 2});
    for (int i = 0; i < 4; ++i) CHECK(g.value(y)[i] == 3.0);
}

TEST_CASE("shape errors name the op and shapes") {
    Graph g;
    int a = g.input(Tensor({2, 3}));
    int b = g.input(Tensor({4, 2}));
    auto msg = thrown([&] { (void)g.matmul(a, b); });
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
    msg = thrown([&] { (void)g.add(a, b); });
    CHECK(msg.find("add") != std::string::npos);
}

TEST_CASE("rmsnorm forward") {
    SUBCASE("zeros stay zero") {
        Graph g;
        int y = g.rmsnorm(g.input(Tensor({2, 4})), g.input(Tensor::full({4}, 1.0)), 1e-6);
        for (int i = 0; i < 8; ++i) CHECK(g.value(y)[i] == 0.0);
    }
    SUBCASE("scale invariance up to eps") {
        Tensor x({1, 4}, {0.3, -1.2, 0.7, 2.0});
        Graph g;
        int y1 = g.rmsnorm(g.input(x), g.input(Tensor::full({4}, 1.0)), 1e-12);
        for (double& v : x.data) v *= 37.5;
        int y2 = g.rmsnorm(g.input(x), g.input(Tensor::full({4}, 1.0)), 1e-12);
        for (int i = 0; i < 4; ++i) CHECK(g.value(y1)[i] == doctest::Approx(g.value(y2)[i]).epsilon(1e-9));
    }
    SUBCASE("hand-computed 2-vector") {
        // [3,4]/sqrt(mean(9+16)) = [3,4]/sqrt(12.5)
        Graph g;
        int y = g.rmsnorm(g.input(Tensor({1, 2}, {3.0, 4.0})), g.input(Tensor::full({2}, 1.0)), 1e-12);
        CHECK(g.value(y)[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-9));
        CHECK(g.value(y)[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-9));
    }
    SUBCASE("eps must be positive") {
        Graph g;
        int x = g.input(Tensor({1, 2}));
        int w = g.input(Tensor({2}));
        CHECK_THROWS_AS((void)g.rmsnorm(x, w, 0.0), Error);
        CHECK_THROWS_AS((void)g.rmsnorm(x, w, -1e-6), Error);
    }
}

TEST_CASE("cross entropy forward") {
    SUBCASE("uniform logits give log V") {
        Graph g;
        int l = g.input(Tensor({2, 7}));
        int ce = g.cross_entropy(l, {0, 3}, {1.0, 1.0});
        CHECK(g.value(ce)[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
    }
    SUBCASE("weights select rows") {
        // Row 0 has certain prediction of its target; row 1 is wrong but weight 0.
        Tensor l({2, 2}, {100.0, 0.0, 100.0, 0.0});
        Graph g;
        int ce = g.cross_entropy(g.input(l), {0, 1}, {1.0, 0.0});
        CHECK(g.value(ce)[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("errors") {
        Graph g;
        int l = g.input(Tensor({2, 3}));
        CHECK(thrown([&] { (void)g.cross_entropy(l, {0}, {1.0}); }).find("cross-entropy") != std::string::npos);
        CHECK_THROWS_AS((void)g.cross_entropy(l, {0, 5}, {1.0, 1.0}), Error);
        CHECK_THROWS_AS((void)g.cross_entropy(l, {0, 1}, {0.0, 0.0}), Error);
    }
}

TEST_CASE("embedding gather") {
    Tensor table({3, 2}, {0.0, 1.0, 10.0, 11.0, 20.0, 21.0});
    Graph g;
    int e = g.embedding(g.input(table), {2, 0, 2});
    CHECK(g.value(e).shape == std::vector<long>{3, 2});
    CHECK(g.value(e)[0] == 20.0);
    CHECK(g.value(e)[2] == 0.0);
    CHECK(g.value(e)[4] == 20.0);
    CHECK_THROWS_AS((void)g.embedding(g.input(table), {3}), Error);
}

TEST_CASE("top-k op returns descending values, ties to lower index") {
    Graph g;
    int x = g.input(Tensor({2, 4}, {1.0, 9.0, 9.0, 2.0, -1.0, -5.0, 0.0, -1.0}));
    int y = g.topk(x, 2);
    CHECK(g.value(y).shape == std::vector<long>{2, 2});
    CHECK(g.value(y)[0] == 9.0);
    CHECK(g.value(y)[1] == 9.0);
    CHECK(g.topk_result_indices(y) == std::vector<int>{1, 2, 2, 0});
    CHECK(g.value(y)[2] == 0.0);
    CHECK(g.value(y)[3] == -1.0);
}

TEST_CASE("concat and slice round-trip") {
    Graph g;
    int a = g.input(Tensor({2, 2}, {1, 2, 3, 4}));
    int b = g.input(Tensor({2, 1}, {5, 6}));
    int c = g.concat(a, b);
    CHECK(g.value(c).shape == std::vector<long>{2, 3});
    CHECK(g.value(c)[2] == 5.0);
    CHECK(g.value(c)[5] == 6.0);
    int s = g.slice(c, 0, 2);
    for (int i = 0; i < 4; ++i) CHECK(g.value(s)[i] == g.value(a)[i]);
    CHECK_THROWS_AS((void)g.slice(c, 2, 2), Error);
}

TEST_CASE("rope at position zero is identity and preserves norm") {
    Tensor x({2, 4}, {1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -0.25});
    Graph g;
    int y = g.rope(g.input(x), 4, {0, 5}, 10000.0);
    for (int i = 0; i < 4; ++i) CHECK(g.value(y)[i] == doctest::Approx(x[i]).epsilon(1e-12));
    double n_in = 0.0, n_out = 0.0;
    for (int i = 4; i < 8; ++i) {
        n_in += x[i] * x[i];
        n_out += g.value(y)[i] * g.value(y)[i];
    }
    CHECK(n_out == doctest::Approx(n_in).epsilon(1e-12));
}

TEST_CASE("rope rotates pairs by position-dependent angles") {
    // head_dim=2: single pair rotated by pos*theta^0 = pos radians.
    Tensor x({1, 2}, {1.0, 0.0});
    Graph g;
    int y = g.rope(g.input(x), 2, {3}, 10000.0);
    CHECK(g.value(y)[0] == doctest::Approx(std::cos(3.0)).epsilon(1e-12));
    CHECK(g.value(y)[1] == doctest::Approx(std::sin(3.0)).epsilon(1e-12));
}

TEST_CASE("attention is causal and respects kv grouping") {
    const long T = 4;
    Parameter q = randp("q", {T, 4}, 11);
    Parameter k = randp("k", {T, 2}, 12);
    Parameter v = randp("v", {T, 2}, 13);
    Graph g;
    int out = g.attention(g.param(&q), g.param(&k), g.param(&v), 2, 1, T);

    // Perturbing a future token must not change earlier outputs.
    Parameter k2 = k;
    k2.value[static_cast<size_t>((T - 1) * 2)] += 10.0;
    Parameter v2 = v;
    v2.value[static_cast<size_t>((T - 1) * 2 + 1)] -= 3.0;
    Graph g2;
    int out2 = g2.attention(g2.param(&q), g2.param(&k2), g2.param(&v2), 2, 1, T);
    for (long i = 0; i < (T - 1) * 4; ++i) CHECK(g.value(out)[i] == g2.value(out2)[i]);
    // First row attends only to itself: output = v row for every head.
    CHECK(g.value(out)[0] == doctest::Approx(v.value[0]).epsilon(1e-12));
    CHECK(g.value(out)[1] == doctest::Approx(v.value[1]).epsilon(1e-12));
    CHECK(g.value(out)[2] == doctest::Approx(v.value[0]).epsilon(1e-12));
    CHECK(g.value(out)[3] == doctest::Approx(v.value[1]).epsilon(1e-12));
}

TEST_CASE("backward: sum(W x) gradient has outer-product structure") {
    Parameter w = randp("w", {2, 3}, 21);
    Tensor x({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    Graph g;
    int loss = g.sum(g.matmul(g.param(&w), g.input(x)));
    g.backward(loss);
    // dL/dW_ik = sum_j x_kj, independent of i.
    for (int i = 0; i < 2; ++i) {
        CHECK(w.grad[static_cast<size_t>(i * 3 + 0)] == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(w.grad[static_cast<size_t>(i * 3 + 1)] == doctest::Approx(7.0).epsilon(1e-12));
        CHECK(w.grad[static_cast<size_t>(i * 3 + 2)] == doctest::Approx(11.0).epsilon(1e-12));
    }
}

TEST_CASE("backward errors: non-scalar loss, double backward") {
    Parameter w = randp("w", {2, 2}, 31);
    Graph g;
    int y = g.scale(g.param(&w), 2.0);
    CHECK_THROWS_AS(g.backward(y), Error);
    int s = g.sum(y);
    g.backward(s);
    CHECK_THROWS_AS(g.backward(s), Error);
}

TEST_CASE("row mask zeroes exactly the masked rows") {
    Parameter w = randp("w", {4, 3}, 41);
    auto run = [&](std::vector<uint8_t> mask) {
        w.zero_grad();
        if (mask.empty())
            w.clear_row_mask();
        else
            w.set_row_mask(std::move(mask));
        Graph g;
        Tensor x({3, 2}, {1, -2, 0.5, 3, -1, 2});
        g.backward(g.sum(g.silu(g.matmul(g.param(&w), g.input(x)))));
        w.clear_row_mask();
        return w.grad;
    };
    Tensor unmasked = run({});
    SUBCASE("all-false mask gives all-zero grad") {
        Tensor g0 = run({0, 0, 0, 0});
        for (long i = 0; i < g0.numel(); ++i) CHECK(g0[i] == 0.0);
    }
    SUBCASE("all-true mask matches unmasked run exactly") {
        Tensor g1 = run({1, 1, 1, 1});
        for (long i = 0; i < g1.numel(); ++i) CHECK(g1[i] == unmasked[i]);
    }
    SUBCASE("partial mask equals unmasked grad times row indicator") {
        Tensor gm = run({1, 0, 0, 1});
        for (long r = 0; r < 4; ++r)
            for (long c = 0; c < 3; ++c)
                CHECK(gm[r * 3 + c] == ((r == 0 || r == 3) ? unmasked[r * 3 + c] : 0.0));
    }
    SUBCASE("mask length must match leading dim") {
        CHECK_THROWS_AS(w.set_row_mask({1, 0}), Error);
    }
}

TEST_CASE("finite-difference gradient checks per op") {
    SUBCASE("matmul + add + mul + scale chain") {
        Parameter a = randp("a", {3, 4}, 101);
        Parameter b = randp("b", {4, 2}, 102);
        Parameter c = randp("c", {3, 2}, 103);
        smf_test::fd_check({&a, &b, &c}, [&](Graph& g) {
            int y = g.matmul(g.param(&a), g.param(&b));
            int z = g.mul(g.add(y, g.param(&c)), g.param(&c));
            return project_to_scalar(g, g.scale(z, 1.7), 901);
        });
    }
    SUBCASE("scale_by routes gradient to both operands") {
        Parameter x = randp("x", {2, 3}, 104);
        Parameter s("s", Tensor::scalar(0.8));
        smf_test::fd_check({&x, &s}, [&](Graph& g) {
            return project_to_scalar(g, g.scale_by(g.param(&x), g.param(&s)), 902);
        });
    }
    SUBCASE("softmax") {
        Parameter x = randp("x", {3, 5}, 105);
        smf_test::fd_check({&x}, [&](Graph& g) { return project_to_scalar(g, g.softmax(g.param(&x)), 903); });
    }
    SUBCASE("masked softmax") {
        Parameter x = randp("x", {2, 4}, 106);
        Tensor mask({2, 4}, {0, kNegInf, 0, 0, 0, 0, kNegInf, kNegInf});
        smf_test::fd_check({&x}, [&](Graph& g) { return project_to_scalar(g, g.softmax(g.param(&x), mask), 904); });
    }
    SUBCASE("silu") {
        Parameter x = randp("x", {4, 3}, 107);
        smf_test::fd_check({&x}, [&](Graph& g) { return project_to_scalar(g, g.silu(g.param(&x)), 905); });
    }
    SUBCASE("rmsnorm") {
        Parameter x = randp("x", {3, 6}, 108);
        Parameter w = randp("w", {6}, 109, 0.3);
        for (double& v : w.value.data) v += 1.0;
        smf_test::fd_check({&x, &w}, [&](Graph& g) {
            return project_to_scalar(g, g.rmsnorm(g.param(&x), g.param(&w), 1e-5), 906);
        });
    }
    SUBCASE("embedding") {
        Parameter t = randp("t", {5, 3}, 110);
        smf_test::fd_check({&t}, [&](Graph& g) {
            return project_to_scalar(g, g.embedding(g.param(&t), {1, 4, 1, 0}), 907);
        });
    }
    SUBCASE("cross entropy with mixed weights") {
        Parameter l = randp("l", {4, 6}, 111, 1.5);
        smf_test::fd_check({&l}, [&](Graph& g) {
            return g.cross_entropy(g.param(&l), {2, 0, 5, 1}, {1.0, 0.0, 0.5, 2.0});
        });
    }
    SUBCASE("concat and slice") {
        Parameter a = randp("a", {2, 3}, 112);
        Parameter b = randp("b", {2, 2}, 113);
        smf_test::fd_check({&a, &b}, [&](Graph& g) {
            int c = g.concat(g.param(&a), g.param(&b));
            return project_to_scalar(g, g.slice(c, 1, 3), 908);
        });
    }
    SUBCASE("rope") {
        Parameter x = randp("x", {3, 8}, 114);
        smf_test::fd_check({&x}, [&](Graph& g) {
            return project_to_scalar(g, g.rope(g.param(&x), 4, {0, 2, 7}, 10000.0), 909);
        });
    }
    SUBCASE("attention with grouped kv heads") {
        const long T = 3;
        Parameter q = randp("q", {2 * T, 8}, 115);
        Parameter k = randp("k", {2 * T, 4}, 116);
        Parameter v = randp("v", {2 * T, 4}, 117);
        smf_test::fd_check({&q, &k, &v}, [&](Graph& g) {
            int o = g.attention(g.param(&q), g.param(&k), g.param(&v), 4, 2, T);
            return project_to_scalar(g, o, 910);
        });
    }
    SUBCASE("loss composed through cross entropy of a small network") {
        Parameter w1 = randp("w1", {4, 5}, 118);
        Parameter w2 = randp("w2", {5, 3}, 119);
        Parameter x = randp("x", {2, 4}, 120);
        smf_test::fd_check({&w1, &w2, &x}, [&](Graph& g) {
            int h = g.silu(g.matmul(g.param(&x), g.param(&w1)));
            int logits = g.matmul(h, g.param(&w2));
            return g.cross_entropy(logits, {2, 0}, {1.0, 1.0});
        });
    }
}

TEST_CASE("determinism: identical seeds give bitwise-identical grads") {
    auto run = [&](uint64_t seed) {
        Parameter w = randp("w", {4, 4}, seed);
        Parameter u = randp("u", {4, 4}, seed + 1);
        Graph g;
        int y = g.softmax(g.matmul(g.param(&w), g.silu(g.param(&u))));
        g.backward(g.sum(g.mul(y, y)));
        return std::make_pair(w.grad, u.grad);
    };
    auto [g1w, g1u] = run(77);
    auto [g2w, g2u] = run(77);
    CHECK(g1w.data == g2w.data);
    CHECK(g1u.data == g2u.data);
}

TEST_CASE("check_finite flags NaN and Inf") {
    Graph g;
    int x = g.input(Tensor({2}, {1.0, 2.0}));
    (void)x;
    g.check_finite("forward");
    Graph g2;
    (void)g2.input(Tensor({2}, {1.0, std::nan("")}));
    CHECK_THROWS_AS(g2.check_finite("forward"), Error);
    Graph g3;
    (void)g3.scale(g3.input(Tensor({1}, {1e308})), 10.0);
    CHECK_THROWS_AS(g3.check_finite("forward"), Error);
}

TEST_CASE("non-trainable parameters accumulate no grad") {
    Parameter w = randp("w", {2, 2}, 55);
    w.trainable = false;
    Graph g;
    g.backward(g.sum(g.param(&w)));
    CHECK_FALSE(w.has_grad);
}
