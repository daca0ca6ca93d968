#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lethe/rng.hpp"
#include "lethe/tape.hpp"
#include "lethe/tensor.hpp"

using lethe::SplitMix64;
using lethe::Tensor;

namespace {

template <class S>
Tensor<S> random_tensor(std::vector<std::size_t> shape, SplitMix64& rng, double scale = 1.0) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.next_gaussian() * scale);
    return t;
}

// Independent oracle: per-row NLL via log-sum-exp in double, straight from
// the definition.
double lse_nll(const std::vector<double>& logits, int target) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double total = 0.0;
    for (double v : logits) total += std::exp(v - mx);
    return std::log(total) + mx - logits[static_cast<std::size_t>(target)];
}

} // namespace

TEST_CASE("matmul identity and direct arithmetic") {
    lethe::Tape<float> tape;
    auto a = tape.leaf(Tensor<float>({2, 2}, {1, 2, 3, 4}));
    auto eye = tape.leaf(Tensor<float>({2, 2}, {1, 0, 0, 1}));
    auto c = tape.matmul(a, eye);
    CHECK(tape.value(c).data == std::vector<float>{1, 2, 3, 4});

    auto b = tape.leaf(Tensor<float>({2, 1}, {5, 6}));
    auto d = tape.matmul(a, b);
    CHECK(tape.value(d).data == std::vector<float>{17, 39});
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    lethe::Tape<float> tape;
    auto a = tape.leaf(Tensor<float>({2, 3}));
    auto b = tape.leaf(Tensor<float>({2, 3}));
    try {
        tape.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const lethe::ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find(" vs ") != std::string::npos);
    }
}

TEST_CASE("matmul associativity within 1e-4 relative") {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        lethe::Tape<float> tape;
        auto a = tape.leaf(random_tensor<float>({3, 4}, rng));
        auto b = tape.leaf(random_tensor<float>({4, 5}, rng));
        auto c = tape.leaf(random_tensor<float>({5, 2}, rng));
        auto left = tape.matmul(tape.matmul(a, b), c);
        auto right = tape.matmul(a, tape.matmul(b, c));
        for (std::size_t i = 0; i < tape.value(left).numel(); ++i) {
            const double l = tape.value(left).data[i];
            const double r = tape.value(right).data[i];
            CHECK(std::abs(l - r) <= 1e-4 * (1.0 + std::abs(l)));
        }
    }
}

TEST_CASE("softmax symmetry, stability, normalization") {
    lethe::Tape<float> tape;
    auto even = tape.softmax_rows(tape.leaf(Tensor<float>({1, 2}, {0, 0})));
    CHECK(tape.value(even).data[0] == Catch::Approx(0.5));
    CHECK(tape.value(even).data[1] == Catch::Approx(0.5));

    auto spiky = tape.softmax_rows(tape.leaf(Tensor<float>({1, 2}, {1000, 0})));
    CHECK(tape.value(spiky).finite());
    CHECK(tape.value(spiky).data[0] == Catch::Approx(1.0));
    CHECK(tape.value(spiky).data[1] == Catch::Approx(0.0).margin(1e-30));
}

TEST_CASE("softmax rows sum to one over random tensors") {
    SplitMix64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng.next_below(6);
        const std::size_t cols = 1 + rng.next_below(9);
        lethe::Tape<float> tape;
        auto s = tape.softmax_rows(tape.leaf(random_tensor<float>({rows, cols}, rng, 10.0)));
        for (std::size_t r = 0; r < rows; ++r) {
            float total = 0;
            for (std::size_t c = 0; c < cols; ++c) total += tape.value(s).at(r, c);
            CHECK(std::abs(total - 1.0f) <= 1e-6f);
        }
    }
}

TEST_CASE("layer_norm degenerate cases") {
    lethe::Tape<float> tape;
    auto gain = tape.leaf(Tensor<float>({3}, {1, 1, 1}));
    auto bias = tape.leaf(Tensor<float>({3}, {0, 0, 0}));

    auto constant = tape.layer_norm(tape.leaf(Tensor<float>({1, 3}, {4, 4, 4})), gain, bias, 1e-5f);
    for (float v : tape.value(constant).data) CHECK(v == Catch::Approx(0.0).margin(1e-6));

    auto gain2 = tape.leaf(Tensor<float>({2}, {1, 1}));
    auto bias2 = tape.leaf(Tensor<float>({2}, {0, 0}));
    auto standardized = tape.layer_norm(tape.leaf(Tensor<float>({1, 2}, {1, 3})), gain2, bias2, 1e-12f);
    CHECK(tape.value(standardized).data[0] == Catch::Approx(-1.0).epsilon(1e-4));
    CHECK(tape.value(standardized).data[1] == Catch::Approx(1.0).epsilon(1e-4));

    auto zero_gain = tape.leaf(Tensor<float>({2}, {0, 0}));
    auto bias3 = tape.leaf(Tensor<float>({2}, {0.5f, -2.0f}));
    auto affine = tape.layer_norm(tape.leaf(Tensor<float>({2, 2}, {1, 9, -4, 2})), zero_gain, bias3, 1e-5f);
    CHECK(tape.value(affine).data == std::vector<float>{0.5f, -2.0f, 0.5f, -2.0f});
}

TEST_CASE("cross entropy matches closed forms") {
    lethe::Tape<float> tape;
    auto uniform = tape.cross_entropy_rows(tape.leaf(Tensor<float>({2, 4}, std::vector<float>(8, 0.0f))), {1, 3});
    CHECK(tape.value(uniform).data[0] == Catch::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(tape.value(uniform).data[1] == Catch::Approx(std::log(4.0)).epsilon(1e-6));

    Tensor<float> dominant({1, 3}, {50.0f, 0.0f, 0.0f});
    auto sharp = tape.cross_entropy_rows(tape.leaf(dominant), {0});
    CHECK(tape.value(sharp).data[0] >= 0.0f);
    CHECK(tape.value(sharp).data[0] < 1e-20f);
}

TEST_CASE("cross entropy matches independent log-sum-exp oracle") {
    SplitMix64 rng(21);
    lethe::Tape<double> tape;
    Tensor<double> logits = random_tensor<double>({3, 7}, rng, 3.0);
    std::vector<std::int32_t> targets = {4, 0, 6};
    auto loss = tape.cross_entropy_rows(tape.leaf(logits), targets);
    for (std::size_t r = 0; r < 3; ++r) {
        std::vector<double> row(logits.data.begin() + static_cast<long>(r * 7),
                                logits.data.begin() + static_cast<long>((r + 1) * 7));
        CHECK(tape.value(loss).data[r] == Catch::Approx(lse_nll(row, targets[r])).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
    lethe::Tape<float> tape;
    auto logits = tape.leaf(Tensor<float>({1, 4}));
    CHECK_THROWS_AS(tape.cross_entropy_rows(logits, {4}), lethe::IndexError);
    CHECK_THROWS_AS(tape.cross_entropy_rows(logits, {-2}), lethe::IndexError);
}

TEST_CASE("cross entropy is nonnegative") {
    SplitMix64 rng(33);
    for (int trial = 0; trial < 30; ++trial) {
        lethe::Tape<float> tape;
        const std::size_t vocab = 2 + rng.next_below(12);
        Tensor<float> logits = random_tensor<float>({4, vocab}, rng, 8.0);
        std::vector<std::int32_t> targets;
        for (int r = 0; r < 4; ++r) targets.push_back(static_cast<std::int32_t>(rng.next_below(vocab)));
        auto loss = tape.cross_entropy_rows(tape.leaf(logits), targets);
        for (float v : tape.value(loss).data) CHECK(v >= 0.0f);
    }
}

TEST_CASE("backward quadratic and reuse accumulation") {
    lethe::Tape<double> tape;
    Tensor<double> x({4}, {1.0, -2.0, 0.5, 3.0});
    auto vx = tape.leaf(x);
    auto root = tape.sum(tape.mul(vx, vx));
    tape.backward(root);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(tape.grad(vx).data[i] == Catch::Approx(2.0 * x.data[i]));
    }

    lethe::Tape<double> tape2;
    auto v2 = tape2.leaf(Tensor<double>({3}, {1, 2, 3}));
    auto doubled = tape2.sum(tape2.add(v2, v2));
    tape2.backward(doubled);
    for (double g : tape2.grad(v2).data) CHECK(g == Catch::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar root") {
    lethe::Tape<float> tape;
    auto v = tape.leaf(Tensor<float>({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(v), lethe::ContractError);
}

TEST_CASE("finite_diff_check on sum of sines and on constants") {
    SplitMix64 rng(5);
    Tensor<double> x = random_tensor<double>({6}, rng);
    double err = lethe::finite_diff_check<double>(
        [](lethe::Tape<double>& t, lethe::Tape<double>::Var v) { return t.sum(t.sin(v)); }, x, 1e-5);
    CHECK(err < 1e-7);

    double cerr = lethe::finite_diff_check<double>(
        [](lethe::Tape<double>& t, lethe::Tape<double>::Var v) { return t.scale(t.sum(t.scale(v, 0.0)), 1.0); },
        x, 1e-5);
    CHECK(cerr == 0.0);

    CHECK_THROWS_AS(lethe::finite_diff_check<double>(
                        [](lethe::Tape<double>& t, lethe::Tape<double>::Var v) { return t.sum(v); }, x, 1e-2),
                    lethe::ContractError);
}

TEST_CASE("random graphs pass the central-difference check") {
    SplitMix64 rng(99);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t rows = 2 + rng.next_below(3);
        const std::size_t cols = 2 + rng.next_below(3);
        Tensor<double> x = random_tensor<double>({rows, cols}, rng, 0.8);
        Tensor<double> w = random_tensor<double>({cols, 3}, rng, 0.8);
        Tensor<double> gain = random_tensor<double>({cols}, rng, 0.3);
        Tensor<double> bias = random_tensor<double>({cols}, rng, 0.3);
        Tensor<double> other = random_tensor<double>({rows, cols}, rng, 0.8);
        const std::uint64_t recipe = rng.next_u64();

        auto build = [&](lethe::Tape<double>& t, lethe::Tape<double>::Var v) {
            auto cur = v;
            if (recipe & 1) cur = t.gelu(cur);
            if (recipe & 2) cur = t.sin(cur);
            if (recipe & 4) cur = t.mul(cur, t.leaf(other));
            // 1e-3 keeps curvature bounded when a random row lands near constant
            if (recipe & 8) cur = t.layer_norm(cur, t.leaf(gain), t.leaf(bias), 1e-3);
            if (recipe & 16) cur = t.softmax_rows(cur);
            if (recipe & 32) cur = t.add(cur, t.leaf(other));
            auto proj = t.matmul(cur, t.leaf(w));
            std::vector<double> weights(proj.idx >= 0 ? t.value(proj).numel() : 0, 0.0);
            for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = (i % 2 == 0) ? 1.0 : 0.25;
            return t.weighted_mean(proj, weights);
        };
        double err = lethe::finite_diff_check<double>(build, x, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("attention and gather gradients pass the central-difference check") {
    SplitMix64 rng(123);
    const std::size_t batch = 2, seq = 3, d = 4, heads = 2;
    Tensor<double> x = random_tensor<double>({batch * seq, d}, rng, 0.7);
    Tensor<double> wq = random_tensor<double>({d, d}, rng, 0.5);
    Tensor<double> wk = random_tensor<double>({d, d}, rng, 0.5);
    Tensor<double> wv = random_tensor<double>({d, d}, rng, 0.5);

    auto build = [&](lethe::Tape<double>& t, lethe::Tape<double>::Var v) {
        auto q = t.matmul(v, t.leaf(wq));
        auto k = t.matmul(v, t.leaf(wk));
        auto vv = t.matmul(v, t.leaf(wv));
        auto att = t.causal_attention(q, k, vv, batch, seq, heads);
        return t.sum(t.mul(att, att));
    };
    CHECK(lethe::finite_diff_check<double>(build, x, 1e-5) < 1e-6);

    Tensor<double> table = random_tensor<double>({5, 3}, rng);
    auto build2 = [&](lethe::Tape<double>& t, lethe::Tape<double>::Var v) {
        auto g = t.gather_rows(v, {0, 4, 4, 2});
        return t.sum(t.gelu(g));
    };
    CHECK(lethe::finite_diff_check<double>(build2, table, 1e-5) < 1e-6);
}

TEST_CASE("slice carves views with scatter-add backward") {
    lethe::Tape<double> tape;
    Tensor<double> flat({6}, {0, 1, 2, 3, 4, 5});
    auto v = tape.leaf(flat);
    auto m = tape.slice(v, 2, {2, 2});
    CHECK(tape.value(m).data == std::vector<double>{2, 3, 4, 5});
    auto root = tape.sum(tape.mul(m, m));
    tape.backward(root);
    CHECK(tape.grad(v).data == std::vector<double>{0, 0, 4, 6, 8, 10});
    CHECK_THROWS_AS(tape.slice(v, 4, {3}), lethe::ShapeError);
}
