// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "mosld/error.hpp"
#include "mosld/finite_diff.hpp"
#include "mosld/matrix.hpp"
#include "mosld/ops.hpp"
#include "mosld/rng.hpp"
#include "mosld/tape.hpp"
#include "test_helpers.hpp"

using namespace mosld;
using Catch::Matchers::WithinAbs;
using testing::op_grad_error;
using testing::random_matrix;

TEST_CASE("matmul identity and hand arithmetic", "[matrix]") {
    Rng rng(3);
    const Matrix m = random_matrix(3, 4, rng);
    CHECK(matmul(Matrix::identity(3), m) == m);
    const Matrix c = matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}});
    CHECK(c == Matrix{{2}, {4}});
}

TEST_CASE("matmul variants agree with explicit transposes", "[matrix]") {
    Rng rng(4);
    const Matrix a = random_matrix(5, 7, rng);
    const Matrix b = random_matrix(3, 7, rng);
    const Matrix c = random_matrix(5, 2, rng);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, b.transposed())) < 1e-14);
    CHECK(max_abs_diff(matmul_tn(a, c), matmul(a.transposed(), c)) < 1e-14);
    const Vector x{1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0};
    const Vector y = matvec(a, x);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            s += a(i, j) * x[j];
        }
        CHECK_THAT(y[i], WithinAbs(s, 1e-14));
    }
}

TEST_CASE("matmul rejects mismatched shapes", "[matrix]") {
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ConfigError);
    CHECK_THROWS_AS(Matrix(2, 2) + Matrix(2, 3), ConfigError);
}

TEST_CASE("matmul gradient of sum(C) matches central differences", "[matrix][grad]") {
    Rng rng(5);
    const double err = op_grad_error({random_matrix(5, 7, rng), random_matrix(7, 3, rng)},
                                     [](Tape& t, std::span<const Var> v) { return ops::matmul(t, v[0], v[1]); }, rng);
    CHECK(err <= 1e-7);
}

TEST_CASE("numerical rank", "[matrix]") {
    Rng rng(6);
    const Matrix a = random_matrix(6, 2, rng);
    const Matrix b = random_matrix(2, 5, rng);
    CHECK(numerical_rank(matmul(a, b)) == 2);
    CHECK(numerical_rank(Matrix(4, 4)) == 0);
    CHECK(numerical_rank(Matrix::identity(4)) == 4);
}

TEST_CASE("softmax values", "[softmax]") {
    const Vector u = softmax(std::vector<double>{0, 0, 0, 0});
    for (double p : u) {
        CHECK(p == 0.25);
    }
    // Frozen from a direct exp/normalize evaluation.
    const Vector p = softmax(std::vector<double>{2, 1, 0, -1});
    CHECK_THAT(p[0], WithinAbs(0.6439142598879724, 1e-12));
    CHECK_THAT(p[1], WithinAbs(0.23688281808991013, 1e-12));
    CHECK_THAT(p[2], WithinAbs(0.08714431874203257, 1e-12));
    CHECK_THAT(p[3], WithinAbs(0.03205860328008499, 1e-12));
    const Vector big = softmax(std::vector<double>{7.0, 1007.0});
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] < 1e-300);
    CHECK_THAT(big[1], WithinAbs(1.0, 1e-15));
}

TEST_CASE("softmax sums to one and is shift invariant", "[softmax][property]") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(1 + rng.below(12));
        for (double& x : v) {
            x = 5.0 * rng.normal();
        }
        const Vector p = softmax(v);
        CHECK_THAT(std::accumulate(p.begin(), p.end(), 0.0), WithinAbs(1.0, 1e-12));
        const double c = 100.0 * rng.normal();
        std::vector<double> shifted = v;
        for (double& x : shifted) {
            x += c;
        }
        CHECK(max_abs_diff(softmax(shifted), p) <= 1e-12);
    }
}

TEST_CASE("cross entropy", "[ce]") {
    Matrix onehot(1, 5);
    onehot(0, 3) = 1e6;
    CHECK_THAT(cross_entropy(onehot, std::vector<std::size_t>{3}), WithinAbs(0.0, 1e-12));
    CHECK_THAT(cross_entropy(Matrix(2, 8), std::vector<std::size_t>{1, 6}), WithinAbs(std::log(8.0), 1e-15));

    Rng rng(8);
    const Matrix logits = random_matrix(4, 8, rng, 3.0);
    const std::vector<std::size_t> targets{0, 7, 3, 3};
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            z += std::exp(logits(i, j));
        }
        expected += std::log(z) - logits(i, targets[i]);
    }
    CHECK_THAT(cross_entropy(logits, targets), WithinAbs(expected / 4.0, 1e-10));
    CHECK_THROWS_AS(cross_entropy(logits, std::vector<std::size_t>{0, 8, 0, 0}), DataError);
}

TEST_CASE("gaussian_matrix moments and determinism", "[rng]") {
    Rng a(11);
    const Matrix m = gaussian_matrix(1000, 100, 1.0, a);
    double mean = 0.0;
    for (double v : m.data()) {
        mean += v;
    }
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (double v : m.data()) {
        var += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(m.size()));
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(sd - 1.0) < 0.02);

    Rng b(11);
    CHECK(gaussian_matrix(1000, 100, 1.0, b) == m);

    Rng s1 = Rng(11).split(1);
    Rng s2 = Rng(11).split(2);
    const Matrix x = gaussian_matrix(50, 50, 1.0, s1);
    const Matrix y = gaussian_matrix(50, 50, 1.0, s2);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        differ += x.data()[i] != y.data()[i] ? 1 : 0;
    }
    CHECK(static_cast<double>(differ) >= 0.99 * static_cast<double>(x.size()));

    Rng c(1);
    CHECK_THROWS_AS(gaussian_matrix(2, 2, 0.0, c), ConfigError);
}

TEST_CASE("rng split ignores parent advancement", "[rng]") {
    Rng a(5);
    const Rng before = a.split(9);
    for (int i = 0; i < 100; ++i) {
        (void)a.next_u64();
    }
    Rng after = a.split(9);
    Rng copy = before;
    CHECK(copy.next_u64() == after.next_u64());
    Rng r(1);
    for (int i = 0; i < 1000; ++i) {
        CHECK(r.below(7) < 7);
        const double u = r.uniform();
        CHECK((u >= 0.0 && u < 1.0));
    }
}

TEST_CASE("finite_diff_grad analytic cases", "[fd]") {
    Rng rng(12);
    const Matrix x = random_matrix(3, 4, rng);
    const Matrix g1 = finite_diff_grad(
        [](const Matrix& m) { return std::accumulate(m.data().begin(), m.data().end(), 0.0); }, x);
    for (double v : g1.data()) {
        CHECK_THAT(v, WithinAbs(1.0, 1e-7));
    }
    const Matrix g2 = finite_diff_grad(
        [](const Matrix& m) {
            double s = 0.0;
            for (double v : m.data()) {
                s += 0.5 * v * v;
            }
            return s;
        },
        x);
    CHECK(max_abs_diff(g2, x) <= 1e-7);
}

TEST_CASE("tape accumulates gradients of a reused parameter", "[tape]") {
    Parameter p("p", Matrix{{1.0, 2.0}});
    Tape t;
    const Var a = t.param(p);
    const Var b = t.param(p);
    CHECK(a.id == b.id);
    const Var loss = ops::sum(t, ops::add(t, ops::scale(t, a, 2.0), ops::scale(t, b, 3.0)));
    t.backward(loss);
    CHECK(t.gradient(p) == Matrix{{5.0, 5.0}});
    const auto& trace = t.backward_trace();
    CHECK(std::is_sorted(trace.rbegin(), trace.rend()));
}

TEST_CASE("frozen parameters receive no gradient", "[tape]") {
    Parameter w("w", Matrix{{1.0, 2.0}}, false);
    Parameter x("x", Matrix{{3.0, 4.0}});
    Tape t;
    const Var loss = ops::sum(t, ops::add(t, t.param(w), t.param(x)));
    t.backward(loss);
    CHECK_FALSE(t.requires_grad(t.param(w)));
    CHECK(t.gradient(w) == Matrix(1, 2));
    CHECK(t.gradient(x) == Matrix{{1.0, 1.0}});
    Tape t2;
    CHECK_THROWS(t2.backward(t2.param(x)));
}

TEST_CASE("every op matches finite differences at 10 random points", "[tape][grad][property]") {
    constexpr double kTol = 1e-5;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        INFO("seed " << seed);
        auto check = [&](const char* name, std::vector<Matrix> inputs, const testing::OpBuilder& op) {
            INFO(name);
            CHECK(op_grad_error(inputs, op, rng) <= kTol);
        };
        check("matmul", {random_matrix(3, 4, rng), random_matrix(4, 2, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::matmul(t, v[0], v[1]); });
        check("matmul_nt", {random_matrix(3, 4, rng), random_matrix(5, 4, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::matmul_nt(t, v[0], v[1]); });
        check("add", {random_matrix(2, 3, rng), random_matrix(2, 3, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::add(t, v[0], v[1]); });
        check("scale", {random_matrix(2, 3, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::scale(t, v[0], -1.7); });
        const Matrix mask = random_matrix(3, 3, rng);
        check("masked_scale", {random_matrix(3, 3, rng)},
              [&](Tape& t, std::span<const Var> v) { return ops::masked_scale(t, v[0], mask, 1.25); });
        check("sum", {random_matrix(3, 2, rng)}, [](Tape& t, std::span<const Var> v) { return ops::sum(t, v[0]); });
        check("sum_squares", {random_matrix(3, 2, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::sum_squares(t, v[0]); });
        check("softmax_rows", {random_matrix(3, 5, rng, 2.0)},
              [](Tape& t, std::span<const Var> v) { return ops::softmax_rows(t, v[0]); });
        check("gelu", {random_matrix(4, 4, rng, 2.0)},
              [](Tape& t, std::span<const Var> v) { return ops::gelu(t, v[0]); });
        check("rmsnorm", {random_matrix(4, 6, rng), random_matrix(1, 6, rng)},
              [](Tape& t, std::span<const Var> v) { return ops::rmsnorm(t, v[0], v[1]); });
        const std::vector<std::size_t> ids{2, 0, 2, 4};
        check("embedding", {random_matrix(5, 3, rng)},
              [&](Tape& t, std::span<const Var> v) { return ops::embedding(t, v[0], ids); });
        const std::vector<std::size_t> rows{3, 1, 3};
        check("select_rows", {random_matrix(4, 3, rng)},
              [&](Tape& t, std::span<const Var> v) { return ops::select_rows(t, v[0], rows); });
        const std::vector<std::size_t> targets{1, 4, 0};
        check("cross_entropy", {random_matrix(3, 6, rng, 2.0)},
              [&](Tape& t, std::span<const Var> v) { return ops::cross_entropy(t, v[0], targets); });
        const std::vector<std::size_t> lengths{3, 2};
        check("causal_attention",
              {random_matrix(5, 4, rng), random_matrix(5, 4, rng), random_matrix(5, 4, rng)},
              [&](Tape& t, std::span<const Var> v) { return ops::causal_attention(t, v[0], v[1], v[2], lengths, 2); });
    }
}

TEST_CASE("causal attention is causal and respects sequence boundaries", "[attention]") {
    Rng rng(21);
    Matrix q = random_matrix(6, 4, rng);
    Matrix k = random_matrix(6, 4, rng);
    Matrix v = random_matrix(6, 4, rng);
    const std::vector<std::size_t> lengths{4, 2};
    auto run = [&](const Matrix& vv) {
        Tape t;
        return t.value(ops::causal_attention(t, t.constant(q), t.constant(k), t.constant(vv), lengths, 2));
    };
    const Matrix base = run(v);
    Matrix v2 = v;
    for (std::size_t c = 0; c < 4; ++c) {
        v2(2, c) += 10.0;
    }
    const Matrix pert = run(v2);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(pert(0, c) == base(0, c));
        CHECK(pert(1, c) == base(1, c));
        CHECK(pert(4, c) == base(4, c));
        CHECK(pert(5, c) == base(5, c));
    }
    // First row of each sequence attends only to itself.
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK_THAT(base(0, c), WithinAbs(v(0, c), 1e-15));
        CHECK_THAT(base(4, c), WithinAbs(v(4, c), 1e-15));
    }
}
