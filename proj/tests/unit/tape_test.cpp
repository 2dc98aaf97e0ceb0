#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cerag/errors.hpp"
#include "cerag/tape.hpp"
#include "doctest.h"

using namespace cerag;

namespace {

using MatD = Mat<double>;
using Build = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

MatD random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    MatD m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
    }
    return m;
}

double eval_loss(std::vector<MatD>& inputs, const Build& build) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (MatD& m : inputs) vars.push_back(param<double>(tape, m, nullptr));
    return build(tape, vars).value()(0, 0);
}

// Compares tape gradients against central finite differences on every entry
// of every input.
void check_gradients(std::vector<MatD> inputs, const Build& build, double tol = 1e-5) {
    std::vector<MatD> grads(inputs.size());
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            vars.push_back(param(tape, inputs[i], &grads[i]));
        }
        Var<double> loss = build(tape, vars);
        REQUIRE(loss.value().size() == 1);
        tape.backward(loss.id);
    }
    const double eps = 1e-6;
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        if (grads[m].size() == 0) grads[m] = MatD::Zero(inputs[m].rows(), inputs[m].cols());
        for (Eigen::Index r = 0; r < inputs[m].rows(); ++r) {
            for (Eigen::Index c = 0; c < inputs[m].cols(); ++c) {
                const double saved = inputs[m](r, c);
                inputs[m](r, c) = saved + eps;
                const double hi = eval_loss(inputs, build);
                inputs[m](r, c) = saved - eps;
                const double lo = eval_loss(inputs, build);
                inputs[m](r, c) = saved;
                const double fd = (hi - lo) / (2.0 * eps);
                const double got = grads[m](r, c);
                const double scale = std::max({1.0, std::abs(fd), std::abs(got)});
                CHECK(std::abs(fd - got) / scale <= tol);
            }
        }
    }
}

Build ce_reduce(std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> fwd,
                std::vector<int> targets) {
    return [fwd = std::move(fwd), targets = std::move(targets)](Tape<double>& tape,
                                                                std::vector<Var<double>>& v) {
        Var<double> out = fwd(tape, v);
        std::vector<std::uint8_t> mask(targets.size(), 1);
        return masked_cross_entropy(out, targets, mask);
    };
}

}  // namespace

TEST_CASE("matmul gradients match finite differences") {
    std::mt19937_64 rng(1);
    check_gradients({random_mat(rng, 3, 4), random_mat(rng, 4, 5)},
                    ce_reduce([](Tape<double>&, auto& v) { return matmul(v[0], v[1]); },
                              {1, 0, 3}));
}

TEST_CASE("add and scale gradients match finite differences") {
    std::mt19937_64 rng(2);
    check_gradients({random_mat(rng, 3, 4), random_mat(rng, 3, 4)},
                    ce_reduce([](Tape<double>&, auto& v) { return scale(add(v[0], v[1]), 1.7); },
                              {2, 0, 1}));
}

TEST_CASE("add_bias gradients match finite differences") {
    std::mt19937_64 rng(3);
    check_gradients({random_mat(rng, 3, 5), random_mat(rng, 1, 5)},
                    ce_reduce([](Tape<double>&, auto& v) { return add_bias(v[0], v[1]); },
                              {4, 0, 2}));
}

TEST_CASE("gather_rows accumulates duplicate ids") {
    std::mt19937_64 rng(4);
    check_gradients({random_mat(rng, 6, 4)},
                    ce_reduce([](Tape<double>&, auto& v) {
                        return gather_rows(v[0], {0, 2, 2, 5});
                    },
                              {1, 3, 0, 2}));
}

TEST_CASE("vconcat gradients match finite differences") {
    std::mt19937_64 rng(5);
    check_gradients({random_mat(rng, 2, 4), random_mat(rng, 3, 4)},
                    ce_reduce([](Tape<double>&, auto& v) {
                        return vconcat<double>({v[0], v[1]});
                    },
                              {0, 1, 2, 3, 0}));
}

TEST_CASE("slice_rows gradients match finite differences") {
    std::mt19937_64 rng(6);
    check_gradients({random_mat(rng, 5, 4)},
                    ce_reduce([](Tape<double>&, auto& v) { return slice_rows(v[0], 1, 3); },
                              {3, 1, 0}));
}

TEST_CASE("layer_norm gradients match finite differences") {
    std::mt19937_64 rng(7);
    check_gradients({random_mat(rng, 3, 6), random_mat(rng, 1, 6), random_mat(rng, 1, 6)},
                    ce_reduce([](Tape<double>&, auto& v) {
                        return layer_norm(v[0], v[1], v[2]);
                    },
                              {5, 0, 3}));
}

TEST_CASE("gelu gradients match finite differences") {
    std::mt19937_64 rng(8);
    check_gradients({random_mat(rng, 3, 4)},
                    ce_reduce([](Tape<double>&, auto& v) { return gelu(v[0]); }, {1, 2, 3}));
}

TEST_CASE("attention gradients match finite differences") {
    std::mt19937_64 rng(9);
    for (const bool causal : {true, false}) {
        check_gradients(
            {random_mat(rng, 4, 6), random_mat(rng, 4, 6), random_mat(rng, 4, 6)},
            ce_reduce(
                [causal](Tape<double>&, auto& v) {
                    return attention(v[0], v[1], v[2], 2, causal);
                },
                {0, 5, 2, 4}));
    }
}

TEST_CASE("block_flatten gradients match finite differences") {
    std::mt19937_64 rng(10);
    // Padded tail: 5 rows grouped in twos into 3 output blocks.
    check_gradients({random_mat(rng, 5, 3)},
                    ce_reduce([](Tape<double>&, auto& v) {
                        return block_flatten(v[0], 2, 3);
                    },
                              {0, 5, 2}));
    // Dropped tail: the fifth row contributes nothing.
    check_gradients({random_mat(rng, 5, 3)},
                    ce_reduce([](Tape<double>&, auto& v) {
                        return block_flatten(v[0], 2, 2);
                    },
                              {0, 5}));
}

TEST_CASE("masked cross entropy gradients match finite differences") {
    std::mt19937_64 rng(11);
    check_gradients({random_mat(rng, 4, 7)}, [](Tape<double>&, std::vector<Var<double>>& v) {
        return masked_cross_entropy(v[0], {1, 6, 3, 0}, {1, 0, 1, 0});
    });
}

TEST_CASE("masked cross entropy value and masking are exact") {
    Tape<double> tape;
    MatD grad;
    Var<double> logits = param<double>(tape, MatD::Zero(4, 11), &grad);
    Var<double> loss = masked_cross_entropy(logits, {3, 5, 0, 1}, {1, 0, 1, 0});
    CHECK(loss.value()(0, 0) == doctest::Approx(std::log(11.0)).epsilon(1e-12));
    tape.backward(loss.id);
    for (Eigen::Index c = 0; c < 11; ++c) {
        CHECK(grad(1, c) == 0.0);
        CHECK(grad(3, c) == 0.0);
    }
    CHECK(grad(0, 3) != 0.0);

    Tape<double> t2;
    Var<double> l2 = constant<double>(t2, MatD::Zero(2, 5));
    CHECK_THROWS_AS(masked_cross_entropy(l2, std::vector<int>{0, 1},
                                         std::vector<std::uint8_t>{0, 0}),
                    ConfigError);
}

TEST_CASE("frozen leaves stay out of the backward pass") {
    std::mt19937_64 rng(12);
    MatD a = random_mat(rng, 3, 4);
    MatD b = random_mat(rng, 4, 5);

    MatD grad_b_live, grad_b_mixed;
    {
        Tape<double> tape;
        Var<double> va = param<double>(tape, a, nullptr);  // frozen
        Var<double> vb = param(tape, b, &grad_b_mixed);
        Var<double> loss = masked_cross_entropy(matmul(va, vb), {1, 0, 3},
                                                std::vector<std::uint8_t>{1, 1, 1});
        CHECK_FALSE(va.needs_grad());
        tape.backward(loss.id);
    }
    {
        MatD grad_a;
        Tape<double> tape;
        Var<double> va = param(tape, a, &grad_a);
        Var<double> vb = param(tape, b, &grad_b_live);
        Var<double> loss = masked_cross_entropy(matmul(va, vb), {1, 0, 3},
                                                std::vector<std::uint8_t>{1, 1, 1});
        tape.backward(loss.id);
    }
    // Freezing one operand leaves the other's gradient untouched.
    CHECK(grad_b_mixed == grad_b_live);

    // A graph of nothing but frozen leaves still evaluates and backpropagates.
    Tape<double> tape;
    Var<double> va = param<double>(tape, a, nullptr);
    Var<double> vb = param<double>(tape, b, nullptr);
    Var<double> loss = masked_cross_entropy(matmul(va, vb), {1, 0, 3},
                                            std::vector<std::uint8_t>{1, 1, 1});
    CHECK_FALSE(loss.needs_grad());
    tape.backward(loss.id);
}

TEST_CASE("gradients accumulate across reused nodes") {
    // loss = CE(A + A) so dL/dA gets two contributions.
    std::mt19937_64 rng(13);
    check_gradients({random_mat(rng, 3, 5)},
                    ce_reduce([](Tape<double>&, auto& v) { return add(v[0], v[0]); }, {1, 2, 0}));
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape<double> tape;
    Var<double> v = constant<double>(tape, MatD::Zero(2, 3));
    CHECK_THROWS_AS(tape.backward(v.id), std::logic_error);
}

TEST_CASE("attention is causal when asked") {
    std::mt19937_64 rng(14);
    MatD q = random_mat(rng, 5, 4), k = random_mat(rng, 5, 4), v = random_mat(rng, 5, 4);
    Tape<double> tape;
    Var<double> out1 = attention(param<double>(tape, q, nullptr), param<double>(tape, k, nullptr),
                                 param<double>(tape, v, nullptr), 2, true);
    MatD k2 = k, v2 = v;
    k2.row(4).setConstant(9.0);  // future position
    v2.row(4).setConstant(-9.0);
    Var<double> out2 = attention(param<double>(tape, q, nullptr), param<double>(tape, k2, nullptr),
                                 param<double>(tape, v2, nullptr), 2, true);
    for (Eigen::Index i = 0; i < 4; ++i) {
        CHECK(out1.value().row(i) == out2.value().row(i));
    }
    CHECK(out1.value().row(4) != out2.value().row(4));
}
