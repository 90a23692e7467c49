#include <random>

#include "doctest.h"
#include "perk/nn_ops.hpp"
#include "perk/ops.hpp"

using perk::Shape;
using perk::Tensor;

namespace {

// Reduce an op's output to a scalar with a fixed random weighting so the
// finite-difference probe exercises every output coordinate.
template <typename F>
double catalogue_err(F op, Shape in_shape, unsigned seed, double h = 1e-5) {
    std::mt19937_64 rng(seed);
    auto x = Tensor<double>::randn(in_shape, rng, 0.5);
    auto w = Tensor<double>::randn(op(x).shape(), rng);
    auto f = [&](const Tensor<double>& t) { return perk::sum(perk::mul(op(t), w)); };
    return perk::finite_diff_check<double>(f, x, h);
}

}  // namespace

TEST_CASE("kernel catalogue passes finite-difference checks at 64-bit") {
    for (unsigned seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed + 1000);

        // matmul (both operands)
        {
            auto b = Tensor<double>::randn({5, 4}, rng);
            auto a = Tensor<double>::randn({3, 5}, rng);
            auto errA = catalogue_err(
                [&](const Tensor<double>& t) { return perk::matmul(t, b); }, {3, 5}, seed);
            CHECK(errA < 1e-5);
            auto errB = catalogue_err(
                [&](const Tensor<double>& t) { return perk::matmul(a, t); }, {5, 4}, seed + 50);
            CHECK(errB < 1e-5);
        }
        // add / mul
        {
            auto b = Tensor<double>::randn({4, 6}, rng);
            CHECK(catalogue_err([&](const Tensor<double>& t) { return perk::add(t, b); }, {4, 6},
                                seed) < 1e-5);
            CHECK(catalogue_err([&](const Tensor<double>& t) { return perk::mul(t, b); }, {4, 6},
                                seed) < 1e-5);
        }
        // embedding gather
        {
            auto ids = perk::make_ids({0, 2, 2, 1, 3});
            CHECK(catalogue_err(
                      [&](const Tensor<double>& t) { return perk::gather_rows(t, ids); }, {4, 3},
                      seed) < 1e-5);
        }
        // softmax / layer-norm / GELU
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::softmax_rows(t); }, {3, 7},
                            seed) < 1e-5);
        {
            auto gamma = Tensor<double>::randn({6}, rng);
            auto beta = Tensor<double>::randn({6}, rng);
            CHECK(catalogue_err(
                      [&](const Tensor<double>& t) {
                          return perk::layer_norm_rows(t, gamma, beta);
                      },
                      {4, 6}, seed) < 1e-5);
        }
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::gelu(t); }, {5, 5}, seed) <
              1e-5);
        // cross-entropy
        {
            std::vector<std::int32_t> targets{1, 0, 3};
            CHECK(catalogue_err(
                      [&](const Tensor<double>& t) {
                          return perk::cross_entropy_rows(t, targets);
                      },
                      {3, 4}, seed) < 1e-5);
        }
        // reductions
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::rowsum(t); }, {5, 6},
                            seed) < 1e-5);
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::colsum(t); }, {5, 6},
                            seed) < 1e-5);
        {
            auto f = [](const Tensor<double>& t) { return perk::sum(t); };
            CHECK(perk::finite_diff_check<double>(f, Tensor<double>::randn({6, 6}, rng), 1e-5) <
                  1e-5);
        }
    }
}

TEST_CASE("unary and broadcast ops pass finite-difference checks") {
    for (unsigned seed = 1; seed <= 5; ++seed) {
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::tanh(t); }, {4, 4}, seed) <
              1e-5);
        CHECK(catalogue_err([](const Tensor<double>& t) { return perk::exp(t); }, {4, 4}, seed) <
              1e-5);
        CHECK(catalogue_err(
                  [](const Tensor<double>& t) { return perk::softplus(t); }, {4, 4}, seed) < 1e-5);
        CHECK(catalogue_err(
                  [](const Tensor<double>& t) { return perk::broadcast_col(t, 5); }, {6}, seed) <
              1e-5);
        CHECK(catalogue_err(
                  [](const Tensor<double>& t) { return perk::broadcast_row(t, 5); }, {6}, seed) <
              1e-5);
        CHECK(catalogue_err(
                  [](const Tensor<double>& t) { return perk::slice_block(t, 1, 3, 0, 2); }, {4, 4},
                  seed) < 1e-5);
        CHECK(catalogue_err(
                  [](const Tensor<double>& t) {
                      return perk::concat_cols<double>({t, perk::scale(t, 2.0)});
                  },
                  {3, 2}, seed) < 1e-5);
        {
            auto ids = perk::make_ids({2, 0, 2});
            CHECK(catalogue_err(
                      [&](const Tensor<double>& t) { return perk::scatter_add_rows(t, ids, 4); },
                      {3, 3}, seed) < 1e-5);
        }
    }
}

TEST_CASE("second-order flows through composite softmax") {
    // d/dx of sum(softmax(x)^2) differentiated once more stays finite-diff
    // consistent: checks that backward rules are themselves differentiable.
    std::mt19937_64 rng(99);
    auto x0 = Tensor<double>::randn({2, 5}, rng);
    auto grad_fn = [](const Tensor<double>& t) {
        perk::GradGuard gg(true);  // the inner backward always needs a graph
        Tensor<double> tl = t.requires_grad() ? t : Tensor<double>::leaf(t);
        auto s = perk::softmax_rows(tl);
        auto loss = perk::sum(perk::mul(s, s));
        auto g = perk::backward(loss, {tl}, true)[0];
        return perk::sum(perk::mul(g, g));
    };
    CHECK(perk::finite_diff_check<double>(grad_fn, x0, 1e-5) < 1e-4);
}
