#include <cmath>
#include <vector>

#include "doctest.h"
#include "numsnet/adam.hpp"
#include "numsnet/gradcheck.hpp"
#include "numsnet/losses.hpp"
#include "numsnet/ops.hpp"
#include "numsnet/rng.hpp"

using namespace numsnet;

namespace {

TensorD randn(Shape shape, RngStream& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = rng.normal() * scale;
    return TensorD::from_data(std::move(shape), std::move(v));
}

// Samples with every element pushed away from zero, for relu-bearing graphs.
TensorD randn_off_zero(Shape shape, RngStream& rng, double margin = 0.05) {
    auto t = randn(shape, rng);
    for (auto& v : t.mutable_data()) v += v >= 0.0 ? margin : -margin;
    return t;
}

double dot(const TensorD& a, const TensorD& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

}  // namespace

TEST_CASE("backward of sum gives ones; of sum of squares gives 2x") {
    RngStream rng(1);
    auto x = randn(Shape{2, 3}, rng).set_requires_grad(true);
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    x.zero_grad();
    backward(sum_all(mul(x, x)));
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-14));
}

TEST_CASE("repeated backward calls accumulate into leaves") {
    auto x = TensorD::from_data(Shape{2}, {1.0, 2.0}).set_requires_grad(true);
    auto make_loss = [&] { return sum_all(x); };
    backward(make_loss());
    backward(make_loss());
    for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = TensorD::from_data(Shape{2}, {1.0, 2.0}).set_requires_grad(true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("maxpool gradient routes to the unique maximum") {
    auto x = TensorD::from_data(Shape{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}).set_requires_grad(true);
    auto y = maxpool2d(x);
    CHECK(y.item() == 4.0);
    backward(sum_all(y));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("maxpool ties route to the first occurrence in row-major order") {
    auto x = TensorD::full(Shape{1, 1, 2, 2}, 5.0).set_requires_grad(true);
    backward(sum_all(maxpool2d(x)));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("sigmoid gradient at zero is 0.25 and matches finite differences") {
    auto x = TensorD::scalar(0.0).set_requires_grad(true);
    backward(sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));

    auto f = [](const std::vector<TensorD>& in) { return sum_all(sigmoid(in[0])); };
    RngStream rng(2);
    double err = finite_diff_max_err(f, {randn(Shape{5}, rng)}, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite differences: linear graph sits at float64 rounding level") {
    auto f = [](const std::vector<TensorD>& in) { return sum_all(mul_scalar(in[0], 3.5)); };
    RngStream rng(3);
    CHECK(finite_diff_max_err(f, {randn(Shape{4, 4}, rng)}, 1e-5) < 1e-9);
}

TEST_CASE("conv2d gradients match finite differences") {
    RngStream rng(4);
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(conv2d(in[0], in[1], in[2], Padding::same, 1)));
    };
    double err = finite_diff_max_err(
        f, {randn(Shape{1, 2, 4, 4}, rng), randn(Shape{3, 2, 3, 3}, rng, 0.5),
            randn(Shape{3}, rng, 0.1)},
        1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
    RngStream rng(5);
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(conv_transpose2d(in[0], in[1], in[2])));
    };
    double err = finite_diff_max_err(
        f, {randn(Shape{1, 3, 3, 3}, rng), randn(Shape{3, 2, 2, 2}, rng, 0.5),
            randn(Shape{2}, rng, 0.1)},
        1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d / conv_transpose2d satisfy the adjoint identity") {
    RngStream rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.uniform_int(3));
        const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.uniform_int(3));
        const std::int64_t h = 2 * (1 + static_cast<std::int64_t>(rng.uniform_int(4)));
        const std::int64_t w = 2 * (1 + static_cast<std::int64_t>(rng.uniform_int(4)));
        auto x = randn(Shape{1, cin, h, w}, rng);
        auto y = randn(Shape{1, cout, h / 2, w / 2}, rng);
        // shared kernel, conv direction uses [cout,cin,2,2], transpose [cout,cin,2,2]
        auto k = randn(Shape{cout, cin, 2, 2}, rng);
        auto zero_c = TensorD::zeros(Shape{cout});
        auto zero_i = TensorD::zeros(Shape{cin});
        // transpose weight layout is [Cin=cout of y, Cout=cin of x, 2, 2] == k
        auto lhs = dot(conv2d(x, k, zero_c, Padding::valid, 2), y);
        auto rhs = dot(x, conv_transpose2d(y, k, zero_i));
        CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("maxpool, batchnorm, dropout and concat gradients match finite differences") {
    RngStream rng(7);

    auto fpool = [](const std::vector<TensorD>& in) { return sum_all(sigmoid(maxpool2d(in[0]))); };
    // margin-separated values avoid window ties within the probe step
    CHECK(finite_diff_check(
              fpool, [](RngStream& r) { return std::vector<TensorD>{randn_off_zero(Shape{1, 2, 4, 4}, r, 0.0)}; },
              1e-5, RngStream(70)) < 1e-4);

    auto fbn = [](const std::vector<TensorD>& in) {
        auto rm = TensorD::zeros(Shape{2});
        auto rv = TensorD::full(Shape{2}, 1.0);
        return sum_all(sigmoid(batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::train, 0.99, 1e-5)));
    };
    // gamma near its init value of 1; a near-zero gamma scales the x-gradient
    // below the central-difference noise floor
    auto gamma = add_scalar(randn(Shape{2}, rng, 0.2), 1.0).detach();
    CHECK(finite_diff_max_err(fbn, {randn(Shape{4, 2, 3, 3}, rng), gamma,
                                    randn(Shape{2}, rng, 0.3)},
                              1e-3) < 1e-4);

    auto fbn_infer = [](const std::vector<TensorD>& in) {
        auto rm = TensorD::from_data(Shape{2}, {0.1, -0.2});
        auto rv = TensorD::from_data(Shape{2}, {1.5, 0.7});
        return sum_all(sigmoid(batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::infer, 0.99, 1e-5)));
    };
    CHECK(finite_diff_max_err(fbn_infer,
                              {randn(Shape{2, 2, 3, 3}, rng), randn(Shape{2}, rng, 0.3),
                               randn(Shape{2}, rng, 0.3)},
                              1e-4) < 1e-4);

    auto fdrop = [](const std::vector<TensorD>& in) {
        RngStream mask_rng(1234);  // frozen mask: same draw on every call
        return sum_all(sigmoid(dropout(in[0], 0.5, Mode::train, mask_rng)));
    };
    CHECK(finite_diff_max_err(fdrop, {randn(Shape{1, 2, 4, 4}, rng)}, 1e-5) < 1e-4);

    auto fcat = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(concat_channels(in[0], in[1])));
    };
    CHECK(finite_diff_max_err(fcat, {randn(Shape{1, 2, 2, 2}, rng), randn(Shape{1, 3, 2, 2}, rng)},
                              1e-5) < 1e-4);

    auto fup = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(nearest_upsample2d(in[0], 2)));
    };
    CHECK(finite_diff_max_err(fup, {randn(Shape{1, 2, 3, 3}, rng)}, 1e-5) < 1e-4);
}

TEST_CASE("composite conv-pool-sigmoid-dice graph matches finite differences") {
    RngStream rng(8);
    auto target = TensorD::zeros(Shape{1, 2, 2, 2});
    target.mutable_data()[0] = 1.0;
    target.mutable_data()[5] = 1.0;
    auto f = [target](const std::vector<TensorD>& in) {
        auto y = conv2d(in[0], in[1], in[2], Padding::same, 1);
        auto p = sigmoid(maxpool2d(y));
        return dice_loss(p, target);
    };
    double err = finite_diff_max_err(
        f, {randn(Shape{1, 1, 4, 4}, rng), randn(Shape{2, 1, 3, 3}, rng, 0.5),
            randn(Shape{2}, rng, 0.1)},
        1e-3);
    CHECK(err < 1e-4);
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    auto p = TensorT<float>::from_data(Shape{3}, {1.0f, -2.0f, 0.5f});
    auto before = std::vector<float>(p.data().begin(), p.data().end());
    AdamState<float> st;
    std::vector<Tensor> params{p};
    std::vector<float> zero(3, 0.0f);
    std::vector<std::span<const float>> grads{zero};
    adam_step(std::span<Tensor>(params), std::span<const std::span<const float>>(grads), st);
    CHECK(st.t == 1);
    for (int i = 0; i < 3; ++i) CHECK(p.data()[i] == before[i]);
}

TEST_CASE("adam first-step magnitude equals the bias-corrected hand value") {
    AdamState<double> st;
    st.lr = 1e-3;
    auto p = TensorD::from_data(Shape{2}, {1.0, 1.0});
    std::vector<double> g{0.5, -2.0};
    std::vector<TensorD> params{p};
    std::vector<std::span<const double>> grads{g};
    adam_step(std::span<TensorD>(params), std::span<const std::span<const double>>(grads), st);
    // t=1: mhat=g, vhat=g^2 -> step = lr*g/(|g|+eps)
    for (int i = 0; i < 2; ++i) {
        const double expect = 1.0 - 1e-3 * g[i] / (std::abs(g[i]) + 1e-7);
        CHECK(p.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("adam monotonically reduces a scalar quadratic") {
    AdamState<double> st;
    st.lr = 1e-1;
    auto x = TensorD::scalar(1.0).set_requires_grad(true);
    std::vector<TensorD> params{x};
    double losses[3];
    for (int step = 0; step < 2; ++step) {
        x.zero_grad();
        auto loss = mul_scalar(mul(x, x), 0.5);
        losses[step] = loss.item();
        backward(loss);
        adam_step(std::span<TensorD>(params), st);
    }
    losses[2] = 0.5 * x.item() * x.item();
    CHECK(losses[1] < losses[0]);
    CHECK(losses[2] < losses[1]);
}

TEST_CASE("adam shape mismatch raises") {
    AdamState<float> st;
    auto p = Tensor::zeros(Shape{3});
    std::vector<float> g(2, 1.0f);
    std::vector<Tensor> params{p};
    std::vector<std::span<const float>> grads{g};
    CHECK_THROWS_AS(
        adam_step(std::span<Tensor>(params), std::span<const std::span<const float>>(grads), st),
        ShapeError);
}

TEST_CASE("single-threaded determinism: same inputs, bitwise-equal gradients") {
    auto run = [] {
        RngStream rng(55);
        auto x = randn(Shape{1, 2, 8, 8}, rng).set_requires_grad(true);
        auto w = randn(Shape{2, 2, 3, 3}, rng).set_requires_grad(true);
        auto b = TensorD::zeros(Shape{2}).set_requires_grad(true);
        auto y = sigmoid(maxpool2d(conv2d(x, w, b, Padding::same, 1)));
        backward(mean_all(y));
        std::vector<double> out(w.grad().begin(), w.grad().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    CHECK(run() == run());
}
