#include "numsnet/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "numsnet/losses.hpp"
#include "numsnet/model.hpp"
#include "numsnet/ops.hpp"

namespace numsnet {

namespace {

TensorD uniform_t(Shape shape, RngStream& rng, double lo, double hi) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = rng.uniform(lo, hi);
    return TensorD::from_data(std::move(shape), std::move(v));
}

TensorD randn_t(Shape shape, RngStream& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = rng.normal() * scale;
    return TensorD::from_data(std::move(shape), std::move(v));
}

TensorD randn_off_zero(Shape shape, RngStream& rng, double margin) {
    auto t = randn_t(shape, rng);
    for (auto& v : t.mutable_data()) v += v >= 0.0 ? margin : -margin;
    return t;
}

TensorD binary_t(Shape shape, RngStream& rng, double p = 0.4) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = rng.uniform() < p ? 1.0 : 0.0;
    return TensorD::from_data(std::move(shape), std::move(v));
}

// --- double-precision mirror of the tiny NUMSnet forward ---------------------

constexpr std::int64_t kTinyWidth = 2;
constexpr int kTinyClasses = 2;
constexpr std::int64_t kTinyExtent = 16;

using ParamMap = std::unordered_map<std::string, TensorD>;

TensorD mirror_block(const ParamMap& p, const std::string& prefix, const TensorD& x, bool bn) {
    auto at = [&p](const std::string& n) {
        auto it = p.find(n);
        if (it == p.end()) throw ValueError("gradcheck mirror: missing parameter " + n);
        return it->second;
    };
    TensorD y = conv2d(x, at(prefix + ".c1.w"), at(prefix + ".c1.b"), Padding::same, 1);
    if (bn) {
        auto rm = TensorD::zeros(Shape{y.dim(1)});
        auto rv = TensorD::full(Shape{y.dim(1)}, 1.0);
        y = batchnorm2d(y, at(prefix + ".bn1.gamma"), at(prefix + ".bn1.beta"), rm, rv,
                        Mode::train, 0.99, 1e-3);
    }
    y = relu(y);
    y = conv2d(y, at(prefix + ".c2.w"), at(prefix + ".c2.b"), Padding::same, 1);
    if (bn) {
        auto rm = TensorD::zeros(Shape{y.dim(1)});
        auto rv = TensorD::full(Shape{y.dim(1)}, 1.0);
        y = batchnorm2d(y, at(prefix + ".bn2.gamma"), at(prefix + ".bn2.beta"), rm, rv,
                        Mode::train, 0.99, 1e-3);
    }
    return relu(y);
}

// Full tiny NUMSnet in float64: train-mode batch norm on encoder depths 1-4,
// dropout after X(4,1)/X(5,1) with a mask frozen by dropout_seed, empty
// propagation state (merges self-concatenate).
TensorD mirror_numsnet_forward(const ParamMap& p, const TensorD& x, std::uint64_t dropout_seed) {
    auto at = [&p](const std::string& n) {
        auto it = p.find(n);
        if (it == p.end()) throw ValueError("gradcheck mirror: missing parameter " + n);
        return it->second;
    };
    RngStream drop(dropout_seed);

    std::map<std::pair<int, int>, TensorD> out;
    TensorD cur = x;
    for (int i = 1; i <= 5; ++i) {
        const std::string name = "x" + std::to_string(i) + "1";
        TensorD y = mirror_block(p, name, cur, i <= 4);
        if (i == 4 || i == 5) y = dropout(y, 0.5, Mode::train, drop);
        out.emplace(std::make_pair(i, 1), y);
        if (i < 5) cur = maxpool2d(y);
    }
    const std::vector<std::pair<int, int>> merged = {{1, 2}, {1, 3}, {1, 4},
                                                     {2, 2}, {2, 3}, {3, 2}};
    for (int j = 2; j <= 5; ++j)
        for (int i = 1; i + j <= 6; ++i) {
            const std::string name = "x" + std::to_string(i) + std::to_string(j);
            TensorD up = conv_transpose2d(out.at({i + 1, j - 1}), at(name + ".up.w"),
                                          at(name + ".up.b"));
            std::vector<TensorD> cat;
            for (int jj = 1; jj < j; ++jj) cat.push_back(out.at({i, jj}));
            cat.push_back(up);
            TensorD y = mirror_block(p, name, concat_channels(std::span<const TensorD>(cat)),
                                     false);
            if (std::find(merged.begin(), merged.end(), std::make_pair(i, j)) != merged.end()) {
                TensorD m = concat_channels(y, y);
                m = relu(conv2d(m, at(name + ".m1.w"), at(name + ".m1.b"), Padding::same, 1));
                m = relu(conv2d(m, at(name + ".m2.w"), at(name + ".m2.b"), Padding::same, 1));
                y = m;
            }
            out.emplace(std::make_pair(i, j), y);
        }
    return sigmoid(conv2d(out.at({1, 5}), at("head.w"), at("head.b"), Padding::same, 1));
}

struct TinyDraw {
    std::vector<std::string> names;  // trainable parameters in registry order
    std::vector<TensorD> values;     // parallel to names, input image appended last
};

// Draw a tiny float32 model, mirror its parameters into float64, and verify
// that the mirror computes the same forward before any gradient probing.
TinyDraw draw_tiny_numsnet(RngStream& rng) {
    BuildOptions o;
    o.num_classes = kTinyClasses;
    o.widths = std::array<std::int64_t, 5>{kTinyWidth, kTinyWidth, kTinyWidth, kTinyWidth,
                                           kTinyWidth};
    o.seed = rng.next_u64();
    ModelGraph model = ModelGraph::build_numsnet(o);

    TinyDraw draw;
    ParamMap pmap;
    for (const auto& p : model.params()) {
        if (!p.trainable) continue;
        TensorD v = p.value.cast<double>();
        if (p.name.find("gamma") != std::string::npos) {
            // keep gammas near 1 for conditioning
            for (auto& e : v.mutable_data()) e = rng.uniform(0.8, 1.2);
        } else if (p.name.find(".b") != std::string::npos && p.value.shape().rank() == 1) {
            for (auto& e : v.mutable_data()) e = rng.uniform(-0.15, 0.15);
        }
        pmap.emplace(p.name, v);
        draw.names.push_back(p.name);
        draw.values.push_back(v);
    }
    RngStream xr = rng.split("x");
    TensorD x = uniform_t(Shape{1, 1, kTinyExtent, kTinyExtent}, xr, 0.05, 0.95);
    draw.values.push_back(x);

    // wiring cross-check against the float32 model path
    const std::uint64_t drop_seed = 424242;
    for (const auto& p : model.params()) {
        if (!p.trainable) continue;
        auto src = pmap.at(p.name).data();
        Tensor dst = model.param(p.name);
        for (std::size_t i = 0; i < src.size(); ++i)
            dst.mutable_data()[i] = static_cast<float>(src[i]);
    }
    Tensor x32 = x.cast<float>();
    RngStream drop32(drop_seed);
    ForwardOptions fo;
    fo.mode = Mode::train;
    fo.rng = &drop32;
    Tensor y32;
    {
        NoGradGuard ng;
        y32 = model.forward(x32, fo);
    }
    TensorD y64 = mirror_numsnet_forward(pmap, x, drop_seed);
    if (y32.numel() != y64.numel())
        throw ValueError("gradcheck mirror: forward shape diverged from the model");
    for (std::int64_t i = 0; i < y64.numel(); ++i) {
        const double a = y32.data()[static_cast<std::size_t>(i)];
        const double b = y64.data()[static_cast<std::size_t>(i)];
        if (std::abs(a - b) > 1e-3 * std::max(1.0, std::abs(b)))
            throw ValueError("gradcheck mirror: forward output diverged from the model");
    }
    return draw;
}

using Case = std::pair<const char*, GradCheckCase (*)(std::uint64_t)>;

GradCheckCase finish(const char* name, double err, double tol,
                     std::chrono::steady_clock::time_point t0) {
    GradCheckCase c;
    c.name = name;
    c.max_rel_err = err;
    c.tolerance = tol;
    c.pass = err < tol;
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return c;
}

GradCheckCase case_linear(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(add_scalar(mul_scalar(in[0], 3.5), 2.0));
    };
    RngStream rng(seed);
    const double err = finite_diff_max_err(f, {randn_t(Shape{4, 4}, rng)}, 1e-5);
    return finish("linear", err, 1e-9, t0);
}

GradCheckCase case_conv2d(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(conv2d(in[0], in[1], in[2], Padding::same, 1)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 4, 4}, r),
                                    randn_t(Shape{3, 2, 3, 3}, r, 0.5),
                                    randn_t(Shape{3}, r, 0.1)};
    };
    return finish("conv2d", finite_diff_check(f, sampler, 1e-4, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_conv2d_strided(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(conv2d(in[0], in[1], in[2], Padding::valid, 2)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 6, 6}, r),
                                    randn_t(Shape{2, 2, 2, 2}, r, 0.5),
                                    randn_t(Shape{2}, r, 0.1)};
    };
    return finish("conv2d-strided", finite_diff_check(f, sampler, 1e-4, RngStream(seed)), 1e-4,
                  t0);
}

GradCheckCase case_conv_transpose(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(conv_transpose2d(in[0], in[1], in[2])));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 3, 3, 3}, r),
                                    randn_t(Shape{3, 2, 2, 2}, r, 0.5),
                                    randn_t(Shape{2}, r, 0.1)};
    };
    return finish("conv_transpose2d", finite_diff_check(f, sampler, 1e-4, RngStream(seed)), 1e-4,
                  t0);
}

GradCheckCase case_maxpool(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) { return sum_all(sigmoid(maxpool2d(in[0]))); };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 6, 6}, r)};
    };
    return finish("maxpool2d", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_relu(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) { return sum_all(sigmoid(relu(in[0]))); };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_off_zero(Shape{3, 5}, r, 0.05)};
    };
    return finish("relu", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_sigmoid(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) { return sum_all(sigmoid(in[0])); };
    RngStream rng(seed);
    const double err = finite_diff_max_err(f, {randn_t(Shape{4, 4}, rng)}, 1e-5);
    return finish("sigmoid", err, 1e-4, t0);
}

GradCheckCase case_bn_train(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        auto rm = TensorD::zeros(Shape{2});
        auto rv = TensorD::full(Shape{2}, 1.0);
        return sum_all(sigmoid(batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::train, 0.99, 1e-5)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{4, 2, 3, 3}, r),
                                    uniform_t(Shape{2}, r, 0.8, 1.2),
                                    randn_t(Shape{2}, r, 0.3)};
    };
    return finish("batchnorm-train", finite_diff_check(f, sampler, 1e-3, RngStream(seed)), 1e-4,
                  t0);
}

GradCheckCase case_bn_infer(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        auto rm = TensorD::from_data(Shape{2}, {0.1, -0.2});
        auto rv = TensorD::from_data(Shape{2}, {1.5, 0.7});
        return sum_all(sigmoid(batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::infer, 0.99, 1e-5)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{2, 2, 3, 3}, r),
                                    uniform_t(Shape{2}, r, 0.8, 1.2),
                                    randn_t(Shape{2}, r, 0.3)};
    };
    return finish("batchnorm-infer", finite_diff_check(f, sampler, 1e-4, RngStream(seed)), 1e-4,
                  t0);
}

GradCheckCase case_dropout(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        RngStream frozen(9876);  // identical mask on every evaluation
        return sum_all(sigmoid(dropout(in[0], 0.5, Mode::train, frozen)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 4, 4}, r)};
    };
    return finish("dropout", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_concat(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        auto cat = concat_channels(in[0], in[1]);
        return sum_all(sigmoid(slice_channels(cat, 1, 4)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 3, 3}, r), randn_t(Shape{1, 3, 3, 3}, r)};
    };
    return finish("concat-slice", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_upsample(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        return sum_all(sigmoid(nearest_upsample2d(in[0], 2)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 3, 3}, r)};
    };
    return finish("nearest-upsample", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4,
                  t0);
}

GradCheckCase case_elementwise(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto f = [](const std::vector<TensorD>& in) {
        auto a = clamp(sigmoid(in[0]), 0.05, 0.95);
        auto b = sigmoid(in[1]);
        auto expr = mul(log_op(a), rsub_scalar(1.0, b));
        return mean_all(divide(expr, add_scalar(mul(b, b), 1.0)));
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{3, 4}, r), randn_t(Shape{3, 4}, r)};
    };
    return finish("elementwise", finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_loss(const char* name, std::uint64_t seed,
                        TensorD (*loss)(const TensorD&, const TensorD&)) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream grng(seed ^ 0x5555);
    auto target = binary_t(Shape{1, 2, 4, 4}, grng);
    auto f = [target, loss](const std::vector<TensorD>& in) {
        return loss(sigmoid(in[0]), target);
    };
    auto sampler = [](RngStream& r) {
        return std::vector<TensorD>{randn_t(Shape{1, 2, 4, 4}, r)};
    };
    return finish(name, finite_diff_check(f, sampler, 1e-5, RngStream(seed)), 1e-4, t0);
}

GradCheckCase case_dice(std::uint64_t seed) { return case_loss("dice-loss", seed, dice_loss<double>); }
GradCheckCase case_bce(std::uint64_t seed) { return case_loss("bce-loss", seed, bce_loss<double>); }
GradCheckCase case_bdl(std::uint64_t seed) {
    return case_loss("bce-dice-loss", seed, bce_dice_loss<double>);
}

GradCheckCase case_numsnet_forward(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream trng(seed ^ 0xABCD);
    auto target = binary_t(Shape{1, kTinyClasses, kTinyExtent, kTinyExtent}, trng);

    std::vector<std::string> names;  // captured from the first draw
    auto sampler = [&names](RngStream& r) {
        TinyDraw draw = draw_tiny_numsnet(r);
        names = draw.names;
        return draw.values;
    };
    auto f = [&names, target](const std::vector<TensorD>& in) {
        ParamMap pmap;
        for (std::size_t i = 0; i < names.size(); ++i) pmap.emplace(names[i], in[i]);
        TensorD pred = mirror_numsnet_forward(pmap, in.back(), 424242);
        return bce_dice_loss(pred, target);
    };
    // multi-scale probe: wide steps dodge dead-parameter roundoff, narrow
    // steps dodge relu/pool kinks inside the bracket
    const double steps[3] = {1e-4, 1e-5, 2e-6};
    double best = std::numeric_limits<double>::infinity();
    RngStream rng(seed);
    for (int attempt = 0; attempt < 3 && best >= 1e-4; ++attempt) {
        RngStream draw = rng.split(static_cast<std::uint64_t>(attempt));
        best = std::min(best, finite_diff_max_err(f, sampler(draw), steps, 1e-4));
    }
    return finish("numsnet-forward", best, 1e-4, t0);
}

const Case kCases[] = {
    {"linear", case_linear},
    {"conv2d", case_conv2d},
    {"conv2d-strided", case_conv2d_strided},
    {"conv_transpose2d", case_conv_transpose},
    {"maxpool2d", case_maxpool},
    {"relu", case_relu},
    {"sigmoid", case_sigmoid},
    {"batchnorm-train", case_bn_train},
    {"batchnorm-infer", case_bn_infer},
    {"dropout", case_dropout},
    {"concat-slice", case_concat},
    {"nearest-upsample", case_upsample},
    {"elementwise", case_elementwise},
    {"dice-loss", case_dice},
    {"bce-loss", case_bce},
    {"bce-dice-loss", case_bdl},
    {"numsnet-forward", case_numsnet_forward},
};

}  // namespace

std::vector<std::string> gradcheck_case_names() {
    std::vector<std::string> out;
    for (const auto& c : kCases) out.emplace_back(c.first);
    return out;
}

std::vector<GradCheckCase> run_gradcheck_suite(std::span<const std::string> only,
                                               std::uint64_t seed) {
    for (const auto& name : only) {
        bool known = false;
        for (const auto& c : kCases) known = known || name == c.first;
        if (!known) throw ValueError("gradcheck: unknown case " + name);
    }
    std::vector<GradCheckCase> out;
    std::uint64_t case_seed = seed;
    for (const auto& c : kCases) {
        ++case_seed;
        if (!only.empty() &&
            std::find(only.begin(), only.end(), std::string(c.first)) == only.end())
            continue;
        out.push_back(c.second(case_seed));
    }
    return out;
}

}  // namespace numsnet
