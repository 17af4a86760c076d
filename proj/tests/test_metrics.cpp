#include <cmath>
#include <vector>

#include "doctest.h"
#include "numsnet/gradcheck.hpp"
#include "numsnet/losses.hpp"
#include "numsnet/metrics.hpp"
#include "numsnet/rng.hpp"

using namespace numsnet;

namespace {

Tensor random_planes(int d, int h, int w, double fill_prob, RngStream& rng) {
    std::vector<float> v(static_cast<std::size_t>(d * h * w));
    for (auto& e : v) e = rng.uniform() < fill_prob ? 1.0f : 0.0f;
    return Tensor::from_data(Shape{d, h, w}, std::move(v));
}

// Brute-force pixel-count oracle, independent of the library path.
struct OracleCounts {
    long long inter = 0, p = 0, g = 0;
};

std::vector<OracleCounts> oracle_counts(const Tensor& pred, const Tensor& gt) {
    const int d = static_cast<int>(pred.dim(0));
    const int hw = static_cast<int>(pred.dim(1) * pred.dim(2));
    std::vector<OracleCounts> out(d);
    for (int c = 0; c < d; ++c)
        for (int e = 0; e < hw; ++e) {
            const bool pv = pred.data()[c * hw + e] != 0.0f;
            const bool gv = gt.data()[c * hw + e] != 0.0f;
            out[c].p += pv;
            out[c].g += gv;
            out[c].inter += pv && gv;
        }
    return out;
}

TensorD random_probs(Shape shape, RngStream& rng) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = 0.02 + 0.96 * rng.uniform();
    return TensorD::from_data(std::move(shape), std::move(v));
}

TensorD random_binary_d(Shape shape, RngStream& rng, double p = 0.4) {
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = rng.uniform() < p ? 1.0 : 0.0;
    return TensorD::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("metrics match the brute-force oracle exactly on 1000 random cases") {
    RngStream rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = 1 + static_cast<int>(rng.uniform_int(3));
        auto pred = random_planes(d, 8, 8, rng.uniform(), rng);
        auto gt = random_planes(d, 8, 8, rng.uniform(), rng);
        auto oc = oracle_counts(pred, gt);

        auto i = iou(pred, gt);
        auto dd = dice(pred, gt);
        auto dr = dice_raw(pred, gt);
        auto pr = precision(pred, gt);
        auto re = recall(pred, gt);
        for (int c = 0; c < d; ++c) {
            const auto& o = oc[c];
            const long long uni = o.p + o.g - o.inter;
            if (uni == 0)
                CHECK(*i.per_class[c] == 1.0);
            else
                CHECK(*i.per_class[c] == static_cast<double>(o.inter) / static_cast<double>(uni));

            CHECK(*dd.per_class[c] ==
                  (2.0 * static_cast<double>(o.inter) + 1.0) / (static_cast<double>(o.p + o.g) + 1.0));

            if (o.p + o.g == 0)
                CHECK(!dr.per_class[c].has_value());
            else
                CHECK(*dr.per_class[c] ==
                      2.0 * static_cast<double>(o.inter) / static_cast<double>(o.p + o.g));

            if (o.p == 0)
                CHECK(!pr.per_class[c].has_value());
            else
                CHECK(*pr.per_class[c] == static_cast<double>(o.inter) / static_cast<double>(o.p));

            if (o.g == 0)
                CHECK(!re.per_class[c].has_value());
            else
                CHECK(*re.per_class[c] == static_cast<double>(o.inter) / static_cast<double>(o.g));
        }
    }
}

TEST_CASE("hand-evaluated 2x2 example: IoU 1/2, Dice 3/4, Pr 1/2, Re 1") {
    auto pred = Tensor::from_data(Shape{1, 2, 2}, {1, 1, 0, 0});
    auto gt = Tensor::from_data(Shape{1, 2, 2}, {1, 0, 0, 0});
    CHECK(*iou(pred, gt).per_class[0] == 0.5);
    CHECK(*dice(pred, gt).per_class[0] == 0.75);
    CHECK(*precision(pred, gt).per_class[0] == 0.5);
    CHECK(*recall(pred, gt).per_class[0] == 1.0);
}

TEST_CASE("identical nonempty planes score 1.0; disjoint sets score 0") {
    auto a = Tensor::from_data(Shape{1, 2, 2}, {1, 0, 1, 0});
    CHECK(*iou(a, a).per_class[0] == 1.0);
    CHECK(*dice(a, a).per_class[0] == 1.0);  // (2k+1)/(2k+1)
    auto b = Tensor::from_data(Shape{1, 2, 2}, {0, 1, 0, 1});
    CHECK(*iou(a, b).per_class[0] == 0.0);
}

TEST_CASE("empty-set policies: IoU 1, smoothed Dice 1, Pr/Re excluded") {
    auto empty = Tensor::zeros(Shape{1, 2, 2});
    auto some = Tensor::from_data(Shape{1, 2, 2}, {1, 0, 0, 0});
    CHECK(*iou(empty, empty).per_class[0] == 1.0);
    CHECK(*dice(empty, empty).per_class[0] == 1.0);
    CHECK(!precision(empty, some).per_class[0].has_value());
    CHECK(*recall(empty, some).per_class[0] == 0.0);
    CHECK(!recall(some, empty).per_class[0].has_value());
    CHECK_THROWS_AS(iou(empty, Tensor::zeros(Shape{1, 2, 3})), ShapeError);
}

TEST_CASE("Dice >= IoU per class whenever both are defined on nonempty sets") {
    RngStream rng(202);
    for (int trial = 0; trial < 200; ++trial) {
        auto pred = random_planes(2, 8, 8, 0.3 + 0.4 * rng.uniform(), rng);
        auto gt = random_planes(2, 8, 8, 0.3 + 0.4 * rng.uniform(), rng);
        auto i = iou(pred, gt);
        auto d = dice(pred, gt);
        for (int c = 0; c < 2; ++c) CHECK(*d.per_class[c] >= *i.per_class[c]);
    }
}

TEST_CASE("per-class Dice of the report never drops below per-class IoU") {
    RngStream rng(203);
    EvalAccumulator acc(2);
    for (int s = 0; s < 12; ++s)
        acc.add_slice(random_planes(2, 8, 8, rng.uniform(), rng),
                      random_planes(2, 8, 8, rng.uniform(), rng));
    auto rep = acc.finalize("test", "ordered");
    for (const auto& row : rep.classes) {
        CHECK(row.dice_smoothed >= row.iou);
        CHECK(row.iou >= 0.0);
        CHECK(row.dice_smoothed <= 100.0);
    }
    CHECK(rep.slice_count == 12);
}

TEST_CASE("dice loss is -1 at a perfect binary prediction and when both are empty") {
    auto g = TensorD::from_data(Shape{1, 2, 2, 2}, {1, 0, 0, 1, 0, 0, 1, 0});
    CHECK(dice_loss(g, g).item() == doctest::Approx(-1.0).epsilon(1e-12));
    auto z = TensorD::zeros(Shape{1, 2, 2, 2});
    CHECK(dice_loss(z, z).item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("soft Dice equals hard Dice on binary inputs") {
    RngStream rng(303);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = random_binary_d(Shape{1, 3, 4, 4}, rng);
        auto g = random_binary_d(Shape{1, 3, 4, 4}, rng);
        const double soft = -dice_loss(p, g).item();
        auto hard = dice(p.cast<float>(), g.cast<float>());
        CHECK(soft == doctest::Approx(*hard.mean).epsilon(1e-12));
    }
}

TEST_CASE("bce loss at 0.5 predictions is ln 2; at perfect predictions it hits the clamp floor") {
    auto g = TensorD::from_data(Shape{1, 1, 2, 2}, {1, 0, 1, 0});
    auto half = TensorD::full(Shape{1, 1, 2, 2}, 0.5);
    CHECK(bce_loss(half, g).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_loss(g, g).item() == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(bce_loss(g, g).item() > 0.0);  // clamp keeps the logs finite
}

TEST_CASE("BDL identity holds to 1e-12 on random inputs") {
    RngStream rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        auto p = random_probs(Shape{1, 2, 4, 4}, rng);
        auto g = random_binary_d(Shape{1, 2, 4, 4}, rng);
        const double bdl = bce_dice_loss(p, g).item();
        const double parts = bce_loss(p, g).item() / 2.0 + dice_loss(p, g).item();
        CHECK(std::abs(bdl - parts) < 1e-12);
    }
}

TEST_CASE("loss gradients match finite differences") {
    RngStream rng(505);
    auto g = random_binary_d(Shape{1, 2, 3, 3}, rng);
    auto fd = [g](const std::vector<TensorD>& in) { return dice_loss(in[0], g); };
    auto fb = [g](const std::vector<TensorD>& in) { return bce_loss(in[0], g); };
    auto fbd = [g](const std::vector<TensorD>& in) { return bce_dice_loss(in[0], g); };
    auto probs = random_probs(Shape{1, 2, 3, 3}, rng);
    CHECK(finite_diff_max_err(fd, {probs}, 1e-5) < 1e-4);
    CHECK(finite_diff_max_err(fb, {probs}, 1e-5) < 1e-4);
    CHECK(finite_diff_max_err(fbd, {probs}, 1e-5) < 1e-4);
}

TEST_CASE("report CSV schema is stable") {
    EvalAccumulator acc(1);
    auto p = Tensor::from_data(Shape{1, 2, 2}, {1, 0, 0, 0});
    acc.add_slice(p, p);
    auto rep = acc.finalize("unet", "ordered");
    auto csv = rep.to_csv();
    CHECK(csv.rfind("model,order,class,pix,pr,re,iou,dice,dice_raw,slices\n", 0) == 0);
    CHECK(csv.find("unet,ordered,class1,1,100,100,100,100,100,1") != std::string::npos);
    CHECK(csv.find("unet,ordered,mean,") != std::string::npos);
}
