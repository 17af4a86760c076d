#include <vector>

#include "doctest.h"
#include "numsnet/model.hpp"

using namespace numsnet;

namespace {

Tensor random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
    RngStream rng(seed);
    std::vector<float> v(static_cast<std::size_t>(h * w));
    for (auto& e : v) e = static_cast<float>(rng.uniform());
    return Tensor::from_data(Shape{1, 1, h, w}, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("parameter counts match the published table for all five architectures") {
    struct Row {
        Arch arch;
        std::int64_t total, trainable, non_trainable;
    };
    const Row rows[] = {
        {Arch::unet, 7767523, 7763555, 3968},
        {Arch::wunet, 9290998, 9286658, 4340},
        {Arch::unetpp, 9045507, 9043587, 1920},
        {Arch::numsnet, 11713943, 11711843, 2100},
        {Arch::numsall, 14526368, 14524268, 2100},
    };
    for (const auto& r : rows) {
        auto m = ModelGraph::build(r.arch, {});
        auto c = m.count_params();
        INFO(arch_name(r.arch));
        CHECK(c.total == r.total);
        CHECK(c.trainable == r.trainable);
        CHECK(c.non_trainable == r.non_trainable);
    }
}

TEST_CASE("non-trainable counts equal the batch-norm running-stat arithmetic") {
    // 2 convs/block x 2 running stats x sum of normalized widths
    CHECK(ModelGraph::build(Arch::wunet, {}).count_params().non_trainable ==
          2 * 2 * (35 + 70 + 140 + 280 + 560));
    CHECK(ModelGraph::build(Arch::unetpp, {}).count_params().non_trainable ==
          2 * 2 * (32 + 64 + 128 + 256));
    CHECK(ModelGraph::build(Arch::numsnet, {}).count_params().non_trainable ==
          2 * 2 * (35 + 70 + 140 + 280));
}

TEST_CASE("toy unet parameter count equals the hand-enumerated sum") {
    BuildOptions o;
    o.num_classes = 1;
    o.widths = std::array<std::int64_t, 5>{1, 1, 1, 1, 1};
    o.batchnorm = false;
    auto m = ModelGraph::build_unet(o);
    // encoder: 5 blocks x two 3x3 convs (9w+1b each) = 100
    // decoder: 4 x (2x2 up conv 5, first conv 19, second conv 10) = 136
    // head 1x1: 2
    CHECK(m.count_params().trainable == 238);
    CHECK(m.count_params().non_trainable == 0);
}

TEST_CASE("registry details: first conv and batch-norm contributions") {
    auto m = ModelGraph::build_unet({});
    CHECK(m.param("x11.c1.w").numel() + m.param("x11.c1.b").numel() == 320);  // 1*32*9+32
    // a 32-channel batch-norm pair adds 64 trainable + 64 non-trainable
    std::int64_t bn_train = m.param("x11.bn1.gamma").numel() + m.param("x11.bn1.beta").numel() +
                            m.param("x11.bn2.gamma").numel() + m.param("x11.bn2.beta").numel();
    std::int64_t bn_fixed = m.param("x11.bn1.rmean").numel() + m.param("x11.bn1.rvar").numel() +
                            m.param("x11.bn2.rmean").numel() + m.param("x11.bn2.rvar").numel();
    CHECK(bn_train == 128);
    CHECK(bn_fixed == 128);
    CHECK(ModelGraph().count_params().total == 0);
}

TEST_CASE("deep supervision adds exactly the three auxiliary 1x1 heads") {
    BuildOptions ds;
    ds.deep_supervision = true;
    auto base = ModelGraph::build_unetpp({}).count_params();
    auto with = ModelGraph::build_unetpp(ds).count_params();
    CHECK(with.trainable - base.trainable == 3 * (64 + 128 + 256) + 3 * 3);
    CHECK(with.non_trainable == base.non_trainable);
}

TEST_CASE("unet forward emits the documented shapes at 256x256") {
    auto m = ModelGraph::build_unet({});
    auto x = random_image(256, 256, 1);
    ForwardTrace trace;
    ForwardOptions o;
    o.trace = &trace;
    auto y = m.forward(x, o);
    CHECK(y.shape() == Shape{1, 3, 256, 256});
    for (float v : y.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    CHECK(trace.shapes.at("x11") == Shape{1, 32, 256, 256});
    CHECK(trace.shapes.at("x11.pool") == Shape{1, 32, 128, 128});
    CHECK(trace.shapes.at("x51") == Shape{1, 512, 16, 16});      // bottleneck
    CHECK(trace.shapes.at("x42.concat") == Shape{1, 512, 32, 32});  // depth-4 merge
    CHECK(trace.shapes.at("x42") == Shape{1, 256, 32, 32});
}

TEST_CASE("unetpp nested layer X(1,2) consumes X(1,1) plus upsampled X(2,1)") {
    auto m = ModelGraph::build_unetpp({});
    auto x = random_image(256, 256, 2);
    ForwardTrace trace;
    ForwardOptions o;
    o.trace = &trace;
    auto y = m.forward(x, o);
    CHECK(y.shape() == Shape{1, 3, 256, 256});
    CHECK(trace.shapes.at("x12.concat") == Shape{1, 64, 256, 256});
    CHECK(trace.shapes.at("x12") == Shape{1, 32, 256, 256});
    CHECK(trace.shapes.at("x15.concat") == Shape{1, 160, 256, 256});
}

TEST_CASE("wunet bottleneck scales proportionally") {
    auto m = ModelGraph::build_wunet({});
    auto x = random_image(256, 256, 3);
    ForwardTrace trace;
    ForwardOptions o;
    o.trace = &trace;
    auto y = m.forward(x, o);
    CHECK(y.shape() == Shape{1, 3, 256, 256});
    CHECK(trace.shapes.at("x51") == Shape{1, 560, 16, 16});
}

TEST_CASE("numsnet propagation: state shapes, self-concat first scan, stored merges") {
    BuildOptions o;
    o.num_classes = 2;
    o.widths = std::array<std::int64_t, 5>{4, 8, 12, 16, 20};
    o.seed = 5;
    auto m = ModelGraph::build_numsnet(o);
    CHECK(m.propagated_layers().size() == 6);

    auto x = random_image(64, 64, 4);
    PropagationState empty;
    ForwardTrace t1;
    auto [y1, s1] = forward_with_state(m, x, empty, Mode::infer, nullptr, true, &t1);
    CHECK(y1.shape() == Shape{1, 2, 64, 64});
    CHECK(s1.maps.size() == 6);
    auto expect = m.state_shapes(1, 64, 64);
    for (const auto& [id, shape] : expect) {
        CHECK(s1.maps.at(id).shape() == shape);
        CHECK(shape.dims[1] == m.widths()[id.row - 1]);
    }
    // first scan: merge consumed the layer's own output
    for (const auto& id : m.propagated_layers())
        CHECK(t1.merge_prev.at(id).impl() == t1.merge_current.at(id).impl());

    // second scan with the same slice: merge inputs are (first new_state, the
    // same current outputs) for merge layers with no merge upstream
    s1.phase = Mode::infer;
    ForwardTrace t2;
    auto [y2, s2] = forward_with_state(m, x, s1, Mode::infer, nullptr, true, &t2);
    for (const auto& id : m.propagated_layers())
        CHECK(bitwise_equal(t2.merge_prev.at(id), s1.maps.at(id)));
    for (LayerId id : {LayerId{1, 2}, LayerId{2, 2}, LayerId{3, 2}})
        CHECK(bitwise_equal(t2.merge_current.at(id), t1.merge_current.at(id)));
    CHECK(s2.maps.size() == 6);
    CHECK(!bitwise_equal(y1, y2));  // state dependence is real
}

TEST_CASE("numsall transmits the ten up-sampling layers and keeps the output shape") {
    BuildOptions o;
    o.num_classes = 2;
    o.widths = std::array<std::int64_t, 5>{4, 8, 12, 16, 20};
    auto m = ModelGraph::build_numsall(o);
    const std::vector<LayerId> expect = {{1, 2}, {1, 3}, {1, 4}, {1, 5}, {2, 2},
                                         {2, 3}, {2, 4}, {3, 2}, {3, 3}, {4, 2}};
    CHECK(m.propagated_layers() == expect);

    auto x = random_image(64, 64, 6);
    PropagationState empty;
    auto [y1, s1] = forward_with_state(m, x, empty, Mode::infer);
    CHECK(y1.shape() == Shape{1, 2, 64, 64});
    CHECK(s1.maps.size() == 10);
    s1.phase = Mode::infer;
    auto [y2, s2] = forward_with_state(m, x, s1, Mode::infer);
    CHECK(y2.shape() == Shape{1, 2, 64, 64});
}

TEST_CASE("non-propagating models return the state unchanged and ignore it") {
    BuildOptions o;
    o.num_classes = 2;
    o.widths = std::array<std::int64_t, 5>{4, 8, 12, 16, 20};
    auto m = ModelGraph::build_unet(o);
    auto x = random_image(64, 64, 7);

    PropagationState empty;
    auto [y1, s1] = forward_with_state(m, x, empty, Mode::infer);
    PropagationState junk;
    junk.phase = Mode::infer;
    junk.maps[{1, 2}] = Tensor::full(Shape{1, 4, 64, 64}, 0.5f);
    auto [y2, s2] = forward_with_state(m, x, junk, Mode::infer);
    CHECK(bitwise_equal(y1, y2));
    CHECK(s2.maps.size() == junk.maps.size());
}

TEST_CASE("deep supervision heads resize to the input extent; depth-1 equals the main path") {
    BuildOptions o;
    o.deep_supervision = true;
    o.num_classes = 3;
    o.widths = std::array<std::int64_t, 5>{4, 8, 12, 16, 20};
    auto m = ModelGraph::build_unetpp(o);
    auto x = random_image(64, 64, 8);
    auto heads = m.forward_heads(x);
    REQUIRE(heads.size() == 4);
    for (const auto& h : heads) CHECK(h.shape() == Shape{1, 3, 64, 64});
    auto main = m.forward(x);
    CHECK(bitwise_equal(heads[0], main));
}

TEST_CASE("build and forward error paths") {
    CHECK_THROWS_AS(ModelGraph::build_unet(BuildOptions{.deep_supervision = true}), ValueError);
    BuildOptions bad;
    bad.num_classes = 0;
    CHECK_THROWS_AS(ModelGraph::build_unet(bad), ValueError);

    BuildOptions small;
    small.widths = std::array<std::int64_t, 5>{2, 2, 2, 2, 2};
    small.num_classes = 1;
    auto m = ModelGraph::build_numsnet(small);
    CHECK_THROWS_AS(m.forward(Tensor::zeros(Shape{1, 1, 60, 64})), ShapeError);
    CHECK_THROWS_AS(m.forward(Tensor::zeros(Shape{1, 2, 64, 64})), ShapeError);

    // train mode on a dropout-bearing model requires an rng stream
    ForwardOptions train_no_rng;
    train_no_rng.mode = Mode::train;
    CHECK_THROWS_AS(m.forward(Tensor::zeros(Shape{1, 1, 64, 64}), train_no_rng), ValueError);

    // mismatched propagation state
    PropagationState bad_state;
    bad_state.phase = Mode::infer;
    bad_state.maps[{1, 2}] = Tensor::zeros(Shape{1, 2, 64, 64});
    ForwardOptions with_state;
    with_state.state_in = &bad_state;
    CHECK_THROWS_AS(m.forward(Tensor::zeros(Shape{1, 1, 64, 64}), with_state), Error);

    auto plain = ModelGraph::build_unetpp(small);
    CHECK_THROWS_AS(plain.forward_heads(Tensor::zeros(Shape{1, 1, 64, 64})), ValueError);
}

TEST_CASE("weight init is seed-deterministic") {
    BuildOptions a;
    a.seed = 42;
    auto m1 = ModelGraph::build_numsnet(a);
    auto m2 = ModelGraph::build_numsnet(a);
    a.seed = 43;
    auto m3 = ModelGraph::build_numsnet(a);
    CHECK(bitwise_equal(m1.param("x11.c1.w"), m2.param("x11.c1.w")));
    CHECK(!bitwise_equal(m1.param("x11.c1.w"), m3.param("x11.c1.w")));
}
