#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "numsnet/stack.hpp"

using namespace numsnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("numsnet-test-" + tag + "-" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("minmax normalization endpoints, midpoint and constant slice") {
    Plane p{1, 3, {10.0f, 60.0f, 110.0f}};
    auto out = normalize_minmax(p);
    CHECK(out.v[0] == 0.0f);
    CHECK(out.v[1] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(out.v[2] == 1.0f);

    Plane c{2, 2, {42.0f, 42.0f, 42.0f, 42.0f}};
    for (float v : normalize_minmax(c).v) CHECK(v == 0.0f);
}

TEST_CASE("label planes: indicators, heart example, mutual exclusivity") {
    MaskPlane zeros{2, 2, {0, 0, 0, 0}};
    const int pix7[7] = {205, 420, 500, 550, 600, 820, 850};
    auto planes = make_label_planes(zeros, pix7);
    for (float v : planes.data()) CHECK(v == 0.0f);

    MaskPlane heart{2, 2, {205, 0, 0, 850}};
    auto hp = make_label_planes(heart, pix7);
    CHECK(hp.shape() == Shape{1, 7, 2, 2});
    auto plane_sum = [&hp](int c) {
        float s = 0;
        for (int e = 0; e < 4; ++e) s += hp.data()[c * 4 + e];
        return s;
    };
    CHECK(plane_sum(0) == 1.0f);
    CHECK(plane_sum(6) == 1.0f);
    for (int c = 1; c < 6; ++c) CHECK(plane_sum(c) == 0.0f);

    RngStream rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        MaskPlane m{4, 4, {}};
        m.v.resize(16);
        for (auto& v : m.v)
            v = static_cast<std::uint16_t>(pix7[rng.uniform_int(8) % 7] * (rng.uniform() < 0.7));
        auto pl = make_label_planes(m, pix7);
        for (int e = 0; e < 16; ++e) {
            float s = 0;
            for (int c = 0; c < 7; ++c) s += pl.data()[c * 16 + e];
            CHECK(s <= 1.0f);
        }
    }
    const int dup[2] = {205, 205};
    CHECK_THROWS_AS(make_label_planes(zeros, dup), ValueError);
}

TEST_CASE("thresholding is strict at tau and idempotent") {
    auto raw = Tensor::from_data(Shape{1, 1, 1, 3}, {0.49f, 0.51f, 0.5f});
    auto p = threshold_prediction(raw);
    CHECK(p.data()[0] == 0.0f);
    CHECK(p.data()[1] == 1.0f);
    CHECK(p.data()[2] == 0.0f);  // strictly greater than tau

    auto nine = threshold_prediction(Tensor::full(Shape{1, 1, 2, 2}, 0.9f));
    for (float v : nine.data()) CHECK(v == 1.0f);

    auto again = threshold_prediction(p);
    for (std::size_t i = 0; i < p.data().size(); ++i) CHECK(again.data()[i] == p.data()[i]);
}

TEST_CASE("resize: identity is bit-exact, constants stay constant, labels stay closed") {
    MaskPlane m{4, 4, {}};
    m.v.resize(16);
    for (int i = 0; i < 16; ++i) m.v[i] = static_cast<std::uint16_t>(i * 50);
    auto same = resize_nearest(m, 4, 4);
    CHECK(same.v == m.v);

    Plane big{8, 8, std::vector<float>(64, 7.0f)};
    auto small = resize_bilinear(big, 4, 4);
    for (float v : small.v) CHECK(v == doctest::Approx(7.0f));

    RngStream rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        MaskPlane src{6, 6, {}};
        src.v.resize(36);
        std::set<std::uint16_t> allowed;
        for (auto& v : src.v) {
            v = static_cast<std::uint16_t>(rng.uniform_int(4) * 205);
            allowed.insert(v);
        }
        const int th = 2 + static_cast<int>(rng.uniform_int(10));
        const int tw = 2 + static_cast<int>(rng.uniform_int(10));
        for (auto v : resize_nearest(src, th, tw).v) CHECK(allowed.count(v) == 1);
    }
}

TEST_CASE("split sizing follows the fractions") {
    auto plan = sample_split(829, {}, SplitStrategy::random_ordered, 0.10, 0.01, 0.5, 3);
    CHECK(plan.train.size() == 82);
    CHECK(plan.val.size() == 8);  // ceil(0.01 * 747)
    CHECK(plan.train.size() + plan.val.size() + plan.test.size() == 829);
    CHECK(std::is_sorted(plan.train.begin(), plan.train.end()));

    auto init = sample_split(20, {}, SplitStrategy::initial_seq);
    CHECK(init.train == std::vector<int>{0, 1});

    auto mid = sample_split(10, {}, SplitStrategy::mid_seq);
    CHECK(mid.train == std::vector<int>{5});
    CHECK(mid.val.size() == 1);
    CHECK(mid.test.size() == 8);
}

TEST_CASE("every strategy partitions the stack with ascending train indices") {
    for (auto strategy : {SplitStrategy::random_ordered, SplitStrategy::initial_seq,
                          SplitStrategy::mid_rand, SplitStrategy::mid_seq}) {
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            auto plan = sample_split(57, {}, strategy, 0.10, 0.01, 0.5, seed);
            CHECK(std::is_sorted(plan.train.begin(), plan.train.end()));
            std::set<int> all;
            for (const auto* v : {&plan.train, &plan.val, &plan.test})
                for (int i : *v) CHECK(all.insert(i).second);
            CHECK(all.size() == 57);
            CHECK(*all.begin() == 0);
            CHECK(*all.rbegin() == 56);
            if (strategy == SplitStrategy::mid_rand)
                for (int i : plan.train) CHECK(i >= 57 / 2);
        }
    }
}

TEST_CASE("annotation coverage constraint redraws or shifts deterministically") {
    // only the second half of the stack is annotated
    std::vector<std::uint8_t> ann(40, 0);
    for (int i = 20; i < 40; ++i) ann[i] = 1;

    auto seq = sample_split(40, ann, SplitStrategy::initial_seq, 0.10, 0.01, 1.0, 1);
    for (int i : seq.train) CHECK(ann[static_cast<std::size_t>(i)] == 1);

    auto rnd = sample_split(40, ann, SplitStrategy::random_ordered, 0.10, 0.01, 1.0, 1);
    int count = 0;
    for (int i : rnd.train) count += ann[static_cast<std::size_t>(i)];
    CHECK(count == static_cast<int>(rnd.train.size()));

    std::vector<std::uint8_t> none(40, 0);
    CHECK_THROWS_AS(sample_split(40, none, SplitStrategy::mid_seq, 0.10, 0.01, 0.5, 1),
                    ValueError);
    CHECK_THROWS_AS(sample_split(8, {}, SplitStrategy::mid_seq), ValueError);
}

TEST_CASE("split plans replay exactly through the text file") {
    TempDir tmp("split");
    auto plan = sample_split(60, {}, SplitStrategy::mid_rand, 0.10, 0.01, 0.5, 9);
    const auto path = (tmp.path / "plan.txt").string();
    plan.save(path);
    auto back = SplitPlan::load(path);
    CHECK(back.strategy == plan.strategy);
    CHECK(back.seed == plan.seed);
    CHECK(back.n == plan.n);
    CHECK(back.train == plan.train);
    CHECK(back.val == plan.val);
    CHECK(back.test == plan.test);

    std::ofstream bad(tmp.path / "bad.txt");
    bad << "# numsnet split v1\nstrategy MidSeq\nseed 0\nn 4\ntrain 0 1\nval 1\ntest 3\n";
    bad.close();
    CHECK_THROWS_AS(SplitPlan::load((tmp.path / "bad.txt").string()), FormatError);
}

TEST_CASE("augmentation: identity parameters reproduce the pair exactly") {
    SynthConfig cfg;
    cfg.n = 10;
    cfg.seed = 4;
    auto [images, labels] = synth_stack(cfg);
    auto samples = preprocess_stack(images, labels, 64, 64);

    AugmentationParams id{};
    id.rotation_deg = 0;
    id.shift_frac = 0;
    id.shear_deg = 0;
    id.zoom_lo = id.zoom_hi = 1.0;
    RngStream rng(1);
    auto out = augment_pair(samples[5], id, rng);
    CHECK(out.image.v == samples[5].image.v);
    for (std::size_t c = 0; c < out.labels.size(); ++c)
        CHECK(out.labels[c].v == samples[5].labels[c].v);
}

TEST_CASE("augmentation keeps label planes binary and is seed-deterministic") {
    SynthConfig cfg;
    cfg.n = 12;
    cfg.seed = 5;
    auto [images, labels] = synth_stack(cfg);
    auto samples = preprocess_stack(images, labels, 64, 64);
    AugmentationParams params{};  // paper ranges

    auto run = [&](std::uint64_t seed) {
        RngStream rng(seed);
        return augment_pair(samples[6], params, rng);
    };
    auto a = run(7);
    auto b = run(7);
    CHECK(a.image.v == b.image.v);
    for (std::size_t c = 0; c < a.labels.size(); ++c) {
        CHECK(a.labels[c].v == b.labels[c].v);
        for (float v : a.labels[c].v) CHECK((v == 0.0f || v == 1.0f));
    }
    auto c = run(8);
    CHECK(a.image.v != c.image.v);
}

TEST_CASE("synthetic stacks: determinism, class structure, mid-stack ROI growth") {
    SynthConfig cfg;
    cfg.n = 20;
    cfg.classes = 3;
    cfg.seed = 11;
    auto [img1, lab1] = synth_stack(cfg);
    auto [img2, lab2] = synth_stack(cfg);
    CHECK(img1.slices[7].v == img2.slices[7].v);
    CHECK(lab1.masks[7].v == lab2.masks[7].v);
    CHECK(img1.count() == 20);
    CHECK(lab1.pix_values == std::vector<int>{205, 420, 500});
    for (auto a : lab1.annotated) CHECK(a == 1);

    auto area_of = [&](int slice, int pix) {
        std::int64_t area = 0;
        for (auto v : lab1.masks[slice].v) area += v == pix;
        return area;
    };
    const int mid = cfg.n / 2;
    for (int pix : lab1.pix_values) {
        CHECK(area_of(mid, pix) >= area_of(0, pix));
        CHECK(area_of(mid, pix) >= area_of(cfg.n - 1, pix));
        CHECK(area_of(mid, pix) > 0);  // every class present mid-stack
    }
    // lesions vanish at the stack ends by construction
    CHECK(area_of(0, 420) == 0);
    CHECK(area_of(cfg.n - 1, 500) == 0);

    SynthConfig binary = cfg;
    binary.classes = 1;
    auto [bimg, blab] = synth_stack(binary);
    CHECK(blab.pix_values.size() == 1);
    for (auto v : blab.masks[10].v) CHECK((v == 0 || v == 205));

    SynthConfig bad = cfg;
    bad.n = 5;
    CHECK_THROWS_AS(synth_stack(bad), ValueError);
}

TEST_CASE("stack write/load round trip preserves pixels, masks and annotation flags") {
    TempDir tmp("stack");
    SynthConfig cfg;
    cfg.n = 12;
    cfg.classes = 2;
    cfg.seed = 21;
    auto [images, labels] = synth_stack(cfg);
    labels.annotated[3] = 0;  // simulate an unannotated slice
    write_stack(images, labels, tmp.path.string());

    auto [rimg, rlab] = load_stack(tmp.path.string());
    CHECK(rimg.count() == 12);
    CHECK(rlab.pix_values == labels.pix_values);
    CHECK(rlab.annotated[3] == 0);
    CHECK(rlab.annotated[4] == 1);
    CHECK(rlab.masks[5].v == labels.masks[5].v);
    for (std::size_t e = 0; e < rimg.slices[5].v.size(); ++e)
        CHECK(rimg.slices[5].v[e] ==
              doctest::Approx(images.slices[5].v[e]).epsilon(0).scale(1).epsilon(0.51));
}

TEST_CASE("stack loader errors: empty dir, missing index, stray mask value") {
    TempDir tmp("stack-errors");
    CHECK_THROWS_AS(load_stack((tmp.path / "does-not-exist").string()), IoError);

    SynthConfig cfg;
    cfg.n = 10;
    cfg.classes = 2;
    cfg.seed = 30;
    auto [images, labels] = synth_stack(cfg);

    const auto gap = tmp.path / "gap";
    write_stack(images, labels, gap.string());
    fs::remove(gap / "images" / "0004.png");
    CHECK_THROWS_WITH_AS(load_stack(gap.string()), doctest::Contains("index 4"), IoError);

    const auto stray = tmp.path / "stray";
    LabelStack bad = labels;
    bad.masks[2].v[17] = 17;
    write_stack(images, bad, stray.string());
    CHECK_THROWS_WITH_AS(load_stack(stray.string()), doctest::Contains("17"), ValueError);

    const auto empty = tmp.path / "empty";
    fs::create_directories(empty / "images");
    std::ofstream(empty / "manifest") << "205 organ\n";
    CHECK_THROWS_AS(load_stack(empty.string()), IoError);
}
