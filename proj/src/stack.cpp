#include "numsnet/stack.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "numsnet/png_io.hpp"

namespace fs = std::filesystem;

namespace numsnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

const int kDefaultPix[7] = {205, 420, 500, 550, 600, 820, 850};

std::string pad4(int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", idx);
    return buf;
}

// k distinct values from [lo, lo+m) via partial Fisher-Yates, sorted.
std::vector<int> draw_sorted(int lo, int m, int k, RngStream& rng) {
    std::vector<int> pool(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) pool[i] = lo + i;
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m - i)));
        std::swap(pool[i], pool[j]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

const char* split_strategy_name(SplitStrategy s) {
    switch (s) {
        case SplitStrategy::random_ordered: return "RandomOrdered";
        case SplitStrategy::initial_seq: return "InitialSeq";
        case SplitStrategy::mid_rand: return "MidRand";
        case SplitStrategy::mid_seq: return "MidSeq";
    }
    return "?";
}

std::optional<SplitStrategy> split_strategy_from_name(std::string_view name) {
    for (auto s : {SplitStrategy::random_ordered, SplitStrategy::initial_seq,
                   SplitStrategy::mid_rand, SplitStrategy::mid_seq})
        if (name == split_strategy_name(s)) return s;
    return std::nullopt;
}

// --- stack I/O -----------------------------------------------------------------

std::pair<ImageStack, LabelStack> load_stack(const std::string& dir) {
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw IoError("stack directory does not exist: " + dir);

    LabelStack labels;
    {
        std::ifstream mf(root / "manifest");
        if (!mf) throw IoError("stack manifest missing: " + (root / "manifest").string());
        std::string line;
        while (std::getline(mf, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::istringstream is(line);
            int pix;
            std::string name;
            if (is >> pix) {
                if (!(is >> name)) name = "pix" + std::to_string(pix);
                labels.pix_values.push_back(pix);
                labels.class_names.push_back(name);
            }
        }
        if (labels.pix_values.empty())
            throw IoError("stack manifest declares no classes: " + dir);
    }

    std::map<int, fs::path> image_files;
    const fs::path img_dir = root / "images";
    if (!fs::is_directory(img_dir)) throw IoError("stack has no images directory: " + dir);
    for (const auto& e : fs::directory_iterator(img_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".png") continue;
        try {
            image_files[std::stoi(e.path().stem().string())] = e.path();
        } catch (const std::exception&) {
            throw IoError("image name is not an index: " + e.path().string());
        }
    }
    if (image_files.empty()) throw IoError("stack has no slice images: " + dir);
    const int first = image_files.begin()->first;
    int expect = first;
    for (const auto& [idx, p] : image_files) {
        if (idx != expect)
            throw IoError("stack slice index " + std::to_string(expect) + " is missing in " + dir);
        ++expect;
    }

    ImageStack images;
    images.id = root.filename().string();
    const fs::path mask_dir = root / "masks";
    for (const auto& [idx, path] : image_files) {
        GrayImage g = read_png_gray(path.string());
        if (!images.slices.empty() &&
            (g.height != images.slices.front().h || g.width != images.slices.front().w))
            throw IoError("slice " + std::to_string(idx) + " extent differs from slice " +
                          std::to_string(first) + " in " + dir);
        images.source_bits = std::max(images.source_bits, g.bits);
        Plane p{g.height, g.width, {}};
        p.v.assign(g.v.begin(), g.v.end());
        images.slices.push_back(std::move(p));

        const fs::path mpath = mask_dir / path.filename();
        if (fs::exists(mpath)) {
            GrayImage m = read_png_gray(mpath.string());
            if (m.height != g.height || m.width != g.width)
                throw IoError("mask for slice " + std::to_string(idx) +
                              " does not match the image extent in " + dir);
            for (auto v : m.v) {
                if (v == 0) continue;
                if (std::find(labels.pix_values.begin(), labels.pix_values.end(),
                              static_cast<int>(v)) == labels.pix_values.end())
                    throw ValueError("mask for slice " + std::to_string(idx) +
                                     " contains value " + std::to_string(v) +
                                     " outside the declared classes");
            }
            labels.masks.push_back(MaskPlane{m.height, m.width, std::move(m.v)});
            labels.annotated.push_back(1);
        } else {
            labels.masks.push_back(MaskPlane{
                g.height, g.width,
                std::vector<std::uint16_t>(static_cast<std::size_t>(g.height) * g.width, 0)});
            labels.annotated.push_back(0);
        }
    }
    return {std::move(images), std::move(labels)};
}

void write_stack(const ImageStack& images, const LabelStack& labels, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    {
        std::ofstream mf(root / "manifest");
        mf << "# pix_value class_name\n";
        for (std::size_t i = 0; i < labels.pix_values.size(); ++i)
            mf << labels.pix_values[i] << " " << labels.class_names[i] << "\n";
    }
    for (int i = 0; i < images.count(); ++i) {
        const Plane& p = images.slices[i];
        const std::string name = pad4(i) + ".png";
        if (images.source_bits <= 8) {
            std::vector<std::uint8_t> row(p.v.size());
            for (std::size_t e = 0; e < p.v.size(); ++e)
                row[e] = static_cast<std::uint8_t>(std::clamp(p.v[e], 0.0f, 255.0f));
            write_png_gray8((root / "images" / name).string(), p.h, p.w, row.data());
        } else {
            std::vector<std::uint16_t> row(p.v.size());
            for (std::size_t e = 0; e < p.v.size(); ++e)
                row[e] = static_cast<std::uint16_t>(std::clamp(p.v[e], 0.0f, 65535.0f));
            write_png_gray16((root / "images" / name).string(), p.h, p.w, row.data());
        }
        if (labels.annotated[i])
            write_png_gray16((root / "masks" / name).string(), labels.masks[i].h,
                             labels.masks[i].w, labels.masks[i].v.data());
    }
}

// --- preprocessing ---------------------------------------------------------------

Plane resize_bilinear(const Plane& src, int th, int tw) {
    if (th < 1 || tw < 1) throw ValueError("resize: target extents must be positive");
    Plane out{th, tw, std::vector<float>(static_cast<std::size_t>(th) * tw)};
    const double sy = static_cast<double>(src.h) / th;
    const double sx = static_cast<double>(src.w) / tw;
    for (int y = 0; y < th; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < tw; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.w - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                             wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
            out.v[static_cast<std::size_t>(y) * tw + x] = static_cast<float>(v);
        }
    }
    return out;
}

MaskPlane resize_nearest(const MaskPlane& src, int th, int tw) {
    if (th < 1 || tw < 1) throw ValueError("resize: target extents must be positive");
    MaskPlane out{th, tw, std::vector<std::uint16_t>(static_cast<std::size_t>(th) * tw)};
    const double sy = static_cast<double>(src.h) / th;
    const double sx = static_cast<double>(src.w) / tw;
    for (int y = 0; y < th; ++y) {
        const int ys = std::min(static_cast<int>((y + 0.5) * sy), src.h - 1);
        for (int x = 0; x < tw; ++x) {
            const int xs = std::min(static_cast<int>((x + 0.5) * sx), src.w - 1);
            out.v[static_cast<std::size_t>(y) * tw + x] =
                src.v[static_cast<std::size_t>(ys) * src.w + xs];
        }
    }
    return out;
}

Plane normalize_minmax(const Plane& src) {
    float lo = src.v.empty() ? 0.0f : src.v[0];
    float hi = lo;
    for (float v : src.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Plane out{src.h, src.w, std::vector<float>(src.v.size(), 0.0f)};
    if (hi > lo) {
        const float inv = 1.0f / (hi - lo);
        for (std::size_t i = 0; i < src.v.size(); ++i) out.v[i] = (src.v[i] - lo) * inv;
    }
    return out;
}

Tensor make_label_planes(const MaskPlane& mask, std::span<const int> pix) {
    for (std::size_t a = 0; a < pix.size(); ++a)
        for (std::size_t b = a + 1; b < pix.size(); ++b)
            if (pix[a] == pix[b])
                throw ValueError("make_label_planes: duplicate class pixel value " +
                                 std::to_string(pix[a]));
    const std::int64_t d = static_cast<std::int64_t>(pix.size());
    const std::int64_t hw = static_cast<std::int64_t>(mask.h) * mask.w;
    std::vector<float> out(static_cast<std::size_t>(d * hw), 0.0f);
    for (std::int64_t c = 0; c < d; ++c) {
        const auto pv = static_cast<std::uint16_t>(pix[static_cast<std::size_t>(c)]);
        for (std::int64_t e = 0; e < hw; ++e)
            if (mask.v[static_cast<std::size_t>(e)] == pv)
                out[static_cast<std::size_t>(c * hw + e)] = 1.0f;
    }
    return Tensor::from_data(Shape{1, d, mask.h, mask.w}, std::move(out));
}

Tensor threshold_prediction(const Tensor& raw, float tau) {
    if (!raw.defined()) throw ValueError("threshold_prediction: undefined tensor");
    std::vector<float> v(raw.data().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = raw.data()[i] > tau ? 1.0f : 0.0f;
    return Tensor::from_data(raw.shape(), std::move(v));
}

// --- split plans ------------------------------------------------------------------

void SplitPlan::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split plan: " + path);
    out << "# numsnet split v1\n";
    out << "strategy " << split_strategy_name(strategy) << "\n";
    out << "seed " << seed << "\n";
    out << "n " << n << "\n";
    auto row = [&out](const char* tag, const std::vector<int>& v) {
        out << tag;
        for (int i : v) out << " " << i;
        out << "\n";
    };
    row("train", train);
    row("val", val);
    row("test", test);
}

SplitPlan SplitPlan::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read split plan: " + path);
    SplitPlan p;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "strategy") {
            std::string name;
            is >> name;
            auto s = split_strategy_from_name(name);
            if (!s) throw FormatError("split plan names unknown strategy: " + name);
            p.strategy = *s;
        } else if (key == "seed") {
            is >> p.seed;
        } else if (key == "n") {
            is >> p.n;
        } else if (key == "train" || key == "val" || key == "test") {
            std::vector<int>& dst = key == "train" ? p.train : key == "val" ? p.val : p.test;
            int v;
            while (is >> v) dst.push_back(v);
        }
    }
    std::vector<char> seen(static_cast<std::size_t>(p.n), 0);
    for (const auto* v : {&p.train, &p.val, &p.test})
        for (int i : *v) {
            if (i < 0 || i >= p.n || seen[static_cast<std::size_t>(i)])
                throw FormatError("split plan does not partition 0.." + std::to_string(p.n - 1));
            seen[static_cast<std::size_t>(i)] = 1;
        }
    for (char c : seen)
        if (!c) throw FormatError("split plan does not cover every slice index");
    return p;
}

SplitPlan sample_split(int n, std::span<const std::uint8_t> annotated, SplitStrategy strategy,
                       double train_frac, double val_frac, double min_annotated_frac,
                       std::uint64_t seed) {
    if (n < 10) throw ValueError("sample_split: need at least 10 slices, got " + std::to_string(n));
    if (!annotated.empty() && static_cast<int>(annotated.size()) != n)
        throw ValueError("sample_split: annotated flags length does not match n");
    const int n_train = static_cast<int>(std::floor(train_frac * n));
    if (n_train < 1) throw ValueError("sample_split: train fraction selects no slices");

    auto is_annotated = [&annotated](int i) {
        return annotated.empty() || annotated[static_cast<std::size_t>(i)] != 0;
    };
    auto count_annotated = [&](const std::vector<int>& v) {
        int c = 0;
        for (int i : v) c += is_annotated(i);
        return c;
    };
    const int need = static_cast<int>(std::ceil(min_annotated_frac * n_train));

    RngStream rng = RngStream(seed).split("split");
    SplitPlan plan;
    plan.strategy = strategy;
    plan.seed = seed;
    plan.n = n;

    const bool sequential =
        strategy == SplitStrategy::initial_seq || strategy == SplitStrategy::mid_seq;
    if (sequential) {
        const int max_start = n - n_train;
        const int preferred =
            strategy == SplitStrategy::initial_seq ? 0 : std::min(n / 2, max_start);
        auto window = [&](int s) {
            std::vector<int> v(static_cast<std::size_t>(n_train));
            for (int i = 0; i < n_train; ++i) v[static_cast<std::size_t>(i)] = s + i;
            return v;
        };
        plan.train = window(preferred);
        if (count_annotated(plan.train) < need) {
            // shift deterministically toward the densest annotated window
            int best = -1;
            for (int s = 0; s <= max_start; ++s) {
                auto v = window(s);
                if (count_annotated(v) < need) continue;
                if (best < 0 || std::abs(s - preferred) < std::abs(best - preferred)) best = s;
            }
            if (best < 0)
                throw ValueError(
                    "sample_split: too few annotated slices for a sequential window of " +
                    std::to_string(n_train));
            plan.train = window(best);
        }
    } else {
        const int lo = strategy == SplitStrategy::mid_rand ? n / 2 : 0;
        const int m = n - lo;
        if (m < n_train)
            throw ValueError("sample_split: not enough slices after the reference scan");
        bool ok = false;
        for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
            RngStream draw = rng.split(static_cast<std::uint64_t>(attempt));
            plan.train = draw_sorted(lo, m, n_train, draw);
            ok = count_annotated(plan.train) >= need;
        }
        if (!ok) {
            // deterministic fallback: take the required annotated slices first
            std::vector<int> pool_a, pool_rest;
            for (int i = lo; i < n; ++i) (is_annotated(i) ? pool_a : pool_rest).push_back(i);
            if (static_cast<int>(pool_a.size()) < need ||
                static_cast<int>(pool_a.size() + pool_rest.size()) < n_train)
                throw ValueError("sample_split: too few annotated slices to satisfy the " +
                                 std::to_string(min_annotated_frac) + " constraint");
            RngStream forced = rng.split("forced");
            auto shuffled = [&forced](std::vector<int> v) {
                for (std::size_t i = 0; i + 1 < v.size(); ++i) {
                    const auto j =
                        i + forced.uniform_int(static_cast<std::uint64_t>(v.size() - i));
                    std::swap(v[i], v[j]);
                }
                return v;
            };
            pool_a = shuffled(std::move(pool_a));
            pool_rest = shuffled(std::move(pool_rest));
            plan.train.assign(pool_a.begin(), pool_a.begin() + need);
            int take = n_train - need;
            std::vector<int> rest(pool_a.begin() + need, pool_a.end());
            rest.insert(rest.end(), pool_rest.begin(), pool_rest.end());
            plan.train.insert(plan.train.end(), rest.begin(), rest.begin() + take);
            std::sort(plan.train.begin(), plan.train.end());
        }
    }

    std::vector<char> in_train(static_cast<std::size_t>(n), 0);
    for (int i : plan.train) in_train[static_cast<std::size_t>(i)] = 1;
    std::vector<int> rest;
    for (int i = 0; i < n; ++i)
        if (!in_train[static_cast<std::size_t>(i)]) rest.push_back(i);

    const int n_val = static_cast<int>(std::ceil(val_frac * static_cast<double>(rest.size())));
    RngStream vrng = rng.split("val");
    auto vidx = draw_sorted(0, static_cast<int>(rest.size()), n_val, vrng);
    std::vector<char> in_val(rest.size(), 0);
    for (int i : vidx) {
        plan.val.push_back(rest[static_cast<std::size_t>(i)]);
        in_val[static_cast<std::size_t>(i)] = 1;
    }
    for (std::size_t i = 0; i < rest.size(); ++i)
        if (!in_val[i]) plan.test.push_back(rest[i]);
    return plan;
}

// --- paired augmentation --------------------------------------------------------------

SliceSample augment_pair(const SliceSample& in, const AugmentationParams& params,
                         RngStream& rng) {
    if (params.zoom_lo <= 0 || params.zoom_lo > params.zoom_hi)
        throw ValueError("augment_pair: zoom bounds must satisfy 0 < lo <= hi");
    for (const auto& p : in.labels)
        if (p.h != in.image.h || p.w != in.image.w)
            throw ShapeError("augment_pair: label plane extent differs from the image");

    const double deg = kPi / 180.0;
    // fixed draw order: rotation, width shift, height shift, shear, zoom
    const double theta = rng.uniform(-params.rotation_deg, params.rotation_deg) * deg;
    const double tx = rng.uniform(-params.shift_frac, params.shift_frac) * in.image.w;
    const double ty = rng.uniform(-params.shift_frac, params.shift_frac) * in.image.h;
    const double shear = rng.uniform(-params.shear_deg, params.shear_deg) * deg;
    const double zoom = rng.uniform(params.zoom_lo, params.zoom_hi);

    // forward map: rotate * shear * zoom about the center, then shift
    const double a00 = std::cos(theta) * zoom, a01 = -std::sin(theta + shear) * zoom;
    const double a10 = std::sin(theta) * zoom, a11 = std::cos(theta + shear) * zoom;
    const double cx = (in.image.w - 1) / 2.0, cy = (in.image.h - 1) / 2.0;
    const double ox = cx + tx - (a00 * cx + a01 * cy);
    const double oy = cy + ty - (a10 * cx + a11 * cy);
    const double det = a00 * a11 - a01 * a10;
    const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

    const int h = in.image.h, w = in.image.w;
    SliceSample out;
    out.annotated = in.annotated;
    out.image = Plane{h, w, std::vector<float>(static_cast<std::size_t>(h) * w, 0.0f)};
    out.labels.reserve(in.labels.size());
    for (std::size_t c = 0; c < in.labels.size(); ++c)
        out.labels.push_back(Plane{h, w, std::vector<float>(static_cast<std::size_t>(h) * w, 0.0f)});

    auto sample_bilinear = [&](double xs, double ys) -> float {
        const int x0 = static_cast<int>(std::floor(xs)), y0 = static_cast<int>(std::floor(ys));
        const double fx = xs - x0, fy = ys - y0;
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const int xi = x0 + dx, yi = y0 + dy;
                if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;  // zero fill
                const double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                acc += wgt * in.image.at(yi, xi);
            }
        return static_cast<float>(acc);
    };

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double xs = i00 * (x - ox) + i01 * (y - oy);
            const double ys = i10 * (x - ox) + i11 * (y - oy);
            out.image.v[static_cast<std::size_t>(y) * w + x] = sample_bilinear(xs, ys);
            const int xn = static_cast<int>(std::lround(xs));
            const int yn = static_cast<int>(std::lround(ys));
            if (xn >= 0 && xn < w && yn >= 0 && yn < h)
                for (std::size_t c = 0; c < in.labels.size(); ++c)
                    out.labels[c].v[static_cast<std::size_t>(y) * w + x] =
                        in.labels[c].at(yn, xn);
        }
    return out;
}

std::vector<SliceSample> preprocess_stack(const ImageStack& images, const LabelStack& labels,
                                          int target_h, int target_w) {
    if (images.count() != static_cast<int>(labels.masks.size()))
        throw ShapeError("preprocess_stack: image and label stacks are misaligned");
    std::vector<SliceSample> out;
    out.reserve(static_cast<std::size_t>(images.count()));
    for (int i = 0; i < images.count(); ++i) {
        SliceSample s;
        s.annotated = labels.annotated[static_cast<std::size_t>(i)] != 0;
        const Plane& raw = images.slices[static_cast<std::size_t>(i)];
        s.image = normalize_minmax(raw.h == target_h && raw.w == target_w
                                       ? raw
                                       : resize_bilinear(raw, target_h, target_w));
        const MaskPlane& m = labels.masks[static_cast<std::size_t>(i)];
        const MaskPlane resized =
            m.h == target_h && m.w == target_w ? m : resize_nearest(m, target_h, target_w);
        const std::size_t hw = static_cast<std::size_t>(target_h) * target_w;
        for (int pv : labels.pix_values) {
            Plane plane{target_h, target_w, std::vector<float>(hw, 0.0f)};
            for (std::size_t e = 0; e < hw; ++e)
                if (resized.v[e] == static_cast<std::uint16_t>(pv)) plane.v[e] = 1.0f;
            s.labels.push_back(std::move(plane));
        }
        out.push_back(std::move(s));
    }
    return out;
}

// --- synthetic stacks -------------------------------------------------------------------

std::pair<ImageStack, LabelStack> synth_stack(const SynthConfig& cfg) {
    if (cfg.n < 10) throw ValueError("synth_stack: need at least 10 slices");
    if (cfg.classes < 1 || cfg.classes > 7)
        throw ValueError("synth_stack: classes must be in 1..7");

    RngStream geom = RngStream(cfg.seed).split("geom");
    const int h = cfg.height, w = cfg.width, n = cfg.n;
    const double extent = std::min(h, w);

    const double cx0 = w * 0.5 + geom.uniform(-0.03, 0.03) * w;
    const double cy0 = h * 0.5 + geom.uniform(-0.03, 0.03) * h;
    const double ax0 = geom.uniform(0.30, 0.34) * w;
    const double ay0 = geom.uniform(0.34, 0.38) * h;
    const double drift_amp = geom.uniform(0.01, 0.03) * extent;
    const double drift_phase = geom.uniform(0.0, 2 * kPi);
    const double angle0 = geom.uniform(0.0, 2 * kPi);

    const int n_lesions = cfg.classes - 1;
    std::vector<double> lesion_rmax(static_cast<std::size_t>(std::max(0, n_lesions)));
    for (auto& r : lesion_rmax) r = geom.uniform(0.15, 0.18) * extent;
    if (n_lesions >= 3) {
        // keep ring neighbors from overlapping
        const double ring = 0.55 * std::min(ax0, ay0);
        const double half_chord = ring * std::sin(kPi / n_lesions);
        for (auto& r : lesion_rmax) r = std::min(r, 0.85 * half_chord);
    }

    // intensity bands, dark to bright: background, dark lesions, organ,
    // bright lesions, shell; separations survive the blur and noise
    const double organ_level = 0.46;
    const double lesion_levels[6] = {0.74, 0.20, 0.86, 0.32, 0.62, 0.16};

    ImageStack images;
    images.id = "synth-" + std::to_string(cfg.seed);
    images.source_bits = 8;
    LabelStack labels;
    for (int c = 0; c < cfg.classes; ++c) {
        labels.pix_values.push_back(kDefaultPix[c]);
        labels.class_names.push_back(c == 0 ? "organ" : "lesion" + std::to_string(c));
    }

    RngStream noise_root = RngStream(cfg.seed).split("noise");
    for (int t = 0; t < n; ++t) {
        const double prof = std::sin(kPi * t / (n - 1));
        const double cx = cx0 + drift_amp * std::sin(2 * kPi * t / n + drift_phase);
        const double cy = cy0 + drift_amp * std::cos(2 * kPi * t / n + drift_phase);
        const double ax = ax0 * (0.85 + 0.15 * prof);
        const double ay = ay0 * (0.85 + 0.15 * prof);

        std::vector<double> lx(static_cast<std::size_t>(std::max(0, n_lesions)));
        std::vector<double> ly(lx.size()), lr(lx.size());
        for (int c = 0; c < n_lesions; ++c) {
            // lesions drift around the organ across the stack so position
            // alone never identifies a class
            const double angle = angle0 + 2 * kPi * c / std::max(1, n_lesions) +
                                 0.8 * std::sin(2 * kPi * t / n + drift_phase + c);
            lx[c] = cx + 0.55 * ax * std::cos(angle);
            ly[c] = cy + 0.55 * ay * std::sin(angle);
            lr[c] = lesion_rmax[c] * std::sqrt(std::max(0.0, (prof - 0.25) / 0.75));
        }

        Plane img{h, w, std::vector<float>(static_cast<std::size_t>(h) * w)};
        MaskPlane mask{h, w,
                       std::vector<std::uint16_t>(static_cast<std::size_t>(h) * w, 0)};
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double level = 0.06;
                std::uint16_t cls = 0;
                const double ex = (x - cx) / ax, ey = (y - cy) / ay;
                const double r2 = ex * ex + ey * ey;
                // bright bone-like shell on every slice anchors the per-slice
                // min-max normalization
                if (r2 > 1.10 && r2 <= 1.45) level = 0.93;
                if (r2 <= 1.0) {
                    level = organ_level;
                    cls = static_cast<std::uint16_t>(labels.pix_values[0]);
                    for (int c = 0; c < n_lesions; ++c) {
                        const double dx = x - lx[c], dy = y - ly[c];
                        if (lr[c] > 0.5 && dx * dx + dy * dy <= lr[c] * lr[c]) {
                            level = lesion_levels[c % 6];
                            cls = static_cast<std::uint16_t>(labels.pix_values[c + 1]);
                            break;
                        }
                    }
                }
                img.v[static_cast<std::size_t>(y) * w + x] = static_cast<float>(level);
                mask.v[static_cast<std::size_t>(y) * w + x] = cls;
            }

        // additive noise only; blurring the bands would paint lesion-valued
        // transition rings around every region boundary
        RngStream noise = noise_root.split(static_cast<std::uint64_t>(t));
        for (auto& v : img.v) {
            const double nv = v + 0.015 * noise.normal();
            v = static_cast<float>(std::clamp(nv, 0.0, 1.0) * 255.0);
        }
        images.slices.push_back(std::move(img));
        labels.masks.push_back(std::move(mask));
        labels.annotated.push_back(1);
    }
    return {std::move(images), std::move(labels)};
}

}  // namespace numsnet
