#include "numsnet/metrics.hpp"

#include <cmath>
#include <sstream>

namespace numsnet {

namespace {

void check_planes(const char* op, const Tensor& pred, const Tensor& gt) {
    if (!pred.defined() || !gt.defined()) throw ValueError(std::string(op) + ": undefined tensor");
    if (pred.shape() != gt.shape())
        throw ShapeError(std::string(op) + ": shape mismatch: " + pred.shape().str() + " vs " +
                         gt.shape().str());
    if (pred.shape().rank() != 3 && pred.shape().rank() != 4)
        throw ShapeError(std::string(op) + ": expected [d,H,W] or [N,d,H,W], got " +
                         pred.shape().str());
}

template <class F>
MetricResult per_class_metric(const Tensor& pred, const Tensor& gt, F&& f) {
    auto counts = count_planes(pred, gt);
    MetricResult r;
    r.per_class.reserve(counts.size());
    double total = 0;
    std::int64_t defined = 0;
    for (const auto& c : counts) {
        auto v = f(c);
        r.per_class.push_back(v);
        if (v) {
            total += *v;
            ++defined;
        }
    }
    if (defined > 0) r.mean = total / static_cast<double>(defined);
    return r;
}

}  // namespace

std::vector<ClassCounts> count_planes(const Tensor& pred, const Tensor& gt) {
    check_planes("count_planes", pred, gt);
    const bool batched = pred.shape().rank() == 4;
    const std::int64_t n = batched ? pred.dim(0) : 1;
    const std::int64_t d = batched ? pred.dim(1) : pred.dim(0);
    const std::int64_t hw = batched ? pred.dim(2) * pred.dim(3) : pred.dim(1) * pred.dim(2);
    std::vector<ClassCounts> out(static_cast<std::size_t>(d));
    const float* pd = pred.data().data();
    const float* gd = gt.data().data();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t c = 0; c < d; ++c) {
            auto& cc = out[static_cast<std::size_t>(c)];
            const float* pp = pd + (b * d + c) * hw;
            const float* gp = gd + (b * d + c) * hw;
            for (std::int64_t e = 0; e < hw; ++e) {
                const bool p = pp[e] != 0.0f;
                const bool g = gp[e] != 0.0f;
                cc.pred += p;
                cc.gt += g;
                cc.inter += (p && g);
            }
        }
    return out;
}

MetricResult iou(const Tensor& pred, const Tensor& gt) {
    return per_class_metric(pred, gt, [](const ClassCounts& c) -> std::optional<double> {
        const std::int64_t uni = c.pred + c.gt - c.inter;
        if (uni == 0) return 1.0;  // both empty: perfect
        return static_cast<double>(c.inter) / static_cast<double>(uni);
    });
}

MetricResult dice(const Tensor& pred, const Tensor& gt) {
    return per_class_metric(pred, gt, [](const ClassCounts& c) -> std::optional<double> {
        return (2.0 * static_cast<double>(c.inter) + 1.0) /
               (static_cast<double>(c.pred + c.gt) + 1.0);
    });
}

MetricResult dice_raw(const Tensor& pred, const Tensor& gt) {
    return per_class_metric(pred, gt, [](const ClassCounts& c) -> std::optional<double> {
        if (c.pred + c.gt == 0) return std::nullopt;
        return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.gt);
    });
}

MetricResult precision(const Tensor& pred, const Tensor& gt) {
    return per_class_metric(pred, gt, [](const ClassCounts& c) -> std::optional<double> {
        if (c.pred == 0) return std::nullopt;
        return static_cast<double>(c.inter) / static_cast<double>(c.pred);
    });
}

MetricResult recall(const Tensor& pred, const Tensor& gt) {
    return per_class_metric(pred, gt, [](const ClassCounts& c) -> std::optional<double> {
        if (c.gt == 0) return std::nullopt;
        return static_cast<double>(c.inter) / static_cast<double>(c.gt);
    });
}

EvalAccumulator::EvalAccumulator(std::vector<std::string> class_names, std::vector<int> pix_values)
    : names_(std::move(class_names)), pix_(std::move(pix_values)) {
    if (names_.size() != pix_.size())
        throw ValueError("EvalAccumulator: class name and pixel value counts differ");
    sums_.resize(names_.size());
}

EvalAccumulator::EvalAccumulator(int num_classes) {
    for (int i = 0; i < num_classes; ++i) {
        names_.push_back("class" + std::to_string(i + 1));
        pix_.push_back(i + 1);
    }
    sums_.resize(names_.size());
}

void EvalAccumulator::add_slice(const Tensor& pred, const Tensor& gt) {
    auto counts = count_planes(pred, gt);
    if (counts.size() != sums_.size())
        throw ShapeError("EvalAccumulator: got " + std::to_string(counts.size()) +
                         " classes, expected " + std::to_string(sums_.size()));
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const auto& cc = counts[c];
        auto& s = sums_[c];
        const std::int64_t uni = cc.pred + cc.gt - cc.inter;
        s.iou += uni == 0 ? 1.0 : static_cast<double>(cc.inter) / static_cast<double>(uni);
        s.dice_s += (2.0 * static_cast<double>(cc.inter) + 1.0) /
                    (static_cast<double>(cc.pred + cc.gt) + 1.0);
        s.n += 1;
        if (cc.pred > 0) {
            s.pr += static_cast<double>(cc.inter) / static_cast<double>(cc.pred);
            s.n_pr += 1;
        }
        if (cc.gt > 0) {
            s.re += static_cast<double>(cc.inter) / static_cast<double>(cc.gt);
            s.n_re += 1;
        }
        if (cc.pred + cc.gt > 0) {
            s.dice_r += 2.0 * static_cast<double>(cc.inter) / static_cast<double>(cc.pred + cc.gt);
            s.n_raw += 1;
        }
    }
    ++slices_;
}

EvalReport EvalAccumulator::finalize(std::string model_label, std::string order_label) const {
    EvalReport rep;
    rep.model_label = std::move(model_label);
    rep.order_label = std::move(order_label);
    rep.slice_count = slices_;
    double mpr = 0, mre = 0, miou = 0, mds = 0, mdr = 0;
    std::int64_t npr = 0, nre = 0, niou = 0, nraw = 0;
    for (std::size_t c = 0; c < sums_.size(); ++c) {
        const auto& s = sums_[c];
        EvalReport::ClassRow row;
        row.name = names_[c];
        row.pix_value = pix_[c];
        row.slices = s.n;
        row.defined_pr = s.n_pr;
        row.defined_re = s.n_re;
        row.defined_raw = s.n_raw;
        row.pr = s.n_pr ? 100.0 * s.pr / static_cast<double>(s.n_pr) : std::nan("");
        row.re = s.n_re ? 100.0 * s.re / static_cast<double>(s.n_re) : std::nan("");
        row.iou = s.n ? 100.0 * s.iou / static_cast<double>(s.n) : std::nan("");
        row.dice_smoothed = s.n ? 100.0 * s.dice_s / static_cast<double>(s.n) : std::nan("");
        row.dice_raw = s.n_raw ? 100.0 * s.dice_r / static_cast<double>(s.n_raw) : std::nan("");
        rep.classes.push_back(row);
        if (s.n_pr) {
            mpr += row.pr;
            ++npr;
        }
        if (s.n_re) {
            mre += row.re;
            ++nre;
        }
        if (s.n) {
            miou += row.iou;
            mds += row.dice_smoothed;
            ++niou;
        }
        if (s.n_raw) {
            mdr += row.dice_raw;
            ++nraw;
        }
    }
    rep.mean_pr = npr ? mpr / npr : std::nan("");
    rep.mean_re = nre ? mre / nre : std::nan("");
    rep.mean_iou = niou ? miou / niou : std::nan("");
    rep.mean_dice_smoothed = niou ? mds / niou : std::nan("");
    rep.mean_dice_raw = nraw ? mdr / nraw : std::nan("");
    return rep;
}

const char* EvalReport::csv_header() {
    // column order follows the report tables: Pr, Re, IoU, Dice
    return "model,order,class,pix,pr,re,iou,dice,dice_raw,slices";
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << csv_header() << "\n";
    auto emit = [&os](double v) {
        if (std::isnan(v))
            os << "";
        else
            os << v;
    };
    for (const auto& c : classes) {
        os << model_label << "," << order_label << "," << c.name << "," << c.pix_value << ",";
        emit(c.pr);
        os << ",";
        emit(c.re);
        os << ",";
        emit(c.iou);
        os << ",";
        emit(c.dice_smoothed);
        os << ",";
        emit(c.dice_raw);
        os << "," << c.slices << "\n";
    }
    os << model_label << "," << order_label << ",mean,,";
    emit(mean_pr);
    os << ",";
    emit(mean_re);
    os << ",";
    emit(mean_iou);
    os << ",";
    emit(mean_dice_smoothed);
    os << ",";
    emit(mean_dice_raw);
    os << "," << slice_count << "\n";
    return os.str();
}

}  // namespace numsnet
