#pragma once

#include <optional>
#include <string>
#include <vector>

#include "numsnet/tensor.hpp"

namespace numsnet {

// Hard (thresholded) multi-class evaluation. Plane stacks are [d,H,W] or
// [N,d,H,W] tensors holding exact 0/1 values; counting is integer arithmetic.
//
// Undefined-denominator policy: precision with an empty prediction, recall
// with empty ground truth, and raw Dice with both empty are *excluded* from
// averages rather than counted as zero. IoU of two empty sets is defined as 1
// and the +1-smoothed Dice is always defined.

struct ClassCounts {
    std::int64_t inter = 0;
    std::int64_t pred = 0;
    std::int64_t gt = 0;
};

std::vector<ClassCounts> count_planes(const Tensor& pred, const Tensor& gt);

struct MetricResult {
    std::vector<std::optional<double>> per_class;  // nullopt = undefined
    std::optional<double> mean;                    // over defined classes
};

MetricResult iou(const Tensor& pred, const Tensor& gt);
MetricResult dice(const Tensor& pred, const Tensor& gt);  // Eq.-style +1 smoothing
MetricResult dice_raw(const Tensor& pred, const Tensor& gt);
MetricResult precision(const Tensor& pred, const Tensor& gt);
MetricResult recall(const Tensor& pred, const Tensor& gt);

// Report aggregation: metrics are computed per slice per class, averaged over
// annotated test slices, then over classes. Values are percentages.
struct EvalReport {
    struct ClassRow {
        std::string name;
        int pix_value = 0;
        double pr = 0, re = 0, iou = 0, dice_smoothed = 0, dice_raw = 0;
        std::int64_t slices = 0;  // annotated slices seen
        std::int64_t defined_pr = 0, defined_re = 0, defined_raw = 0;
    };
    std::string model_label;
    std::string order_label = "ordered";
    std::vector<ClassRow> classes;
    double mean_pr = 0, mean_re = 0, mean_iou = 0, mean_dice_smoothed = 0, mean_dice_raw = 0;
    std::int64_t slice_count = 0;

    static const char* csv_header();
    std::string to_csv() const;  // one row per class + a mean row
};

class EvalAccumulator {
public:
    EvalAccumulator(std::vector<std::string> class_names, std::vector<int> pix_values);
    explicit EvalAccumulator(int num_classes);

    // pred/gt: [d,H,W] or [1,d,H,W] binary planes for one slice.
    void add_slice(const Tensor& pred, const Tensor& gt);
    EvalReport finalize(std::string model_label, std::string order_label) const;

private:
    std::vector<std::string> names_;
    std::vector<int> pix_;
    struct Sums {
        double pr = 0, re = 0, iou = 0, dice_s = 0, dice_r = 0;
        std::int64_t n_pr = 0, n_re = 0, n_raw = 0, n = 0;
    };
    std::vector<Sums> sums_;
    std::int64_t slices_ = 0;
};

}  // namespace numsnet
