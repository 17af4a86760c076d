#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "numsnet/adam.hpp"
#include "numsnet/metrics.hpp"
#include "numsnet/model.hpp"
#include "numsnet/stack.hpp"

namespace numsnet {

enum class LossKind { dl, bcl, bdl };
const char* loss_kind_name(LossKind k);
std::optional<LossKind> loss_kind_from_name(std::string_view name);

struct TrainConfig {
    LossKind loss = LossKind::bdl;
    int epochs = 60;
    int batch_size = 5;  // 10 for the 7-class heart-style runs
    float lr = 1e-3f;
    bool deep_supervision = false;
    std::uint64_t seed = 0;
    // Stored propagation maps are detached from the gradient graph. With the
    // flag off, gradients flow through the state within a batch; everything
    // is detached at optimizer-step boundaries either way.
    bool detach_state = true;
    bool augment = false;
    AugmentationParams aug{};
};

struct StackData {
    std::string id;
    std::vector<SliceSample> slices;
    std::vector<int> pix_values;
    std::vector<std::string> class_names;
    SplitPlan plan;
};

StackData make_stack_data(const ImageStack& images, const LabelStack& labels, SplitPlan plan,
                          int target_h, int target_w);

Tensor image_tensor(const Plane& image);                  // [1,1,H,W]
Tensor label_tensor(const std::vector<Plane>& planes);    // [1,d,H,W]

// Ordered-scan trainer. Within a stack, training slices run in ascending
// index order; the propagation state carries across batch boundaries and
// resets at stack boundaries and at every epoch start. The optimizer steps
// once per batch on the summed loss of its annotated slices; a batch with no
// annotated slices takes no step. Unannotated slices still propagate state.
class Trainer {
public:
    Trainer(ModelGraph& model, TrainConfig cfg);

    // Returns the epoch's mean per-slice loss over annotated training slices.
    double train_epoch(const std::vector<StackData>& stacks, int epoch);

    const std::vector<double>& epoch_losses() const { return losses_; }
    const std::vector<std::array<double, 4>>& head_losses() const { return heads_; }
    AdamState<float>& optimizer() { return opt_; }
    int steps_taken() const { return steps_; }
    int state_resets() const { return resets_; }

private:
    ModelGraph& model_;
    TrainConfig cfg_;
    AdamState<float> opt_;
    std::vector<Tensor> params_;
    std::vector<double> losses_;
    std::vector<std::array<double, 4>> heads_;
    int steps_ = 0;
    int resets_ = 0;
};

struct EvalOptions {
    enum class Order { ordered, shuffled };
    Order order = Order::ordered;
    std::uint64_t shuffle_seed = 0;
    // Fresh state per test sequence by default; pass a state to carry one in
    // (its maps are copied, the phase becomes infer).
    const PropagationState* initial_state = nullptr;
    // Oracle-injection hook: returns the raw prediction planes for a slice.
    std::function<Tensor(int index, const SliceSample&)> prediction_override;
    std::string model_label = "model";
};

// Runs the test sequence of the stack's split plan, thresholds at 0.5 and
// aggregates metrics over annotated test slices only.
EvalReport evaluate(ModelGraph& model, const StackData& stack, const EvalOptions& opts = {},
                    std::vector<std::pair<int, Tensor>>* thresholded_out = nullptr);

struct RunRecord {
    std::string arch;
    std::string label;
    TrainConfig config;
    std::vector<double> epoch_losses;
    std::vector<std::array<double, 4>> head_losses;
    EvalReport report;
    double wall_seconds = 0;

    static const char* loss_csv_header();
    std::string losses_csv() const;  // epoch,loss[,head1..head4]
};

RunRecord run_training(ModelGraph& model, const std::vector<StackData>& stacks,
                       const TrainConfig& cfg, const EvalOptions* eval_opts = nullptr);

// Trains a deep-supervision model while recording the per-depth head losses;
// the training loss is the mean of the head losses. Errors cleanly when the
// model was built without heads.
std::vector<std::array<double, 4>> deep_supervision_trace(ModelGraph& model,
                                                          const std::vector<StackData>& stacks,
                                                          const TrainConfig& cfg);

// --- experiment orchestration -------------------------------------------------

struct ExperimentSpec {
    std::string preset = "custom";  // exp-A | exp-B | exp-C | exp-D | custom
    std::vector<std::string> archs = {"numsnet"};
    std::vector<SplitStrategy> strategies = {SplitStrategy::random_ordered};
    std::string data_dir;  // empty -> synthetic
    SynthConfig synth{};
    int resize_to = 0;  // 0 = keep native extent
    std::optional<std::array<std::int64_t, 5>> widths;
    int classes = 3;
    double train_frac = 0.10, val_frac = 0.01, min_annotated_frac = 0.5;
    TrainConfig train{};
    int reps = 1;
    // exp-D
    std::string transfer_checkpoint;
    int transfer_classes = 7;
    std::uint64_t transfer_data_seed = 1;
};

ExperimentSpec parse_experiment_spec(const std::string& json_path);

struct ExperimentResult {
    std::vector<RunRecord> records;
    std::string csv;  // rows mirror the report tables, averaged over reps
};

ExperimentResult run_experiment(const ExperimentSpec& spec);

}  // namespace numsnet
