#include "numsnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "numsnet/checkpoint.hpp"
#include "numsnet/losses.hpp"

namespace numsnet {

const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::dl: return "dl";
        case LossKind::bcl: return "bcl";
        case LossKind::bdl: return "bdl";
    }
    return "?";
}

std::optional<LossKind> loss_kind_from_name(std::string_view name) {
    for (auto k : {LossKind::dl, LossKind::bcl, LossKind::bdl})
        if (name == loss_kind_name(k)) return k;
    return std::nullopt;
}

Tensor image_tensor(const Plane& image) {
    std::vector<float> v(image.v.begin(), image.v.end());
    return Tensor::from_data(Shape{1, 1, image.h, image.w}, std::move(v));
}

Tensor label_tensor(const std::vector<Plane>& planes) {
    if (planes.empty()) throw ValueError("label_tensor: no planes");
    const int h = planes[0].h, w = planes[0].w;
    std::vector<float> v;
    v.reserve(planes.size() * static_cast<std::size_t>(h) * w);
    for (const auto& p : planes) v.insert(v.end(), p.v.begin(), p.v.end());
    return Tensor::from_data(Shape{1, static_cast<std::int64_t>(planes.size()), h, w},
                             std::move(v));
}

StackData make_stack_data(const ImageStack& images, const LabelStack& labels, SplitPlan plan,
                          int target_h, int target_w) {
    if (plan.n != images.count())
        throw ValueError("make_stack_data: split plan covers " + std::to_string(plan.n) +
                         " slices, stack has " + std::to_string(images.count()));
    StackData s;
    s.id = images.id;
    s.slices = preprocess_stack(images, labels, target_h, target_w);
    s.pix_values = labels.pix_values;
    s.class_names = labels.class_names;
    s.plan = std::move(plan);
    return s;
}

namespace {

Tensor compute_loss(LossKind kind, const Tensor& pred, const Tensor& target) {
    switch (kind) {
        case LossKind::dl: return dice_loss(pred, target);
        case LossKind::bcl: return bce_loss(pred, target);
        case LossKind::bdl: return bce_dice_loss(pred, target);
    }
    throw ValueError("unknown loss kind");
}

}  // namespace

Trainer::Trainer(ModelGraph& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    if (cfg_.batch_size < 1) throw ValueError("train: batch size must be >= 1");
    if (cfg_.epochs < 1) throw ValueError("train: epochs must be >= 1");
    if (cfg_.deep_supervision && !model_.deep_supervision())
        throw ValueError("train: config asks for deep supervision but the model has no heads");
    opt_.lr = cfg_.lr;
    params_ = model_.trainable_params();
}

double Trainer::train_epoch(const std::vector<StackData>& stacks, int epoch) {
    const RngStream root = RngStream(cfg_.seed);
    double loss_sum = 0;
    std::int64_t annotated = 0;
    std::array<double, 4> head_sum{};

    for (std::size_t si = 0; si < stacks.size(); ++si) {
        const StackData& stack = stacks[si];
        PropagationState state;
        state.stack_id = stack.id;
        state.phase = Mode::train;
        ++resets_;

        const auto& order = stack.plan.train;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch_size);
            model_.zero_grads();
            // losses summed in ascending slice order so a within-batch
            // permutation of a stateless model changes nothing
            std::vector<std::pair<int, Tensor>> slice_losses;

            for (std::size_t k = b0; k < b1; ++k) {
                const int idx = order[k];
                const SliceSample* sample = &stack.slices[static_cast<std::size_t>(idx)];
                SliceSample augmented;
                if (cfg_.augment) {
                    RngStream arng = root.split("aug")
                                         .split(static_cast<std::uint64_t>(epoch))
                                         .split(si)
                                         .split(static_cast<std::uint64_t>(idx));
                    augmented = augment_pair(*sample, cfg_.aug, arng);
                    sample = &augmented;
                }
                RngStream drng = root.split("dropout")
                                     .split(static_cast<std::uint64_t>(epoch))
                                     .split(si)
                                     .split(static_cast<std::uint64_t>(idx));
                PropagationState next;
                next.stack_id = state.stack_id;
                next.phase = Mode::train;
                ForwardOptions o;
                o.mode = Mode::train;
                o.rng = &drng;
                o.state_in = &state;
                o.state_out = &next;
                o.detach_state = cfg_.detach_state;

                Tensor slice_loss;
                if (cfg_.deep_supervision) {
                    auto heads = model_.forward_heads(image_tensor(sample->image), o);
                    if (sample->annotated) {
                        auto target = label_tensor(sample->labels);
                        Tensor acc;
                        for (std::size_t hidx = 0; hidx < heads.size(); ++hidx) {
                            auto hl = compute_loss(cfg_.loss, heads[hidx], target);
                            head_sum[hidx] += hl.item();
                            acc = acc.defined() ? add(acc, hl) : hl;
                        }
                        slice_loss = mul_scalar(acc, 0.25f);
                    }
                } else {
                    auto pred = model_.forward(image_tensor(sample->image), o);
                    if (sample->annotated)
                        slice_loss = compute_loss(cfg_.loss, pred, label_tensor(sample->labels));
                }
                if (model_.is_propagating()) state = std::move(next);
                if (slice_loss.defined()) slice_losses.emplace_back(idx, slice_loss);
            }

            if (!slice_losses.empty()) {
                std::sort(slice_losses.begin(), slice_losses.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                Tensor batch_loss = slice_losses.front().second;
                for (std::size_t k = 1; k < slice_losses.size(); ++k)
                    batch_loss = add(batch_loss, slice_losses[k].second);
                backward(batch_loss);
                adam_step(std::span<Tensor>(params_), opt_);
                ++steps_;
                loss_sum += batch_loss.item();
                annotated += static_cast<std::int64_t>(slice_losses.size());
            }
            model_.zero_grads();
            if (!cfg_.detach_state)
                for (auto& [id, t] : state.maps) t = t.detach();  // truncate at the step
        }
    }

    const double epoch_loss = annotated ? loss_sum / static_cast<double>(annotated) : 0.0;
    losses_.push_back(epoch_loss);
    if (cfg_.deep_supervision) {
        std::array<double, 4> means{};
        for (int hdr = 0; hdr < 4; ++hdr)
            means[hdr] = annotated ? head_sum[hdr] / static_cast<double>(annotated) : 0.0;
        heads_.push_back(means);
    }
    return epoch_loss;
}

EvalReport evaluate(ModelGraph& model, const StackData& stack, const EvalOptions& opts,
                    std::vector<std::pair<int, Tensor>>* thresholded_out) {
    NoGradGuard no_grad;
    std::vector<int> order = stack.plan.test;
    if (opts.order == EvalOptions::Order::shuffled) {
        RngStream rng = RngStream(opts.shuffle_seed).split("eval-shuffle");
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const auto j = i + rng.uniform_int(order.size() - i);
            std::swap(order[i], order[j]);
        }
    }

    PropagationState state;
    state.stack_id = stack.id;
    state.phase = Mode::infer;
    if (opts.initial_state) {
        state.maps = opts.initial_state->maps;
        state.last_index = opts.initial_state->last_index;
    }

    EvalAccumulator acc(stack.class_names, stack.pix_values);
    for (int idx : order) {
        const SliceSample& sample = stack.slices[static_cast<std::size_t>(idx)];
        Tensor raw;
        if (opts.prediction_override) {
            raw = opts.prediction_override(idx, sample);
        } else {
            PropagationState next;
            next.stack_id = state.stack_id;
            next.phase = Mode::infer;
            ForwardOptions o;
            o.state_in = &state;
            o.state_out = &next;
            raw = model.forward(image_tensor(sample.image), o);
            if (model.is_propagating()) state = std::move(next);
        }
        Tensor hard = threshold_prediction(raw);
        if (sample.annotated) acc.add_slice(hard, label_tensor(sample.labels));
        if (thresholded_out) thresholded_out->emplace_back(idx, hard);
    }
    return acc.finalize(opts.model_label,
                        opts.order == EvalOptions::Order::ordered ? "ordered" : "shuffled");
}

const char* RunRecord::loss_csv_header() { return "epoch,loss,head1,head2,head3,head4"; }

std::string RunRecord::losses_csv() const {
    std::ostringstream os;
    os << loss_csv_header() << "\n";
    for (std::size_t e = 0; e < epoch_losses.size(); ++e) {
        os << (e + 1) << "," << epoch_losses[e];
        if (e < head_losses.size())
            for (double h : head_losses[e]) os << "," << h;
        else
            os << ",,,,";
        os << "\n";
    }
    return os.str();
}

RunRecord run_training(ModelGraph& model, const std::vector<StackData>& stacks,
                       const TrainConfig& cfg, const EvalOptions* eval_opts) {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(model, cfg);
    for (int e = 0; e < cfg.epochs; ++e) trainer.train_epoch(stacks, e);

    RunRecord rec;
    rec.arch = arch_name(model.arch());
    rec.label = rec.arch;
    rec.config = cfg;
    rec.epoch_losses = trainer.epoch_losses();
    rec.head_losses = trainer.head_losses();
    if (eval_opts) {
        EvalOptions eo = *eval_opts;
        if (eo.model_label == "model") eo.model_label = rec.arch;
        rec.report = evaluate(model, stacks.front(), eo);
        rec.label = eo.model_label;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

std::vector<std::array<double, 4>> deep_supervision_trace(ModelGraph& model,
                                                          const std::vector<StackData>& stacks,
                                                          const TrainConfig& cfg) {
    if (!model.deep_supervision())
        throw ValueError("deep_supervision_trace: model was built without heads");
    TrainConfig c = cfg;
    c.deep_supervision = true;
    Trainer trainer(model, c);
    for (int e = 0; e < c.epochs; ++e) trainer.train_epoch(stacks, e);
    return trainer.head_losses();
}

// --- experiments ------------------------------------------------------------------

ExperimentSpec parse_experiment_spec(const std::string& json_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("cannot open experiment spec: " + json_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("experiment spec is not valid JSON: " + std::string(e.what()));
    }

    ExperimentSpec s;
    s.preset = j.value("preset", "custom");
    if (j.contains("archs")) s.archs = j["archs"].get<std::vector<std::string>>();
    if (j.contains("strategies")) {
        s.strategies.clear();
        for (const auto& name : j["strategies"]) {
            auto st = split_strategy_from_name(name.get<std::string>());
            if (!st) throw FormatError("experiment spec names unknown strategy: " +
                                       name.get<std::string>());
            s.strategies.push_back(*st);
        }
    }
    s.data_dir = j.value("data_dir", "");
    s.synth.n = j.value("synth_slices", s.synth.n);
    s.synth.classes = j.value("classes", s.synth.classes);
    s.synth.height = j.value("synth_size", s.synth.height);
    s.synth.width = j.value("synth_size", s.synth.width);
    s.synth.seed = j.value("data_seed", static_cast<std::uint64_t>(s.synth.seed));
    s.resize_to = j.value("resize_to", 0);
    s.classes = j.value("classes", s.classes);
    if (j.contains("widths")) {
        std::array<std::int64_t, 5> w{};
        const auto arr = j["widths"];
        if (arr.size() != 5) throw FormatError("experiment spec widths must have 5 entries");
        for (int i = 0; i < 5; ++i) w[static_cast<std::size_t>(i)] = arr[i].get<std::int64_t>();
        s.widths = w;
    }
    s.train_frac = j.value("train_frac", s.train_frac);
    s.val_frac = j.value("val_frac", s.val_frac);
    s.min_annotated_frac = j.value("min_annotated_frac", s.min_annotated_frac);
    s.train.epochs = j.value("epochs", s.train.epochs);
    s.train.batch_size = j.value("batch", s.train.batch_size);
    s.train.lr = j.value("lr", s.train.lr);
    s.train.seed = j.value("seed", static_cast<std::uint64_t>(s.train.seed));
    s.train.augment = j.value("augment", s.train.augment);
    s.train.detach_state = j.value("detach_state", s.train.detach_state);
    if (j.contains("loss")) {
        auto k = loss_kind_from_name(j["loss"].get<std::string>());
        if (!k) throw FormatError("experiment spec names unknown loss");
        s.train.loss = *k;
    }
    s.reps = j.value("reps", s.reps);
    s.transfer_checkpoint = j.value("transfer_checkpoint", "");
    s.transfer_classes = j.value("transfer_classes", s.transfer_classes);
    s.transfer_data_seed = j.value("transfer_data_seed",
                                   static_cast<std::uint64_t>(s.transfer_data_seed));
    if (s.preset == "exp-A" && !j.contains("archs"))
        s.archs = {"numsnet", "unet", "wunet", "unetpp"};
    if (s.preset == "exp-B" && !j.contains("strategies"))
        s.strategies = {SplitStrategy::initial_seq, SplitStrategy::mid_rand,
                        SplitStrategy::mid_seq};
    if (s.preset == "exp-C" && !j.contains("archs")) s.archs = {"numsnet", "numsall"};
    return s;
}

namespace {

StackData experiment_stack(const ExperimentSpec& spec, SplitStrategy strategy,
                           std::uint64_t split_seed, int classes, std::uint64_t data_seed) {
    ImageStack images;
    LabelStack labels;
    if (spec.data_dir.empty()) {
        SynthConfig cfg = spec.synth;
        cfg.classes = classes;
        cfg.seed = data_seed;
        std::tie(images, labels) = synth_stack(cfg);
    } else {
        std::tie(images, labels) = load_stack(spec.data_dir);
    }
    auto plan = sample_split(images.count(), labels.annotated, strategy, spec.train_frac,
                             spec.val_frac, spec.min_annotated_frac, split_seed);
    const int h = spec.resize_to > 0 ? spec.resize_to : images.slices[0].h;
    const int w = spec.resize_to > 0 ? spec.resize_to : images.slices[0].w;
    return make_stack_data(images, labels, std::move(plan), h, w);
}

struct RowAccum {
    double pr = 0, re = 0, iou = 0, ds = 0, dr = 0;
    int n = 0;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
    ExperimentResult result;
    std::ostringstream csv;
    csv << "preset,model,strategy,class,pix,pr,re,iou,dice,dice_raw,reps\n";

    struct Combo {
        std::string arch;
        SplitStrategy strategy;
    };
    std::vector<Combo> combos;
    for (const auto& a : spec.archs)
        for (auto st : spec.strategies) combos.push_back({a, st});

    const bool transfer = spec.preset == "exp-D";
    for (const auto& combo : combos) {
        auto arch = arch_from_name(combo.arch);
        if (!arch) throw ValueError("experiment: unknown architecture " + combo.arch);
        std::vector<RowAccum> rows;  // report class order
        std::vector<std::string> names;
        std::vector<int> pix;
        for (int rep = 0; rep < std::max(1, spec.reps); ++rep) {
            const std::uint64_t rep_seed = spec.train.seed + static_cast<std::uint64_t>(rep);

            BuildOptions bo;
            bo.num_classes = transfer ? spec.transfer_classes : spec.classes;
            bo.widths = spec.widths;
            bo.seed = rep_seed;

            ModelGraph model = [&] {
                if (!transfer) return ModelGraph::build(*arch, bo);
                if (spec.transfer_checkpoint.empty())
                    throw ValueError("exp-D needs transfer_checkpoint");
                auto loaded = load_checkpoint(spec.transfer_checkpoint);
                return transfer_adapt(loaded.model, spec.transfer_classes, rep_seed);
            }();

            auto stack = experiment_stack(
                spec, combo.strategy, rep_seed, transfer ? spec.transfer_classes : spec.classes,
                transfer ? spec.transfer_data_seed : spec.synth.seed);
            TrainConfig tc = spec.train;
            tc.seed = rep_seed;
            EvalOptions eo;
            eo.model_label = combo.arch;
            std::vector<StackData> stacks;
            stacks.push_back(std::move(stack));
            auto rec = run_training(model, stacks, tc, &eo);
            rec.label = combo.arch + std::string("/") + split_strategy_name(combo.strategy);
            if (rows.empty()) {
                rows.resize(rec.report.classes.size());
                for (const auto& row : rec.report.classes) {
                    names.push_back(row.name);
                    pix.push_back(row.pix_value);
                }
            }
            for (std::size_t ci = 0; ci < rec.report.classes.size(); ++ci) {
                const auto& row = rec.report.classes[ci];
                auto& acc = rows[ci];
                if (!std::isnan(row.pr)) acc.pr += row.pr;
                if (!std::isnan(row.re)) acc.re += row.re;
                acc.iou += row.iou;
                acc.ds += row.dice_smoothed;
                if (!std::isnan(row.dice_raw)) acc.dr += row.dice_raw;
                acc.n += 1;
            }
            result.records.push_back(std::move(rec));
        }
        for (std::size_t ci = 0; ci < rows.size(); ++ci) {
            const auto& acc = rows[ci];
            csv << spec.preset << "," << combo.arch << "," << split_strategy_name(combo.strategy)
                << "," << names[ci] << "," << pix[ci] << "," << acc.pr / acc.n << ","
                << acc.re / acc.n << "," << acc.iou / acc.n << "," << acc.ds / acc.n << ","
                << acc.dr / acc.n << "," << acc.n << "\n";
        }
    }
    result.csv = csv.str();
    return result;
}

}  // namespace numsnet
