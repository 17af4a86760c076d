#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "numsnet/checkpoint.hpp"
#include "numsnet/gradcheck_suite.hpp"
#include "numsnet/png_io.hpp"
#include "numsnet/train.hpp"

namespace fs = std::filesystem;
using namespace numsnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

std::string thousands(std::int64_t v) {
    std::string raw = std::to_string(v);
    std::string out;
    int c = 0;
    for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
        if (c && c % 3 == 0) out.push_back(',');
        out.push_back(*it);
        ++c;
    }
    return {out.rbegin(), out.rend()};
}

struct Table1Row {
    Arch arch;
    std::int64_t total, trainable, non_trainable;
};
constexpr Table1Row kTable1[] = {
    {Arch::unet, 7767523, 7763555, 3968},      {Arch::wunet, 9290998, 9286658, 4340},
    {Arch::unetpp, 9045507, 9043587, 1920},    {Arch::numsnet, 11713943, 11711843, 2100},
    {Arch::numsall, 14526368, 14524268, 2100},
};

struct DataArgs {
    std::string data_dir;
    int synth_slices = 0;
    int synth_size = 64;
    std::uint64_t synth_seed = 0;
    int classes = 3;
    int resize = 0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--data", data_dir, "stack directory (images/, masks/, manifest)");
        cmd->add_option("--synth", synth_slices, "generate a synthetic stack with N slices");
        cmd->add_option("--synth-size", synth_size, "synthetic slice extent")->default_val(64);
        cmd->add_option("--synth-seed", synth_seed, "synthetic geometry seed")->default_val(0);
        cmd->add_option("--classes", classes, "number of classes")->default_val(3);
        cmd->add_option("--resize", resize, "resize slices to this extent (0 = native)")
            ->default_val(0);
    }

    std::pair<ImageStack, LabelStack> load() const {
        if (!data_dir.empty() && synth_slices > 0)
            throw ValueError("pass either --data or --synth, not both");
        if (data_dir.empty() && synth_slices <= 0)
            throw ValueError("one of --data or --synth is required");
        if (!data_dir.empty()) return load_stack(data_dir);
        SynthConfig cfg;
        cfg.n = synth_slices;
        cfg.classes = classes;
        cfg.height = cfg.width = synth_size;
        cfg.seed = synth_seed;
        return synth_stack(cfg);
    }
};

struct PlanArgs {
    std::string plan_path;
    std::string strategy = "RandomOrdered";
    std::uint64_t seed = 0;
    double train_frac = 0.10, val_frac = 0.01, min_annotated = 0.5;

    void attach(CLI::App* cmd) {
        cmd->add_option("--plan", plan_path, "split plan file to replay");
        cmd->add_option("--strategy", strategy,
                        "RandomOrdered | InitialSeq | MidRand | MidSeq")
            ->default_val("RandomOrdered");
        cmd->add_option("--seed", seed, "split/run seed")->default_val(0);
        cmd->add_option("--train-frac", train_frac)->default_val(0.10);
        cmd->add_option("--val-frac", val_frac)->default_val(0.01);
        cmd->add_option("--min-annotated", min_annotated)->default_val(0.5);
    }

    SplitPlan get(int n, std::span<const std::uint8_t> annotated) const {
        if (!plan_path.empty()) {
            auto plan = SplitPlan::load(plan_path);
            if (plan.n != n)
                throw ValueError("split plan covers " + std::to_string(plan.n) +
                                 " slices, stack has " + std::to_string(n));
            return plan;
        }
        auto st = split_strategy_from_name(strategy);
        if (!st) throw ValueError("unknown strategy: " + strategy);
        return sample_split(n, annotated, *st, train_frac, val_frac, min_annotated, seed);
    }
};

std::optional<std::array<std::int64_t, 5>> parse_widths(const std::string& csv) {
    if (csv.empty()) return std::nullopt;
    std::array<std::int64_t, 5> w{};
    std::istringstream is(csv);
    std::string tok;
    int i = 0;
    while (std::getline(is, tok, ',')) {
        if (i >= 5) throw ValueError("widths need exactly 5 comma-separated values");
        w[static_cast<std::size_t>(i++)] = std::stoll(tok);
    }
    if (i != 5) throw ValueError("widths need exactly 5 comma-separated values");
    return w;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << content;
}

// default class palette; --paper-colors collapses 7-class heart masks into
// the red/blue/green planes of the figures
const std::uint8_t kPalette[7][3] = {{0, 0, 255},   {255, 0, 0},   {0, 200, 0}, {255, 255, 0},
                                     {255, 0, 255}, {0, 255, 255}, {255, 165, 0}};

void paper_color_for_pix(int pix, std::uint8_t rgb[3]) {
    if (pix == 205 || pix == 420) {
        rgb[0] = 255, rgb[1] = 0, rgb[2] = 0;
    } else if (pix == 500 || pix == 550) {
        rgb[0] = 0, rgb[1] = 0, rgb[2] = 255;
    } else {
        rgb[0] = 0, rgb[1] = 200, rgb[2] = 0;
    }
}

int cmd_params(const std::string& model_name, int classes, const std::string& widths_csv,
               bool no_bn, bool deep_supervision, bool check_table1) {
    auto arch = arch_from_name(model_name);
    if (!arch) {
        std::cerr << "unknown model: " << model_name << "\n";
        return kExitUsage;
    }
    BuildOptions opts;
    opts.num_classes = classes;
    opts.widths = parse_widths(widths_csv);
    opts.batchnorm = !no_bn;
    opts.deep_supervision = deep_supervision;
    auto model = ModelGraph::build(*arch, opts);
    auto c = model.count_params();
    std::cout << "model " << arch_name(*arch) << " classes " << classes << "\n";
    std::cout << "total          " << thousands(c.total) << "\n";
    std::cout << "trainable      " << thousands(c.trainable) << "\n";
    std::cout << "non-trainable  " << thousands(c.non_trainable) << "\n";

    if (!check_table1) return kExitOk;
    if (!widths_csv.empty() || classes != 3 || no_bn || deep_supervision) {
        std::cerr << "--check-table1 applies to the default 3-class configurations\n";
        return kExitUsage;
    }
    for (const auto& row : kTable1) {
        if (row.arch != *arch) continue;
        if (c.total == row.total && c.trainable == row.trainable &&
            c.non_trainable == row.non_trainable) {
            std::cout << "table-1 check: OK\n";
            return kExitOk;
        }
        std::cerr << "table-1 check FAILED: expected " << thousands(row.total) << " / "
                  << thousands(row.trainable) << " / " << thousands(row.non_trainable) << "\n";
        return kExitCheckFailed;
    }
    return kExitCheckFailed;
}

int cmd_gradcheck(const std::vector<std::string>& ops, std::uint64_t seed) {
    auto results = run_gradcheck_suite(ops, seed);
    bool all = true;
    for (const auto& c : results) {
        std::printf("%-18s %s  max_rel_err=%.3e  tol=%.0e  (%.2fs)\n", c.name.c_str(),
                    c.pass ? "PASS" : "FAIL", c.max_rel_err, c.tolerance, c.seconds);
        all = all && c.pass;
    }
    return all ? kExitOk : kExitCheckFailed;
}

int cmd_split(const DataArgs& data, const PlanArgs& plan_args, const std::string& out_path) {
    auto [images, labels] = data.load();
    auto plan = plan_args.get(images.count(), labels.annotated);
    plan.save(out_path);
    std::cout << "wrote " << out_path << ": " << plan.train.size() << " train, "
              << plan.val.size() << " val, " << plan.test.size() << " test\n";
    return kExitOk;
}

StackData prepare_stack(const DataArgs& data, const PlanArgs& plan_args) {
    auto [images, labels] = data.load();
    auto plan = plan_args.get(images.count(), labels.annotated);
    const int h = data.resize > 0 ? data.resize : images.slices[0].h;
    const int w = data.resize > 0 ? data.resize : images.slices[0].w;
    return make_stack_data(images, labels, std::move(plan), h, w);
}

int cmd_train(const std::string& model_name, const DataArgs& data, const PlanArgs& plan_args,
              TrainConfig cfg, int reps, const std::string& widths_csv,
              const std::string& from_ckpt, const std::string& transfer_from,
              const std::string& out_ckpt, const std::string& csv_dir) {
    auto arch = arch_from_name(model_name);
    if (!arch && transfer_from.empty()) {
        std::cerr << "unknown model: " << model_name << "\n";
        return kExitUsage;
    }
    if (!csv_dir.empty()) fs::create_directories(csv_dir);

    auto stack = prepare_stack(data, plan_args);
    for (int rep = 0; rep < std::max(1, reps); ++rep) {
        const std::uint64_t rep_seed = cfg.seed + static_cast<std::uint64_t>(rep);
        TrainConfig rc = cfg;
        rc.seed = rep_seed;

        ModelGraph model = [&]() -> ModelGraph {
            if (!transfer_from.empty())
                return transfer_adapt(load_checkpoint(transfer_from).model, data.classes,
                                      rep_seed);
            if (!from_ckpt.empty()) return load_checkpoint(from_ckpt).model;
            BuildOptions bo;
            bo.num_classes = data.classes;
            bo.widths = parse_widths(widths_csv);
            bo.deep_supervision = rc.deep_supervision;
            bo.seed = rep_seed;
            return ModelGraph::build(*arch, bo);
        }();

        EvalOptions eo;
        eo.model_label = arch_name(model.arch());
        std::vector<StackData> stacks{stack};
        auto rec = run_training(model, stacks, rc, &eo);

        const std::string suffix = reps > 1 ? ".rep" + std::to_string(rep) : "";
        if (!out_ckpt.empty()) save_checkpoint(model, out_ckpt + suffix);
        if (!csv_dir.empty()) {
            write_file(csv_dir + "/losses" + suffix + ".csv", rec.losses_csv());
            write_file(csv_dir + "/eval" + suffix + ".csv", rec.report.to_csv());
        }
        std::cout << "rep " << rep << ": final loss " << rec.epoch_losses.back()
                  << ", mean dice " << rec.report.mean_dice_smoothed << "% ("
                  << rec.wall_seconds << "s)\n";
    }
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const DataArgs& data, const PlanArgs& plan_args,
             const std::string& order, std::uint64_t shuffle_seed, bool oracle_inject,
             bool warm_state, const std::string& out_csv) {
    auto loaded = load_checkpoint(ckpt);
    auto stack = prepare_stack(data, plan_args);
    EvalOptions eo;
    eo.model_label = arch_name(loaded.model.arch());
    if (order == "shuffled")
        eo.order = EvalOptions::Order::shuffled;
    else if (order != "ordered") {
        std::cerr << "--test-order must be ordered or shuffled\n";
        return kExitUsage;
    }
    eo.shuffle_seed = shuffle_seed;
    if (oracle_inject)
        eo.prediction_override = [](int, const SliceSample& s) { return label_tensor(s.labels); };

    PropagationState warm;
    if (warm_state && loaded.model.is_propagating()) {
        NoGradGuard ng;
        warm.phase = Mode::infer;
        for (int idx : stack.plan.train) {
            PropagationState next;
            next.phase = Mode::infer;
            ForwardOptions o;
            o.state_in = &warm;
            o.state_out = &next;
            loaded.model.forward(image_tensor(stack.slices[idx].image), o);
            warm = std::move(next);
        }
        eo.initial_state = &warm;
    }

    auto rep = evaluate(loaded.model, stack, eo);
    if (out_csv.empty())
        std::cout << rep.to_csv();
    else {
        write_file(out_csv, rep.to_csv());
        std::cout << "wrote " << out_csv << " (mean dice " << rep.mean_dice_smoothed << "%)\n";
    }
    return kExitOk;
}

int cmd_segment(const std::string& ckpt, const DataArgs& data, const std::string& out_dir,
                bool paper_colors) {
    auto loaded = load_checkpoint(ckpt);
    auto [images, labels] = data.load();
    const int d = static_cast<int>(labels.pix_values.size());
    if (d != loaded.model.num_classes())
        throw ValueError("checkpoint expects " + std::to_string(loaded.model.num_classes()) +
                         " classes, stack declares " + std::to_string(d));
    if (paper_colors && d != 3 && d != 7)
        throw ValueError("--paper-colors needs a 3-class (lung) or 7-class (heart) stack");
    fs::create_directories(out_dir);

    const int h = data.resize > 0 ? data.resize : images.slices[0].h;
    const int w = data.resize > 0 ? data.resize : images.slices[0].w;
    SplitPlan all;
    all.n = images.count();
    for (int i = 0; i < all.n; ++i) all.test.push_back(i);
    auto stack = make_stack_data(images, labels, std::move(all), h, w);

    NoGradGuard ng;
    PropagationState state;
    state.phase = Mode::infer;
    char name[32];
    for (int idx = 0; idx < static_cast<int>(stack.slices.size()); ++idx) {
        const auto& sample = stack.slices[static_cast<std::size_t>(idx)];
        PropagationState next;
        next.phase = Mode::infer;
        ForwardOptions o;
        o.state_in = &state;
        o.state_out = &next;
        auto raw = loaded.model.forward(image_tensor(sample.image), o);
        if (loaded.model.is_propagating()) state = std::move(next);
        auto hard = threshold_prediction(raw);

        std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
        for (int e = 0; e < h * w; ++e) {
            const auto g = static_cast<std::uint8_t>(
                std::clamp(sample.image.v[static_cast<std::size_t>(e)] * 255.0f, 0.0f, 255.0f));
            rgb[3 * e] = rgb[3 * e + 1] = rgb[3 * e + 2] = g;
        }
        for (int c = 0; c < d; ++c) {
            std::uint8_t col[3];
            if (paper_colors && d == 7)
                paper_color_for_pix(stack.pix_values[static_cast<std::size_t>(c)], col);
            else {
                col[0] = kPalette[c % 7][0];
                col[1] = kPalette[c % 7][1];
                col[2] = kPalette[c % 7][2];
            }
            const float* plane = hard.data().data() + static_cast<std::size_t>(c) * h * w;
            for (int e = 0; e < h * w; ++e) {
                if (plane[e] == 0.0f) continue;
                for (int ch = 0; ch < 3; ++ch)
                    rgb[3 * e + ch] = static_cast<std::uint8_t>((rgb[3 * e + ch] + col[ch]) / 2);
            }
            std::vector<std::uint8_t> bin(static_cast<std::size_t>(h) * w);
            for (int e = 0; e < h * w; ++e) bin[e] = plane[e] != 0.0f ? 255 : 0;
            std::snprintf(name, sizeof(name), "plane%d_%04d.png", c + 1, idx);
            write_png_gray8((fs::path(out_dir) / name).string(), h, w, bin.data());
        }
        std::snprintf(name, sizeof(name), "overlay_%04d.png", idx);
        write_png_rgb8((fs::path(out_dir) / name).string(), h, w, rgb.data());
    }
    std::cout << "wrote overlays and planes for " << stack.slices.size() << " slices to "
              << out_dir << "\n";
    return kExitOk;
}

int cmd_experiment(const std::string& spec_path, const std::string& out_dir) {
    auto spec = parse_experiment_spec(spec_path);
    auto result = run_experiment(spec);
    fs::create_directories(out_dir);
    write_file(out_dir + "/summary.csv", result.csv);
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        const auto& rec = result.records[i];
        const std::string tag = std::to_string(i);
        write_file(out_dir + "/losses_" + tag + ".csv", rec.losses_csv());
        write_file(out_dir + "/eval_" + tag + ".csv", rec.report.to_csv());
    }
    std::cout << result.csv;
    return kExitOk;
}

int cmd_synth(int n, int classes, int size, std::uint64_t seed, const std::string& out_dir) {
    SynthConfig cfg;
    cfg.n = n;
    cfg.classes = classes;
    cfg.height = cfg.width = size;
    cfg.seed = seed;
    auto [images, labels] = synth_stack(cfg);
    write_stack(images, labels, out_dir);
    std::cout << "wrote " << n << " slices (" << size << "x" << size << ", " << classes
              << " classes) to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"numsnet: cross-scan multi-class segmentation engine"};
    app.require_subcommand(1);

    // params
    auto* params = app.add_subcommand("params", "parameter counts per architecture");
    std::string p_model, p_widths;
    int p_classes = 3;
    bool p_nobn = false, p_ds = false, p_check = false;
    params->add_option("--model", p_model, "unet|wunet|unetpp|numsnet|numsall")->required();
    params->add_option("--classes", p_classes)->default_val(3);
    params->add_option("--widths", p_widths, "five comma-separated filter widths");
    params->add_flag("--no-bn", p_nobn, "build without batch norm");
    params->add_flag("--deep-supervision", p_ds, "include auxiliary heads");
    params->add_flag("--check-table1", p_check, "verify against the published counts");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "finite-difference verification suite");
    std::vector<std::string> g_ops;
    std::uint64_t g_seed = 0;
    grad->add_option("--ops", g_ops, "restrict to these named checks")->delimiter(',');
    grad->add_option("--seed", g_seed)->default_val(0);

    // split
    auto* split = app.add_subcommand("split", "build a train/val/test split plan");
    DataArgs sp_data;
    PlanArgs sp_plan;
    std::string sp_out = "plan.txt";
    sp_data.attach(split);
    sp_plan.attach(split);
    split->add_option("-o,--out", sp_out, "output plan file")->default_val("plan.txt");

    // train
    auto* train = app.add_subcommand("train", "train a model");
    DataArgs tr_data;
    PlanArgs tr_plan;
    std::string tr_model = "numsnet", tr_widths, tr_out, tr_csv, tr_from, tr_transfer,
                tr_loss = "bdl";
    TrainConfig tr_cfg;
    int tr_reps = 1;
    tr_data.attach(train);
    tr_plan.attach(train);
    train->add_option("--model", tr_model)->default_val("numsnet");
    train->add_option("--widths", tr_widths);
    train->add_option("--epochs", tr_cfg.epochs)->default_val(60);
    train->add_option("--batch", tr_cfg.batch_size)->default_val(5);
    train->add_option("--loss", tr_loss, "dl|bcl|bdl")->default_val("bdl");
    train->add_option("--lr", tr_cfg.lr)->default_val(1e-3f);
    train->add_option("--reps", tr_reps, "seeded repetitions")->default_val(1);
    train->add_flag("--augment", tr_cfg.augment, "paired affine augmentation");
    train->add_flag("--deep-supervision", tr_cfg.deep_supervision);
    bool tr_nodetach = false;
    train->add_flag("--no-detach-state", tr_nodetach, "let gradients flow through the state");
    train->add_option("--from-checkpoint", tr_from, "resume weights from a checkpoint");
    train->add_option("--transfer-from", tr_transfer,
                      "adapt a checkpoint to --classes and fine-tune");
    train->add_option("-o,--out", tr_out, "checkpoint output path");
    train->add_option("--csv-dir", tr_csv, "directory for loss/eval CSVs");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    DataArgs ev_data;
    PlanArgs ev_plan;
    std::string ev_ckpt, ev_order = "ordered", ev_out;
    std::uint64_t ev_shuffle = 0;
    bool ev_oracle = false, ev_warm = false;
    ev_data.attach(eval_cmd);
    ev_plan.attach(eval_cmd);
    eval_cmd->add_option("--ckpt", ev_ckpt)->required();
    eval_cmd->add_option("--test-order", ev_order, "ordered|shuffled")->default_val("ordered");
    eval_cmd->add_option("--shuffle-seed", ev_shuffle)->default_val(0);
    eval_cmd->add_flag("--oracle-inject", ev_oracle,
                       "force predictions equal to ground truth (harness check)");
    eval_cmd->add_flag("--carry-state", ev_warm,
                       "warm the propagation state on the training slices first");
    eval_cmd->add_option("-o,--out", ev_out, "report CSV path (default stdout)");

    // segment
    auto* seg = app.add_subcommand("segment", "export overlays and raw prediction planes");
    DataArgs sg_data;
    std::string sg_ckpt, sg_out = "segmented";
    bool sg_paper = false;
    sg_data.attach(seg);
    seg->add_option("--ckpt", sg_ckpt)->required();
    seg->add_option("--out", sg_out)->default_val("segmented");
    seg->add_flag("--paper-colors", sg_paper, "3-color lung/heart display grouping");

    // experiment
    auto* exp = app.add_subcommand("experiment", "run a named experiment preset");
    std::string ex_spec, ex_out = "experiment-out";
    exp->add_option("--spec", ex_spec, "experiment spec JSON")->required();
    exp->add_option("-o,--out", ex_out)->default_val("experiment-out");

    // synth
    auto* synth = app.add_subcommand("synth", "materialize a synthetic stack");
    int sy_n = 60, sy_classes = 3, sy_size = 64;
    std::uint64_t sy_seed = 0;
    std::string sy_out = "synth-stack";
    synth->add_option("--n", sy_n)->default_val(60);
    synth->add_option("--classes", sy_classes)->default_val(3);
    synth->add_option("--size", sy_size)->default_val(64);
    synth->add_option("--seed", sy_seed)->default_val(0);
    synth->add_option("--out", sy_out)->default_val("synth-stack");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (params->parsed())
            return cmd_params(p_model, p_classes, p_widths, p_nobn, p_ds, p_check);
        if (grad->parsed()) return cmd_gradcheck(g_ops, g_seed);
        if (split->parsed()) return cmd_split(sp_data, sp_plan, sp_out);
        if (train->parsed()) {
            auto k = loss_kind_from_name(tr_loss);
            if (!k) {
                std::cerr << "unknown loss: " << tr_loss << "\n";
                return kExitUsage;
            }
            tr_cfg.loss = *k;
            tr_cfg.seed = tr_plan.seed;
            tr_cfg.detach_state = !tr_nodetach;
            return cmd_train(tr_model, tr_data, tr_plan, tr_cfg, tr_reps, tr_widths, tr_from,
                             tr_transfer, tr_out, tr_csv);
        }
        if (eval_cmd->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_plan, ev_order, ev_shuffle, ev_oracle, ev_warm,
                            ev_out);
        if (seg->parsed()) return cmd_segment(sg_ckpt, sg_data, sg_out, sg_paper);
        if (exp->parsed()) return cmd_experiment(ex_spec, ex_out);
        if (synth->parsed()) return cmd_synth(sy_n, sy_classes, sy_size, sy_seed, sy_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
