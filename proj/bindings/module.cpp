#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "numsnet/checkpoint.hpp"
#include "numsnet/gradcheck_suite.hpp"
#include "numsnet/losses.hpp"
#include "numsnet/metrics.hpp"
#include "numsnet/train.hpp"

namespace py = pybind11;
using namespace numsnet;

namespace {

Arch arch_or_throw(const std::string& name) {
    auto a = arch_from_name(name);
    if (!a) throw ValueError("unknown architecture: " + name);
    return *a;
}

BuildOptions make_options(int classes, const std::optional<std::vector<std::int64_t>>& widths,
                          bool batchnorm, bool deep_supervision, std::uint64_t seed) {
    BuildOptions o;
    o.num_classes = classes;
    if (widths) {
        if (widths->size() != 5) throw ValueError("widths must have 5 entries");
        std::array<std::int64_t, 5> w{};
        std::copy(widths->begin(), widths->end(), w.begin());
        o.widths = w;
    }
    o.batchnorm = batchnorm;
    o.deep_supervision = deep_supervision;
    o.seed = seed;
    return o;
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const FloatArray& arr, int expect_rank, const char* what) {
    if (arr.ndim() != expect_rank)
        throw ShapeError(std::string(what) + " must have rank " + std::to_string(expect_rank));
    std::vector<std::int64_t> dims(arr.shape(), arr.shape() + arr.ndim());
    std::vector<float> data(arr.data(), arr.data() + arr.size());
    return Tensor::from_data(Shape{dims}, std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> dims(t.shape().dims.begin(), t.shape().dims.end());
    py::array_t<float> out(dims);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::dict metric_dict(const Tensor& pred, const Tensor& gt) {
    py::dict out;
    auto pack = [](const MetricResult& r) {
        py::list per;
        for (const auto& v : r.per_class)
            per.append(v ? py::object(py::float_(*v)) : py::object(py::none()));
        py::dict d;
        d["per_class"] = per;
        d["mean"] = r.mean ? py::object(py::float_(*r.mean)) : py::object(py::none());
        return d;
    };
    out["iou"] = pack(iou(pred, gt));
    out["dice"] = pack(dice(pred, gt));
    out["dice_raw"] = pack(dice_raw(pred, gt));
    out["precision"] = pack(precision(pred, gt));
    out["recall"] = pack(recall(pred, gt));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Cross-scan multi-class segmentation engine (Unet family + NUMSnet)";

    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<ChecksumError>(m, "ChecksumError");
    static py::exception<Error> base_error(m, "EngineError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ShapeError&) {
            throw;  // handled by the dedicated binding
        } catch (const ChecksumError&) {
            throw;
        } catch (const Error& e) {
            base_error(e.what());
        }
    });

    py::class_<ModelGraph>(m, "Model")
        .def(py::init([](const std::string& arch, int classes,
                         std::optional<std::vector<std::int64_t>> widths, bool batchnorm,
                         bool deep_supervision, std::uint64_t seed) {
                 return ModelGraph::build(
                     arch_or_throw(arch),
                     make_options(classes, widths, batchnorm, deep_supervision, seed));
             }),
             py::arg("arch"), py::arg("classes") = 3, py::arg("widths") = py::none(),
             py::arg("batchnorm") = true, py::arg("deep_supervision") = false,
             py::arg("seed") = 0)
        .def_property_readonly("arch",
                               [](const ModelGraph& g) { return std::string(arch_name(g.arch())); })
        .def_property_readonly("classes", &ModelGraph::num_classes)
        .def_property_readonly("propagated_layers",
                               [](const ModelGraph& g) {
                                   std::vector<std::pair<int, int>> out;
                                   for (auto id : g.propagated_layers())
                                       out.emplace_back(id.row, id.col);
                                   return out;
                               })
        .def("count_params",
             [](const ModelGraph& g) {
                 auto c = g.count_params();
                 return py::make_tuple(c.total, c.trainable, c.non_trainable);
             })
        .def(
            "forward",
            [](ModelGraph& g, const FloatArray& x) {
                NoGradGuard ng;
                return array_from_tensor(g.forward(tensor_from_array(x, 4, "input")));
            },
            py::arg("x"), "Inference forward pass on [N,1,H,W]; fresh propagation state.")
        .def(
            "forward_sequence",
            [](ModelGraph& g, const std::vector<FloatArray>& slices) {
                NoGradGuard ng;
                PropagationState state;
                state.phase = Mode::infer;
                std::vector<py::array_t<float>> out;
                for (const auto& arr : slices) {
                    PropagationState next;
                    next.phase = Mode::infer;
                    ForwardOptions o;
                    o.state_in = &state;
                    o.state_out = &next;
                    out.push_back(array_from_tensor(
                        g.forward(tensor_from_array(arr, 4, "input"), o)));
                    if (g.is_propagating()) state = std::move(next);
                }
                return out;
            },
            py::arg("slices"),
            "Ordered inference over a scan sequence with cross-scan state propagation.")
        .def("save", [](const ModelGraph& g, const std::string& path) {
            save_checkpoint(g, path);
        });

    m.def(
        "load", [](const std::string& path) { return load_checkpoint(path).model; },
        py::arg("path"));
    m.def("transfer_adapt", &transfer_adapt, py::arg("model"), py::arg("new_classes"),
          py::arg("seed") = 0);

    m.def(
        "count_params",
        [](const std::string& arch, int classes, std::optional<std::vector<std::int64_t>> widths,
           bool batchnorm, bool deep_supervision) {
            auto c = ModelGraph::build(arch_or_throw(arch),
                                       make_options(classes, widths, batchnorm, deep_supervision,
                                                    0))
                         .count_params();
            return py::make_tuple(c.total, c.trainable, c.non_trainable);
        },
        py::arg("arch"), py::arg("classes") = 3, py::arg("widths") = py::none(),
        py::arg("batchnorm") = true, py::arg("deep_supervision") = false);

    m.def("synth_stack", [](int n, int classes, int size, std::uint64_t seed) {
        SynthConfig cfg;
        cfg.n = n;
        cfg.classes = classes;
        cfg.height = cfg.width = size;
        cfg.seed = seed;
        auto [images, labels] = synth_stack(cfg);
        py::array_t<float> img({n, size, size});
        py::array_t<std::uint16_t> msk({n, size, size});
        for (int t = 0; t < n; ++t) {
            std::copy(images.slices[t].v.begin(), images.slices[t].v.end(),
                      img.mutable_data() + static_cast<std::size_t>(t) * size * size);
            std::copy(labels.masks[t].v.begin(), labels.masks[t].v.end(),
                      msk.mutable_data() + static_cast<std::size_t>(t) * size * size);
        }
        return py::make_tuple(img, msk, labels.pix_values);
    }, py::arg("n") = 60, py::arg("classes") = 3, py::arg("size") = 64, py::arg("seed") = 0);

    m.def(
        "sample_split",
        [](int n, const std::string& strategy, std::uint64_t seed, double train_frac,
           double val_frac, double min_annotated_frac,
           std::optional<std::vector<std::uint8_t>> annotated) {
            auto st = split_strategy_from_name(strategy);
            if (!st) throw ValueError("unknown strategy: " + strategy);
            std::vector<std::uint8_t> ann = annotated.value_or(std::vector<std::uint8_t>{});
            auto plan = sample_split(n, ann, *st, train_frac, val_frac, min_annotated_frac, seed);
            py::dict out;
            out["train"] = plan.train;
            out["val"] = plan.val;
            out["test"] = plan.test;
            return out;
        },
        py::arg("n"), py::arg("strategy") = "RandomOrdered", py::arg("seed") = 0,
        py::arg("train_frac") = 0.10, py::arg("val_frac") = 0.01,
        py::arg("min_annotated_frac") = 0.5, py::arg("annotated") = py::none());

    m.def(
        "metrics",
        [](const FloatArray& pred, const FloatArray& gt) {
            return metric_dict(tensor_from_array(pred, 3, "pred"),
                               tensor_from_array(gt, 3, "gt"));
        },
        py::arg("pred"), py::arg("gt"),
        "Hard multi-class metrics on binary [d,H,W] planes: iou/dice/precision/recall.");

    m.def(
        "losses",
        [](const FloatArray& pred, const FloatArray& gt) {
            auto p = tensor_from_array(pred, 4, "pred").cast<double>();
            auto g = tensor_from_array(gt, 4, "gt").cast<double>();
            py::dict out;
            out["dl"] = dice_loss(p, g).item();
            out["bcl"] = bce_loss(p, g).item();
            out["bdl"] = bce_dice_loss(p, g).item();
            return out;
        },
        py::arg("pred"), py::arg("gt"));

    m.def(
        "gradcheck",
        [](std::optional<std::vector<std::string>> ops, std::uint64_t seed) {
            auto results = run_gradcheck_suite(ops.value_or(std::vector<std::string>{}), seed);
            py::list out;
            for (const auto& c : results) {
                py::dict d;
                d["name"] = c.name;
                d["max_rel_err"] = c.max_rel_err;
                d["tolerance"] = c.tolerance;
                d["pass"] = c.pass;
                out.append(d);
            }
            return out;
        },
        py::arg("ops") = py::none(), py::arg("seed") = 0);

    m.def(
        "train_synth",
        [](const std::string& arch, int slices, int classes, int size,
           std::optional<std::vector<std::int64_t>> widths, int epochs, int batch,
           const std::string& strategy, const std::string& loss, std::uint64_t seed) {
            auto st = split_strategy_from_name(strategy);
            if (!st) throw ValueError("unknown strategy: " + strategy);
            auto lk = loss_kind_from_name(loss);
            if (!lk) throw ValueError("unknown loss: " + loss);
            SynthConfig cfg;
            cfg.n = slices;
            cfg.classes = classes;
            cfg.height = cfg.width = size;
            cfg.seed = seed;
            auto [images, labels] = synth_stack(cfg);
            auto plan = sample_split(slices, labels.annotated, *st, 0.10, 0.01, 0.5, seed);
            auto stack = make_stack_data(images, labels, std::move(plan), size, size);
            auto model = ModelGraph::build(arch_or_throw(arch),
                                           make_options(classes, widths, true, false, seed));
            TrainConfig tc;
            tc.epochs = epochs;
            tc.batch_size = batch;
            tc.loss = *lk;
            tc.seed = seed;
            EvalOptions eo;
            eo.model_label = arch;
            auto rec = run_training(model, {stack}, tc, &eo);
            py::dict out;
            out["epoch_losses"] = rec.epoch_losses;
            out["mean_dice"] = rec.report.mean_dice_smoothed;
            py::list per;
            for (const auto& row : rec.report.classes) per.append(row.dice_smoothed);
            out["class_dice"] = per;
            return out;
        },
        py::arg("arch") = "numsnet", py::arg("slices") = 20, py::arg("classes") = 2,
        py::arg("size") = 32, py::arg("widths") = py::none(), py::arg("epochs") = 3,
        py::arg("batch") = 5, py::arg("strategy") = "MidSeq", py::arg("loss") = "bdl",
        py::arg("seed") = 0);

    m.def("gradcheck_case_names", &gradcheck_case_names);
    m.attr("__version__") = "1.0.0";
}
