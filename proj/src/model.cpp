#include "numsnet/model.hpp"

#include <algorithm>
#include <cmath>

namespace numsnet {

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::unet: return "unet";
        case Arch::wunet: return "wunet";
        case Arch::unetpp: return "unetpp";
        case Arch::numsnet: return "numsnet";
        case Arch::numsall: return "numsall";
    }
    return "?";
}

std::optional<Arch> arch_from_name(std::string_view name) {
    for (Arch a : {Arch::unet, Arch::wunet, Arch::unetpp, Arch::numsnet, Arch::numsall})
        if (name == arch_name(a)) return a;
    return std::nullopt;
}

std::array<std::int64_t, 5> default_widths(Arch a) {
    switch (a) {
        case Arch::unet:
        case Arch::unetpp: return {32, 64, 128, 256, 512};
        case Arch::wunet:
        case Arch::numsnet:
        case Arch::numsall: return {35, 70, 140, 280, 560};
    }
    return {};
}

namespace {

const std::vector<LayerId> kNestedSix = {{1, 2}, {1, 3}, {1, 4}, {2, 2}, {2, 3}, {3, 2}};
const std::vector<LayerId> kUpsampleTen = {{1, 2}, {1, 3}, {1, 4}, {1, 5}, {2, 2},
                                           {2, 3}, {2, 4}, {3, 2}, {3, 3}, {4, 2}};

bool is_nested_family(Arch a) {
    return a == Arch::unetpp || a == Arch::numsnet || a == Arch::numsall;
}

std::string block_name(LayerId id) {
    return "x" + std::to_string(id.row) + std::to_string(id.col);
}

void he_uniform_fill(Tensor& t, std::int64_t fan_in, RngStream& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-limit, limit));
}

}  // namespace

Tensor ModelGraph::register_param(const std::string& name, Shape shape, bool trainable) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    auto t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(trainable);
    index_[name] = registry_.size();
    registry_.push_back({name, t, trainable});
    return t;
}

ModelGraph::Conv ModelGraph::make_conv(const std::string& prefix, std::int64_t cin,
                                       std::int64_t cout, std::int64_t k, RngStream& rng) {
    Conv c;
    c.w = register_param(prefix + ".w", Shape{cout, cin, k, k}, true);
    c.b = register_param(prefix + ".b", Shape{cout}, true);
    he_uniform_fill(c.w, cin * k * k, rng);
    return c;
}

ModelGraph::Bn ModelGraph::make_bn(const std::string& prefix, std::int64_t c) {
    Bn bn;
    bn.gamma = register_param(prefix + ".gamma", Shape{c}, true);
    bn.beta = register_param(prefix + ".beta", Shape{c}, true);
    bn.rmean = register_param(prefix + ".rmean", Shape{c}, false);
    bn.rvar = register_param(prefix + ".rvar", Shape{c}, false);
    std::fill(bn.gamma.mutable_data().begin(), bn.gamma.mutable_data().end(), 1.0f);
    std::fill(bn.rvar.mutable_data().begin(), bn.rvar.mutable_data().end(), 1.0f);
    return bn;
}

ModelGraph::ConvBlock ModelGraph::make_block(const std::string& prefix, std::int64_t cin,
                                             std::int64_t cout, bool bn, RngStream& rng) {
    ConvBlock blk;
    blk.c1 = make_conv(prefix + ".c1", cin, cout, 3, rng);
    if (bn) blk.bn1 = make_bn(prefix + ".bn1", cout);
    blk.c2 = make_conv(prefix + ".c2", cout, cout, 3, rng);
    if (bn) blk.bn2 = make_bn(prefix + ".bn2", cout);
    return blk;
}

void ModelGraph::init_head_params(RngStream& rng) {
    head_.w = register_param("head.w", Shape{opts_.num_classes, widths_[0], 1, 1}, true);
    head_.b = register_param("head.b", Shape{opts_.num_classes}, true);
    he_uniform_fill(head_.w, widths_[0], rng);
    if (opts_.deep_supervision) {
        for (int depth = 2; depth <= 4; ++depth) {
            Conv c;
            const std::string prefix = "head_d" + std::to_string(depth);
            c.w = register_param(prefix + ".w",
                                 Shape{opts_.num_classes, widths_[depth - 1], 1, 1}, true);
            c.b = register_param(prefix + ".b", Shape{opts_.num_classes}, true);
            he_uniform_fill(c.w, widths_[depth - 1], rng);
            ds_heads_[depth] = c;
        }
    }
}

ModelGraph ModelGraph::build(Arch arch, const BuildOptions& opts) {
    if (opts.num_classes < 1) throw ValueError("build: num_classes must be >= 1");
    if (opts.deep_supervision && !is_nested_family(arch))
        throw ValueError("build: deep supervision requires a nested architecture");
    ModelGraph m;
    m.arch_ = arch;
    m.opts_ = opts;
    m.widths_ = opts.widths.value_or(default_widths(arch));
    for (auto w : m.widths_)
        if (w < 1) throw ValueError("build: widths must be strictly positive");
    if (arch == Arch::numsnet) m.propagated_ = kNestedSix;
    if (arch == Arch::numsall) m.propagated_ = kUpsampleTen;

    RngStream rng = RngStream(opts.seed).split("init");
    const bool nested = is_nested_family(arch);
    // batch norm on both convs of the encoder column: all five blocks for the
    // classic models, depths 1-4 for the nested family
    const int bn_max_depth = nested ? 4 : 5;
    const bool has_dropout = arch == Arch::numsnet || arch == Arch::numsall;

    for (int i = 1; i <= 5; ++i) {
        LayerId id{i, 1};
        Block blk;
        const std::int64_t cin = i == 1 ? 1 : m.widths_[i - 2];
        const bool bn = opts.batchnorm && i <= bn_max_depth;
        blk.body = m.make_block(block_name(id), cin, m.widths_[i - 1], bn, rng);
        blk.has_dropout = has_dropout && (i == 4 || i == 5);
        m.blocks_.emplace(id, std::move(blk));
    }
    for (int j = 2; j <= 5; ++j) {
        for (int i = 1; i + j <= 6; ++i) {
            if (!nested && i + j != 6) continue;
            LayerId id{i, j};
            Block blk;
            const std::string name = block_name(id);
            Conv up;  // transposed-conv weight layout is [Cin,Cout,2,2]
            up.w = m.register_param(name + ".up.w", Shape{m.widths_[i], m.widths_[i - 1], 2, 2},
                                    true);
            up.b = m.register_param(name + ".up.b", Shape{m.widths_[i - 1]}, true);
            he_uniform_fill(up.w, m.widths_[i] * 4, rng);
            blk.up = up;
            const std::int64_t groups = nested ? j : 2;
            blk.body = m.make_block(name, groups * m.widths_[i - 1], m.widths_[i - 1], false, rng);
            if (std::find(m.propagated_.begin(), m.propagated_.end(), id) !=
                m.propagated_.end()) {
                ConvBlock merge;
                merge.c1 = m.make_conv(name + ".m1", 2 * m.widths_[i - 1], m.widths_[i - 1], 3, rng);
                merge.c2 = m.make_conv(name + ".m2", m.widths_[i - 1], m.widths_[i - 1], 3, rng);
                blk.merge = merge;
            }
            m.blocks_.emplace(id, std::move(blk));
        }
    }
    m.init_head_params(rng);
    return m;
}

ModelGraph ModelGraph::build_unet(const BuildOptions& o) { return build(Arch::unet, o); }
ModelGraph ModelGraph::build_wunet(const BuildOptions& o) { return build(Arch::wunet, o); }
ModelGraph ModelGraph::build_unetpp(const BuildOptions& o) { return build(Arch::unetpp, o); }
ModelGraph ModelGraph::build_numsnet(const BuildOptions& o) { return build(Arch::numsnet, o); }
ModelGraph ModelGraph::build_numsall(const BuildOptions& o) { return build(Arch::numsall, o); }

Tensor ModelGraph::apply_block(const ConvBlock& blk, const Tensor& x, Mode mode) {
    Tensor y = conv2d(x, blk.c1.w, blk.c1.b, Padding::same, 1);
    if (blk.bn1) {
        Tensor rm = blk.bn1->rmean, rv = blk.bn1->rvar;
        y = batchnorm2d(y, blk.bn1->gamma, blk.bn1->beta, rm, rv, mode, opts_.bn_momentum,
                        opts_.bn_eps);
    }
    y = relu(y);
    y = conv2d(y, blk.c2.w, blk.c2.b, Padding::same, 1);
    if (blk.bn2) {
        Tensor rm = blk.bn2->rmean, rv = blk.bn2->rvar;
        y = batchnorm2d(y, blk.bn2->gamma, blk.bn2->beta, rm, rv, mode, opts_.bn_momentum,
                        opts_.bn_eps);
    }
    return relu(y);
}

std::map<LayerId, Tensor> ModelGraph::run_grid(const Tensor& input, const ForwardOptions& opts) {
    if (!input.defined()) throw ValueError("forward: undefined input");
    if (input.shape().rank() != 4)
        throw ShapeError("forward: input must be [N,1,H,W], got " + input.shape().str());
    if (input.dim(1) != 1)
        throw ShapeError("forward: input channel axis must be 1, got " + input.shape().str());
    if (input.dim(2) % 16 != 0 || input.dim(3) % 16 != 0)
        throw ShapeError("forward: spatial extents must be divisible by 16 for four pools, got " +
                         input.shape().str());

    const bool prop = is_propagating();
    const bool use_state = prop && opts.state_in && !opts.state_in->empty();
    if (use_state) {
        auto expected = state_shapes(input.dim(0), input.dim(2), input.dim(3));
        if (opts.state_in->maps.size() != expected.size())
            throw ValueError("forward: propagation state carries " +
                             std::to_string(opts.state_in->maps.size()) + " maps, model expects " +
                             std::to_string(expected.size()));
        for (const auto& [id, shape] : expected) {
            auto it = opts.state_in->maps.find(id);
            if (it == opts.state_in->maps.end())
                throw ValueError("forward: propagation state is missing layer " + id.str());
            if (it->second.shape() != shape)
                throw ShapeError("forward: stored map for " + id.str() + " has shape " +
                                 it->second.shape().str() + ", expected " + shape.str());
        }
    }
    bool needs_rng = false;
    for (const auto& [id, blk] : blocks_) needs_rng = needs_rng || blk.has_dropout;
    if (needs_rng && opts.mode == Mode::train && opts.rng == nullptr)
        throw ValueError("forward: train mode needs an rng stream for dropout");
    if (prop && opts.state_out) opts.state_out->maps.clear();

    std::map<LayerId, Tensor> out;
    Tensor x = input;
    for (int i = 1; i <= 5; ++i) {
        LayerId id{i, 1};
        const Block& blk = blocks_.at(id);
        Tensor cur = apply_block(blk.body, x, opts.mode);
        if (blk.has_dropout && opts.mode == Mode::train)
            cur = dropout(cur, opts_.dropout_rate, opts.mode, *opts.rng);
        out[id] = cur;
        if (opts.trace) opts.trace->shapes[block_name(id)] = cur.shape();
        if (i < 5) {
            x = maxpool2d(cur);
            if (opts.trace) opts.trace->shapes[block_name(id) + ".pool"] = x.shape();
        }
    }

    const bool nested = is_nested_family(arch_);
    for (int j = 2; j <= 5; ++j) {
        for (int i = 1; i + j <= 6; ++i) {
            LayerId id{i, j};
            auto bit = blocks_.find(id);
            if (bit == blocks_.end()) continue;
            const Block& blk = bit->second;
            Tensor up = conv_transpose2d(out.at({i + 1, j - 1}), blk.up->w, blk.up->b);
            std::vector<Tensor> cat;
            if (nested)
                for (int jj = 1; jj < j; ++jj) cat.push_back(out.at({i, jj}));
            else
                cat.push_back(out.at({i, 1}));
            cat.push_back(up);
            Tensor merged_in = concat_channels(std::span<const Tensor>(cat));
            if (opts.trace)
                opts.trace->shapes[block_name(id) + ".concat"] = merged_in.shape();
            Tensor cur = apply_block(blk.body, merged_in, opts.mode);
            if (blk.merge) {
                Tensor prev = use_state ? opts.state_in->maps.at(id) : cur;
                if (opts.trace) {
                    opts.trace->merge_prev[id] = prev;
                    opts.trace->merge_current[id] = cur;
                }
                Tensor m = apply_block(*blk.merge, concat_channels(prev, cur), opts.mode);
                if (opts.state_out)
                    opts.state_out->maps[id] = opts.detach_state ? m.detach() : m;
                cur = m;
            }
            out[id] = cur;
            if (opts.trace) opts.trace->shapes[block_name(id)] = cur.shape();
        }
    }
    return out;
}

Tensor ModelGraph::forward(const Tensor& input, const ForwardOptions& opts) {
    auto grid = run_grid(input, opts);
    Tensor y = sigmoid(conv2d(grid.at({1, 5}), head_.w, head_.b, Padding::same, 1));
    if (opts.trace) opts.trace->shapes["head"] = y.shape();
    return y;
}

std::vector<Tensor> ModelGraph::forward_heads(const Tensor& input, const ForwardOptions& opts) {
    if (!opts_.deep_supervision)
        throw ValueError("forward_heads: model was built without deep supervision");
    auto grid = run_grid(input, opts);
    std::vector<Tensor> heads;
    heads.push_back(sigmoid(conv2d(grid.at({1, 5}), head_.w, head_.b, Padding::same, 1)));
    for (int depth = 2; depth <= 4; ++depth) {
        const Conv& c = ds_heads_.at(depth);
        Tensor y = sigmoid(conv2d(grid.at({depth, 6 - depth}), c.w, c.b, Padding::same, 1));
        heads.push_back(nearest_upsample2d(y, 1 << (depth - 1)));
    }
    return heads;
}

ParamCounts ModelGraph::count_params() const {
    ParamCounts c;
    for (const auto& p : registry_) {
        const auto n = p.value.numel();
        c.total += n;
        if (p.trainable)
            c.trainable += n;
        else
            c.non_trainable += n;
    }
    return c;
}

Tensor ModelGraph::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return registry_[it->second].value;
}

bool ModelGraph::has_param(const std::string& name) const { return index_.count(name) > 0; }

std::vector<Tensor> ModelGraph::trainable_params() const {
    std::vector<Tensor> out;
    for (const auto& p : registry_)
        if (p.trainable) out.push_back(p.value);
    return out;
}

void ModelGraph::zero_grads() {
    for (auto& p : registry_) p.value.zero_grad();
}

std::map<LayerId, Shape> ModelGraph::state_shapes(std::int64_t n, std::int64_t h,
                                                  std::int64_t w) const {
    std::map<LayerId, Shape> out;
    for (const auto& id : propagated_)
        out[id] = Shape{n, widths_[id.row - 1], h >> (id.row - 1), w >> (id.row - 1)};
    return out;
}

LayerRole ModelGraph::role(LayerId id) const {
    if (id.col == 1) return LayerRole::encoder;
    if (std::find(propagated_.begin(), propagated_.end(), id) != propagated_.end())
        return LayerRole::propagation_merge;
    if (id.row + id.col == 6) return LayerRole::decoder;
    return LayerRole::nested;
}

std::pair<Tensor, PropagationState> forward_with_state(ModelGraph& model, const Tensor& slice,
                                                       const PropagationState& state, Mode mode,
                                                       RngStream* rng, bool detach_state,
                                                       ForwardTrace* trace) {
    if (!state.empty() && state.phase != mode)
        throw ValueError(std::string("forward_with_state: state phase is ") +
                         mode_name(state.phase) + " but caller runs " + mode_name(mode));
    ForwardOptions o;
    o.mode = mode;
    o.rng = rng;
    o.detach_state = detach_state;
    o.trace = trace;
    if (!model.is_propagating()) {
        Tensor y = model.forward(slice, o);
        return {y, state};
    }
    PropagationState next;
    next.stack_id = state.stack_id;
    next.phase = mode;
    next.last_index = state.last_index;
    o.state_in = &state;
    o.state_out = &next;
    Tensor y = model.forward(slice, o);
    return {y, next};
}

}  // namespace numsnet
