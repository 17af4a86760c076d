#pragma once

#include <array>
#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "numsnet/ops.hpp"
#include "numsnet/rng.hpp"
#include "numsnet/tensor.hpp"

namespace numsnet {

enum class Arch { unet, wunet, unetpp, numsnet, numsall };

const char* arch_name(Arch a);
std::optional<Arch> arch_from_name(std::string_view name);
std::array<std::int64_t, 5> default_widths(Arch a);

// Grid coordinate X(i,j): i is depth 1..5, j the column. j=1 is the
// encoder column; higher j are nested/decoder blocks.
struct LayerId {
    int row = 0;
    int col = 0;
    auto operator<=>(const LayerId&) const = default;
    std::string str() const {
        return "X(" + std::to_string(row) + "," + std::to_string(col) + ")";
    }
};

enum class LayerRole { encoder, nested, decoder, head, propagation_merge };

struct ParamCounts {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    std::int64_t non_trainable = 0;
};

struct BuildOptions {
    int num_classes = 3;
    std::optional<std::array<std::int64_t, 5>> widths;  // default per arch
    bool batchnorm = true;
    bool deep_supervision = false;
    float bn_momentum = 0.99f;
    float bn_eps = 1e-3f;
    float dropout_rate = 0.5f;
    std::uint64_t seed = 0;
};

// Per-stack carry of propagated feature maps: each key is a propagated layer,
// the value the merged output of the previous ordered scan.
struct PropagationState {
    std::string stack_id;
    int last_index = -1;
    Mode phase = Mode::train;
    std::map<LayerId, Tensor> maps;

    bool empty() const { return maps.empty(); }
    void clear() {
        maps.clear();
        last_index = -1;
    }
};

// Optional instrumentation filled during forward().
struct ForwardTrace {
    std::map<std::string, Shape> shapes;
    std::map<LayerId, Tensor> merge_prev;     // previous map each merge consumed
    std::map<LayerId, Tensor> merge_current;  // pre-merge block output
};

struct ForwardOptions {
    Mode mode = Mode::infer;
    RngStream* rng = nullptr;  // required in train mode when the model has dropout
    const PropagationState* state_in = nullptr;
    PropagationState* state_out = nullptr;
    bool detach_state = true;
    ForwardTrace* trace = nullptr;
};

// One of the five architectures as a named layer graph over the tensor
// engine: ordered parameter registry, grid of conv blocks, optional
// propagation merges and deep-supervision heads.
class ModelGraph {
public:
    static ModelGraph build(Arch arch, const BuildOptions& opts = {});
    static ModelGraph build_unet(const BuildOptions& opts = {});
    static ModelGraph build_wunet(const BuildOptions& opts = {});
    static ModelGraph build_unetpp(const BuildOptions& opts = {});
    static ModelGraph build_numsnet(const BuildOptions& opts = {});
    static ModelGraph build_numsall(const BuildOptions& opts = {});

    Arch arch() const { return arch_; }
    const BuildOptions& options() const { return opts_; }
    int num_classes() const { return opts_.num_classes; }
    const std::array<std::int64_t, 5>& widths() const { return widths_; }
    bool deep_supervision() const { return opts_.deep_supervision; }
    bool is_propagating() const { return !propagated_.empty(); }
    const std::vector<LayerId>& propagated_layers() const { return propagated_; }

    // Input must be [N,1,H,W] with H,W divisible by 16. Output [N,d,H,W] in (0,1).
    Tensor forward(const Tensor& input, const ForwardOptions& opts = {});
    // Deep-supervision outputs for depths 1..4, each [N,d,H,W]; head 1 is the
    // standard output path. Requires deep_supervision.
    std::vector<Tensor> forward_heads(const Tensor& input, const ForwardOptions& opts = {});

    ParamCounts count_params() const;

    struct ParamEntry {
        std::string name;
        Tensor value;
        bool trainable = true;
    };
    const std::vector<ParamEntry>& params() const { return registry_; }
    Tensor param(const std::string& name) const;
    bool has_param(const std::string& name) const;
    std::vector<Tensor> trainable_params() const;
    void zero_grads();

    // Expected stored-map shape per propagated layer for an input of the
    // given extent.
    std::map<LayerId, Shape> state_shapes(std::int64_t n, std::int64_t h, std::int64_t w) const;

    LayerRole role(LayerId id) const;

private:
    struct Conv {
        Tensor w, b;
    };
    struct Bn {
        Tensor gamma, beta, rmean, rvar;
    };
    struct ConvBlock {
        Conv c1, c2;
        std::optional<Bn> bn1, bn2;
    };
    struct Block {
        ConvBlock body;
        std::optional<Conv> up;         // transposed conv feeding this block
        std::optional<ConvBlock> merge; // propagation merge unit
        bool has_dropout = false;
    };

    Arch arch_ = Arch::unet;
    BuildOptions opts_;
    std::array<std::int64_t, 5> widths_{};
    std::vector<LayerId> propagated_;
    std::map<LayerId, Block> blocks_;
    Conv head_;
    std::map<int, Conv> ds_heads_;  // depth -> 1x1 head (depths 2..4)
    std::vector<ParamEntry> registry_;
    std::map<std::string, std::size_t> index_;

    friend class CheckpointCodec;

    Tensor register_param(const std::string& name, Shape shape, bool trainable);
    Conv make_conv(const std::string& prefix, std::int64_t cin, std::int64_t cout, std::int64_t k,
                   RngStream& rng);
    Bn make_bn(const std::string& prefix, std::int64_t c);
    ConvBlock make_block(const std::string& prefix, std::int64_t cin, std::int64_t cout, bool bn,
                         RngStream& rng);
    Tensor apply_block(const ConvBlock& blk, const Tensor& x, Mode mode) ;
    std::map<LayerId, Tensor> run_grid(const Tensor& input, const ForwardOptions& opts);
    void init_head_params(RngStream& rng);
};

// Spec-level wrapper: runs one scan through the model, merging the previous
// scan's stored maps (or the layer's own output when the state is empty) and
// returning the refreshed state. Non-propagating architectures ignore the
// state and return it unchanged.
std::pair<Tensor, PropagationState> forward_with_state(ModelGraph& model, const Tensor& slice,
                                                       const PropagationState& state,
                                                       Mode mode = Mode::infer,
                                                       RngStream* rng = nullptr,
                                                       bool detach_state = true,
                                                       ForwardTrace* trace = nullptr);

}  // namespace numsnet
