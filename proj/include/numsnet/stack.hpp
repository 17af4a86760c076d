#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "numsnet/rng.hpp"
#include "numsnet/tensor.hpp"

namespace numsnet {

// Volumetric stack ingestion, Eq.-style preprocessing, split strategies,
// paired augmentation and the synthetic desk-scale stack generator.
//
// On-disk layout: <dir>/images/NNNN.png (8/16-bit grayscale slices, indices
// contiguous ascending), <dir>/masks/NNNN.png (16-bit labels, optional per
// slice), <dir>/manifest (lines "<pix> <name>", '#' comments).

struct Plane {
    int h = 0, w = 0;
    std::vector<float> v;
    float at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

struct MaskPlane {
    int h = 0, w = 0;
    std::vector<std::uint16_t> v;
};

struct ImageStack {
    std::string id;
    int source_bits = 8;
    std::vector<Plane> slices;  // raw intensities as read
    int count() const { return static_cast<int>(slices.size()); }
};

struct LabelStack {
    std::vector<MaskPlane> masks;          // aligned to slices; empty plane if unannotated
    std::vector<std::uint8_t> annotated;   // per-slice flag
    std::vector<int> pix_values;           // class pixel values, e.g. 205..850
    std::vector<std::string> class_names;
};

std::pair<ImageStack, LabelStack> load_stack(const std::string& dir);
void write_stack(const ImageStack& images, const LabelStack& labels, const std::string& dir);

Plane resize_bilinear(const Plane& src, int th, int tw);
// Label-preserving: output values are a subset of input values.
MaskPlane resize_nearest(const MaskPlane& src, int th, int tw);

// Eq.-style min-max rescale to [0,1]; a constant slice maps to all zeros.
Plane normalize_minmax(const Plane& src);

// d binary indicator planes [1,d,H,W], plane i = [mask == pix[i]].
Tensor make_label_planes(const MaskPlane& mask, std::span<const int> pix);

// Strict threshold: out = [raw > tau].
Tensor threshold_prediction(const Tensor& raw, float tau = 0.5f);

enum class SplitStrategy { random_ordered, initial_seq, mid_rand, mid_seq };
const char* split_strategy_name(SplitStrategy s);
std::optional<SplitStrategy> split_strategy_from_name(std::string_view name);

struct SplitPlan {
    SplitStrategy strategy = SplitStrategy::random_ordered;
    std::uint64_t seed = 0;
    int n = 0;
    std::vector<int> train;  // strictly ascending
    std::vector<int> val;
    std::vector<int> test;

    void save(const std::string& path) const;
    static SplitPlan load(const std::string& path);
};

// |train| = floor(train_frac*N); validation = ceil(val_frac*(N-|train|))
// drawn from the non-train slices; the rest is test. Random draws redo
// (bounded) when the annotated fraction of the train set falls below
// min_annotated_frac, then fall back to a deterministic annotated-aware
// draw; sequential windows shift toward the best annotated window.
SplitPlan sample_split(int n, std::span<const std::uint8_t> annotated, SplitStrategy strategy,
                       double train_frac = 0.10, double val_frac = 0.01,
                       double min_annotated_frac = 0.5, std::uint64_t seed = 0);

struct AugmentationParams {
    double rotation_deg = 0.2;
    double shift_frac = 0.2;  // of the extent, both axes
    double shear_deg = 0.2;
    double zoom_lo = 0.8;
    double zoom_hi = 1.0;
};

// One slice ready for the trainer: normalized image plus binary label planes.
struct SliceSample {
    Plane image;
    std::vector<Plane> labels;  // d planes of exact 0/1
    bool annotated = true;
};

// One affine transform per call (rotation, shifts, shear, isotropic zoom in
// the stated ranges), applied identically to the image (bilinear, zero fill)
// and every label plane (nearest, zero fill).
SliceSample augment_pair(const SliceSample& in, const AugmentationParams& params, RngStream& rng);

std::vector<SliceSample> preprocess_stack(const ImageStack& images, const LabelStack& labels,
                                          int target_h, int target_w);

struct SynthConfig {
    int n = 60;
    int classes = 3;
    int height = 64;
    int width = 64;
    std::uint64_t seed = 0;
};

// Synthetic stack: one large organ-like region present in every slice plus
// smaller lesion-like regions whose cross sections grow toward the middle of
// the stack and vanish near the ends; masks are exact by construction and
// every slice is annotated.
std::pair<ImageStack, LabelStack> synth_stack(const SynthConfig& cfg);

}  // namespace numsnet
