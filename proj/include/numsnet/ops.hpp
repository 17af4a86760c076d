#pragma once

#include <span>
#include <vector>

#include "numsnet/common.hpp"
#include "numsnet/rng.hpp"
#include "numsnet/tensor.hpp"

// The operation set the Unet-family architectures need, with reverse-mode
// backward rules. Image tensors are [N,C,H,W]. All ops are pure: inputs are
// never written, outputs are fresh tensors (identity cases may return the
// input handle). Reductions run in a fixed input-independent order, so equal
// inputs give bitwise-equal outputs and gradients.

namespace numsnet {

// --- convolution / pooling -------------------------------------------------

// Cross-correlation (no kernel flip). weight [Cout,Cin,kh,kw], bias [Cout].
// padding=same keeps H,W when stride=1 and requires odd kernels.
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  Padding padding, int stride = 1);

// Transposed convolution, kernel 2x2, stride 2 (the only configuration the
// architectures use). weight [Cin,Cout,2,2], bias [Cout]; output doubles H,W.
// Adjoint of conv2d(x, w, stride=2, valid) in the inner-product sense.
template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& input, const TensorT<T>& weight,
                            const TensorT<T>& bias);

// 2x2 window, stride 2. H and W must be even. Backward routes the gradient
// to the first-occurring maximum of each window (row-major order).
template <class T>
TensorT<T> maxpool2d(const TensorT<T>& input);

// --- structure --------------------------------------------------------------

template <class T>
TensorT<T> concat_channels(std::span<const TensorT<T>> parts);
template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

// Channels [c0, c1) of x; inverse of concat_channels.
template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, std::int64_t c0, std::int64_t c1);

// Integer-factor nearest-neighbor upsampling (deep-supervision heads).
template <class T>
TensorT<T> nearest_upsample2d(const TensorT<T>& x, int factor);

// --- activations ------------------------------------------------------------

template <class T>
TensorT<T> relu(const TensorT<T>& x);
template <class T>
TensorT<T> sigmoid(const TensorT<T>& x);

// --- normalization / regularization ------------------------------------------

// Train mode normalizes with batch statistics (biased variance) and updates
// the running buffers in place: r = momentum*r + (1-momentum)*batch. Infer
// mode uses the running buffers. gamma/beta are trainable, the running
// buffers are not. eps must be > 0.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       TensorT<T>& running_mean, TensorT<T>& running_var, Mode mode, T momentum,
                       T eps);

// Inverted dropout: train mode zeroes with probability `rate` and rescales
// survivors by 1/(1-rate); infer mode is the identity. rate in [0,1).
template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Mode mode, RngStream& rng);

// --- elementwise ------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> divide(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> neg(const TensorT<T>& x);
template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T s);
template <class T>
TensorT<T> mul_scalar(const TensorT<T>& x, T s);
// s - x
template <class T>
TensorT<T> rsub_scalar(T s, const TensorT<T>& x);
template <class T>
TensorT<T> log_op(const TensorT<T>& x);
// Gradient passes through strictly inside (lo, hi), zero where clamped.
template <class T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi);

// --- reductions --------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x);
template <class T>
TensorT<T> mean_all(const TensorT<T>& x);
// [N,C,H,W] -> [C], summing batch and spatial axes.
template <class T>
TensorT<T> sum_per_channel(const TensorT<T>& x);

}  // namespace numsnet
