#pragma once

#include "numsnet/tensor.hpp"

namespace numsnet {

// Differentiable segmentation losses over pre-threshold predictions in (0,1).
// pred and target are [N,d,H,W] with matching shapes; target carries no
// gradient. All three return a single-element tensor.

// Soft Dice with +1 smoothing, computed per class over batch and pixels,
// averaged over classes, negated: perfect prediction gives -1, as does the
// jointly-empty case.
template <class T>
TensorT<T> dice_loss(const TensorT<T>& pred, const TensorT<T>& target);

// Mean binary cross-entropy over all elements; predictions clamped to
// [1e-7, 1-1e-7] before the logs.
template <class T>
TensorT<T> bce_loss(const TensorT<T>& pred, const TensorT<T>& target);

// bce_loss/2 + dice_loss.
template <class T>
TensorT<T> bce_dice_loss(const TensorT<T>& pred, const TensorT<T>& target);

}  // namespace numsnet
