#include "numsnet/losses.hpp"

#include "numsnet/ops.hpp"

namespace numsnet {

template <class T>
TensorT<T> dice_loss(const TensorT<T>& pred, const TensorT<T>& target) {
    auto inter = sum_per_channel(mul(pred, target));
    auto psum = sum_per_channel(pred);
    auto gsum = sum_per_channel(target);
    auto num = add_scalar(mul_scalar(inter, T(2)), T(1));
    auto den = add_scalar(add(psum, gsum), T(1));
    return neg(mean_all(divide(num, den)));
}

template <class T>
TensorT<T> bce_loss(const TensorT<T>& pred, const TensorT<T>& target) {
    const T eps = T(1e-7);
    auto p = clamp(pred, eps, T(1) - eps);
    auto pos = mul(target, log_op(p));
    auto negt = mul(rsub_scalar(T(1), target), log_op(rsub_scalar(T(1), p)));
    return neg(mean_all(add(pos, negt)));
}

template <class T>
TensorT<T> bce_dice_loss(const TensorT<T>& pred, const TensorT<T>& target) {
    return add(mul_scalar(bce_loss(pred, target), T(0.5)), dice_loss(pred, target));
}

template TensorT<float> dice_loss<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> dice_loss<double>(const TensorT<double>&, const TensorT<double>&);
template TensorT<float> bce_loss<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> bce_loss<double>(const TensorT<double>&, const TensorT<double>&);
template TensorT<float> bce_dice_loss<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> bce_dice_loss<double>(const TensorT<double>&, const TensorT<double>&);

}  // namespace numsnet
