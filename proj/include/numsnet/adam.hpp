#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "numsnet/tensor.hpp"

namespace numsnet {

// Bias-corrected Adam: m_t = b1*m + (1-b1)*g, v_t = b2*v + (1-b2)*g^2,
// p -= lr * (m_t/(1-b1^t)) / (sqrt(v_t/(1-b2^t)) + eps).
template <class T>
struct AdamState {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-7);
    std::int64_t t = 0;
    std::vector<std::vector<T>> m;  // lazily sized to the parameter list
    std::vector<std::vector<T>> v;
};

// One optimizer step over `params` with matching `grads`. Mutates parameter
// data in place; t increments by exactly 1.
template <class T>
void adam_step(std::span<TensorT<T>> params, std::span<const std::span<const T>> grads,
               AdamState<T>& state);

// Convenience: uses each parameter's accumulated .grad().
template <class T>
void adam_step(std::span<TensorT<T>> params, AdamState<T>& state);

}  // namespace numsnet
