#include "numsnet/adam.hpp"

#include <cmath>

namespace numsnet {

template <class T>
void adam_step(std::span<TensorT<T>> params, std::span<const std::span<const T>> grads,
               AdamState<T>& state) {
    if (params.size() != grads.size())
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    if (state.t < 0) throw ValueError("adam_step: negative step counter");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].data().size(), T(0));
            state.v[i].assign(params[i].data().size(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state was initialized for " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));

    state.t += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].mutable_data();
        const auto g = grads[i];
        if (g.size() != p.size())
            throw ShapeError("adam_step: gradient size " + std::to_string(g.size()) +
                             " does not match parameter " + std::to_string(i) + " size " +
                             std::to_string(p.size()));
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size())
            throw ShapeError("adam_step: moment buffer size " + std::to_string(m.size()) +
                             " does not match parameter " + std::to_string(i));
        for (std::size_t e = 0; e < p.size(); ++e) {
            m[e] = state.beta1 * m[e] + (T(1) - state.beta1) * g[e];
            v[e] = state.beta2 * v[e] + (T(1) - state.beta2) * g[e] * g[e];
            const T mhat = m[e] / bc1;
            const T vhat = v[e] / bc2;
            p[e] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

template <class T>
void adam_step(std::span<TensorT<T>> params, AdamState<T>& state) {
    std::vector<std::span<const T>> grads;
    grads.reserve(params.size());
    std::vector<std::vector<T>> zero_storage;
    for (auto& p : params) {
        if (p.grad().empty()) {
            zero_storage.emplace_back(p.data().size(), T(0));
            grads.push_back(zero_storage.back());
        } else {
            grads.push_back(p.grad());
        }
    }
    // zero_storage may reallocate; rebuild spans after all pushes
    grads.clear();
    std::size_t zi = 0;
    for (auto& p : params) {
        if (p.grad().empty())
            grads.push_back(zero_storage[zi++]);
        else
            grads.push_back(p.grad());
    }
    adam_step(params, std::span<const std::span<const T>>(grads), state);
}

template void adam_step<float>(std::span<TensorT<float>>,
                               std::span<const std::span<const float>>, AdamState<float>&);
template void adam_step<double>(std::span<TensorT<double>>,
                                std::span<const std::span<const double>>, AdamState<double>&);
template void adam_step<float>(std::span<TensorT<float>>, AdamState<float>&);
template void adam_step<double>(std::span<TensorT<double>>, AdamState<double>&);

}  // namespace numsnet
