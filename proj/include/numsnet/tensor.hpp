#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "numsnet/common.hpp"

namespace numsnet {

enum class Dtype { f32, f64 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
    return Dtype::f32;
}
template <>
constexpr Dtype dtype_of<double>() {
    return Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "float32" : "float64"; }

// Dense shape. Image tensors use [batch, channel, height, width] order.
struct Shape {
    std::vector<std::int64_t> dims;

    Shape() = default;
    Shape(std::initializer_list<std::int64_t> d) : dims(d) { validate(); }
    explicit Shape(std::vector<std::int64_t> d) : dims(std::move(d)) { validate(); }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
    std::size_t rank() const { return dims.size(); }
    std::int64_t operator[](std::size_t i) const { return dims[i]; }
    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return dims != o.dims; }

    std::string str() const;

private:
    void validate() const {
        for (auto d : dims)
            if (d < 1) throw ShapeError("shape extent must be >= 1, got " + str());
    }
};

template <class T>
struct TensorImpl;

// One reverse-mode tape node. Inputs are held by shared_ptr so the graph
// stays alive while any downstream tensor does; saved context (pool argmax,
// batch-norm statistics, dropout masks) lives in the apply closure.
template <class T>
struct GradFn {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Accumulates d(loss)/d(input) into each input's grad buffer, given
    // d(loss)/d(output) of this node.
    std::function<void(const std::vector<T>& grad_out)> apply;
};

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until first accumulation
    std::shared_ptr<GradFn<T>> grad_fn;

    bool needs_grad() const { return requires_grad || grad_fn != nullptr; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

// Graph recording can be switched off (inference, finite-difference probes).
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Shared-ownership handle to a dense n-d array with optional gradient
// tracking. Tensors are immutable once they participate in a graph; the
// optimizer mutates leaf parameters between steps via mutable_data().
template <class T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape);
    static TensorT full(Shape shape, T value);
    static TensorT from_data(Shape shape, std::vector<T> data);
    static TensorT scalar(T value) { return from_data(Shape{1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }
    std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
    Dtype dtype() const { return dtype_of<T>(); }

    std::span<const T> data() const { return impl_->data; }
    std::span<T> mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }
    bool has_grad_fn() const { return impl_->grad_fn != nullptr; }

    // Gradient of the last backward() pass(es); empty span if never touched.
    std::span<const T> grad() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // Shares the data buffer, drops graph membership and requires_grad.
    TensorT detach() const;
    // Deep copy of data only.
    TensorT clone() const;
    template <class U>
    TensorT<U> cast() const;

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor, shape " + shape().str());
        return impl_->data[0];
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }
    static TensorT wrap(std::shared_ptr<TensorImpl<T>> impl) {
        TensorT t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// Reverse-mode sweep from a single-element loss. Every tensor with
// requires_grad reachable from `loss` accumulates its gradient; repeated
// calls without zero_grad() keep accumulating into leaves.
template <class T>
void backward(const TensorT<T>& loss);

template <class T>
template <class U>
TensorT<U> TensorT<T>::cast() const {
    std::vector<U> out(impl_->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->data[i]);
    return TensorT<U>::from_data(impl_->shape, std::move(out));
}

}  // namespace numsnet
