#include "numsnet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace numsnet {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(prev_); }

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->data.assign(static_cast<std::size_t>(shape.numel()), T(0));
    impl->shape = std::move(shape);
    return wrap(std::move(impl));
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->data.assign(static_cast<std::size_t>(shape.numel()), value);
    impl->shape = std::move(shape);
    return wrap(std::move(impl));
}

template <class T>
TensorT<T> TensorT<T>::from_data(Shape shape, std::vector<T> data) {
    if (static_cast<std::int64_t>(data.size()) != shape.numel())
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape.str());
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return wrap(std::move(impl));
}

template <class T>
TensorT<T> TensorT<T>::detach() const {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;  // value copy; detached tensors own their data
    return wrap(std::move(impl));
}

template <class T>
TensorT<T> TensorT<T>::clone() const {
    return detach();
}

template <class T>
void backward(const TensorT<T>& loss) {
    if (!loss.defined()) throw ValueError("backward: undefined tensor");
    if (loss.numel() != 1)
        throw ShapeError("backward requires a single-element loss, shape " + loss.shape().str());

    auto root = loss.impl();
    if (!root->needs_grad()) return;

    // Depth-first postorder gives a topological order of the DAG.
    std::vector<TensorImpl<T>*> topo;
    std::unordered_set<TensorImpl<T>*> seen;
    struct Frame {
        TensorImpl<T>* node;
        std::size_t next_input;
    };
    std::vector<Frame> stack;
    if (seen.insert(root.get()).second) stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.node->grad_fn && f.next_input < f.node->grad_fn->inputs.size()) {
            TensorImpl<T>* in = f.node->grad_fn->inputs[f.next_input++].get();
            if (in->needs_grad() && seen.insert(in).second) stack.push_back({in, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    // Intermediates restart from zero each sweep; leaves accumulate across
    // sweeps until zero_grad().
    for (auto* node : topo) {
        if (node->grad_fn) {
            node->grad.assign(node->data.size(), T(0));
        } else {
            node->ensure_grad();
        }
    }

    if (!root->grad_fn) {
        root->grad[0] += T(1);  // loss is itself a leaf
        return;
    }
    root->grad[0] = T(1);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl<T>* node = *it;
        if (node->grad_fn) node->grad_fn->apply(node->grad);
    }
}

template class TensorT<float>;
template class TensorT<double>;
template void backward<float>(const TensorT<float>&);
template void backward<double>(const TensorT<double>&);

}  // namespace numsnet
