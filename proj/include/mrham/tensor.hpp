#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mrham {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
using Array = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
struct Node {
    Shape shape;
    Array<T> value;
    Array<T> grad;  // empty until the first adjoint arrives
    bool requires_grad = false;
    std::function<void(Node&)> backward;
    std::vector<std::shared_ptr<Node>> parents;

    void ensure_grad() {
        if (grad.size() != value.size()) grad = Array<T>::Zero(value.size());
    }
};

/// Dense N-dimensional array with an optional gradient. Copies share storage.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, Array<T> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor from(Shape shape, std::initializer_list<T> values);
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->value.size(); }

    const Array<T>& values() const { return node_->value; }
    Array<T>& values() { return node_->value; }
    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    T item() const;
    T operator[](std::int64_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    const Array<T>& grad() const { return node_->grad; }
    Array<T>& grad() { return node_->grad; }
    void zero_grad();

    /// Fresh tensor with copied values and no graph history.
    Tensor detach() const;

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape(), values().template cast<U>().eval());
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations executed on the current thread.
template <typename T>
class Tape {
public:
    void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear();
    /// Runs every recorded adjoint once, newest first, then clears.
    void replay();

    static Tape& current();

private:
    std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Creates the output node of an operation. The node is recorded on the tape
/// when grad mode is on and any input requires a gradient; otherwise the
/// backward function is dropped.
template <typename T>
Tensor<T> make_result(Shape shape, Array<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward);

/// Seeds d(loss)/d(loss) = 1 and replays the tape.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace mrham
