#include "mrham/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mrham {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (int d : shape)
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
}

thread_local bool g_grad_enabled = true;

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    node_->value = Array<T>::Constant(shape_numel(shape), fill);
    node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, Array<T> values) : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    node_->value = std::move(values);
    node_->shape = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::initializer_list<T> values) {
    Array<T> v(static_cast<Eigen::Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return Tensor(std::move(shape), std::move(v));
}

template <typename T>
int Tensor<T>::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw std::out_of_range("axis out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (node_) node_->grad = Array<T>::Zero(node_->value.size());
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(shape(), values());
}

template <typename T>
void Tape<T>::clear() {
    for (auto& n : nodes_) {
        n->backward = nullptr;
        n->parents.clear();
    }
    nodes_.clear();
}

template <typename T>
void Tape<T>::replay() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (n.backward && n.grad.size() == n.value.size()) n.backward(n);
    }
    clear();
}

template <typename T>
Tape<T>& Tape<T>::current() {
    thread_local Tape<T> tape;
    return tape;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> make_result(Shape shape, Array<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    Tensor<T> out(std::move(shape), std::move(value));
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.backward = std::move(backward);
    node.parents.reserve(inputs.size());
    for (auto& in : inputs) node.parents.push_back(in.node());
    Tape<T>::current().record(out.node());
    return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    auto& tape = Tape<T>::current();
    if (!loss.requires_grad() || tape.empty())
        throw std::invalid_argument("backward() called with an empty tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    tape.replay();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_result(Shape, Array<float>, std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, Array<double>, std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace mrham
