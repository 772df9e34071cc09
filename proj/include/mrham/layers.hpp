#pragma once

#include "mrham/ops.hpp"
#include "mrham/rng.hpp"
#include "mrham/tensor.hpp"

#include <string>
#include <vector>

namespace mrham {

/// How the optimizer and checkpoints treat a tensor.
enum class ParamKind {
    weight,  // trained, weight-decayed
    norm,    // trained, exempt from decay (batch-norm scale/shift)
    buffer,  // not trained (running statistics)
};

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T> tensor;
    ParamKind kind;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

enum class Activation { linear, mish, leaky };

/// Per-call flags for a forward pass.
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;
};

/// He-normal initialised conv weight of shape out x in x k x k.
template <typename T>
Tensor<T> init_conv_weight(int out, int in, int k, Rng& rng, double gain = 2.0);

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, Activation act);

/// Convolution followed by batch norm and an activation (or conv + bias when
/// batch norm is disabled, as in prediction heads).
template <typename T>
class ConvBnAct {
public:
    ConvBnAct() = default;
    ConvBnAct(int in, int out, int kernel, int stride, Activation act, Rng& rng, bool batch_norm = true);

    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return weight.dim(1); }
    int out_channels() const { return weight.dim(0); }

    Tensor<T> weight, bias, gamma, beta, running_mean, running_var;
    int stride = 1;
    int pad = 0;
    Activation act = Activation::linear;
    bool batch_norm = true;

    static constexpr double kBnEps = 1e-5;
    static constexpr double kBnMomentum = 0.03;
};

extern template class ConvBnAct<float>;
extern template class ConvBnAct<double>;

}  // namespace mrham
