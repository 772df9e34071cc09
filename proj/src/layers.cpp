#include "mrham/layers.hpp"

#include <cmath>

namespace mrham {

template <typename T>
Tensor<T> init_conv_weight(int out, int in, int k, Rng& rng, double gain) {
    Tensor<T> w({out, in, k, k});
    const double std_dev = std::sqrt(gain / double(in * k * k));
    for (auto& v : w.values()) v = T(rng.normal() * std_dev);
    w.set_requires_grad();
    return w;
}

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, Activation act) {
    switch (act) {
        case Activation::mish: return mish(x);
        case Activation::leaky: return leaky_relu(x, T(0.1));
        case Activation::linear: return x;
    }
    return x;
}

template <typename T>
ConvBnAct<T>::ConvBnAct(int in, int out, int kernel, int stride_, Activation act_, Rng& rng, bool bn)
    : stride(stride_), pad(kernel / 2), act(act_), batch_norm(bn) {
    weight = init_conv_weight<T>(out, in, kernel, rng, act == Activation::linear ? 1.0 : 2.0);
    if (batch_norm) {
        gamma = Tensor<T>::ones({out});
        gamma.set_requires_grad();
        beta = Tensor<T>::zeros({out});
        beta.set_requires_grad();
        running_mean = Tensor<T>::zeros({out});
        running_var = Tensor<T>::ones({out});
    } else {
        bias = Tensor<T>::zeros({out});
        bias.set_requires_grad();
    }
}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x, const ForwardContext& ctx) {
    if (!batch_norm) return apply_activation(conv2d(x, weight, bias, stride, pad), act);
    Tensor<T> y = conv2d(x, weight, Tensor<T>{}, stride, pad);
    y = batch_norm2d(y, gamma, beta, running_mean, running_var, T(kBnEps), T(kBnMomentum), ctx.training);
    return apply_activation(y, act);
}

template <typename T>
void ConvBnAct<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", weight, ParamKind::weight});
    if (batch_norm) {
        out.push_back({prefix + ".bn.gamma", gamma, ParamKind::norm});
        out.push_back({prefix + ".bn.beta", beta, ParamKind::norm});
        out.push_back({prefix + ".bn.running_mean", running_mean, ParamKind::buffer});
        out.push_back({prefix + ".bn.running_var", running_var, ParamKind::buffer});
    } else {
        out.push_back({prefix + ".bias", bias, ParamKind::norm});
    }
}

template Tensor<float> init_conv_weight(int, int, int, Rng&, double);
template Tensor<double> init_conv_weight(int, int, int, Rng&, double);
template Tensor<float> apply_activation(const Tensor<float>&, Activation);
template Tensor<double> apply_activation(const Tensor<double>&, Activation);
template class ConvBnAct<float>;
template class ConvBnAct<double>;

}  // namespace mrham
