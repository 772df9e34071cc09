#include "mrham/attention.hpp"

#include <stdexcept>

namespace mrham {

namespace {

template <typename T>
Tensor<T> small_random(Shape shape, double std_dev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = T(rng.normal() * std_dev);
    t.set_requires_grad();
    return t;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    t.set_requires_grad();
    return t;
}

void check_reduction(int channels, int reduction, const char* what) {
    if (channels <= 0 || reduction <= 0 || channels % reduction != 0)
        throw std::invalid_argument(std::string(what) + ": channels " + std::to_string(channels) +
                                    " not divisible by reduction " + std::to_string(reduction));
}

template <typename T>
void check_channels(const Tensor<T>& m, int channels, const char* what) {
    if (m.rank() != 4 || m.dim(1) != channels)
        throw std::invalid_argument(std::string(what) + ": input " + shape_str(m.shape()) + " does not have " +
                                    std::to_string(channels) + " channels");
}

// Shared two-layer bottleneck on a N x C x 1 x 1 descriptor.
template <typename T>
Tensor<T> bottleneck(const Tensor<T>& desc, const Tensor<T>& w1, const Tensor<T>& w2) {
    return conv2d(leaky_relu(conv2d(desc, w1), T(0.1)), w2);
}

}  // namespace

int fit_reduction(int channels, int reduction) {
    if (channels <= 0 || reduction <= 0) throw std::invalid_argument("fit_reduction: positive arguments required");
    int r = std::min(channels, reduction);
    while (channels % r != 0) --r;
    return r;
}

std::string_view to_string(ArrangementMode mode) {
    switch (mode) {
        case ArrangementMode::rca_only: return "rca";
        case ArrangementMode::rsa_only: return "rsa";
        case ArrangementMode::rca_then_rsa: return "rca+rsa";
        case ArrangementMode::rsa_then_rca: return "rsa+rca";
        case ArrangementMode::parallel: return "parallel";
    }
    return "?";
}

ArrangementMode parse_arrangement(std::string_view name) {
    for (auto m : {ArrangementMode::rca_only, ArrangementMode::rsa_only, ArrangementMode::rca_then_rsa,
                   ArrangementMode::rsa_then_rca, ArrangementMode::parallel})
        if (to_string(m) == name) return m;
    throw std::invalid_argument("unknown arrangement mode '" + std::string(name) + "'");
}

template <typename T>
RcaConfig<T> RcaConfig<T>::random(int channels, int reduction, Rng& rng) {
    check_reduction(channels, reduction, "RcaConfig");
    const int hidden = channels / reduction;
    RcaConfig cfg{channels, reduction, {}, {}};
    cfg.w1 = small_random<T>({hidden, channels, 1, 1}, std::sqrt(2.0 / channels), rng);
    cfg.w2 = small_random<T>({channels, hidden, 1, 1}, std::sqrt(1.0 / hidden), rng);
    return cfg;
}

template <typename T>
RcaConfig<T> RcaConfig<T>::zeros(int channels, int reduction) {
    check_reduction(channels, reduction, "RcaConfig");
    const int hidden = channels / reduction;
    return RcaConfig{channels, reduction, zero_param<T>({hidden, channels, 1, 1}),
                     zero_param<T>({channels, hidden, 1, 1})};
}

template <typename T>
void RcaConfig<T>::validate() const {
    check_reduction(channels, reduction, "RcaConfig");
    const Shape s1{hidden(), channels, 1, 1}, s2{channels, hidden(), 1, 1};
    if (!w1.defined() || !w2.defined() || w1.shape() != s1 || w2.shape() != s2)
        throw std::invalid_argument("RcaConfig: W1/W2 must be " + shape_str(s1) + " and " + shape_str(s2));
}

template <typename T>
void RcaConfig<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".w1", w1, ParamKind::weight});
    out.push_back({prefix + ".w2", w2, ParamKind::weight});
}

template <typename T>
RsaConfig<T> RsaConfig<T>::random(int channels, Rng& rng) {
    RsaConfig cfg;
    cfg.kernel = small_random<T>({1, channels, 7, 7}, std::sqrt(1.0 / (49.0 * channels)), rng);
    cfg.bias = zero_param<T>({1});
    return cfg;
}

template <typename T>
RsaConfig<T> RsaConfig<T>::zeros(int channels) {
    return RsaConfig{zero_param<T>({1, channels, 7, 7}), zero_param<T>({1})};
}

template <typename T>
void RsaConfig<T>::validate() const {
    if (!kernel.defined() || kernel.rank() != 4 || kernel.dim(0) != 1 || kernel.dim(2) != 7 || kernel.dim(3) != 7)
        throw std::invalid_argument("RsaConfig: kernel must be 1 x C x 7 x 7");
    if (!bias.defined() || bias.numel() != 1) throw std::invalid_argument("RsaConfig: bias must be a scalar");
}

template <typename T>
void RsaConfig<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".kernel", kernel, ParamKind::weight});
    out.push_back({prefix + ".bias", bias, ParamKind::norm});
}

template <typename T>
CbamConfig<T> CbamConfig<T>::random(int channels, int reduction, Rng& rng) {
    check_reduction(channels, reduction, "CbamConfig");
    const int hidden = channels / reduction;
    CbamConfig cfg{channels, reduction, {}, {}, {}};
    cfg.w1 = small_random<T>({hidden, channels, 1, 1}, std::sqrt(2.0 / channels), rng);
    cfg.w2 = small_random<T>({channels, hidden, 1, 1}, std::sqrt(1.0 / hidden), rng);
    cfg.spatial_kernel = small_random<T>({1, 2, 7, 7}, std::sqrt(1.0 / 98.0), rng);
    return cfg;
}

template <typename T>
CbamConfig<T> CbamConfig<T>::zeros(int channels, int reduction) {
    check_reduction(channels, reduction, "CbamConfig");
    const int hidden = channels / reduction;
    return CbamConfig{channels, reduction, zero_param<T>({hidden, channels, 1, 1}),
                      zero_param<T>({channels, hidden, 1, 1}), zero_param<T>({1, 2, 7, 7})};
}

template <typename T>
void CbamConfig<T>::validate() const {
    check_reduction(channels, reduction, "CbamConfig");
    const int hidden = channels / reduction;
    if (w1.shape() != Shape{hidden, channels, 1, 1} || w2.shape() != Shape{channels, hidden, 1, 1} ||
        spatial_kernel.shape() != Shape{1, 2, 7, 7})
        throw std::invalid_argument("CbamConfig: parameter shapes inconsistent with " + std::to_string(channels) +
                                    " channels");
}

template <typename T>
void CbamConfig<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".w1", w1, ParamKind::weight});
    out.push_back({prefix + ".w2", w2, ParamKind::weight});
    out.push_back({prefix + ".spatial_kernel", spatial_kernel, ParamKind::weight});
}

template <typename T>
Tensor<T> rca_gate(const Tensor<T>& m, const RcaConfig<T>& cfg) {
    cfg.validate();
    check_channels(m, cfg.channels, "rca_forward");
    return sigmoid(bottleneck(global_avg_pool(m), cfg.w1, cfg.w2));
}

template <typename T>
Tensor<T> rsa_gate(const Tensor<T>& m, const RsaConfig<T>& cfg) {
    cfg.validate();
    check_channels(m, cfg.channels(), "rsa_forward");
    return sigmoid(conv2d(m, cfg.kernel, cfg.bias, 1, 3));
}

template <typename T>
Tensor<T> rca_forward(const Tensor<T>& m, const RcaConfig<T>& cfg) {
    return add(mul(m, rca_gate(m, cfg)), m);
}

template <typename T>
Tensor<T> rsa_forward(const Tensor<T>& m, const RsaConfig<T>& cfg) {
    return add(mul(m, rsa_gate(m, cfg)), m);
}

template <typename T>
Tensor<T> mrham_forward(const Tensor<T>& m, const RcaConfig<T>& rca, const RsaConfig<T>& rsa, ArrangementMode mode) {
    if (rca.channels != rsa.channels())
        throw std::invalid_argument("mrham_forward: RCA has " + std::to_string(rca.channels) + " channels, RSA has " +
                                    std::to_string(rsa.channels()));
    switch (mode) {
        case ArrangementMode::rca_only: return rca_forward(m, rca);
        case ArrangementMode::rsa_only: return rsa_forward(m, rsa);
        case ArrangementMode::rca_then_rsa: return rsa_forward(rca_forward(m, rca), rsa);
        case ArrangementMode::rsa_then_rca: return rca_forward(rsa_forward(m, rsa), rca);
        case ArrangementMode::parallel:
            return add(add(m, mul(m, rca_gate(m, rca))), mul(m, rsa_gate(m, rsa)));
    }
    throw std::invalid_argument("mrham_forward: bad mode");
}

template <typename T>
Tensor<T> cbam_forward(const Tensor<T>& m, const CbamConfig<T>& cfg) {
    cfg.validate();
    check_channels(m, cfg.channels, "cbam_forward");
    Tensor<T> channel_logits =
        add(bottleneck(global_avg_pool(m), cfg.w1, cfg.w2), bottleneck(global_max_pool(m), cfg.w1, cfg.w2));
    Tensor<T> refined = mul(m, sigmoid(channel_logits));
    Tensor<T> pooled = concat<T>({channel_max(refined), channel_mean(refined)}, 1);
    return mul(refined, sigmoid(conv2d(pooled, cfg.spatial_kernel, Tensor<T>{}, 1, 3)));
}

#define MRHAM_INSTANTIATE_ATTENTION(T)                                                                         \
    template struct RcaConfig<T>;                                                                              \
    template struct RsaConfig<T>;                                                                              \
    template struct CbamConfig<T>;                                                                             \
    template Tensor<T> rca_gate(const Tensor<T>&, const RcaConfig<T>&);                                        \
    template Tensor<T> rsa_gate(const Tensor<T>&, const RsaConfig<T>&);                                        \
    template Tensor<T> rca_forward(const Tensor<T>&, const RcaConfig<T>&);                                     \
    template Tensor<T> rsa_forward(const Tensor<T>&, const RsaConfig<T>&);                                     \
    template Tensor<T> mrham_forward(const Tensor<T>&, const RcaConfig<T>&, const RsaConfig<T>&, ArrangementMode); \
    template Tensor<T> cbam_forward(const Tensor<T>&, const CbamConfig<T>&);

MRHAM_INSTANTIATE_ATTENTION(float)
MRHAM_INSTANTIATE_ATTENTION(double)

}  // namespace mrham
