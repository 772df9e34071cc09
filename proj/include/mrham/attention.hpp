#pragma once

#include "mrham/layers.hpp"
#include "mrham/tensor.hpp"

#include <string>
#include <string_view>

namespace mrham {

/// Residual channel attention parameters. W1 reduces C -> C/r, W2 expands back;
/// both are stored as 1x1 convolution weights and carry no bias.
template <typename T>
struct RcaConfig {
    int channels = 0;
    int reduction = 16;
    Tensor<T> w1;  // (C/r) x C x 1 x 1
    Tensor<T> w2;  // C x (C/r) x 1 x 1

    static RcaConfig random(int channels, int reduction, Rng& rng);
    static RcaConfig zeros(int channels, int reduction);
    int hidden() const { return channels / reduction; }
    void validate() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

/// Residual spatial attention parameters: one 7x7 filter over all C channels.
template <typename T>
struct RsaConfig {
    Tensor<T> kernel;  // 1 x C x 7 x 7
    Tensor<T> bias;    // 1

    static RsaConfig random(int channels, Rng& rng);
    static RsaConfig zeros(int channels);
    int channels() const { return kernel.dim(1); }
    void validate() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

/// CBAM baseline: shared MLP over pooled descriptors, then a 7x7 conv over the
/// channelwise [max; mean] map.
template <typename T>
struct CbamConfig {
    int channels = 0;
    int reduction = 16;
    Tensor<T> w1;              // (C/r) x C x 1 x 1
    Tensor<T> w2;              // C x (C/r) x 1 x 1
    Tensor<T> spatial_kernel;  // 1 x 2 x 7 x 7

    static CbamConfig random(int channels, int reduction, Rng& rng);
    static CbamConfig zeros(int channels, int reduction);
    void validate() const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

enum class ArrangementMode { rca_only, rsa_only, rca_then_rsa, rsa_then_rca, parallel };

std::string_view to_string(ArrangementMode mode);
ArrangementMode parse_arrangement(std::string_view name);

/// Largest divisor of `channels` not above `reduction`; lets narrow layers keep
/// an integral bottleneck.
int fit_reduction(int channels, int reduction);

/// sigma(W2 * leaky(W1 * GAP(M))), shape N x C x 1 x 1.
template <typename T>
Tensor<T> rca_gate(const Tensor<T>& m, const RcaConfig<T>& cfg);
/// sigma(conv7x7(M)), shape N x 1 x H x W.
template <typename T>
Tensor<T> rsa_gate(const Tensor<T>& m, const RsaConfig<T>& cfg);

/// gate * M + M with the channel gate.
template <typename T>
Tensor<T> rca_forward(const Tensor<T>& m, const RcaConfig<T>& cfg);
/// gate * M + M with the spatial gate.
template <typename T>
Tensor<T> rsa_forward(const Tensor<T>& m, const RsaConfig<T>& cfg);

/// Combines the two residual attentions. rca_then_rsa is the default MRHAM;
/// parallel evaluates both gates on M and returns M + Uc'*M + Us'*M.
template <typename T>
Tensor<T> mrham_forward(const Tensor<T>& m, const RcaConfig<T>& rca, const RsaConfig<T>& rsa,
                        ArrangementMode mode = ArrangementMode::rca_then_rsa);

template <typename T>
Tensor<T> cbam_forward(const Tensor<T>& m, const CbamConfig<T>& cfg);

}  // namespace mrham
