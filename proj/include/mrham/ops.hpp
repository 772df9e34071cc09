#pragma once

#include "mrham/rng.hpp"
#include "mrham/tensor.hpp"

#include <vector>

namespace mrham {

// Differentiable primitives. Image tensors are N x C x H x W, row-major.
// Every function records an adjoint on the thread's tape when an input requires
// a gradient.

/// 2-D convolution; weight is out x in x kh x kw, bias (optional) has out entries.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 int stride = 1, int pad = 0);

/// Output extent of a conv/pool window sweep.
inline int conv_out_size(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Per-channel batch normalization. In training mode the batch statistics are used
/// and the running buffers are updated in place with the given momentum.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                       bool training);

template <typename T>
Tensor<T> mish(const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.1));
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
/// Elementwise clamp; the adjoint is zero where the bound is active.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

/// N x C x H x W -> N x C x 1 x 1
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x);
/// N x C x H x W -> N x 1 x H x W, reduced across channels.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x);

/// Max pooling; padded positions never win.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad);
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);

/// Elementwise sum/product. `b` may equal a's shape or be a per-channel
/// (N x C x 1 x 1) or per-position (N x 1 x H x W) descriptor of a 4-D `a`.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
/// a + c where c is a constant array of a's size.
template <typename T>
Tensor<T> add_constant(const Tensor<T>& a, const Array<T>& c);
/// a * c where c is a constant array of a's size.
template <typename T>
Tensor<T> mul_constant(const Tensor<T>& a, const Array<T>& c);

/// Sum / mean of all entries, as a shape-(1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Flat-index gather into a 1-D tensor; the adjoint scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, const std::vector<std::int64_t>& flat_index);

/// Structured dropout: zeroes block_size x block_size squares and rescales the
/// survivors by numel / kept. Identity outside training or when keep_prob == 1.
template <typename T>
Tensor<T> dropblock(const Tensor<T>& x, double keep_prob, int block_size, bool training, Rng& rng);

/// sum_i w_i * BCE(sigmoid(logit_i), target_i), computed in logit space.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Array<T>& targets, const Array<T>& weights);

/// Mean softmax cross-entropy of N x K logits against integer labels.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

}  // namespace mrham
