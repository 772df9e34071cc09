#include "mrham/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mrham {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dims4 {
    int n, c, h, w;
    std::int64_t plane() const { return std::int64_t(h) * w; }
};

template <typename T>
Dims4 dims4(const Tensor<T>& x, const char* op) {
    if (x.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": expected N x C x H x W, got " + shape_str(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

template <typename T>
Node<T>& parent(Node<T>& n, std::size_t i) {
    return *n.parents[i];
}

template <typename T>
bool wants_grad(const Node<T>& n) {
    return n.requires_grad;
}

// Rows are (c, ky, kx); columns are output positions.
template <typename T>
void im2col(const T* in, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, T* col) {
    const std::int64_t p = std::int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = in + std::int64_t(ch) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = col + (std::int64_t(ch * kh + ky) * kw + kx) * p;
                const int dx = kx - pad;
                int ox_lo = dx >= 0 ? 0 : (-dx + stride - 1) / stride;
                int ox_hi = (w - 1 - dx) >= 0 ? (w - 1 - dx) / stride + 1 : 0;
                ox_lo = std::min(ox_lo, wo);
                ox_hi = std::clamp(ox_hi, ox_lo, wo);
                for (int oy = 0; oy < ho; ++oy) {
                    T* dst = row + std::int64_t(oy) * wo;
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = plane + std::int64_t(iy) * w;
                    std::fill(dst, dst + ox_lo, T(0));
                    if (stride == 1) {
                        std::copy(src + ox_lo + dx, src + ox_hi + dx, dst + ox_lo);
                    } else {
                        for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = src[ox * stride + dx];
                    }
                    std::fill(dst + ox_hi, dst + wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, T* in) {
    const std::int64_t p = std::int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch) {
        T* plane = in + std::int64_t(ch) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = col + (std::int64_t(ch * kh + ky) * kw + kx) * p;
                const int dx = kx - pad;
                int ox_lo = dx >= 0 ? 0 : (-dx + stride - 1) / stride;
                int ox_hi = (w - 1 - dx) >= 0 ? (w - 1 - dx) / stride + 1 : 0;
                ox_lo = std::min(ox_lo, wo);
                ox_hi = std::clamp(ox_hi, ox_lo, wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + std::int64_t(oy) * wo;
                    T* dst = plane + std::int64_t(iy) * w;
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox * stride + dx] += src[ox];
                }
            }
        }
    }
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd f, Deriv dfdx) {
    Array<T> y = x.values().unaryExpr(f);
    return make_result<T>(x.shape(), std::move(y), {x}, [dfdx](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        const auto size = n.value.size();
        for (Eigen::Index i = 0; i < size; ++i) in.grad[i] += n.grad[i] * dfdx(in.value[i], n.value[i]);
    });
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

enum class Broadcast { same, per_channel, per_position };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0)) {
        if (b.dim(1) == a.dim(1) && b.dim(2) == 1 && b.dim(3) == 1) return Broadcast::per_channel;
        if (b.dim(1) == 1 && b.dim(2) == a.dim(2) && b.dim(3) == a.dim(3)) return Broadcast::per_position;
    }
    throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                                shape_str(a.shape()));
}

// Index of b's entry aligned with a's flat index i.
struct BroadcastIndex {
    Broadcast kind;
    std::int64_t plane, c;
    std::int64_t operator()(std::int64_t i) const {
        switch (kind) {
            case Broadcast::same: return i;
            case Broadcast::per_channel: return i / plane;
            case Broadcast::per_position: return (i / (plane * c)) * plane + i % plane;
        }
        return i;
    }
};

template <typename T>
BroadcastIndex make_bindex(const Tensor<T>& a, Broadcast kind) {
    if (kind == Broadcast::same) return {kind, 1, 1};
    return {kind, std::int64_t(a.dim(2)) * a.dim(3), a.dim(1)};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad) {
    if (input.rank() != 4 || weight.rank() != 4 || input.dim(1) != weight.dim(1))
        throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                                    shape_str(weight.shape()));
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
    const Dims4 d = dims4(input, "conv2d");
    const int out_c = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int ho = conv_out_size(d.h, kh, stride, pad), wo = conv_out_size(d.w, kw, stride, pad);
    if (ho <= 0 || wo <= 0)
        throw std::invalid_argument("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                                    shape_str(input.shape()));
    if (bias.defined() && bias.numel() != out_c)
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                                    shape_str(weight.shape()));

    const bool direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    const std::int64_t k = std::int64_t(d.c) * kh * kw;
    const std::int64_t p = std::int64_t(ho) * wo;
    const std::int64_t in_stride = std::int64_t(d.c) * d.plane();
    Array<T> out(std::int64_t(d.n) * out_c * p);
    Eigen::Map<const RowMat<T>> wm(weight.data(), out_c, k);
    RowMat<T> col;
    if (!direct) col.resize(k, p);
    for (int b = 0; b < d.n; ++b) {
        const T* in_b = input.data() + b * in_stride;
        Eigen::Map<RowMat<T>> out_b(out.data() + b * out_c * p, out_c, p);
        if (direct) {
            out_b.noalias() = wm * Eigen::Map<const RowMat<T>>(in_b, d.c, p);
        } else {
            im2col(in_b, d.c, d.h, d.w, kh, kw, stride, pad, ho, wo, col.data());
            out_b.noalias() = wm * col;
        }
        if (bias.defined())
            out_b.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data(), out_c);
    }

    std::vector<Tensor<T>> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    const bool has_bias = bias.defined();
    return make_result<T>({d.n, out_c, ho, wo}, std::move(out), inputs,
                          [=](Node<T>& n) {
                              Node<T>& in = parent(n, 0);
                              Node<T>& w = parent(n, 1);
                              Eigen::Map<const RowMat<T>> wmat(w.value.data(), out_c, k);
                              RowMat<T> c2;
                              if (!direct) c2.resize(k, p);
                              if (wants_grad(in)) in.ensure_grad();
                              if (wants_grad(w)) w.ensure_grad();
                              for (int b = 0; b < d.n; ++b) {
                                  Eigen::Map<const RowMat<T>> dout(n.grad.data() + b * out_c * p, out_c, p);
                                  const T* in_b = in.value.data() + b * in_stride;
                                  if (wants_grad(w)) {
                                      Eigen::Map<RowMat<T>> dw(w.grad.data(), out_c, k);
                                      if (direct) {
                                          dw.noalias() += dout * Eigen::Map<const RowMat<T>>(in_b, d.c, p).transpose();
                                      } else {
                                          im2col(in_b, d.c, d.h, d.w, kh, kw, stride, pad, ho, wo, c2.data());
                                          dw.noalias() += dout * c2.transpose();
                                      }
                                  }
                                  if (wants_grad(in)) {
                                      T* din = in.grad.data() + b * in_stride;
                                      if (direct) {
                                          Eigen::Map<RowMat<T>>(din, d.c, p).noalias() += wmat.transpose() * dout;
                                      } else {
                                          c2.noalias() = wmat.transpose() * dout;
                                          col2im_add(c2.data(), d.c, d.h, d.w, kh, kw, stride, pad, ho, wo, din);
                                      }
                                  }
                                  if (has_bias) {
                                      Node<T>& bn = parent(n, 2);
                                      if (wants_grad(bn)) {
                                          bn.ensure_grad();
                                          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bn.grad.data(), out_c) +=
                                              dout.rowwise().sum();
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum, bool training) {
    const Dims4 d = dims4(input, "batch_norm2d");
    if (gamma.numel() != d.c || beta.numel() != d.c || running_mean.numel() != d.c || running_var.numel() != d.c)
        throw std::invalid_argument("batch_norm2d: parameters do not have " + std::to_string(d.c) +
                                    " channels for input " + shape_str(input.shape()));
    if (!(eps > T(0))) throw std::invalid_argument("batch_norm2d: eps must be positive");

    const std::int64_t plane = d.plane();
    const std::int64_t count = std::int64_t(d.n) * plane;
    Array<T> mean_c(d.c), inv_std(d.c);
    if (training) {
        for (int c = 0; c < d.c; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int b = 0; b < d.n; ++b) {
                const T* x = input.data() + (std::int64_t(b) * d.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += double(x[i]);
            }
            const double m = s / double(count);
            for (int b = 0; b < d.n; ++b) {
                const T* x = input.data() + (std::int64_t(b) * d.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double dv = double(x[i]) - m;
                    s2 += dv * dv;
                }
            }
            const double var = s2 / double(count);
            mean_c[c] = T(m);
            inv_std[c] = T(1.0 / std::sqrt(var + double(eps)));
            const double unbiased = count > 1 ? s2 / double(count - 1) : var;
            running_mean.values()[c] = (T(1) - momentum) * running_mean.values()[c] + momentum * T(m);
            running_var.values()[c] = (T(1) - momentum) * running_var.values()[c] + momentum * T(unbiased);
        }
    } else {
        mean_c = running_mean.values();
        inv_std = (running_var.values() + eps).sqrt().inverse();
    }

    Array<T> out(input.numel());
    for (int b = 0; b < d.n; ++b)
        for (int c = 0; c < d.c; ++c) {
            const std::int64_t off = (std::int64_t(b) * d.c + c) * plane;
            const T g = gamma.values()[c] * inv_std[c];
            const T shift = beta.values()[c] - g * mean_c[c];
            out.segment(off, plane) = input.values().segment(off, plane) * g + shift;
        }

    return make_result<T>(input.shape(), std::move(out), {input, gamma, beta},
                          [=](Node<T>& n) {
                              Node<T>& x = parent(n, 0);
                              Node<T>& g = parent(n, 1);
                              Node<T>& bt = parent(n, 2);
                              if (wants_grad(x)) x.ensure_grad();
                              if (wants_grad(g)) g.ensure_grad();
                              if (wants_grad(bt)) bt.ensure_grad();
                              for (int c = 0; c < d.c; ++c) {
                                  T sum_dy = 0, sum_dy_xhat = 0;
                                  for (int b = 0; b < d.n; ++b) {
                                      const std::int64_t off = (std::int64_t(b) * d.c + c) * plane;
                                      auto xhat = (x.value.segment(off, plane) - mean_c[c]) * inv_std[c];
                                      sum_dy += n.grad.segment(off, plane).sum();
                                      sum_dy_xhat += (n.grad.segment(off, plane) * xhat).sum();
                                  }
                                  if (wants_grad(g)) g.grad[c] += sum_dy_xhat;
                                  if (wants_grad(bt)) bt.grad[c] += sum_dy;
                                  if (!wants_grad(x)) continue;
                                  const T gc = g.value[c] * inv_std[c];
                                  for (int b = 0; b < d.n; ++b) {
                                      const std::int64_t off = (std::int64_t(b) * d.c + c) * plane;
                                      if (training) {
                                          auto xhat = (x.value.segment(off, plane) - mean_c[c]) * inv_std[c];
                                          x.grad.segment(off, plane) +=
                                              gc * (n.grad.segment(off, plane) - sum_dy / T(count) -
                                                    xhat * (sum_dy_xhat / T(count)));
                                      } else {
                                          x.grad.segment(off, plane) += gc * n.grad.segment(off, plane);
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> mish(const Tensor<T>& x) {
    return unary(
        x,
        [](T v) {
            if (v > T(20)) return v;
            // tanh(log(1 + e)) = n / (n + 2) with n = e (e + 2)
            const T e = std::exp(v), n = e * (e + T(2));
            return v * n / (n + T(2));
        },
        [](T v, T) {
            if (v > T(20)) return T(1);
            const T e = std::exp(v), n = e * (e + T(2)), d = n + T(2);
            return n / d + v * T(4) * e * (e + T(1)) / (d * d);
        });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return unary(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    return unary(
        x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
        [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Dims4 d = dims4(x, "global_avg_pool");
    const std::int64_t plane = d.plane();
    const std::int64_t maps = std::int64_t(d.n) * d.c;
    Array<T> out(maps);
    for (std::int64_t m = 0; m < maps; ++m) out[m] = x.values().segment(m * plane, plane).sum() / T(plane);
    return make_result<T>({d.n, d.c, 1, 1}, std::move(out), {x}, [=](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (std::int64_t m = 0; m < maps; ++m) in.grad.segment(m * plane, plane) += n.grad[m] / T(plane);
    });
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    const Dims4 d = dims4(x, "global_max_pool");
    const std::int64_t plane = d.plane();
    const std::int64_t maps = std::int64_t(d.n) * d.c;
    Array<T> out(maps);
    std::vector<std::int64_t> arg(static_cast<std::size_t>(maps));
    for (std::int64_t m = 0; m < maps; ++m) {
        Eigen::Index i;
        out[m] = x.values().segment(m * plane, plane).maxCoeff(&i);
        arg[static_cast<std::size_t>(m)] = m * plane + i;
    }
    return make_result<T>({d.n, d.c, 1, 1}, std::move(out), {x}, [arg](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (std::size_t m = 0; m < arg.size(); ++m) in.grad[arg[m]] += n.grad[static_cast<Eigen::Index>(m)];
    });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    const Dims4 d = dims4(x, "channel_mean");
    const std::int64_t plane = d.plane();
    Array<T> out = Array<T>::Zero(std::int64_t(d.n) * plane);
    for (int b = 0; b < d.n; ++b)
        for (int c = 0; c < d.c; ++c)
            out.segment(b * plane, plane) += x.values().segment((std::int64_t(b) * d.c + c) * plane, plane);
    out /= T(d.c);
    return make_result<T>({d.n, 1, d.h, d.w}, std::move(out), {x}, [=](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (int b = 0; b < d.n; ++b)
            for (int c = 0; c < d.c; ++c)
                in.grad.segment((std::int64_t(b) * d.c + c) * plane, plane) +=
                    n.grad.segment(b * plane, plane) / T(d.c);
    });
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
    const Dims4 d = dims4(x, "channel_max");
    const std::int64_t plane = d.plane();
    Array<T> out(std::int64_t(d.n) * plane);
    std::vector<std::int64_t> arg(static_cast<std::size_t>(out.size()));
    for (int b = 0; b < d.n; ++b)
        for (std::int64_t i = 0; i < plane; ++i) {
            std::int64_t best = std::int64_t(b) * d.c * plane + i;
            for (int c = 1; c < d.c; ++c) {
                const std::int64_t j = (std::int64_t(b) * d.c + c) * plane + i;
                if (x.values()[j] > x.values()[best]) best = j;
            }
            out[b * plane + i] = x.values()[best];
            arg[static_cast<std::size_t>(b * plane + i)] = best;
        }
    return make_result<T>({d.n, 1, d.h, d.w}, std::move(out), {x}, [arg](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (std::size_t m = 0; m < arg.size(); ++m) in.grad[arg[m]] += n.grad[static_cast<Eigen::Index>(m)];
    });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
    const Dims4 d = dims4(x, "max_pool2d");
    if (kernel < 1 || stride < 1 || pad < 0 || pad >= kernel)
        throw std::invalid_argument("max_pool2d: invalid kernel/stride/pad");
    const int ho = conv_out_size(d.h, kernel, stride, pad), wo = conv_out_size(d.w, kernel, stride, pad);
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("max_pool2d: window larger than input " + shape_str(x.shape()));
    const std::int64_t maps = std::int64_t(d.n) * d.c;
    const std::int64_t plane = d.plane(), oplane = std::int64_t(ho) * wo;
    Array<T> out(maps * oplane);
    std::vector<std::int64_t> arg(static_cast<std::size_t>(out.size()));
    for (std::int64_t m = 0; m < maps; ++m) {
        const T* src = x.data() + m * plane;
        for (int oy = 0; oy < ho; ++oy) {
            const int y0 = std::max(oy * stride - pad, 0), y1 = std::min(oy * stride - pad + kernel, d.h);
            for (int ox = 0; ox < wo; ++ox) {
                const int x0 = std::max(ox * stride - pad, 0), x1 = std::min(ox * stride - pad + kernel, d.w);
                std::int64_t best = std::int64_t(y0) * d.w + x0;
                for (int yy = y0; yy < y1; ++yy)
                    for (int xx = x0; xx < x1; ++xx) {
                        const std::int64_t j = std::int64_t(yy) * d.w + xx;
                        if (src[j] > src[best]) best = j;
                    }
                const std::int64_t o = m * oplane + std::int64_t(oy) * wo + ox;
                out[o] = src[best];
                arg[static_cast<std::size_t>(o)] = m * plane + best;
            }
        }
    }
    return make_result<T>({d.n, d.c, ho, wo}, std::move(out), {x}, [arg](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (std::size_t m = 0; m < arg.size(); ++m) in.grad[arg[m]] += n.grad[static_cast<Eigen::Index>(m)];
    });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    const Dims4 d = dims4(x, "upsample_nearest2x");
    const std::int64_t maps = std::int64_t(d.n) * d.c;
    const int h2 = d.h * 2, w2 = d.w * 2;
    Array<T> out(maps * h2 * w2);
    for (std::int64_t m = 0; m < maps; ++m)
        for (int y = 0; y < h2; ++y)
            for (int xx = 0; xx < w2; ++xx)
                out[(m * h2 + y) * w2 + xx] = x.values()[(m * d.h + y / 2) * d.w + xx / 2];
    return make_result<T>({d.n, d.c, h2, w2}, std::move(out), {x}, [=](Node<T>& n) {
        Node<T>& in = parent(n, 0);
        if (!wants_grad(in)) return;
        in.ensure_grad();
        for (std::int64_t m = 0; m < maps; ++m)
            for (int y = 0; y < h2; ++y)
                for (int xx = 0; xx < w2; ++xx)
                    in.grad[(m * d.h + y / 2) * d.w + xx / 2] += n.grad[(m * h2 + y) * w2 + xx];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const int rank = xs[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = xs[0].shape();
    out_shape[axis] = 0;
    for (const auto& t : xs) {
        bool ok = t.rank() == rank;
        for (int a = 0; ok && a < rank; ++a) ok = a == axis || t.dim(a) == xs[0].dim(a);
        if (!ok)
            throw std::invalid_argument("concat: " + shape_str(t.shape()) + " incompatible with " +
                                        shape_str(xs[0].shape()) + " on axis " + std::to_string(axis));
        out_shape[axis] += t.dim(axis);
    }
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= out_shape[a];
    for (int a = axis + 1; a < rank; ++a) inner *= out_shape[a];
    const std::int64_t row = out_shape[axis] * inner;
    Array<T> out(shape_numel(out_shape));
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& t : xs) {
        offsets.push_back(off);
        const std::int64_t chunk = t.dim(axis) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            out.segment(o * row + off, chunk) = t.values().segment(o * chunk, chunk);
        off += chunk;
    }
    return make_result<T>(out_shape, std::move(out), xs, [=](Node<T>& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            Node<T>& in = parent(n, i);
            if (!wants_grad(in)) continue;
            in.ensure_grad();
            const std::int64_t chunk = in.value.size() / outer;
            for (std::int64_t o = 0; o < outer; ++o)
                in.grad.segment(o * chunk, chunk) += n.grad.segment(o * row + offsets[i], chunk);
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const Broadcast kind = broadcast_kind(a, b, "add");
    const BroadcastIndex bi = make_bindex(a, kind);
    Array<T> out(a.numel());
    if (kind == Broadcast::same) {
        out = a.values() + b.values();
    } else {
        for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] + b.values()[bi(i)];
    }
    return make_result<T>(a.shape(), std::move(out), {a, b}, [bi](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        Node<T>& y = parent(n, 1);
        if (wants_grad(x)) {
            x.ensure_grad();
            x.grad += n.grad;
        }
        if (wants_grad(y)) {
            y.ensure_grad();
            if (bi.kind == Broadcast::same) {
                y.grad += n.grad;
            } else {
                for (Eigen::Index i = 0; i < n.grad.size(); ++i) y.grad[bi(i)] += n.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const Broadcast kind = broadcast_kind(a, b, "mul");
    const BroadcastIndex bi = make_bindex(a, kind);
    Array<T> out(a.numel());
    if (kind == Broadcast::same) {
        out = a.values() * b.values();
    } else {
        for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] * b.values()[bi(i)];
    }
    return make_result<T>(a.shape(), std::move(out), {a, b}, [bi](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        Node<T>& y = parent(n, 1);
        if (wants_grad(x)) x.ensure_grad();
        if (wants_grad(y)) y.ensure_grad();
        if (bi.kind == Broadcast::same) {
            if (wants_grad(x)) x.grad += n.grad * y.value;
            if (wants_grad(y)) y.grad += n.grad * x.value;
            return;
        }
        for (Eigen::Index i = 0; i < n.grad.size(); ++i) {
            const std::int64_t j = bi(i);
            if (wants_grad(x)) x.grad[i] += n.grad[i] * y.value[j];
            if (wants_grad(y)) y.grad[j] += n.grad[i] * x.value[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return make_result<T>(a.shape(), a.values() - b.values(), {a, b}, [](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        Node<T>& y = parent(n, 1);
        if (wants_grad(x)) {
            x.ensure_grad();
            x.grad += n.grad;
        }
        if (wants_grad(y)) {
            y.ensure_grad();
            y.grad -= n.grad;
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return make_result<T>(a.shape(), a.values() * s, {a}, [s](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad * s;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return make_result<T>(a.shape(), a.values() + s, {a}, [](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad;
    });
}

template <typename T>
Tensor<T> add_constant(const Tensor<T>& a, const Array<T>& c) {
    if (c.size() != a.numel()) throw std::invalid_argument("add_constant: size mismatch");
    return make_result<T>(a.shape(), a.values() + c, {a}, [](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad;
    });
}

template <typename T>
Tensor<T> mul_constant(const Tensor<T>& a, const Array<T>& c) {
    if (c.size() != a.numel()) throw std::invalid_argument("mul_constant: size mismatch");
    return make_result<T>(a.shape(), a.values() * c, {a}, [c](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad * c;
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    Array<T> out(1);
    out[0] = a.values().sum();
    return make_result<T>({1}, std::move(out), {a}, [](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_result<T>(std::move(shape), a.values(), {a}, [](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        x.grad += n.grad;
    });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& a, const std::vector<std::int64_t>& flat_index) {
    if (flat_index.empty()) throw std::invalid_argument("gather: empty index list");
    Array<T> out(static_cast<Eigen::Index>(flat_index.size()));
    for (std::size_t i = 0; i < flat_index.size(); ++i) {
        if (flat_index[i] < 0 || flat_index[i] >= a.numel())
            throw std::out_of_range("gather: index " + std::to_string(flat_index[i]) + " outside " +
                                    shape_str(a.shape()));
        out[static_cast<Eigen::Index>(i)] = a.values()[flat_index[i]];
    }
    return make_result<T>({static_cast<int>(flat_index.size())}, std::move(out), {a}, [flat_index](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        for (std::size_t i = 0; i < flat_index.size(); ++i)
            x.grad[flat_index[i]] += n.grad[static_cast<Eigen::Index>(i)];
    });
}

template <typename T>
Tensor<T> dropblock(const Tensor<T>& x, double keep_prob, int block_size, bool training, Rng& rng) {
    const Dims4 d = dims4(x, "dropblock");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw std::invalid_argument("dropblock: keep_prob must be in (0, 1]");
    if (block_size < 1 || block_size % 2 == 0) throw std::invalid_argument("dropblock: block_size must be odd");
    if (block_size > std::min(d.h, d.w))
        throw std::invalid_argument("dropblock: block_size " + std::to_string(block_size) +
                                    " exceeds spatial extent of " + shape_str(x.shape()));
    if (!training || keep_prob >= 1.0) return x;

    const int valid_h = d.h - block_size + 1, valid_w = d.w - block_size + 1;
    const double gamma = (1.0 - keep_prob) / double(block_size * block_size) * double(d.h * d.w) /
                         double(valid_h * valid_w);
    const int half = block_size / 2;
    const std::int64_t plane = d.plane();
    Array<T> mask = Array<T>::Ones(x.numel());
    for (std::int64_t m = 0; m < std::int64_t(d.n) * d.c; ++m) {
        T* mp = mask.data() + m * plane;
        for (int cy = half; cy < half + valid_h; ++cy)
            for (int cx = half; cx < half + valid_w; ++cx) {
                if (!rng.bernoulli(gamma)) continue;
                for (int y = cy - half; y <= cy + half; ++y)
                    std::fill(mp + std::int64_t(y) * d.w + cx - half, mp + std::int64_t(y) * d.w + cx + half + 1, T(0));
            }
    }
    const T kept = mask.sum();
    const T factor = kept > T(0) ? T(x.numel()) / kept : T(0);
    mask *= factor;
    return mul_constant(x, mask);
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Array<T>& targets, const Array<T>& weights) {
    if (targets.size() != logits.numel() || weights.size() != logits.numel())
        throw std::invalid_argument("bce_with_logits: target/weight size mismatch");
    const Array<T>& z = logits.values();
    Array<T> per = z.max(T(0)) - z * targets + (T(1) + (-z.abs()).exp()).log();
    Array<T> out(1);
    out[0] = (per * weights).sum();
    return make_result<T>({1}, std::move(out), {logits}, [targets, weights](Node<T>& n) {
        Node<T>& x = parent(n, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        const Array<T> s = x.value.unaryExpr([](T v) { return sigmoid_scalar(v); });
        x.grad += n.grad[0] * weights * (s - targets);
    });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size()))
        throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                                    " vs " + std::to_string(labels.size()) + " labels");
    const int n = logits.dim(0), k = logits.dim(1);
    Eigen::Map<const RowMat<T>> z(logits.data(), n, k);
    RowMat<T> prob(n, k);
    T total = 0;
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        const T mx = z.row(i).maxCoeff();
        prob.row(i) = (z.row(i).array() - mx).exp().matrix();
        const T s = prob.row(i).sum();
        prob.row(i) /= s;
        total += -(z(i, labels[static_cast<std::size_t>(i)]) - mx - std::log(s));
    }
    Array<T> out(1);
    out[0] = total / T(n);
    return make_result<T>({1}, std::move(out), {logits}, [prob, labels, n, k](Node<T>& nd) {
        Node<T>& x = parent(nd, 0);
        if (!wants_grad(x)) return;
        x.ensure_grad();
        Eigen::Map<RowMat<T>> g(x.grad.data(), n, k);
        RowMat<T> d = prob;
        for (int i = 0; i < n; ++i) d(i, labels[static_cast<std::size_t>(i)]) -= T(1);
        g += d * (nd.grad[0] / T(n));
    });
}

#define MRHAM_INSTANTIATE_OPS(T)                                                                          \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);           \
    template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,     \
                                    Tensor<T>&, T, T, bool);                                              \
    template Tensor<T> mish(const Tensor<T>&);                                                            \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                         \
    template Tensor<T> exp(const Tensor<T>&);                                                             \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                                     \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                                 \
    template Tensor<T> global_max_pool(const Tensor<T>&);                                                 \
    template Tensor<T> channel_mean(const Tensor<T>&);                                                    \
    template Tensor<T> channel_max(const Tensor<T>&);                                                     \
    template Tensor<T> max_pool2d(const Tensor<T>&, int, int, int);                                       \
    template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                              \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                        \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> scale(const Tensor<T>&, T);                                                        \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                   \
    template Tensor<T> add_constant(const Tensor<T>&, const Array<T>&);                                   \
    template Tensor<T> mul_constant(const Tensor<T>&, const Array<T>&);                                   \
    template Tensor<T> sum(const Tensor<T>&);                                                             \
    template Tensor<T> mean(const Tensor<T>&);                                                            \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
    template Tensor<T> gather(const Tensor<T>&, const std::vector<std::int64_t>&);                        \
    template Tensor<T> dropblock(const Tensor<T>&, double, int, bool, Rng&);                              \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const Array<T>&, const Array<T>&);               \
    template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const std::vector<int>&);

MRHAM_INSTANTIATE_OPS(float)
MRHAM_INSTANTIATE_OPS(double)

}  // namespace mrham
