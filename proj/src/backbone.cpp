#include "mrham/backbone.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mrham {

std::string_view to_string(BlockKind kind) {
    switch (kind) {
        case BlockKind::plain_residual: return "plain";
        case BlockKind::mrham: return "mrham";
        case BlockKind::cbam: return "cbam";
    }
    return "?";
}

BlockKind parse_block_kind(std::string_view name) {
    for (auto k : {BlockKind::plain_residual, BlockKind::mrham, BlockKind::cbam})
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown block kind '" + std::string(name) + "'");
}

BlockKind block_kind_for_variant(std::string_view variant) {
    if (variant == "baseline" || variant.empty()) return BlockKind::plain_residual;
    if (variant == "CBAM-" || variant == "CBAM") return BlockKind::cbam;
    if (variant == "MRHAM-" || variant == "MRHAM") return BlockKind::mrham;
    throw std::invalid_argument("unknown backbone variant '" + std::string(variant) + "'");
}

int scale_channels(int channels, double width) {
    if (!(width > 0.0)) throw std::invalid_argument("width multiplier must be positive");
    const int c = static_cast<int>(std::lround(channels * width / 2.0)) * 2;
    return std::max(c, 2);
}

namespace {

BackboneSpec make_preset(const std::vector<int>& blocks, BlockKind kind, double width) {
    BackboneSpec spec;
    spec.stem_channels = scale_channels(32, width);
    const int widths[5] = {64, 128, 256, 512, 1024};
    for (int i = 0; i < 5; ++i) spec.stages.push_back({scale_channels(widths[i], width), blocks[i], kind});
    return spec;
}

}  // namespace

BackboneSpec BackboneSpec::cspdarknet53(BlockKind kind, double width) {
    return make_preset({1, 2, 8, 8, 4}, kind, width);
}

BackboneSpec BackboneSpec::cspdarknet53_slim(BlockKind kind, double width) {
    return make_preset({1, 2, 4, 4, 2}, kind, width);
}

BackboneSpec BackboneSpec::from_preset(std::string_view name, BlockKind kind, double width) {
    if (name == "cspdarknet53") return cspdarknet53(kind, width);
    if (name == "cspdarknet53-slim") return cspdarknet53_slim(kind, width);
    throw std::invalid_argument("unknown backbone preset '" + std::string(name) + "'");
}

void BackboneSpec::validate() const {
    if (stem_channels < 1) throw std::invalid_argument("backbone: stem channels must be positive");
    if (stages.size() != 5)
        throw std::invalid_argument("backbone: expected 5 stages, got " + std::to_string(stages.size()));
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        const std::string where = "backbone stage " + std::to_string(i + 1) + ": ";
        if (s.num_blocks < 1) throw std::invalid_argument(where + "num_blocks must be >= 1");
        if (s.out_channels < 4 || s.out_channels % 4 != 0)
            throw std::invalid_argument(where + "out_channels must be a positive multiple of 4 (CSP halves it, "
                                                "blocks halve again), got " + std::to_string(s.out_channels));
    }
    if (attention_reduction < 1) throw std::invalid_argument("backbone: attention reduction must be >= 1");
    if (!(dropblock_keep_prob > 0.0 && dropblock_keep_prob <= 1.0))
        throw std::invalid_argument("backbone: dropblock keep_prob must be in (0, 1]");
    if (dropblock_size < 1 || dropblock_size % 2 == 0)
        throw std::invalid_argument("backbone: dropblock size must be odd");
}

int BackboneSpec::total_blocks() const {
    return std::accumulate(stages.begin(), stages.end(), 0,
                           [](int acc, const CspStageSpec& s) { return acc + s.num_blocks; });
}

int count_conv_layers(const BackboneSpec& spec) {
    spec.validate();
    const int stages = static_cast<int>(spec.stages.size());
    return 1 + stages + 3 * stages + 2 * spec.total_blocks();
}

template <typename T>
Block<T>::Block(BlockKind kind_, int channels, Rng& rng, ArrangementMode arrangement_, int reduction)
    : kind(kind_), arrangement(arrangement_) {
    if (channels < 2 || channels % 2 != 0)
        throw std::invalid_argument("block: channels must be even, got " + std::to_string(channels));
    reduce = ConvBnAct<T>(channels, channels / 2, 1, 1, Activation::mish, rng);
    expand = ConvBnAct<T>(channels / 2, channels, 3, 1, Activation::mish, rng);
    const int r = fit_reduction(channels, reduction);
    switch (kind) {
        case BlockKind::plain_residual: break;
        case BlockKind::mrham:
            rca = RcaConfig<T>::random(channels, r, rng);
            rsa = RsaConfig<T>::random(channels, rng);
            break;
        case BlockKind::cbam: cbam = CbamConfig<T>::random(channels, r, rng); break;
    }
}

template <typename T>
Tensor<T> Block<T>::forward(const Tensor<T>& x, const ForwardContext& ctx) {
    Tensor<T> branch = expand.forward(reduce.forward(x, ctx), ctx);
    switch (kind) {
        case BlockKind::plain_residual: return add(x, branch);
        case BlockKind::mrham: return mrham_forward(branch, rca, rsa, arrangement);
        case BlockKind::cbam: return add(x, cbam_forward(branch, cbam));
    }
    throw std::invalid_argument("block: unknown kind");
}

template <typename T>
void Block<T>::collect(const std::string& prefix, ParamList<T>& out) {
    reduce.collect(prefix + ".conv1", out);
    expand.collect(prefix + ".conv2", out);
    if (kind == BlockKind::mrham) {
        rca.collect(prefix + ".rca", out);
        rsa.collect(prefix + ".rsa", out);
    } else if (kind == BlockKind::cbam) {
        cbam.collect(prefix + ".cbam", out);
    }
}

template <typename T>
Block<T> make_block(BlockKind kind, int channels, Rng& rng, ArrangementMode arrangement, int reduction) {
    return Block<T>(kind, channels, rng, arrangement, reduction);
}

template <typename T>
CspStage<T>::CspStage(int in_channels, const CspStageSpec& spec, const BackboneSpec& backbone, bool dropblock,
                      Rng& rng)
    : use_dropblock(dropblock), keep_prob(backbone.dropblock_keep_prob), block_size(backbone.dropblock_size) {
    const int out = spec.out_channels, half = out / 2;
    down = ConvBnAct<T>(in_channels, out, 3, 2, Activation::mish, rng);
    split_bypass = ConvBnAct<T>(out, half, 1, 1, Activation::mish, rng);
    split_blocks = ConvBnAct<T>(out, half, 1, 1, Activation::mish, rng);
    for (int i = 0; i < spec.num_blocks; ++i)
        blocks.push_back(make_block<T>(spec.block_kind, half, rng, backbone.arrangement, backbone.attention_reduction));
    transition = ConvBnAct<T>(out, out, 1, 1, Activation::mish, rng);
}

template <typename T>
Tensor<T> CspStage<T>::forward(const Tensor<T>& x, const ForwardContext& ctx) {
    Tensor<T> y = down.forward(x, ctx);
    Tensor<T> bypass = split_bypass.forward(y, ctx);
    Tensor<T> path = split_blocks.forward(y, ctx);
    for (auto& b : blocks) path = b.forward(path, ctx);
    y = transition.forward(concat<T>({bypass, path}, 1), ctx);
    if (use_dropblock && ctx.training && keep_prob < 1.0) {
        if (!ctx.rng) throw std::invalid_argument("dropblock in training mode needs an rng");
        // Largest odd block that fits the map.
        int size = std::min({block_size, y.dim(2), y.dim(3)});
        if (size % 2 == 0) --size;
        y = dropblock(y, keep_prob, size, true, *ctx.rng);
    }
    return y;
}

template <typename T>
void CspStage<T>::collect(const std::string& prefix, ParamList<T>& out) {
    down.collect(prefix + ".down", out);
    split_bypass.collect(prefix + ".split_bypass", out);
    split_blocks.collect(prefix + ".split_blocks", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    transition.collect(prefix + ".transition", out);
}

template <typename T>
Backbone<T>::Backbone(const BackboneSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    stem_ = ConvBnAct<T>(3, spec_.stem_channels, 3, 1, Activation::mish, rng);
    int in = spec_.stem_channels;
    for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
        stages_.emplace_back(in, spec_.stages[i], spec_, i >= 3, rng);
        in = spec_.stages[i].out_channels;
    }
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::forward(const Tensor<T>& images, const ForwardContext& ctx) {
    if (images.rank() != 4 || images.dim(1) != 3)
        throw std::invalid_argument("backbone: expected N x 3 x H x W images, got " + shape_str(images.shape()));
    std::vector<Tensor<T>> outs;
    Tensor<T> x = stem_.forward(images, ctx);
    for (auto& s : stages_) {
        x = s.forward(x, ctx);
        outs.push_back(x);
    }
    return outs;
}

template <typename T>
void Backbone<T>::collect(const std::string& prefix, ParamList<T>& out) {
    stem_.collect(prefix + ".stem", out);
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(prefix + ".stage" + std::to_string(i + 1), out);
}

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, Rng& rng) {
    return Backbone<T>(spec, rng);
}

template <typename T>
Classifier<T>::Classifier(const BackboneSpec& spec, int num_classes, Rng& rng) : backbone_(spec, rng) {
    if (num_classes < 2) throw std::invalid_argument("classifier: need at least 2 classes");
    const int feat = spec.stages.back().out_channels;
    fc_weight = init_conv_weight<T>(num_classes, feat, 1, rng, 1.0);
    fc_bias = Tensor<T>::zeros({num_classes});
    fc_bias.set_requires_grad();
}

template <typename T>
Tensor<T> Classifier<T>::forward(const Tensor<T>& images, const ForwardContext& ctx) {
    auto feats = backbone_.forward(images, ctx);
    Tensor<T> pooled = global_avg_pool(feats.back());
    Tensor<T> logits = conv2d(pooled, fc_weight, fc_bias);
    return reshape(logits, {images.dim(0), num_classes()});
}

template <typename T>
ParamList<T> Classifier<T>::parameters() {
    ParamList<T> out;
    backbone_.collect("backbone", out);
    out.push_back({"fc.weight", fc_weight, ParamKind::weight});
    out.push_back({"fc.bias", fc_bias, ParamKind::norm});
    return out;
}

template <typename T>
Classifier<T> classifier_head(const BackboneSpec& spec, int num_classes, Rng& rng) {
    return Classifier<T>(spec, num_classes, rng);
}

template <typename T>
Tensor<T> classify_forward(Classifier<T>& model, const Tensor<T>& images, const ForwardContext& ctx) {
    return model.forward(images, ctx);
}

#define MRHAM_INSTANTIATE_BACKBONE(T)                                                              \
    template class Block<T>;                                                                       \
    template class CspStage<T>;                                                                    \
    template class Backbone<T>;                                                                    \
    template class Classifier<T>;                                                                  \
    template Block<T> make_block(BlockKind, int, Rng&, ArrangementMode, int);                      \
    template Backbone<T> build_backbone(const BackboneSpec&, Rng&);                                \
    template Classifier<T> classifier_head(const BackboneSpec&, int, Rng&);                        \
    template Tensor<T> classify_forward(Classifier<T>&, const Tensor<T>&, const ForwardContext&);

MRHAM_INSTANTIATE_BACKBONE(float)
MRHAM_INSTANTIATE_BACKBONE(double)

}  // namespace mrham
