#pragma once

#include "mrham/attention.hpp"
#include "mrham/layers.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace mrham {

enum class BlockKind { plain_residual, mrham, cbam };

std::string_view to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);

/// Maps a backbone variant prefix ("baseline", "CBAM-", "MRHAM-") to its block kind.
BlockKind block_kind_for_variant(std::string_view variant);

struct CspStageSpec {
    int out_channels = 64;
    int num_blocks = 1;
    BlockKind block_kind = BlockKind::plain_residual;
};

struct BackboneSpec {
    int stem_channels = 32;
    std::vector<CspStageSpec> stages;
    ArrangementMode arrangement = ArrangementMode::rca_then_rsa;
    int attention_reduction = 16;
    double dropblock_keep_prob = 0.9;
    int dropblock_size = 7;

    /// Full CSPDarknet53: widths 32 | 64 128 256 512 1024, blocks 1 2 8 8 4.
    static BackboneSpec cspdarknet53(BlockKind kind = BlockKind::plain_residual, double width = 1.0);
    /// Slim variant: blocks 1 2 4 4 2, widths unchanged.
    static BackboneSpec cspdarknet53_slim(BlockKind kind = BlockKind::plain_residual, double width = 1.0);
    static BackboneSpec from_preset(std::string_view name, BlockKind kind, double width);

    void validate() const;
    int total_blocks() const;
};

/// Channel count scaled by a width multiplier, kept even and >= 2.
int scale_channels(int channels, double width);

/// Convolutions in the declared architecture: stem, one downsample, two CSP split
/// convs and one transition per stage, plus two per block. Attention-internal
/// convolutions are not counted.
int count_conv_layers(const BackboneSpec& spec);

/// Bottleneck unit inside a CSP stage. The branch is conv1x1 (C -> C/2) then
/// conv3x3 (C/2 -> C).
template <typename T>
class Block {
public:
    Block() = default;
    Block(BlockKind kind, int channels, Rng& rng, ArrangementMode arrangement = ArrangementMode::rca_then_rsa,
          int reduction = 16);

    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    BlockKind kind = BlockKind::plain_residual;
    ArrangementMode arrangement = ArrangementMode::rca_then_rsa;
    ConvBnAct<T> reduce;
    ConvBnAct<T> expand;
    RcaConfig<T> rca;
    RsaConfig<T> rsa;
    CbamConfig<T> cbam;
};

template <typename T>
Block<T> make_block(BlockKind kind, int channels, Rng& rng,
                    ArrangementMode arrangement = ArrangementMode::rca_then_rsa, int reduction = 16);

template <typename T>
class CspStage {
public:
    CspStage() = default;
    CspStage(int in_channels, const CspStageSpec& spec, const BackboneSpec& backbone, bool dropblock, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    ConvBnAct<T> down, split_bypass, split_blocks, transition;
    std::vector<Block<T>> blocks;
    bool use_dropblock = false;
    double keep_prob = 0.9;
    int block_size = 7;
};

template <typename T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneSpec& spec, Rng& rng);

    /// Outputs of all five stages (strides 2, 4, 8, 16, 32).
    std::vector<Tensor<T>> forward(const Tensor<T>& images, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    int stage_channels(int stage) const { return spec_.stages.at(static_cast<std::size_t>(stage)).out_channels; }
    const BackboneSpec& spec() const { return spec_; }

private:
    BackboneSpec spec_;
    ConvBnAct<T> stem_;
    std::vector<CspStage<T>> stages_;
};

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, Rng& rng);

/// Backbone + global average pool + linear layer, for image classification.
template <typename T>
class Classifier {
public:
    Classifier() = default;
    Classifier(const BackboneSpec& spec, int num_classes, Rng& rng);

    /// N x 3 x H x W -> N x num_classes scores.
    Tensor<T> forward(const Tensor<T>& images, const ForwardContext& ctx);
    ParamList<T> parameters();
    int num_classes() const { return fc_weight.dim(0); }
    Backbone<T>& backbone() { return backbone_; }

    Tensor<T> fc_weight, fc_bias;

private:
    Backbone<T> backbone_;
};

template <typename T>
Classifier<T> classifier_head(const BackboneSpec& spec, int num_classes, Rng& rng);

template <typename T>
Tensor<T> classify_forward(Classifier<T>& model, const Tensor<T>& images, const ForwardContext& ctx = {});

}  // namespace mrham
