#pragma once

#include "mrham/backbone.hpp"
#include "mrham/boxes.hpp"
#include "mrham/layers.hpp"

#include <array>
#include <string>
#include <vector>

namespace mrham {

inline constexpr std::array<int, 3> kDetectionStrides{8, 16, 32};
inline constexpr int kAnchorsPerScale = 3;

struct LossWeights {
    double box = 0.05;
    double obj = 1.0;
    double cls = 0.5;
};

struct DetectorSpec {
    int input_size = 608;
    int num_classes = 4;
    AnchorSet anchors;  // 9 (w, h) in input pixels; triplet s serves stride 8 * 2^s
    BackboneSpec backbone;
    LossWeights loss;
    double ignore_threshold = 0.5;

    /// MRHAM blocks on the slim CSPDarknet53, YOLOv4 default anchors rescaled to the input size.
    static DetectorSpec mrham_yolov4_slim(int input_size = 608, int num_classes = 4, double width = 1.0);
    static AnchorSet default_anchors(int input_size);

    void validate() const;
    int channels_per_anchor() const { return 5 + num_classes; }
    int grid(int scale) const { return input_size / kDetectionStrides[static_cast<std::size_t>(scale)]; }
    std::pair<double, double> anchor(int scale, int a) const {
        return anchors.wh[static_cast<std::size_t>(scale * kAnchorsPerScale + a)];
    }
};

/// Raw head outputs, one N x 3(5+C) x S x S tensor per stride (8, 16, 32).
template <typename T>
using RawPrediction = std::vector<Tensor<T>>;

/// Identity plus stride-1 max pools of size 5, 9 and 13, concatenated on channels.
template <typename T>
Tensor<T> spp_pool(const Tensor<T>& x);

/// SPP + FPN (top-down) + PAN (bottom-up) neck.
template <typename T>
class Neck {
public:
    Neck() = default;
    Neck(int c3, int c4, int c5, Rng& rng);

    std::array<Tensor<T>, 3> forward(const Tensor<T>& c3, const Tensor<T>& c4, const Tensor<T>& c5,
                                     const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);
    std::array<int, 3> out_channels() const { return {n3_, n4_, n5_}; }

private:
    std::vector<ConvBnAct<T>> pre_spp_, post_spp_, td4_, td3_, bu4_, bu5_;
    ConvBnAct<T> reduce5_, lateral4_, reduce4_, lateral3_, down3_, down4_;
    int c3_ = 0, c4_ = 0, c5_ = 0, n3_ = 0, n4_ = 0, n5_ = 0;
};

template <typename T>
std::array<Tensor<T>, 3> neck_forward(Neck<T>& neck, const Tensor<T>& c3, const Tensor<T>& c4, const Tensor<T>& c5,
                                      const ForwardContext& ctx = {});

/// Backbone, neck and three prediction heads.
template <typename T>
class Detector {
public:
    Detector() = default;
    Detector(const DetectorSpec& spec, Rng& rng);

    RawPrediction<T> forward(const Tensor<T>& images, const ForwardContext& ctx);
    ParamList<T> parameters();
    const DetectorSpec& spec() const { return spec_; }

private:
    DetectorSpec spec_;
    Backbone<T> backbone_;
    Neck<T> neck_;
    std::array<ConvBnAct<T>, 3> head_hidden_, head_out_;
};

/// One decoded anchor prediction, in input pixels.
struct DecodedBox {
    Box box;
    double objectness = 0;
    std::vector<double> class_scores;
    int scale = 0, anchor = 0, cell_x = 0, cell_y = 0;
};

/// Decodes one image of one scale: center = (sigmoid(t) + cell) * stride,
/// size = anchor * exp(t); objectness and class scores pass through a sigmoid.
template <typename T>
std::vector<DecodedBox> decode_boxes(const Tensor<T>& raw, int image, const std::array<std::pair<double, double>, 3>& anchors,
                                     int stride, int num_classes);

/// Inverse of the decode for a box whose center lies in `cell`. Offsets are
/// clamped to keep the logit finite.
std::array<double, 4> encode_box(const Box& box_px, std::pair<double, double> anchor, int stride, int cell_x,
                                 int cell_y);

/// Decode all scales, score = objectness * best class score, then DIoU-NMS.
template <typename T>
std::vector<std::vector<Detection>> postprocess(const RawPrediction<T>& raw, const DetectorSpec& spec,
                                                double conf_threshold = 0.25, double iou_threshold = 0.45);

struct PositiveTarget {
    int image = 0, scale = 0, anchor = 0, cell_x = 0, cell_y = 0;
    int class_id = 0;
    Box box_px;
};

struct TargetAssignment {
    std::vector<PositiveTarget> positives;
    std::vector<std::vector<Box>> gt_boxes_px;  // per image, for the ignore rule
    std::vector<std::string> warnings;
    int batch = 0;

    /// Flat index into a scale's raw tensor for (image, anchor, channel, y, x).
    static std::int64_t raw_index(const DetectorSpec& spec, int scale, int image, int anchor, int channel, int y, int x);
};

/// Assigns each ground truth (normalized boxes, one list per image) to the anchor
/// with the best shape IoU over all nine, at the cell holding its center on that
/// anchor's scale. A later box landing on an occupied (cell, anchor) replaces the
/// earlier one and a warning is recorded.
TargetAssignment assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const DetectorSpec& spec);
TargetAssignment assign_targets(const std::vector<GroundTruth>& gts, const DetectorSpec& spec);

template <typename T>
struct DetectionLoss {
    Tensor<T> total;
    double box = 0, obj = 0, cls = 0;
    int ignored = 0;
};

/// lambda_box * mean(1 - CIoU) + lambda_obj * mean BCE(objectness, non-ignored)
/// + lambda_cls * mean BCE(classes, assigned). Unassigned predictions whose
/// decoded box overlaps a ground truth above the ignore threshold carry no
/// objectness penalty.
template <typename T>
DetectionLoss<T> detection_loss(const RawPrediction<T>& raw, const TargetAssignment& assignment,
                                const DetectorSpec& spec);

}  // namespace mrham
