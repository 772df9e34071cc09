#include "mrham/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace mrham {

namespace {

constexpr std::array<std::pair<double, double>, 9> kYoloAnchors608{{
    {12, 16}, {19, 36}, {40, 28}, {36, 75}, {76, 55}, {72, 146}, {142, 110}, {192, 243}, {459, 401},
}};

double sigmoid_d(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Largest raw size offset used in decode; exp(8) ~ 3000x the anchor.
constexpr double kMaxSizeLogit = 8.0;

template <typename T>
std::vector<ConvBnAct<T>> five_conv(int in, int n, Rng& rng) {
    std::vector<ConvBnAct<T>> out;
    out.emplace_back(in, n, 1, 1, Activation::leaky, rng);
    out.emplace_back(n, 2 * n, 3, 1, Activation::leaky, rng);
    out.emplace_back(2 * n, n, 1, 1, Activation::leaky, rng);
    out.emplace_back(n, 2 * n, 3, 1, Activation::leaky, rng);
    out.emplace_back(2 * n, n, 1, 1, Activation::leaky, rng);
    return out;
}

template <typename T>
Tensor<T> run(std::vector<ConvBnAct<T>>& convs, Tensor<T> x, const ForwardContext& ctx) {
    for (auto& c : convs) x = c.forward(x, ctx);
    return x;
}

template <typename T>
void collect_all(std::vector<ConvBnAct<T>>& convs, const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + "." + std::to_string(i), out);
}

}  // namespace

AnchorSet DetectorSpec::default_anchors(int input_size) {
    AnchorSet set;
    const double s = input_size / 608.0;
    for (auto [w, h] : kYoloAnchors608) set.wh.emplace_back(w * s, h * s);
    return set;
}

DetectorSpec DetectorSpec::mrham_yolov4_slim(int input_size, int num_classes, double width) {
    DetectorSpec spec;
    spec.input_size = input_size;
    spec.num_classes = num_classes;
    spec.anchors = default_anchors(input_size);
    spec.backbone = BackboneSpec::cspdarknet53_slim(BlockKind::mrham, width);
    return spec;
}

void DetectorSpec::validate() const {
    if (input_size <= 0 || input_size % 32 != 0)
        throw std::invalid_argument("detector input size must be a positive multiple of 32, got " +
                                    std::to_string(input_size));
    if (num_classes < 1) throw std::invalid_argument("detector needs at least one class");
    if (anchors.size() != 9)
        throw std::invalid_argument("detector needs 9 anchors, got " + std::to_string(anchors.size()));
    anchors.validate();
    backbone.validate();
    if (!(ignore_threshold > 0 && ignore_threshold <= 1))
        throw std::invalid_argument("ignore threshold must lie in (0, 1]");
}

template <typename T>
Tensor<T> spp_pool(const Tensor<T>& x) {
    return concat<T>({max_pool2d(x, 13, 1, 6), max_pool2d(x, 9, 1, 4), max_pool2d(x, 5, 1, 2), x}, 1);
}

template <typename T>
Neck<T>::Neck(int c3, int c4, int c5, Rng& rng)
    : c3_(c3), c4_(c4), c5_(c5), n3_(c3 / 2), n4_(c4 / 2), n5_(c5 / 2) {
    pre_spp_.emplace_back(c5, n5_, 1, 1, Activation::leaky, rng);
    pre_spp_.emplace_back(n5_, 2 * n5_, 3, 1, Activation::leaky, rng);
    pre_spp_.emplace_back(2 * n5_, n5_, 1, 1, Activation::leaky, rng);
    post_spp_.emplace_back(4 * n5_, n5_, 1, 1, Activation::leaky, rng);
    post_spp_.emplace_back(n5_, 2 * n5_, 3, 1, Activation::leaky, rng);
    post_spp_.emplace_back(2 * n5_, n5_, 1, 1, Activation::leaky, rng);

    reduce5_ = ConvBnAct<T>(n5_, n4_, 1, 1, Activation::leaky, rng);
    lateral4_ = ConvBnAct<T>(c4, n4_, 1, 1, Activation::leaky, rng);
    td4_ = five_conv<T>(2 * n4_, n4_, rng);

    reduce4_ = ConvBnAct<T>(n4_, n3_, 1, 1, Activation::leaky, rng);
    lateral3_ = ConvBnAct<T>(c3, n3_, 1, 1, Activation::leaky, rng);
    td3_ = five_conv<T>(2 * n3_, n3_, rng);

    down3_ = ConvBnAct<T>(n3_, n4_, 3, 2, Activation::leaky, rng);
    bu4_ = five_conv<T>(2 * n4_, n4_, rng);
    down4_ = ConvBnAct<T>(n4_, n5_, 3, 2, Activation::leaky, rng);
    bu5_ = five_conv<T>(2 * n5_, n5_, rng);
}

template <typename T>
std::array<Tensor<T>, 3> Neck<T>::forward(const Tensor<T>& c3, const Tensor<T>& c4, const Tensor<T>& c5,
                                          const ForwardContext& ctx) {
    if (c3.dim(1) != c3_ || c4.dim(1) != c4_ || c5.dim(1) != c5_)
        throw std::invalid_argument("neck: expected channels " + std::to_string(c3_) + "/" + std::to_string(c4_) +
                                    "/" + std::to_string(c5_) + ", got " + shape_str(c3.shape()) + ", " +
                                    shape_str(c4.shape()) + ", " + shape_str(c5.shape()));
    Tensor<T> p5 = run(post_spp_, spp_pool(run(pre_spp_, c5, ctx)), ctx);

    Tensor<T> up5 = upsample_nearest2x(reduce5_.forward(p5, ctx));
    Tensor<T> p4 = run(td4_, concat<T>({lateral4_.forward(c4, ctx), up5}, 1), ctx);

    Tensor<T> up4 = upsample_nearest2x(reduce4_.forward(p4, ctx));
    Tensor<T> out3 = run(td3_, concat<T>({lateral3_.forward(c3, ctx), up4}, 1), ctx);

    Tensor<T> out4 = run(bu4_, concat<T>({down3_.forward(out3, ctx), p4}, 1), ctx);
    Tensor<T> out5 = run(bu5_, concat<T>({down4_.forward(out4, ctx), p5}, 1), ctx);
    return {out3, out4, out5};
}

template <typename T>
void Neck<T>::collect(const std::string& prefix, ParamList<T>& out) {
    collect_all(pre_spp_, prefix + ".pre_spp", out);
    collect_all(post_spp_, prefix + ".post_spp", out);
    reduce5_.collect(prefix + ".reduce5", out);
    lateral4_.collect(prefix + ".lateral4", out);
    collect_all(td4_, prefix + ".td4", out);
    reduce4_.collect(prefix + ".reduce4", out);
    lateral3_.collect(prefix + ".lateral3", out);
    collect_all(td3_, prefix + ".td3", out);
    down3_.collect(prefix + ".down3", out);
    collect_all(bu4_, prefix + ".bu4", out);
    down4_.collect(prefix + ".down4", out);
    collect_all(bu5_, prefix + ".bu5", out);
}

template <typename T>
std::array<Tensor<T>, 3> neck_forward(Neck<T>& neck, const Tensor<T>& c3, const Tensor<T>& c4, const Tensor<T>& c5,
                                      const ForwardContext& ctx) {
    return neck.forward(c3, c4, c5, ctx);
}

template <typename T>
Detector<T>::Detector(const DetectorSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    backbone_ = Backbone<T>(spec_.backbone, rng);
    neck_ = Neck<T>(backbone_.stage_channels(2), backbone_.stage_channels(3), backbone_.stage_channels(4), rng);
    const auto widths = neck_.out_channels();
    const int per_anchor = spec_.channels_per_anchor();
    for (int s = 0; s < 3; ++s) {
        const int n = widths[static_cast<std::size_t>(s)];
        head_hidden_[s] = ConvBnAct<T>(n, 2 * n, 3, 1, Activation::leaky, rng);
        auto& head = head_out_[s];
        head = ConvBnAct<T>(2 * n, kAnchorsPerScale * per_anchor, 1, 1, Activation::linear, rng, false);
        head.weight = Tensor<T>(head.weight.shape(), head.weight.values() * T(0.01));
        head.weight.set_requires_grad(true);
        // Start near the expected object density and a flat class prior.
        const double cells = std::pow(spec_.input_size / double(kDetectionStrides[s]), 2);
        const double obj_bias = std::log(8.0 / cells);
        const double cls_bias = std::log(0.6 / std::max(spec_.num_classes - 0.99, 0.01));
        Array<T> b = Array<T>::Zero(kAnchorsPerScale * per_anchor);
        for (int a = 0; a < kAnchorsPerScale; ++a) {
            b[a * per_anchor + 4] = T(obj_bias);
            for (int c = 0; c < spec_.num_classes; ++c) b[a * per_anchor + 5 + c] = T(cls_bias);
        }
        head.bias = Tensor<T>(head.bias.shape(), b);
        head.bias.set_requires_grad(true);
    }
}

template <typename T>
RawPrediction<T> Detector<T>::forward(const Tensor<T>& images, const ForwardContext& ctx) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != spec_.input_size ||
        images.dim(3) != spec_.input_size)
        throw std::invalid_argument("detector: expected N x 3 x " + std::to_string(spec_.input_size) + " x " +
                                    std::to_string(spec_.input_size) + " images, got " + shape_str(images.shape()));
    auto feats = backbone_.forward(images, ctx);
    auto necks = neck_.forward(feats[2], feats[3], feats[4], ctx);
    RawPrediction<T> raw;
    for (int s = 0; s < 3; ++s) raw.push_back(head_out_[s].forward(head_hidden_[s].forward(necks[s], ctx), ctx));
    return raw;
}

template <typename T>
ParamList<T> Detector<T>::parameters() {
    ParamList<T> out;
    backbone_.collect("backbone", out);
    neck_.collect("neck", out);
    for (int s = 0; s < 3; ++s) {
        head_hidden_[s].collect("head" + std::to_string(s) + ".hidden", out);
        head_out_[s].collect("head" + std::to_string(s) + ".out", out);
    }
    return out;
}

template <typename T>
std::vector<DecodedBox> decode_boxes(const Tensor<T>& raw, int image, const std::array<std::pair<double, double>, 3>& anchors,
                                     int stride, int num_classes) {
    const int per_anchor = 5 + num_classes;
    if (raw.rank() != 4 || raw.dim(1) != kAnchorsPerScale * per_anchor || image < 0 || image >= raw.dim(0))
        throw std::invalid_argument("decode_boxes: raw shape " + shape_str(raw.shape()) + " does not fit " +
                                    std::to_string(num_classes) + " classes");
    const int h = raw.dim(2), w = raw.dim(3);
    const std::int64_t plane = std::int64_t(h) * w;
    const T* base = raw.data() + std::int64_t(image) * raw.dim(1) * plane;
    std::vector<DecodedBox> out;
    out.reserve(static_cast<std::size_t>(kAnchorsPerScale * plane));
    for (int a = 0; a < kAnchorsPerScale; ++a) {
        const T* ch = base + std::int64_t(a) * per_anchor * plane;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::int64_t p = std::int64_t(y) * w + x;
                auto at = [&](int c) { return double(ch[c * plane + p]); };
                const double cx = (sigmoid_d(at(0)) + x) * stride;
                const double cy = (sigmoid_d(at(1)) + y) * stride;
                const double bw = anchors[a].first * std::exp(std::clamp(at(2), -kMaxSizeLogit, kMaxSizeLogit));
                const double bh = anchors[a].second * std::exp(std::clamp(at(3), -kMaxSizeLogit, kMaxSizeLogit));
                DecodedBox d;
                d.box = Box::from_center(cx, cy, bw, bh);
                d.objectness = sigmoid_d(at(4));
                d.class_scores.resize(static_cast<std::size_t>(num_classes));
                for (int c = 0; c < num_classes; ++c) d.class_scores[c] = sigmoid_d(at(5 + c));
                d.anchor = a;
                d.cell_x = x;
                d.cell_y = y;
                out.push_back(std::move(d));
            }
    }
    return out;
}

std::array<double, 4> encode_box(const Box& box_px, std::pair<double, double> anchor, int stride, int cell_x,
                                 int cell_y) {
    constexpr double eps = 1e-6;
    auto logit = [](double p) { return std::log(p / (1 - p)); };
    const double fx = std::clamp(box_px.cx() / stride - cell_x, eps, 1 - eps);
    const double fy = std::clamp(box_px.cy() / stride - cell_y, eps, 1 - eps);
    return {logit(fx), logit(fy), std::log(std::max(box_px.width(), eps) / anchor.first),
            std::log(std::max(box_px.height(), eps) / anchor.second)};
}

namespace {
std::array<std::pair<double, double>, 3> scale_anchors(const DetectorSpec& spec, int s) {
    return {spec.anchor(s, 0), spec.anchor(s, 1), spec.anchor(s, 2)};
}
}  // namespace

template <typename T>
std::vector<std::vector<Detection>> postprocess(const RawPrediction<T>& raw, const DetectorSpec& spec,
                                                double conf_threshold, double iou_threshold) {
    if (raw.size() != 3) throw std::invalid_argument("postprocess: expected 3 scales");
    const int batch = raw[0].dim(0);
    const double size = spec.input_size;
    std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        std::vector<Detection> cands;
        for (int s = 0; s < 3; ++s) {
            for (const auto& d : decode_boxes(raw[s], i, scale_anchors(spec, s), kDetectionStrides[s], spec.num_classes)) {
                const auto best = std::max_element(d.class_scores.begin(), d.class_scores.end());
                const double conf = d.objectness * *best;
                if (conf < conf_threshold) continue;
                Box b{std::clamp(d.box.x_min, 0.0, size), std::clamp(d.box.y_min, 0.0, size),
                      std::clamp(d.box.x_max, 0.0, size), std::clamp(d.box.y_max, 0.0, size)};
                if (b.width() <= 0 || b.height() <= 0) continue;
                cands.push_back({b, int(best - d.class_scores.begin()), conf});
            }
        }
        out[i] = diou_nms(cands, iou_threshold, conf_threshold);
    }
    return out;
}

std::int64_t TargetAssignment::raw_index(const DetectorSpec& spec, int scale, int image, int anchor, int channel,
                                         int y, int x) {
    const std::int64_t g = spec.grid(scale);
    const std::int64_t channels = kAnchorsPerScale * spec.channels_per_anchor();
    const std::int64_t c = std::int64_t(anchor) * spec.channels_per_anchor() + channel;
    return ((std::int64_t(image) * channels + c) * g + y) * g + x;
}

TargetAssignment assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const DetectorSpec& spec) {
    TargetAssignment out;
    out.batch = static_cast<int>(gts.size());
    out.gt_boxes_px.resize(gts.size());
    const double size = spec.input_size;
    std::map<std::tuple<int, int, int, int, int>, std::size_t> occupied;
    for (int i = 0; i < out.batch; ++i) {
        for (const auto& gt : gts[i]) {
            if (gt.class_id < 0 || gt.class_id >= spec.num_classes)
                throw std::invalid_argument("assign_targets: class id " + std::to_string(gt.class_id) +
                                            " outside [0, " + std::to_string(spec.num_classes) + ")");
            const Box px = gt.box.scaled(size, size);
            if (px.width() <= 0 || px.height() <= 0) continue;
            out.gt_boxes_px[i].push_back(px);
            int best = 0;
            double best_iou = -1;
            for (int k = 0; k < 9; ++k) {
                const auto [aw, ah] = spec.anchors.wh[static_cast<std::size_t>(k)];
                const double v = wh_iou(px.width(), px.height(), aw, ah);
                if (v > best_iou) best_iou = v, best = k;
            }
            PositiveTarget p;
            p.image = i;
            p.scale = best / kAnchorsPerScale;
            p.anchor = best % kAnchorsPerScale;
            const int stride = kDetectionStrides[p.scale];
            const int g = spec.grid(p.scale);
            p.cell_x = std::clamp(int(std::floor(px.cx() / stride)), 0, g - 1);
            p.cell_y = std::clamp(int(std::floor(px.cy() / stride)), 0, g - 1);
            p.class_id = gt.class_id;
            p.box_px = px;
            const auto key = std::make_tuple(i, p.scale, p.anchor, p.cell_y, p.cell_x);
            if (auto it = occupied.find(key); it != occupied.end()) {
                std::ostringstream msg;
                msg << "image " << i << ": two boxes share scale " << p.scale << " anchor " << p.anchor << " cell ("
                    << p.cell_x << ", " << p.cell_y << "); keeping the later one";
                out.warnings.push_back(msg.str());
                out.positives[it->second] = p;
            } else {
                occupied.emplace(key, out.positives.size());
                out.positives.push_back(p);
            }
        }
    }
    return out;
}

TargetAssignment assign_targets(const std::vector<GroundTruth>& gts, const DetectorSpec& spec) {
    return assign_targets(std::vector<std::vector<GroundTruth>>{gts}, spec);
}

template <typename T>
DetectionLoss<T> detection_loss(const RawPrediction<T>& raw, const TargetAssignment& assignment,
                                const DetectorSpec& spec) {
    if (raw.size() != 3) throw std::invalid_argument("detection_loss: expected 3 scales");
    const int batch = assignment.batch;
    const int per_anchor = spec.channels_per_anchor();
    for (int s = 0; s < 3; ++s) {
        const Shape want{batch, kAnchorsPerScale * per_anchor, spec.grid(s), spec.grid(s)};
        if (raw[s].shape() != want)
            throw std::invalid_argument("detection_loss: scale " + std::to_string(s) + " expected " +
                                        shape_str(want) + ", got " + shape_str(raw[s].shape()));
    }

    DetectionLoss<T> out;
    std::vector<Tensor<T>> obj_terms;
    int obj_count = 0;
    std::vector<Tensor<T>> tx, ty, tw, th, cls_logits;
    std::vector<T> cell_x, cell_y, strides, anchor_w, anchor_h, target_box, cls_target;

    for (int s = 0; s < 3; ++s) {
        const int g = spec.grid(s);
        const int stride = kDetectionStrides[s];
        std::vector<char> positive(static_cast<std::size_t>(batch) * kAnchorsPerScale * g * g, 0);
        auto slot = [&](int i, int a, int y, int x) { return ((std::size_t(i) * kAnchorsPerScale + a) * g + y) * g + x; };

        std::vector<std::int64_t> idx[4], cls_idx;
        for (const auto& p : assignment.positives) {
            if (p.scale != s) continue;
            positive[slot(p.image, p.anchor, p.cell_y, p.cell_x)] = 1;
            for (int c = 0; c < 4; ++c)
                idx[c].push_back(TargetAssignment::raw_index(spec, s, p.image, p.anchor, c, p.cell_y, p.cell_x));
            for (int c = 0; c < spec.num_classes; ++c) {
                cls_idx.push_back(TargetAssignment::raw_index(spec, s, p.image, p.anchor, 5 + c, p.cell_y, p.cell_x));
                cls_target.push_back(T(c == p.class_id ? 1 : 0));
            }
            const auto [aw, ah] = spec.anchor(s, p.anchor);
            cell_x.push_back(T(p.cell_x));
            cell_y.push_back(T(p.cell_y));
            strides.push_back(T(stride));
            anchor_w.push_back(T(aw));
            anchor_h.push_back(T(ah));
            for (double v : {p.box_px.cx(), p.box_px.cy(), p.box_px.width(), p.box_px.height()}) target_box.push_back(T(v));
        }
        if (!idx[0].empty()) {
            tx.push_back(gather(raw[s], idx[0]));
            ty.push_back(gather(raw[s], idx[1]));
            tw.push_back(gather(raw[s], idx[2]));
            th.push_back(gather(raw[s], idx[3]));
            cls_logits.push_back(gather(raw[s], cls_idx));
        }

        // Objectness over every prediction, with overlapping non-positives ignored.
        std::vector<std::int64_t> obj_idx;
        obj_idx.reserve(positive.size());
        Array<T> targets(static_cast<Eigen::Index>(positive.size()));
        Array<T> weights(static_cast<Eigen::Index>(positive.size()));
        Eigen::Index k = 0;
        for (int i = 0; i < batch; ++i) {
            const auto& gts = assignment.gt_boxes_px[static_cast<std::size_t>(i)];
            const auto decoded = decode_boxes(raw[s], i, scale_anchors(spec, s), stride, spec.num_classes);
            for (const auto& d : decoded) {
                const bool pos = positive[slot(i, d.anchor, d.cell_y, d.cell_x)];
                bool ignore = false;
                if (!pos)
                    for (const auto& b : gts)
                        if (iou(d.box, b) > spec.ignore_threshold) {
                            ignore = true;
                            break;
                        }
                obj_idx.push_back(TargetAssignment::raw_index(spec, s, i, d.anchor, 4, d.cell_y, d.cell_x));
                targets[k] = T(pos ? 1 : 0);
                weights[k] = T(ignore ? 0 : 1);
                out.ignored += ignore;
                obj_count += !ignore;
                ++k;
            }
        }
        obj_terms.push_back(bce_with_logits(gather(raw[s], obj_idx), targets, weights));
    }

    Tensor<T> obj = scale(add(add(obj_terms[0], obj_terms[1]), obj_terms[2]), T(1) / T(std::max(obj_count, 1)));
    out.obj = double(obj.item());
    Tensor<T> total = scale(obj, T(spec.loss.obj));

    const int num_pos = static_cast<int>(cell_x.size());
    if (num_pos > 0) {
        auto as_array = [](const std::vector<T>& v) {
            return Array<T>(Eigen::Map<const Array<T>>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        const Array<T> stride_a = as_array(strides);
        Tensor<T> cx = mul_constant(add_constant(sigmoid(concat(tx, 0)), as_array(cell_x)), stride_a);
        Tensor<T> cy = mul_constant(add_constant(sigmoid(concat(ty, 0)), as_array(cell_y)), stride_a);
        const T lim = T(kMaxSizeLogit);
        Tensor<T> bw = mul_constant(exp(clamp(concat(tw, 0), -lim, lim)), as_array(anchor_w));
        Tensor<T> bh = mul_constant(exp(clamp(concat(th, 0), -lim, lim)), as_array(anchor_h));
        Tensor<T> pred = concat<T>({reshape(cx, {num_pos, 1}), reshape(cy, {num_pos, 1}), reshape(bw, {num_pos, 1}),
                                    reshape(bh, {num_pos, 1})},
                                   1);
        Tensor<T> box = mean(ciou_loss(pred, as_array(target_box)));
        const Array<T> cls_t = as_array(cls_target);
        Tensor<T> cls = scale(bce_with_logits(concat(cls_logits, 0), cls_t, Array<T>(Array<T>::Ones(cls_t.size()))),
                              T(1) / T(cls_t.size()));
        out.box = double(box.item());
        out.cls = double(cls.item());
        total = add(total, add(scale(box, T(spec.loss.box)), scale(cls, T(spec.loss.cls))));
    }
    out.total = total;
    return out;
}

#define MRHAM_INSTANTIATE_DETECTOR(T)                                                                               \
    template Tensor<T> spp_pool(const Tensor<T>&);                                                                  \
    template class Neck<T>;                                                                                         \
    template class Detector<T>;                                                                                     \
    template std::array<Tensor<T>, 3> neck_forward(Neck<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                   const ForwardContext&);                                          \
    template std::vector<DecodedBox> decode_boxes(const Tensor<T>&, int,                                            \
                                                  const std::array<std::pair<double, double>, 3>&, int, int);       \
    template std::vector<std::vector<Detection>> postprocess(const RawPrediction<T>&, const DetectorSpec&, double,  \
                                                             double);                                               \
    template DetectionLoss<T> detection_loss(const RawPrediction<T>&, const TargetAssignment&, const DetectorSpec&);

MRHAM_INSTANTIATE_DETECTOR(float)
MRHAM_INSTANTIATE_DETECTOR(double)

}  // namespace mrham
