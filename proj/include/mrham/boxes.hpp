#pragma once

#include "mrham/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace mrham {

/// Axis-aligned rectangle in pixel or normalized coordinates.
struct Box {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_max >= x_min && y_max >= y_min; }

    static Box from_center(double cx, double cy, double w, double h) {
        return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }
    Box scaled(double sx, double sy) const { return {x_min * sx, y_min * sy, x_max * sx, y_max * sy}; }
};

/// Labelled box, normalized to [0, 1] unless stated otherwise.
struct GroundTruth {
    int class_id = 0;
    Box box;
};

struct Detection {
    Box box;
    int class_id = 0;
    double confidence = 0;
};

/// Anchor (w, h) pairs, ascending by area.
struct AnchorSet {
    std::vector<std::pair<double, double>> wh;

    std::size_t size() const { return wh.size(); }
    void validate() const;
    void sort_by_area();
};

double iou(const Box& a, const Box& b);

/// Squared center distance over squared diagonal of the smallest enclosing box.
double center_distance_penalty(const Box& a, const Box& b);

/// IoU - rho^2/c^2.
double diou(const Box& a, const Box& b);

/// IoU - rho^2/c^2 - alpha * v, with the aspect term guarded against zero heights.
double ciou(const Box& a, const Box& b);
inline double ciou_loss(const Box& a, const Box& b) { return 1.0 - ciou(a, b); }

/// Trade-off weight alpha = v / ((1 - IoU) + v) of the CIoU aspect term.
double ciou_alpha(const Box& a, const Box& b);
/// CIoU with the aspect weight supplied by the caller.
double ciou_fixed_alpha(const Box& a, const Box& b, double alpha);

/// While alive, tensor CIoU losses on this thread also differentiate through
/// alpha. Used to verify the adjoint against finite differences.
class ExactCiouGradient {
public:
    ExactCiouGradient();
    ~ExactCiouGradient();
    ExactCiouGradient(const ExactCiouGradient&) = delete;
    ExactCiouGradient& operator=(const ExactCiouGradient&) = delete;

private:
    bool previous_;
};

/// Differentiable per-row CIoU loss. `pred` is K x 4 in (cx, cy, w, h); `target`
/// holds K x 4 constants in the same layout. alpha is held constant in the adjoint.
template <typename T>
Tensor<T> ciou_loss(const Tensor<T>& pred, const Array<T>& target);

/// Per class: drop detections below conf_threshold, then greedily keep the most
/// confident and suppress any other with DIoU(kept, other) >= iou_threshold.
/// Survivors are ordered by confidence, ties by input order.
std::vector<Detection> diou_nms(const std::vector<Detection>& dets, double iou_threshold = 0.45,
                                double conf_threshold = 0.25);

/// IoU of two boxes sharing a center.
double wh_iou(double w1, double h1, double w2, double h2);

struct KMeansResult {
    AnchorSet anchors;
    double mean_best_iou = 0;
    int iterations = 0;
    std::vector<double> history;  // mean best-IoU after each accepted iteration
};

/// k-means over (w, h) pairs with distance 1 - IoU of co-centered boxes. Each
/// restart samples k boxes without replacement from its own seeded stream; the
/// run with the highest mean best-IoU is returned.
KMeansResult kmeans_anchors(const std::vector<std::pair<double, double>>& wh, int k, std::uint64_t seed,
                            int max_iterations = 300, int restarts = 10);

/// Mean over boxes of the best co-centered IoU against any centroid.
double mean_best_iou(const std::vector<std::pair<double, double>>& wh,
                     const std::vector<std::pair<double, double>>& centroids);

void save_anchors(const std::filesystem::path& path, const AnchorSet& anchors);
AnchorSet load_anchors(const std::filesystem::path& path);

}  // namespace mrham
