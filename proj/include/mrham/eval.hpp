#pragma once

#include "mrham/boxes.hpp"
#include "mrham/detector.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mrham {

struct MatchCounts {
    int tp = 0, fp = 0, fn = 0;

    MatchCounts& operator+=(const MatchCounts& o) {
        tp += o.tp, fp += o.fp, fn += o.fn;
        return *this;
    }
};

struct MatchResult {
    std::vector<MatchCounts> per_class;
    MatchCounts total;
    std::vector<char> is_tp;  // aligned with the input detections
};

/// Per class, detections in descending confidence (ties keep input order) each
/// take the unmatched same-class ground truth of highest IoU >= threshold.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                             int num_classes, double iou_threshold = 0.5);

struct PRF1 {
    double precision = 0, recall = 0, f1 = 0;
};

/// P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R); each is 0 when its denominator is.
PRF1 precision_recall_f1(const MatchCounts& counts);
double f1_score(double precision, double recall);

/// Precision/recall after each detection of one class, swept by confidence.
struct PRCurve {
    std::vector<double> precision, recall;
    int num_gt = 0;
};

/// Builds a curve from TP/FP flags already sorted by descending confidence.
PRCurve pr_curve(const std::vector<char>& tp_sorted, int num_gt);

/// All-point interpolated AP: area under the monotone precision envelope.
double average_precision(const PRCurve& curve);

/// Unweighted mean over the classes that have ground truth.
double map50(const std::vector<double>& ap, const std::vector<int>& num_gt);

struct ClassReport {
    std::string name;
    double ap = 0, precision = 0, recall = 0, f1 = 0;
    int num_gt = 0;
};

struct EvalReport {
    std::vector<ClassReport> per_class;
    double map50 = 0, precision = 0, recall = 0, f1 = 0;
    double conf_threshold = 0.25, iou_threshold = 0.5;
    std::optional<double> fps;
    std::vector<std::string> notes;

    std::string to_json() const;
    std::string to_table() const;
};

/// AP/mAP over all detections; P/R/F1 over detections with confidence >=
/// conf_threshold. Detections and ground truths share one coordinate frame per image.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<GroundTruth>>& gts,
                               const std::vector<std::string>& class_names, double conf_threshold = 0.25,
                               double iou_threshold = 0.5);

/// Fraction of rows whose label scores among the k highest (ties count against).
template <typename T>
double topk_accuracy(const Tensor<T>& scores, const std::vector<int>& labels, int k);

/// iters / seconds over timed calls after `warmup` untimed calls.
double fps_benchmark(const std::function<void()>& infer, int warmup, int iters);
/// Inference-mode forward passes of one input_size image, postprocessing included.
double fps_benchmark(Detector<float>& model, int warmup, int iters);

}  // namespace mrham
