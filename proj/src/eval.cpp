#include "mrham/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mrham {

namespace {

std::vector<int> by_confidence(const std::vector<Detection>& dets) {
    std::vector<int> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].confidence > dets[b].confidence; });
    return order;
}

}  // namespace

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                             int num_classes, double iou_threshold) {
    if (num_classes < 1) throw std::invalid_argument("match_detections: num_classes must be >= 1");
    MatchResult out;
    out.per_class.assign(static_cast<std::size_t>(num_classes), {});
    out.is_tp.assign(dets.size(), 0);
    std::vector<char> taken(gts.size(), 0);
    for (int i : by_confidence(dets)) {
        const Detection& d = dets[i];
        if (d.class_id < 0 || d.class_id >= num_classes)
            throw std::invalid_argument("match_detections: detection class " + std::to_string(d.class_id) +
                                        " out of range");
        int best = -1;
        double best_iou = iou_threshold;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].class_id != d.class_id) continue;
            const double v = iou(d.box, gts[g].box);
            if (v >= best_iou && (best < 0 || v > best_iou)) best = static_cast<int>(g), best_iou = v;
        }
        auto& c = out.per_class[static_cast<std::size_t>(d.class_id)];
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = 1;
            out.is_tp[static_cast<std::size_t>(i)] = 1;
            ++c.tp;
        } else {
            ++c.fp;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        const int cls = gts[g].class_id;
        if (cls < 0 || cls >= num_classes)
            throw std::invalid_argument("match_detections: ground-truth class " + std::to_string(cls) +
                                        " out of range");
        if (!taken[g]) ++out.per_class[static_cast<std::size_t>(cls)].fn;
    }
    for (const auto& c : out.per_class) out.total += c;
    return out;
}

double f1_score(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

PRF1 precision_recall_f1(const MatchCounts& c) {
    PRF1 out;
    out.precision = c.tp + c.fp > 0 ? double(c.tp) / (c.tp + c.fp) : 0.0;
    out.recall = c.tp + c.fn > 0 ? double(c.tp) / (c.tp + c.fn) : 0.0;
    out.f1 = f1_score(out.precision, out.recall);
    return out;
}

PRCurve pr_curve(const std::vector<char>& tp_sorted, int num_gt) {
    PRCurve curve;
    curve.num_gt = num_gt;
    int tp = 0, fp = 0;
    for (char flag : tp_sorted) {
        flag ? ++tp : ++fp;
        curve.precision.push_back(double(tp) / (tp + fp));
        curve.recall.push_back(num_gt > 0 ? double(tp) / num_gt : 0.0);
    }
    return curve;
}

double average_precision(const PRCurve& curve) {
    if (curve.num_gt <= 0 || curve.recall.empty()) return 0.0;
    const std::size_t n = curve.recall.size();
    std::vector<double> envelope(curve.precision);
    for (std::size_t i = n - 1; i-- > 0;) envelope[i] = std::max(envelope[i], envelope[i + 1]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (curve.recall[i] - prev_recall) * envelope[i];
        prev_recall = curve.recall[i];
    }
    return ap;
}

double map50(const std::vector<double>& ap, const std::vector<int>& num_gt) {
    if (ap.size() != num_gt.size()) throw std::invalid_argument("map50: size mismatch");
    double sum = 0;
    int n = 0;
    for (std::size_t c = 0; c < ap.size(); ++c)
        if (num_gt[c] > 0) sum += ap[c], ++n;
    return n > 0 ? sum / n : 0.0;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<GroundTruth>>& gts,
                               const std::vector<std::string>& class_names, double conf_threshold,
                               double iou_threshold) {
    if (dets.size() != gts.size()) throw std::invalid_argument("evaluate_detections: image count mismatch");
    const int nc = static_cast<int>(class_names.size());
    EvalReport report;
    report.conf_threshold = conf_threshold;
    report.iou_threshold = iou_threshold;

    // Confidence sweep per class across all images.
    struct Scored {
        double confidence;
        std::size_t image, index;
        char tp;
    };
    std::vector<std::vector<Scored>> scored(static_cast<std::size_t>(nc));
    std::vector<int> num_gt(static_cast<std::size_t>(nc), 0);
    std::vector<MatchCounts> at_threshold(static_cast<std::size_t>(nc));
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const MatchResult all = match_detections(dets[i], gts[i], nc, iou_threshold);
        for (std::size_t k = 0; k < dets[i].size(); ++k)
            scored[static_cast<std::size_t>(dets[i][k].class_id)].push_back(
                {dets[i][k].confidence, i, k, all.is_tp[k]});
        for (const auto& g : gts[i]) ++num_gt[static_cast<std::size_t>(g.class_id)];

        std::vector<Detection> kept;
        for (const auto& d : dets[i])
            if (d.confidence >= conf_threshold) kept.push_back(d);
        const MatchResult op = match_detections(kept, gts[i], nc, iou_threshold);
        for (int c = 0; c < nc; ++c) at_threshold[static_cast<std::size_t>(c)] += op.per_class[static_cast<std::size_t>(c)];
    }

    std::vector<double> aps(static_cast<std::size_t>(nc), 0.0);
    MatchCounts total;
    for (int c = 0; c < nc; ++c) {
        auto& list = scored[static_cast<std::size_t>(c)];
        std::stable_sort(list.begin(), list.end(), [](const Scored& a, const Scored& b) {
            if (a.confidence != b.confidence) return a.confidence > b.confidence;
            return a.image != b.image ? a.image < b.image : a.index < b.index;
        });
        std::vector<char> flags;
        for (const auto& s : list) flags.push_back(s.tp);
        aps[static_cast<std::size_t>(c)] = average_precision(pr_curve(flags, num_gt[static_cast<std::size_t>(c)]));
        const auto& counts = at_threshold[static_cast<std::size_t>(c)];
        total += counts;
        const PRF1 m = precision_recall_f1(counts);
        report.per_class.push_back({class_names[static_cast<std::size_t>(c)], aps[static_cast<std::size_t>(c)],
                                    m.precision, m.recall, m.f1, num_gt[static_cast<std::size_t>(c)]});
        if (num_gt[static_cast<std::size_t>(c)] == 0)
            report.notes.push_back("class " + class_names[static_cast<std::size_t>(c)] +
                                   " has no ground truth; excluded from mAP");
    }
    report.map50 = map50(aps, num_gt);
    const PRF1 m = precision_recall_f1(total);
    report.precision = m.precision;
    report.recall = m.recall;
    report.f1 = m.f1;
    return report;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json classes = nlohmann::ordered_json::object();
    for (const auto& c : per_class)
        classes[c.name] = {{"ap", c.ap}, {"p", c.precision}, {"r", c.recall}, {"f1", c.f1}, {"n_gt", c.num_gt}};
    j["per_class"] = classes;
    j["map50"] = map50;
    j["p"] = precision;
    j["r"] = recall;
    j["f1"] = f1;
    j["conf_threshold"] = conf_threshold;
    j["iou_threshold"] = iou_threshold;
    if (fps) j["fps"] = *fps;
    if (!notes.empty()) j["notes"] = notes;
    return j.dump(2);
}

std::string EvalReport::to_table() const {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %6s %7s %7s %7s %7s\n", "class", "n_gt", "AP50", "P", "R", "F1");
    out << line;
    for (const auto& c : per_class) {
        std::snprintf(line, sizeof line, "%-10s %6d %7.3f %7.3f %7.3f %7.3f\n", c.name.c_str(), c.num_gt, c.ap,
                      c.precision, c.recall, c.f1);
        out << line;
    }
    std::snprintf(line, sizeof line, "%-10s %6s %7.3f %7.3f %7.3f %7.3f\n", "all", "", map50, precision, recall, f1);
    out << line;
    if (fps) {
        std::snprintf(line, sizeof line, "FPS %.2f\n", *fps);
        out << line;
    }
    for (const auto& n : notes) out << "note: " << n << '\n';
    return out.str();
}

template <typename T>
double topk_accuracy(const Tensor<T>& scores, const std::vector<int>& labels, int k) {
    if (scores.rank() != 2 || scores.dim(0) != static_cast<int>(labels.size()))
        throw std::invalid_argument("topk_accuracy: expected N x K scores for " + std::to_string(labels.size()) +
                                    " labels, got " + shape_str(scores.shape()));
    const int n = scores.dim(0), classes = scores.dim(1);
    if (k < 1 || k > classes)
        throw std::invalid_argument("topk_accuracy: k = " + std::to_string(k) + " outside [1, " +
                                    std::to_string(classes) + "]");
    if (n == 0) return 0.0;
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= classes) throw std::invalid_argument("topk_accuracy: label out of range");
        const T* row = scores.data() + std::int64_t(i) * classes;
        // Ties with the true class count as ranked above it.
        int above = 0;
        for (int c = 0; c < classes; ++c)
            if (c != label && row[c] >= row[label]) ++above;
        hits += above < k;
    }
    return double(hits) / n;
}

template double topk_accuracy(const Tensor<float>&, const std::vector<int>&, int);
template double topk_accuracy(const Tensor<double>&, const std::vector<int>&, int);

double fps_benchmark(const std::function<void()>& infer, int warmup, int iters) {
    if (iters < 1 || warmup < 0) throw std::invalid_argument("fps_benchmark: iters must be >= 1, warmup >= 0");
    for (int i = 0; i < warmup; ++i) infer();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) infer();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return iters / std::max(seconds, 1e-12);
}

double fps_benchmark(Detector<float>& model, int warmup, int iters) {
    const int s = model.spec().input_size;
    Rng rng(0);
    Array<float> values(3 * s * s);
    for (auto& v : values) v = float(rng.uniform());
    const Tensor<float> image({1, 3, s, s}, values);
    return fps_benchmark(
        [&] {
            NoGradGuard guard;
            const auto raw = model.forward(image, {});
            (void)postprocess(raw, model.spec());
        },
        warmup, iters);
}

}  // namespace mrham
