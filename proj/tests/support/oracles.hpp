#pragma once

// Reference implementations written directly from the formulas, kept separate
// from the library so tests compare two independent codings.

#include "mrham/boxes.hpp"
#include "mrham/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace oracle {

using mrham::Box;
using mrham::Detection;
using mrham::GroundTruth;

inline double iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double uni = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline double rho2_over_c2(const Box& a, const Box& b) {
    const double dx = (a.x_min + a.x_max) / 2 - (b.x_min + b.x_max) / 2;
    const double dy = (a.y_min + a.y_max) / 2 - (b.y_min + b.y_max) / 2;
    const double cw = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
    const double ch = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
    const double c2 = cw * cw + ch * ch;
    return c2 > 0 ? (dx * dx + dy * dy) / c2 : 0.0;
}

inline double ciou(const Box& a, const Box& b) {
    const double i = oracle::iou(a, b);
    const double eps = 1e-9;
    const double d = std::atan((a.x_max - a.x_min) / (a.y_max - a.y_min + eps)) -
                     std::atan((b.x_max - b.x_min) / (b.y_max - b.y_min + eps));
    const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * d * d;
    const double alpha = v > 0 ? v / ((1 - i) + v) : 0.0;
    return i - oracle::rho2_over_c2(a, b) - alpha * v;
}

inline Box random_box(mrham::Rng& rng, double extent = 10.0) {
    const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
    return {x, y, x + rng.uniform(0.01, extent / 2), y + rng.uniform(0.01, extent / 2)};
}

/// Quadratic-time suppressor: repeatedly take the best remaining detection of
/// each class and strike out everything too close to it.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr, double conf_thr) {
    std::vector<std::size_t> alive;
    for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].confidence >= conf_thr) alive.push_back(i);
    std::vector<char> removed(dets.size(), 0);
    std::vector<std::size_t> kept;
    for (;;) {
        std::size_t best = dets.size();
        for (std::size_t i : alive) {
            if (removed[i]) continue;
            if (best == dets.size() || dets[i].confidence > dets[best].confidence) best = i;
        }
        if (best == dets.size()) break;
        removed[best] = 1;
        kept.push_back(best);
        for (std::size_t j : alive) {
            if (removed[j] || dets[j].class_id != dets[best].class_id) continue;
            if (oracle::iou(dets[best].box, dets[j].box) - oracle::rho2_over_c2(dets[best].box, dets[j].box) >= iou_thr) removed[j] = 1;
        }
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
    std::vector<Detection> out;
    for (std::size_t i : kept) out.push_back(dets[i]);
    return out;
}

struct Counts {
    int tp = 0, fp = 0, fn = 0;
};

/// Walks detections by descending confidence (ties by index) and scans every
/// ground truth for the best unmatched same-class partner.
inline std::vector<char> match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               double thr, Counts& counts) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
        return a < b;
    });
    std::vector<char> used(gts.size(), 0), tp(dets.size(), 0);
    for (std::size_t d : order) {
        double best = -1;
        std::size_t arg = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].class_id != dets[d].class_id) continue;
            const double o = oracle::iou(dets[d].box, gts[g].box);
            if (o >= thr && o > best) best = o, arg = g;
        }
        if (arg < gts.size()) used[arg] = 1, tp[d] = 1;
    }
    counts = {};
    for (char t : tp) (t ? counts.tp : counts.fp)++;
    for (char u : used)
        if (!u) counts.fn++;
    return tp;
}

/// Step sum: each true positive adds 1/num_gt times the best precision reached
/// at or after it in the ranking.
inline double ap(const std::vector<char>& tp_sorted, int num_gt) {
    if (num_gt == 0) return 0;
    const std::size_t n = tp_sorted.size();
    std::vector<double> prec(n);
    int hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        hits += tp_sorted[i];
        prec[i] = double(hits) / double(i + 1);
    }
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!tp_sorted[i]) continue;
        double best = 0;
        for (std::size_t j = i; j < n; ++j) best = std::max(best, prec[j]);
        sum += best / num_gt;
    }
    return sum;
}

/// mAP over images: per-image matching, then a per-class confidence ranking
/// (ties by image, then detection index) scored with the step sum.
inline double map50(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                    int num_classes, double thr = 0.5) {
    struct Row {
        double conf;
        std::size_t image, index;
        char tp;
    };
    std::vector<std::vector<Row>> rows(static_cast<std::size_t>(num_classes));
    std::vector<int> num_gt(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        Counts c;
        const auto tp = match(dets[i], gts[i], thr, c);
        for (std::size_t k = 0; k < dets[i].size(); ++k)
            rows[static_cast<std::size_t>(dets[i][k].class_id)].push_back({dets[i][k].confidence, i, k, tp[k]});
        for (const auto& g : gts[i]) ++num_gt[static_cast<std::size_t>(g.class_id)];
    }
    double sum = 0;
    int classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (num_gt[static_cast<std::size_t>(c)] == 0) continue;
        auto& r = rows[static_cast<std::size_t>(c)];
        std::sort(r.begin(), r.end(), [](const Row& a, const Row& b) {
            if (a.conf != b.conf) return a.conf > b.conf;
            return a.image != b.image ? a.image < b.image : a.index < b.index;
        });
        std::vector<char> flags;
        for (const auto& x : r) flags.push_back(x.tp);
        sum += ap(flags, num_gt[static_cast<std::size_t>(c)]);
        ++classes;
    }
    return classes ? sum / classes : 0.0;
}

/// Small random detection problem: a few ground truths per image and jittered
/// or spurious detections around them, confidences on a coarse grid so ties occur.
struct Instance {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<GroundTruth>> gts;
};

inline Instance random_instance(mrham::Rng& rng, int num_classes, int images, int max_gt, int max_det) {
    Instance inst;
    for (int i = 0; i < images; ++i) {
        std::vector<GroundTruth> g;
        const int ng = int(rng.below(std::uint64_t(max_gt) + 1));
        for (int k = 0; k < ng; ++k) g.push_back({int(rng.below(std::uint64_t(num_classes))), random_box(rng, 10)});
        std::vector<Detection> d;
        const int nd = int(rng.below(std::uint64_t(max_det) + 1));
        for (int k = 0; k < nd; ++k) {
            Box b = random_box(rng, 10);
            int cls = int(rng.below(std::uint64_t(num_classes)));
            if (!g.empty() && rng.bernoulli(0.7)) {
                const auto& src = g[rng.below(g.size())];
                const double j = rng.uniform(0, 0.6);
                b = {src.box.x_min + rng.uniform(-j, j), src.box.y_min + rng.uniform(-j, j),
                     src.box.x_max + rng.uniform(-j, j), src.box.y_max + rng.uniform(-j, j)};
                if (b.x_max <= b.x_min) std::swap(b.x_min, b.x_max);
                if (b.y_max <= b.y_min) std::swap(b.y_min, b.y_max);
                if (rng.bernoulli(0.85)) cls = src.class_id;
            }
            d.push_back({b, cls, double(1 + rng.below(10)) / 10.0});
        }
        inst.gts.push_back(std::move(g));
        inst.dets.push_back(std::move(d));
    }
    return inst;
}

}  // namespace oracle
