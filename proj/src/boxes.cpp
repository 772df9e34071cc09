#include "mrham/boxes.hpp"

#include "mrham/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mrham {

namespace {

constexpr double kAspectEps = 1e-9;

// Forward-mode number carrying d/d(pred cx, cy, w, h).
template <typename T>
struct Dual {
    T v;
    Eigen::Array<T, 4, 1> d;

    Dual(T value = T(0)) : v(value), d(Eigen::Array<T, 4, 1>::Zero()) {}
    static Dual seed(T value, int i) {
        Dual x(value);
        x.d[i] = T(1);
        return x;
    }
};

template <typename T> Dual<T> operator+(Dual<T> a, const Dual<T>& b) { a.v += b.v; a.d += b.d; return a; }
template <typename T> Dual<T> operator-(Dual<T> a, const Dual<T>& b) { a.v -= b.v; a.d -= b.d; return a; }
template <typename T> Dual<T> operator-(Dual<T> a) { a.v = -a.v; a.d = -a.d; return a; }
template <typename T> Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
    Dual<T> r(a.v * b.v);
    r.d = a.d * b.v + b.d * a.v;
    return r;
}
template <typename T> Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
    Dual<T> r(a.v / b.v);
    r.d = (a.d * b.v - b.d * a.v) / (b.v * b.v);
    return r;
}
template <typename T> Dual<T> atan(const Dual<T>& a) {
    Dual<T> r(std::atan(a.v));
    r.d = a.d / (T(1) + a.v * a.v);
    return r;
}
template <typename T> const Dual<T>& dmin(const Dual<T>& a, const Dual<T>& b) { return b.v < a.v ? b : a; }
template <typename T> const Dual<T>& dmax(const Dual<T>& a, const Dual<T>& b) { return b.v > a.v ? b : a; }
template <typename T> T value_of(const Dual<T>& a) { return a.v; }

inline double dmin(double a, double b) { return std::min(a, b); }
inline double dmax(double a, double b) { return std::max(a, b); }
inline double value_of(double a) { return a; }
using std::atan;

// CIoU of a predicted (cx, cy, w, h) against a target, generic over the number type.
thread_local bool t_exact_alpha = false;

template <typename U>
U ciou_core(const U& pcx, const U& pcy, const U& pw, const U& ph, const U& tcx, const U& tcy, const U& tw,
            const U& th, bool exact_alpha = false) {
    const U half(0.5);
    const U px1 = pcx - pw * half, px2 = pcx + pw * half, py1 = pcy - ph * half, py2 = pcy + ph * half;
    const U tx1 = tcx - tw * half, tx2 = tcx + tw * half, ty1 = tcy - th * half, ty2 = tcy + th * half;
    const U zero(0);
    const U iw = dmax(dmin(px2, tx2) - dmax(px1, tx1), zero);
    const U ih = dmax(dmin(py2, ty2) - dmax(py1, ty1), zero);
    const U inter = iw * ih;
    const U uni = pw * ph + tw * th - inter;
    const U iou_v = value_of(uni) > 0 ? inter / uni : zero;
    const U cw = dmax(px2, tx2) - dmin(px1, tx1);
    const U chh = dmax(py2, ty2) - dmin(py1, ty1);
    const U c2 = cw * cw + chh * chh;
    const U dx = pcx - tcx, dy = pcy - tcy;
    const U rho2 = dx * dx + dy * dy;
    const U dist = value_of(c2) > 0 ? rho2 / c2 : zero;
    const U eps(kAspectEps);
    const U da = atan(pw / (ph + eps)) - atan(tw / (th + eps));
    const U v = U(4.0 / (std::numbers::pi * std::numbers::pi)) * da * da;
    const auto v_value = value_of(v);
    using S = decltype(v_value);
    const double denom = (1.0 - double(value_of(iou_v))) + double(v_value);
    if (exact_alpha) {
        const U alpha = denom > 0 ? v / ((U(1) - iou_v) + v) : zero;
        return iou_v - dist - alpha * v;
    }
    const U alpha(denom > 0 ? S(double(v_value) / denom) : S(0));
    return iou_v - dist - alpha * v;
}

double intersection(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    return iw * ih;
}

}  // namespace

void AnchorSet::validate() const {
    for (std::size_t i = 0; i < wh.size(); ++i) {
        if (!(wh[i].first > 0 && wh[i].second > 0))
            throw std::invalid_argument("anchor " + std::to_string(i) + " has non-positive dimensions");
        if (i > 0 && wh[i].first * wh[i].second < wh[i - 1].first * wh[i - 1].second)
            throw std::invalid_argument("anchors must be sorted by ascending area");
    }
}

void AnchorSet::sort_by_area() {
    std::stable_sort(wh.begin(), wh.end(),
                     [](const auto& a, const auto& b) { return a.first * a.second < b.first * b.second; });
}

double iou(const Box& a, const Box& b) {
    const double inter = intersection(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double center_distance_penalty(const Box& a, const Box& b) {
    const double cw = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
    const double ch = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
    const double c2 = cw * cw + ch * ch;
    if (c2 <= 0) return 0.0;
    const double dx = a.cx() - b.cx(), dy = a.cy() - b.cy();
    return (dx * dx + dy * dy) / c2;
}

double diou(const Box& a, const Box& b) { return iou(a, b) - center_distance_penalty(a, b); }

ExactCiouGradient::ExactCiouGradient() : previous_(t_exact_alpha) { t_exact_alpha = true; }
ExactCiouGradient::~ExactCiouGradient() { t_exact_alpha = previous_; }

double ciou_fixed_alpha(const Box& a, const Box& b, double alpha) {
    const double da = std::atan(a.width() / (a.height() + kAspectEps)) - std::atan(b.width() / (b.height() + kAspectEps));
    const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * da * da;
    return iou(a, b) - center_distance_penalty(a, b) - alpha * v;
}

double ciou_alpha(const Box& a, const Box& b) {
    const double da = std::atan(a.width() / (a.height() + kAspectEps)) - std::atan(b.width() / (b.height() + kAspectEps));
    const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * da * da;
    const double denom = (1.0 - iou(a, b)) + v;
    return denom > 0 ? v / denom : 0.0;
}

double ciou(const Box& a, const Box& b) {
    return ciou_core<double>(a.cx(), a.cy(), a.width(), a.height(), b.cx(), b.cy(), b.width(), b.height());
}

template <typename T>
Tensor<T> ciou_loss(const Tensor<T>& pred, const Array<T>& target) {
    if (pred.rank() != 2 || pred.dim(1) != 4 || target.size() != pred.numel())
        throw std::invalid_argument("ciou_loss: expected K x 4 predictions and matching targets, got " +
                                    shape_str(pred.shape()));
    const int k = pred.dim(0);
    Array<T> out(k);
    Array<T> jac(4 * k);
    for (int i = 0; i < k; ++i) {
        const T* p = pred.data() + 4 * i;
        const T* t = target.data() + 4 * i;
        using D = Dual<T>;
        const D c = ciou_core<D>(D::seed(p[0], 0), D::seed(p[1], 1), D::seed(p[2], 2), D::seed(p[3], 3), D(t[0]),
                                 D(t[1]), D(t[2]), D(t[3]), t_exact_alpha);
        out[i] = T(1) - c.v;
        jac.segment(4 * i, 4) = -c.d;
    }
    return make_result<T>({k}, std::move(out), {pred}, [jac, k](Node<T>& n) {
        Node<T>& x = *n.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int i = 0; i < k; ++i) x.grad.segment(4 * i, 4) += n.grad[i] * jac.segment(4 * i, 4);
    });
}

template Tensor<float> ciou_loss(const Tensor<float>&, const Array<float>&);
template Tensor<double> ciou_loss(const Tensor<double>&, const Array<double>&);

std::vector<Detection> diou_nms(const std::vector<Detection>& dets, double iou_threshold, double conf_threshold) {
    if (!(iou_threshold > 0 && iou_threshold < 1) || !(conf_threshold > 0 && conf_threshold < 1))
        throw std::invalid_argument("diou_nms: thresholds must lie in (0, 1)");
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].confidence >= conf_threshold) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
    std::vector<bool> suppressed(dets.size(), false);
    std::vector<Detection> kept;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (suppressed[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (diou(dets[i].box, dets[j].box) >= iou_threshold) suppressed[j] = true;
        }
    }
    return kept;
}

double wh_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    const double uni = w1 * h1 + w2 * h2 - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double mean_best_iou(const std::vector<std::pair<double, double>>& wh,
                     const std::vector<std::pair<double, double>>& centroids) {
    if (wh.empty()) return 0.0;
    double total = 0;
    for (const auto& [w, h] : wh) {
        double best = 0;
        for (const auto& [cw, ch] : centroids) best = std::max(best, wh_iou(w, h, cw, ch));
        total += best;
    }
    return total / double(wh.size());
}

namespace {

// Centroid update for the 1 - IoU distance: start from the mean of the members
// and pattern-search (w, h) for the largest summed IoU.
std::pair<double, double> iou_center(const std::vector<std::pair<double, double>>& members,
                                     std::pair<double, double> start) {
    auto score = [&](double w, double h) {
        double total = 0;
        for (const auto& [mw, mh] : members) total += wh_iou(mw, mh, w, h);
        return total;
    };
    double w = start.first, h = start.second, best = score(w, h);
    double step = 0.25;
    while (step > 1e-7) {
        bool moved = false;
        for (const auto& [fw, fh] : {std::pair{1.0 + step, 1.0}, std::pair{1.0 / (1.0 + step), 1.0},
                                     std::pair{1.0, 1.0 + step}, std::pair{1.0, 1.0 / (1.0 + step)},
                                     std::pair{1.0 + step, 1.0 + step},
                                     std::pair{1.0 / (1.0 + step), 1.0 / (1.0 + step)}}) {
            const double v = score(w * fw, h * fh);
            if (v > best) {
                best = v, w *= fw, h *= fh, moved = true;
                break;
            }
        }
        if (!moved) step *= 0.5;
    }
    return {w, h};
}

KMeansResult kmeans_once(const std::vector<std::pair<double, double>>& wh, int k, Rng& rng, int max_iterations) {
    std::vector<int> pick = rng.permutation(static_cast<int>(wh.size()));
    std::vector<std::pair<double, double>> centroids;
    for (int i = 0; i < k; ++i) centroids.push_back(wh[static_cast<std::size_t>(pick[static_cast<std::size_t>(i)])]);

    auto assign = [&](const std::vector<std::pair<double, double>>& cs) {
        std::vector<int> a(wh.size());
        for (std::size_t i = 0; i < wh.size(); ++i) {
            int best = 0;
            double best_iou = -1;
            for (int c = 0; c < k; ++c) {
                const double v = wh_iou(wh[i].first, wh[i].second, cs[static_cast<std::size_t>(c)].first,
                                        cs[static_cast<std::size_t>(c)].second);
                if (v > best_iou) {
                    best_iou = v;
                    best = c;
                }
            }
            a[i] = best;
        }
        return a;
    };

    KMeansResult result;
    std::vector<int> labels = assign(centroids);
    double score = mean_best_iou(wh, centroids);
    result.history.push_back(score);
    int it = 0;
    for (; it < max_iterations; ++it) {
        std::vector<std::pair<double, double>> next(static_cast<std::size_t>(k), {0.0, 0.0});
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < wh.size(); ++i) {
            auto& c = next[static_cast<std::size_t>(labels[i])];
            c.first += wh[i].first;
            c.second += wh[i].second;
            ++counts[static_cast<std::size_t>(labels[i])];
        }
        for (int c = 0; c < k; ++c) {
            auto& cc = next[static_cast<std::size_t>(c)];
            if (counts[static_cast<std::size_t>(c)] > 0) {
                cc.first /= counts[static_cast<std::size_t>(c)];
                cc.second /= counts[static_cast<std::size_t>(c)];
                std::vector<std::pair<double, double>> members;
                for (std::size_t i = 0; i < wh.size(); ++i)
                    if (labels[i] == c) members.push_back(wh[i]);
                cc = iou_center(members, cc);
                continue;
            }
            // Empty cluster: reseed at the box worst served by its current centroid.
            std::size_t far = 0;
            double far_d = -1;
            for (std::size_t i = 0; i < wh.size(); ++i) {
                const auto& own = centroids[static_cast<std::size_t>(labels[i])];
                const double d = 1.0 - wh_iou(wh[i].first, wh[i].second, own.first, own.second);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            cc = wh[far];
        }
        const double next_score = mean_best_iou(wh, next);
        if (next_score < score) break;  // keep the objective monotone
        centroids = std::move(next);
        score = next_score;
        result.history.push_back(score);
        std::vector<int> relabel = assign(centroids);
        if (relabel == labels) {
            ++it;
            break;
        }
        labels = std::move(relabel);
    }
    result.anchors.wh = centroids;
    result.anchors.sort_by_area();
    result.mean_best_iou = score;
    result.iterations = it;
    return result;
}

}  // namespace

KMeansResult kmeans_anchors(const std::vector<std::pair<double, double>>& wh, int k, std::uint64_t seed,
                            int max_iterations, int restarts) {
    if (k < 1) throw std::invalid_argument("kmeans_anchors: k must be >= 1");
    if (wh.size() < static_cast<std::size_t>(k))
        throw std::invalid_argument("kmeans_anchors: " + std::to_string(wh.size()) + " boxes for k = " +
                                    std::to_string(k));
    for (const auto& [w, h] : wh)
        if (!(w > 0 && h > 0)) throw std::invalid_argument("kmeans_anchors: box dimensions must be positive");
    if (restarts < 1) throw std::invalid_argument("kmeans_anchors: restarts must be >= 1");

    KMeansResult best;
    for (int r = 0; r < restarts; ++r) {
        Rng rng = Rng::derive(seed, 0x6b6d, static_cast<std::uint64_t>(r));
        KMeansResult run = kmeans_once(wh, k, rng, max_iterations);
        if (r == 0 || run.mean_best_iou > best.mean_best_iou) best = std::move(run);
    }
    return best;
}

void save_anchors(const std::filesystem::path& path, const AnchorSet& anchors) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.setf(std::ios::fixed);
    os.precision(3);
    for (const auto& [w, h] : anchors.wh) os << w << ' ' << h << '\n';
}

AnchorSet load_anchors(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    AnchorSet a;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        double w, h;
        if (!(ls >> w >> h))
            throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 'w h'");
        a.wh.emplace_back(w, h);
    }
    a.validate();
    return a;
}

}  // namespace mrham
