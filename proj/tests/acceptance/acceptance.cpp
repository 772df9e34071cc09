// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion.
// Exit status: 0 all selected passed, 1 any failed, 77 nothing failed but
// something was skipped or is a documented source inconsistency.

#include "mrham/gradcheck.hpp"
#include "mrham/train.hpp"
#include "oracles.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

using namespace mrham;
namespace fs = std::filesystem;

namespace {

enum class Outcome { pass, fail, skip, known_fail };

struct Result {
    Outcome outcome;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng) {
    Array<T> v(shape_numel(s));
    for (auto& x : v) x = T(rng.uniform(-2, 2));
    return Tensor<T>(std::move(s), std::move(v));
}

// ---------------------------------------------------------------------------

Result check_gradient_suite() {
    const auto t0 = Clock::now();
    const auto checks = run_gradient_suite(20, 1e-3);
    const double secs = seconds_since(t0);
    double worst = 0;
    std::string worst_name, failed;
    for (const auto& c : checks) {
        if (c.max_rel_error > worst) worst = c.max_rel_error, worst_name = c.name;
        if (!(c.max_rel_error < 1e-3)) failed += " " + c.name;
    }
    const bool ok = failed.empty() && secs < 120 && !checks.empty();
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("%zu checks x 20 seeds, worst rel err %.2e (%s) < 1e-3, %.1f s < 120 s%s", checks.size(), worst,
                worst_name.c_str(), secs, failed.empty() ? "" : (" failing:" + failed).c_str())};
}

template <typename T>
bool exact(const Tensor<T>& got, const Array<T>& want) {
    return got.values().size() == want.size() && (got.values() == want).all();
}

template <typename T>
int attention_algebra_for(Rng& rng, std::string& why) {
    int checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const int c = 2 * (1 + int(rng.below(24))), h = 1 + int(rng.below(12)), w = 1 + int(rng.below(12));
        const int n = 1 + int(rng.below(3));
        const int r = fit_reduction(c, 16);
        const Tensor<T> m = random_tensor<T>({n, c, h, w}, rng);
        const auto rca0 = RcaConfig<T>::zeros(c, r);
        const auto rsa0 = RsaConfig<T>::zeros(c);
        const auto cbam0 = CbamConfig<T>::zeros(c, r);
        const Array<T> one5 = T(1.5) * m.values();
        if (!exact(rca_forward(m, rca0), one5)) why += " rca";
        if (!exact(rsa_forward(m, rsa0), one5)) why += " rsa";
        if (!exact(cbam_forward(m, cbam0), Array<T>(T(0.25) * m.values()))) why += " cbam";
        for (auto mode : {ArrangementMode::rca_then_rsa, ArrangementMode::rsa_then_rca})
            if (!exact(mrham_forward(m, rca0, rsa0, mode), Array<T>(T(1.5) * one5))) why += " mrham-composed";
        // Dyadic values scale by 1.5 and 2.25 without rounding.
        Array<T> grid(m.numel());
        for (auto& x : grid) x = T(int(rng.below(513)) - 256) / T(128);
        const Tensor<T> d(m.shape(), grid);
        if (!exact(mrham_forward(d, rca0, rsa0), Array<T>(T(2.25) * grid))) why += " mrham-2.25";

        const auto rca = RcaConfig<T>::random(c, r, rng);
        const auto rsa = RsaConfig<T>::random(c, rng);
        const auto cbam = CbamConfig<T>::random(c, r, rng);
        std::vector<Tensor<T>> outs{rca_forward(m, rca), rsa_forward(m, rsa), cbam_forward(m, cbam)};
        for (auto mode : {ArrangementMode::rca_only, ArrangementMode::rsa_only, ArrangementMode::rca_then_rsa,
                          ArrangementMode::rsa_then_rca, ArrangementMode::parallel})
            outs.push_back(mrham_forward(m, rca, rsa, mode));
        for (auto kind : {BlockKind::plain_residual, BlockKind::mrham, BlockKind::cbam}) {
            Block<T> b = make_block<T>(kind, c, rng, ArrangementMode::rca_then_rsa, r);
            outs.push_back(b.forward(m, {}));
        }
        for (const auto& o : outs)
            if (o.shape() != m.shape()) why += " shape(" + shape_str(m.shape()) + "->" + shape_str(o.shape()) + ")";
        checked += 5 + int(outs.size());
    }
    return checked;
}

Result check_attention_algebra() {
    Rng rng(2024);
    std::string why;
    const int n = attention_algebra_for<float>(rng, why) + attention_algebra_for<double>(rng, why);
    return {why.empty() ? Outcome::pass : Outcome::fail,
            fmt("%d exact identity/shape checks in float and double (RCA 1.5M, RSA 1.5M, MRHAM 2.25M, CBAM 0.25M)%s", n,
                why.empty() ? "" : (" failing:" + why.substr(0, 200)).c_str())};
}

Result check_architecture() {
    const auto full = BackboneSpec::cspdarknet53(BlockKind::mrham);
    const auto slim = BackboneSpec::cspdarknet53_slim(BlockKind::mrham);
    const int convs = count_conv_layers(full);
    int removed_early = 0, removed_late = 0;
    for (std::size_t i = 0; i < 5; ++i)
        (i < 2 ? removed_early : removed_late) += full.stages[i].num_blocks - slim.stages[i].num_blocks;
    const bool late_ok = full.stages[2].num_blocks == 8 && full.stages[3].num_blocks == 8 &&
                         full.stages[4].num_blocks == 4 && slim.stages[2].num_blocks == 4 &&
                         slim.stages[3].num_blocks == 4 && slim.stages[4].num_blocks == 2;

    Rng rng(3);
    const auto spec = DetectorSpec::mrham_yolov4_slim(608, 4, 1.0);
    Detector<float> det(spec, rng);
    NoGradGuard guard;
    const auto raw = det.forward(Tensor<float>({1, 3, 608, 608}, 0.5f), {});
    std::vector<int> grids;
    bool chans = true;
    for (const auto& r : raw) {
        grids.push_back(r.dim(2));
        chans = chans && r.dim(1) == 3 * (5 + 4) && r.dim(2) == r.dim(3);
    }
    const bool ok = convs == 67 && removed_early == 0 && removed_late == 10 && late_ok &&
                    grids == std::vector<int>{76, 38, 19} && chans;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("CSPDarknet53 convs %d (want 67); slim removes %d blocks in stages 3-5 (8,8,4 -> 4,4,2), %d elsewhere; "
                "608 input heads %dx%d/%dx%d/%dx%d (want 76/38/19)",
                convs, removed_late, removed_early, grids.at(0), grids.at(0), grids.at(1), grids.at(1), grids.at(2),
                grids.at(2))};
}

Result check_geometry() {
    Rng rng(404);
    double worst_iou = 0, worst_ciou = 0;
    for (int i = 0; i < 10000; ++i) {
        const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
        worst_iou = std::max(worst_iou, std::abs(iou(a, b) - oracle::iou(a, b)));
        worst_ciou = std::max(worst_ciou, std::abs(ciou(a, b) - oracle::ciou(a, b)));
    }
    const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
    const double same = ciou_loss(a, a), worked = ciou_loss(a, b);
    const bool ok = worst_iou < 1e-6 && worst_ciou < 1e-6 && same == 0.0 && std::abs(worked - 0.968254) < 1e-5;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("10000 pairs: max |iou-oracle| %.1e, max |ciou-oracle| %.1e (< 1e-6); identical loss %g; "
                "worked example loss %.6f (want 0.968254 +- 1e-5)",
                worst_iou, worst_ciou, same, worked)};
}

bool same_dets(const std::vector<Detection>& x, const std::vector<Detection>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].class_id != y[i].class_id || x[i].confidence != y[i].confidence ||
            std::memcmp(&x[i].box, &y[i].box, sizeof(Box)) != 0)
            return false;
    return true;
}

Result check_nms_equivalence() {
    Rng rng(505);
    int mismatches = 0, not_idempotent = 0;
    long kept = 0, total = 0;
    for (int t = 0; t < 1000; ++t) {
        const int n = int(rng.below(101)), classes = 1 + int(rng.below(4));
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i) dets.push_back({oracle::random_box(rng, 30), int(rng.below(std::uint64_t(classes))), rng.uniform()});
        const double thr = rng.uniform(0.2, 0.8), conf = rng.uniform(0.05, 0.5);
        const auto got = diou_nms(dets, thr, conf);
        if (!same_dets(got, oracle::nms(dets, thr, conf))) ++mismatches;
        if (!same_dets(diou_nms(got, thr, conf), got)) ++not_idempotent;
        kept += long(got.size());
        total += n;
    }
    return {mismatches == 0 && not_idempotent == 0 ? Outcome::pass : Outcome::fail,
            fmt("1000 instances (<= 100 boxes, <= 4 classes, %ld boxes, %ld kept): %d differ from the quadratic "
                "reference, %d not idempotent",
                total, kept, mismatches, not_idempotent)};
}

Result check_metric_oracles() {
    Rng rng(606);
    int count_bad = 0, ap_bad = 0, map_bad = 0;
    double worst = 0;
    for (int t = 0; t < 500; ++t) {
        const int classes = 1 + int(rng.below(3));
        const auto inst = oracle::random_instance(rng, classes, 1 + int(rng.below(3)), 6, 12);
        std::vector<std::string> names;
        for (int c = 0; c < classes; ++c) names.push_back(std::to_string(c));
        for (std::size_t i = 0; i < inst.dets.size(); ++i) {
            oracle::Counts want;
            const auto flags = oracle::match(inst.dets[i], inst.gts[i], 0.5, want);
            const auto got = match_detections(inst.dets[i], inst.gts[i], classes, 0.5);
            if (got.total.tp != want.tp || got.total.fp != want.fp || got.total.fn != want.fn || got.is_tp != flags)
                ++count_bad;
        }
        // Per-class AP over a single image's ranking, then full mAP.
        for (int c = 0; c < classes; ++c) {
            std::vector<Detection> dc;
            std::vector<GroundTruth> gc;
            for (const auto& d : inst.dets[0])
                if (d.class_id == c) dc.push_back(d);
            for (const auto& g : inst.gts[0])
                if (g.class_id == c) gc.push_back(g);
            oracle::Counts cnt;
            const auto flags = oracle::match(dc, gc, 0.5, cnt);
            std::vector<std::size_t> order(dc.size());
            for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t x, std::size_t y) { return dc[x].confidence > dc[y].confidence; });
            std::vector<char> sorted;
            for (std::size_t k : order) sorted.push_back(flags[k]);
            const double diff = std::abs(average_precision(pr_curve(sorted, int(gc.size()))) -
                                         oracle::ap(sorted, int(gc.size())));
            worst = std::max(worst, diff);
            if (diff > 1e-12) ++ap_bad;
        }
        const double got = evaluate_detections(inst.dets, inst.gts, names).map50;
        const double diff = std::abs(got - oracle::map50(inst.dets, inst.gts, classes));
        worst = std::max(worst, diff);
        if (diff > 1e-12) ++map_bad;
    }
    const bool ok = count_bad == 0 && ap_bad == 0 && map_bad == 0;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("500 instances: %d match, %d AP, %d mAP disagreements with the enumeration oracle (max |diff| %.1e)",
                count_bad, ap_bad, map_bad, worst)};
}

struct TableRow {
    const char* model;
    double p, r, f1;
};

Result check_table_consistency() {
    // Distinct (P, R, F1) rows of the published comparison tables.
    const std::vector<TableRow> rows{{"YOLOv4-Slim", 0.736, 0.786, 0.76},     {"YOLOv4", 0.798, 0.86, 0.828},
                                     {"CBAM-YOLOv4-Slim", 0.837, 0.93, 0.881}, {"MRHAM-YOLOv4-Slim", 0.919, 0.971, 0.944},
                                     {"SSD300", 0.632, 0.721, 0.674},         {"ARVBNet", 0.739, 0.878, 0.801},
                                     {"YOLOv3", 0.732, 0.896, 0.805},         {"YOLOv3-SPP", 0.744, 0.903, 0.816},
                                     {"Faster R-CNN", 0.747, 0.884, 0.809}};
    std::string off;
    int ok = 0;
    for (const auto& row : rows) {
        const double f1 = f1_score(row.p, row.r);
        if (std::abs(f1 - row.f1) <= 0.001 + 1e-12)
            ++ok;
        else
            off += fmt(" %s P %.3f R %.3f -> F1 %.4f vs printed %.3f (|diff| %.4f);", row.model, row.p, row.r, f1,
                       row.f1, std::abs(f1 - row.f1));
    }
    const std::string detail = fmt("%d/%zu rows reproduce the printed F1 within +-0.001", ok, rows.size()) + off;
    if (off.empty()) return {Outcome::pass, detail};
    // Only the ARVBNet row is known to be internally inconsistent in the source table.
    const bool only_known = ok == int(rows.size()) - 1 && off.find("ARVBNet") != std::string::npos;
    return {only_known ? Outcome::known_fail : Outcome::fail,
            detail + (only_known ? " inconsistency is in the published row itself" : "")};
}

Result check_anchor_fitting() {
    Rng rng(707);
    std::vector<std::pair<double, double>> wh;
    for (int i = 0; i < 12; ++i) wh.emplace_back(rng.uniform(5, 120), rng.uniform(5, 120));
    const auto fit = kmeans_anchors(wh, 3, 17);
    int beaten = 0;
    double best_random = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<std::pair<double, double>> c;
        for (int j = 0; j < 3; ++j) c.emplace_back(rng.uniform(5, 120), rng.uniform(5, 120));
        const double s = mean_best_iou(wh, c);
        best_random = std::max(best_random, s);
        if (s > fit.mean_best_iou) ++beaten;
    }
    const auto again = kmeans_anchors(wh, 3, 17);
    const bool det = again.anchors.wh == fit.anchors.wh && again.mean_best_iou == fit.mean_best_iou;
    return {beaten == 0 && det ? Outcome::pass : Outcome::fail,
            fmt("k-means mean best-IoU %.4f vs best of 1000 random triplets %.4f (%d better); repeat run %s",
                fit.mean_best_iou, best_random, beaten, det ? "identical" : "differs")};
}

Result check_overfit() {
    const Dataset ds = synth_phantom(8, 160, 1);
    DetTrainConfig cfg;
    cfg.model = DetectorSpec::mrham_yolov4_slim(160, 4, 0.125);
    cfg.optim = OptimConfig::detection_desk();
    cfg.optim.lr0 = 0.2;
    cfg.optim.epochs = 600;  // one step per epoch with 8 images
    cfg.optim.batch_size = 8;
    cfg.optim.warmup_steps = 20;
    cfg.max_steps = 2000;
    cfg.eval_every = 25;
    cfg.stop_at_map = 1.0;
    cfg.seed = 3;
    Rng rng(3);
    Detector<float> det(cfg.model, rng);
    const TrainResult r = train_detector(cfg, det, ds, ds, [](const EpochLog& l) {
        if (l.has_val) std::printf("  step %d loss %.4f train mAP %.3f\n", l.epoch, l.loss_total, l.val_map50), std::fflush(stdout);
    });
    const double map = r.last_eval.map50, ratio = r.final_loss / r.initial_loss;
    const bool ok = map >= 1.0 && ratio <= 0.1 && r.steps <= 2000 && r.seconds <= 1800;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("8 phantoms at 160 px: train mAP@0.5 %.3f (want 1.00), loss %.4f -> %.4f (%.1f%% of initial, want <= "
                "10%%), %ld steps (<= 2000), %.0f s (<= 1800)",
                map, r.initial_loss, r.final_loss, 100 * ratio, r.steps, r.seconds)};
}

Result check_generalization() {
    const Dataset all = synth_phantom(320, 160, 11);
    Dataset train, val;
    train.classes = val.classes = all.classes;
    for (std::size_t i = 0; i < all.size(); ++i) (i < 256 ? train : val).samples.push_back(all.samples[i]);
    DetTrainConfig cfg;
    cfg.model = DetectorSpec::mrham_yolov4_slim(160, 4, 0.125);
    cfg.optim = OptimConfig::detection_desk();
    cfg.optim.lr0 = 0.1;
    cfg.optim.epochs = 60;
    cfg.optim.batch_size = 8;
    cfg.optim.warmup_steps = 100;
    cfg.eval_every = 20;
    cfg.seed = 5;
    Rng rng(5);
    Detector<float> det(cfg.model, rng);
    const TrainResult r = train_detector(cfg, det, train, val, [](const EpochLog& l) {
        if (l.has_val)
            std::printf("  epoch %d loss %.4f val mAP %.3f P %.3f R %.3f\n", l.epoch, l.loss_total, l.val_map50,
                        l.val_p, l.val_r),
                std::fflush(stdout);
    });
    const double map = r.last_eval.map50;
    const bool ok = map >= 0.90 && r.seconds <= 7200;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("256 train / 64 held-out phantoms, 60 epochs: final val mAP@0.5 %.3f (want >= 0.90), P %.3f R %.3f, "
                "%.0f s (<= 7200)",
                map, r.last_eval.precision, r.last_eval.recall, r.seconds)};
}

Result check_ablation() {
    const char* dir = std::getenv("MRHAM_CIFAR10_DIR");
    if (!dir || !fs::exists(fs::path(dir) / "data_batch_1.bin"))
        return {Outcome::skip, "CIFAR-10 binaries not available (set MRHAM_CIFAR10_DIR to the cifar-10-batches-bin "
                               "directory)"};
    ClassificationSet full = load_cifar(cifar_files(dir, true));
    const ClassificationSet test = load_cifar(cifar_files(dir, false));
    Rng pick(0);
    std::vector<int> idx = pick.permutation(int(full.size()));
    ClassificationSet sub;
    for (int i = 0; i < 5000; ++i) {
        sub.images.push_back(full.images[std::size_t(idx[std::size_t(i)])]);
        sub.labels.push_back(full.labels[std::size_t(idx[std::size_t(i)])]);
    }
    auto mean_top1 = [&](BlockKind kind) {
        double sum = 0;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            ClsTrainConfig cfg;
            cfg.backbone = BackboneSpec::cspdarknet53_slim(kind, 0.25);
            cfg.num_classes = 10;
            cfg.optim = OptimConfig::classification_desk();
            cfg.optim.epochs = 30;
            cfg.seed = seed;
            Rng rng(seed);
            Classifier<float> model(cfg.backbone, 10, rng);
            const auto r = train_classifier(cfg, model, sub, test, [&](const ClsEpochLog& l) {
                std::printf("  %s seed %llu epoch %d top1 %.4f\n", std::string(to_string(kind)).c_str(),
                            (unsigned long long)seed, l.epoch, l.top1),
                    std::fflush(stdout);
            });
            sum += r.top1;
        }
        return 100 * sum / 3;
    };
    const double plain = mean_top1(BlockKind::plain_residual), mrham = mean_top1(BlockKind::mrham);
    return {mrham >= plain - 0.5 ? Outcome::pass : Outcome::fail,
            fmt("5000-image subset, 30 epochs, 3 seeds: MRHAM slim top-1 %.2f vs plain slim %.2f (want >= plain - 0.5)",
                mrham, plain)};
}

Result check_determinism() {
    const fs::path root = fs::temp_directory_path() / "mrham_acceptance_determinism";
    fs::remove_all(root);
    const Dataset data = synth_phantom(8, 96, 21);
    auto det_run = [&](const fs::path& out, int workers) {
        DetTrainConfig cfg;
        cfg.model = DetectorSpec::mrham_yolov4_slim(96, 4, 0.125);
        cfg.optim = OptimConfig::detection_desk();
        cfg.optim.lr0 = 0.05;
        cfg.optim.epochs = 3;
        cfg.optim.batch_size = 4;
        cfg.optim.warmup_steps = 2;
        cfg.mosaic_prob = 0.5;
        cfg.seed = 9;
        cfg.workers = workers;
        cfg.out_dir = out;
        Rng rng(cfg.seed);
        Detector<float> model(cfg.model, rng);
        train_detector(cfg, model, data, data);
    };
    det_run(root / "a", 1);
    det_run(root / "b", 1);
    det_run(root / "c", 3);
    const bool det_csv = slurp(root / "a/metrics.csv") == slurp(root / "b/metrics.csv") &&
                         slurp(root / "a/metrics.csv") == slurp(root / "c/metrics.csv");
    const bool det_ckpt = slurp(root / "a/last.bin") == slurp(root / "b/last.bin");

    const ClassificationSet crops = crop_objects(data, 32);
    auto cls_run = [&](const fs::path& out) {
        ClsTrainConfig cfg;
        cfg.backbone = BackboneSpec::cspdarknet53_slim(BlockKind::mrham, 0.125);
        cfg.num_classes = 4;
        cfg.optim = OptimConfig::classification_desk();
        cfg.optim.epochs = 2;
        cfg.optim.batch_size = 8;
        cfg.seed = 4;
        cfg.out_dir = out;
        Rng rng(cfg.seed);
        Classifier<float> model(cfg.backbone, 4, rng);
        train_classifier(cfg, model, crops, crops);
    };
    cls_run(root / "d");
    cls_run(root / "e");
    const bool cls_csv = slurp(root / "d/metrics.csv") == slurp(root / "e/metrics.csv");

    // Checkpoint round trip: load, save again, compare bytes and values.
    Rng rng(1);
    Detector<float> fresh(DetectorSpec::mrham_yolov4_slim(96, 4, 0.125), rng);
    ParamList<float> params = fresh.parameters();
    const TrainState st = restore_checkpoint(params, load_checkpoint(root / "a/last.bin"));
    save_checkpoint(root / "again.bin", make_checkpoint(params, st));
    const bool round_trip = slurp(root / "a/last.bin") == slurp(root / "again.bin");
    const Tensor<float> t = params.front().tensor;
    save_snapshot(root / "t.bin", t);
    const Tensor<float> back = load_snapshot(root / "t.bin");
    const bool snap = back.shape() == t.shape() &&
                      std::memcmp(back.data(), t.data(), sizeof(float) * std::size_t(t.numel())) == 0;
    fs::remove_all(root);
    const bool ok = det_csv && det_ckpt && cls_csv && round_trip && snap;
    return {ok ? Outcome::pass : Outcome::fail,
            fmt("detector CSV identical across reruns and worker counts: %s; checkpoints identical: %s; classifier CSV "
                "identical: %s; checkpoint reload/save bit-exact: %s; tensor snapshot bit-exact: %s",
                det_csv ? "yes" : "no", det_ckpt ? "yes" : "no", cls_csv ? "yes" : "no", round_trip ? "yes" : "no",
                snap ? "yes" : "no")};
}

struct Criterion {
    std::string id, title;
    std::function<Result()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<std::string> only;
    app.add_option("--only", only, "Criterion ids to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {"1", "gradient suite", check_gradient_suite},
        {"2", "attention algebra", check_attention_algebra},
        {"3", "architecture shape", check_architecture},
        {"4", "geometry oracles", check_geometry},
        {"5", "DIoU-NMS equivalence", check_nms_equivalence},
        {"6a", "metric oracles", check_metric_oracles},
        {"6b", "published F1 consistency", check_table_consistency},
        {"7", "anchor fitting", check_anchor_fitting},
        {"8", "overfit surrogate", check_overfit},
        {"9", "generalization surrogate", check_generalization},
        {"10", "attention ablation direction", check_ablation},
        {"11", "determinism", check_determinism},
    };

    bool failed = false, skipped = false;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Result r;
        const auto t0 = Clock::now();
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {Outcome::fail, std::string("threw: ") + e.what()};
        }
        const char* tag = r.outcome == Outcome::pass ? "PASS" : r.outcome == Outcome::skip ? "SKIP" : "FAIL";
        std::printf("%s %s %s: %s [%.1f s]\n", tag, c.id.c_str(), c.title.c_str(), r.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        failed |= r.outcome == Outcome::fail;
        skipped |= r.outcome == Outcome::skip || r.outcome == Outcome::known_fail;
    }
    return failed ? 1 : skipped ? 77 : 0;
}
