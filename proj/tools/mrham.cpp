#include "mrham/config.hpp"
#include "mrham/data.hpp"
#include "mrham/eval.hpp"
#include "mrham/gradcheck.hpp"
#include "mrham/image.hpp"
#include "mrham/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace mrham;
using nlohmann::ordered_json;

namespace {

// Exit codes.
constexpr int kOk = 0, kInvalid = 1, kFailure = 2;

struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flags shared by the commands that build a RunConfig.
struct ConfigFlags {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::string> data, val, classes, format, run_root, resume, backbone, block, arrangement, preset;
    std::optional<double> lr, width, mosaic;
    std::optional<int> epochs, batch, input, max_steps, workers, eval_every, num_classes, warmup;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON run config (sections model, optim, data, train, run_root)");
        app->add_option("--set", sets, "Override one key, e.g. --set model.width=0.25 (repeatable)");
        app->add_option("--data", data, "Training data (dataset root, YOLO image dir or VOC annotation dir)");
        app->add_option("--val", val, "Validation data; default: held-out split of --data");
        app->add_option("--classes", classes, "Class-name file, one per line");
        app->add_option("--format", format, "dataset | yolo | voc | phantom");
        app->add_option("--run-root", run_root, "Parent of run directories (default $MRHAM_RUN_ROOT or ./runs)");
        app->add_option("--resume", resume, "Checkpoint to continue from");
        app->add_option("--backbone", backbone, "cspdarknet53 | cspdarknet53-slim");
        app->add_option("--block", block, "plain | mrham | cbam");
        app->add_option("--arrangement", arrangement, "rca | rsa | rca+rsa | rsa+rca | parallel");
        app->add_option("--preset", preset, "Optimizer preset: detection_full, detection_desk, ...");
        app->add_option("--lr", lr, "Initial learning rate");
        app->add_option("--width", width, "Channel width multiplier");
        app->add_option("--mosaic", mosaic, "Mosaic probability");
        app->add_option("--epochs", epochs, "Training epochs");
        app->add_option("--batch", batch, "Batch size");
        app->add_option("--input", input, "Detector input size (multiple of 32)");
        app->add_option("--max-steps", max_steps, "Stop after this many optimizer steps (0: no cap)");
        app->add_option("--workers", workers, "Data-loading threads");
        app->add_option("--eval-every", eval_every, "Epochs between validation passes");
        app->add_option("--num-classes", num_classes, "Class count");
        app->add_option("--warmup", warmup, "Linear warmup steps");
        app->add_option("--seed", seed, "Random seed");
    }

    RunConfig resolve(RunConfig cfg) const {
        if (!config.empty()) cfg = load_run_config(cfg, config);
        if (preset) cfg = apply_override(cfg, "optim.preset=\"" + *preset + "\"");
        for (const auto& s : sets) cfg = apply_override(cfg, s);
        if (data) cfg.data.train = *data;
        if (val) cfg.data.val = *val;
        if (classes) cfg.data.classes = *classes;
        if (format) cfg.data.format = *format;
        if (run_root) cfg.run_root = *run_root;
        if (resume) cfg.train.resume = *resume;
        if (backbone) cfg.model.backbone = *backbone;
        if (block) cfg.model.block = *block;
        if (arrangement) cfg.model.arrangement = *arrangement;
        if (lr) cfg.optim.lr0 = *lr;
        if (width) cfg.model.width = *width;
        if (mosaic) cfg.train.mosaic_prob = *mosaic;
        if (epochs) cfg.optim.epochs = *epochs;
        if (batch) cfg.optim.batch_size = *batch;
        if (input) cfg.model.input_size = *input;
        if (max_steps) cfg.train.max_steps = *max_steps;
        if (workers) cfg.train.workers = *workers;
        if (eval_every) cfg.train.eval_every = *eval_every;
        if (num_classes) cfg.model.num_classes = *num_classes;
        if (warmup) cfg.optim.warmup_steps = *warmup;
        if (seed) cfg.train.seed = *seed;
        cfg.validate();
        return cfg;
    }
};

ClassTable class_table(const DataConfig& d) {
    return d.classes.empty() ? ClassTable::chambers() : ClassTable::load(d.classes);
}

Dataset load_one(const DataConfig& d, const fs::path& path, const fs::path& labels) {
    if (!fs::exists(path)) throw ConfigError("data path " + path.string() + " does not exist");
    if (d.format == "dataset") {
        Dataset ds = load_dataset(path);
        if (!d.classes.empty()) ds.classes = class_table(d);
        return ds;
    }
    if (d.format == "yolo")
        return load_yolo_dataset(path, labels.empty() ? path.parent_path() / "labels" : labels, class_table(d));
    return load_voc_xml(path, class_table(d));
}

Dataset subset(const Dataset& all, const std::vector<int>& idx) {
    Dataset out;
    out.classes = all.classes;
    for (int i : idx) out.samples.push_back(all.samples[static_cast<std::size_t>(i)]);
    return out;
}

void report_diagnostics(const Dataset& ds) {
    for (const auto& d : ds.diagnostics) std::cerr << "warning: " << d << '\n';
}

/// Train and validation sets for a detection run.
std::pair<Dataset, Dataset> detection_data(const RunConfig& cfg) {
    const DataConfig& d = cfg.data;
    Dataset train, val;
    if (d.format == "phantom") {
        const Dataset all = synth_phantom(d.synth_n, d.synth_size, d.synth_seed);
        const Split split = split_indices(static_cast<int>(all.size()), 1.0 - d.val_ratio, d.synth_seed);
        return {subset(all, split.train), subset(all, split.val)};
    }
    if (d.train.empty()) throw ConfigError("no training data: pass --data or set data.train");
    train = load_one(d, d.train, d.train_labels);
    report_diagnostics(train);
    if (!d.val.empty()) {
        val = load_one(d, d.val, d.val_labels);
        report_diagnostics(val);
    } else if (d.val_ratio > 0) {
        const Split split = split_indices(static_cast<int>(train.size()), 1.0 - d.val_ratio, cfg.train.seed);
        val = subset(train, split.val);
        train = subset(train, split.train);
    }
    if (train.classes.size() != cfg.model.num_classes)
        throw ConfigError("dataset has " + std::to_string(train.classes.size()) + " classes but model.num_classes is " +
                          std::to_string(cfg.model.num_classes));
    if (train.size() == 0) throw ConfigError("training set is empty");
    return {train, val};
}

/// Reads the run config stored next to a checkpoint when no explicit config is given.
RunConfig model_config(const ConfigFlags& flags, const fs::path& weights) {
    RunConfig base = RunConfig::detection_defaults();
    const fs::path echoed = weights.parent_path() / "config.json";
    if (flags.config.empty() && fs::exists(echoed)) base = load_run_config(base, echoed);
    return flags.resolve(base);
}

Detector<float> load_detector(const RunConfig& cfg, const fs::path& weights) {
    if (!weights.empty() && !fs::exists(weights)) throw ConfigError("weights file " + weights.string() + " does not exist");
    Rng rng(cfg.train.seed);
    Detector<float> model(cfg.detector_spec(), rng);
    if (!weights.empty()) {
        auto params = model.parameters();
        load_weights(params, weights);
    }
    return model;
}

void print_epoch(const EpochLog& l) {
    std::printf("epoch %3d  lr %.3g  box %.4f  obj %.4f  cls %.4f", l.epoch, l.lr, l.loss_box, l.loss_obj, l.loss_cls);
    if (l.has_val) std::printf("  mAP50 %.3f  P %.3f  R %.3f  F1 %.3f", l.val_map50, l.val_p, l.val_r, l.val_f1);
    std::printf("\n");
    std::fflush(stdout);
}

// Fixed per-class overlay colors, cycled past eight classes.
const Color kPalette[] = {{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.3f, 0.5f, 1.0f}, {1.0f, 0.9f, 0.1f},
                          {1.0f, 0.2f, 1.0f}, {0.1f, 1.0f, 1.0f}, {1.0f, 0.6f, 0.1f}, {0.7f, 0.7f, 0.7f}};

std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

Image overlay(const Image& image, const std::vector<Detection>& dets, const ClassTable& classes) {
    Image out = image;
    const int thickness = std::max(1, image.width / 200);
    for (const auto& d : dets) {
        const Color& color = kPalette[static_cast<std::size_t>(d.class_id) % std::size(kPalette)];
        draw_rect(out, int(d.box.x_min), int(d.box.y_min), int(d.box.x_max), int(d.box.y_max), color, thickness);
        char text[64];
        const std::string name = d.class_id < classes.size() ? classes.names[static_cast<std::size_t>(d.class_id)]
                                                             : std::to_string(d.class_id);
        std::snprintf(text, sizeof text, "%s %.2f", upper(name).c_str(), d.confidence);
        const int ty = std::max(0, int(d.box.y_min) - 9);
        fill_rect(out, int(d.box.x_min), ty, int(d.box.x_min) + 6 * int(std::string(text).size()) + 2, ty + 9, color);
        draw_text(out, int(d.box.x_min) + 1, ty + 1, text, {0.0f, 0.0f, 0.0f});
    }
    return out;
}

ordered_json detections_json(const std::string& image, int w, int h, const std::vector<Detection>& dets,
                             const ClassTable& classes) {
    ordered_json j;
    j["image"] = image;
    j["width"] = w;
    j["height"] = h;
    j["detections"] = ordered_json::array();
    for (const auto& d : dets)
        j["detections"].push_back({{"class_id", d.class_id},
                                   {"class", d.class_id < classes.size() ? classes.names[static_cast<std::size_t>(d.class_id)] : ""},
                                   {"confidence", d.confidence},
                                   {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}}});
    return j;
}

/// Source-pixel detections for each sample: letterbox, infer, map back.
std::vector<std::vector<Detection>> detect_samples(Detector<float>& model, const std::vector<Sample>& samples,
                                                   double conf, double nms) {
    std::vector<Sample> prepared;
    std::vector<LetterboxTransform> transforms;
    for (const auto& s : samples) {
        auto [lb, t] = letterbox(s, model.spec().input_size);
        prepared.push_back(std::move(lb));
        transforms.push_back(t);
    }
    auto dets = detect_batch(model, prepared, conf, nms);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const double w = samples[i].image.width, h = samples[i].image.height;
        for (auto& d : dets[i]) {
            Box b = transforms[i].inverse(d.box);
            d.box = {std::clamp(b.x_min, 0.0, w), std::clamp(b.y_min, 0.0, h), std::clamp(b.x_max, 0.0, w),
                     std::clamp(b.y_max, 0.0, h)};
        }
    }
    return dets;
}

std::vector<std::vector<GroundTruth>> gts_in_pixels(const std::vector<Sample>& samples) {
    std::vector<std::vector<GroundTruth>> out;
    for (const auto& s : samples) {
        auto g = s.gts;
        for (auto& x : g) x.box = x.box.scaled(s.image.width, s.image.height);
        out.push_back(std::move(g));
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
}

// --- subcommands ---

int cmd_synth(int n, int size, std::uint64_t seed, const fs::path& out) {
    if (n < 1 || size < 32) throw ConfigError("synth: --n >= 1 and --size >= 32 required");
    const Dataset ds = synth_phantom(n, size, seed);
    save_dataset(out, ds);
    std::printf("wrote %d phantom images (%dx%d) to %s\n", n, size, size, out.string().c_str());
    return kOk;
}

int cmd_anchors(const fs::path& data, int k, std::uint64_t seed, int input, fs::path out) {
    if (k < 1) throw ConfigError("anchors: --k must be >= 1");
    if (!fs::exists(data / "manifest.txt")) throw ConfigError("anchors: " + data.string() + " has no manifest.txt");
    const Dataset ds = load_dataset(data);
    report_diagnostics(ds);
    std::vector<std::pair<double, double>> wh;
    for (const auto& s : ds.samples) {
        // Sizes in source pixels, or in model-input pixels after letterboxing when --input is given.
        const double f = input > 0 ? double(input) / std::max(s.image.width, s.image.height) : 1.0;
        for (const auto& g : s.gts) wh.emplace_back(g.box.width() * s.image.width * f, g.box.height() * s.image.height * f);
    }
    if (static_cast<int>(wh.size()) < k)
        throw ConfigError("anchors: " + std::to_string(wh.size()) + " boxes, fewer than k = " + std::to_string(k));
    const KMeansResult r = kmeans_anchors(wh, k, seed);
    if (out.empty()) out = data / "anchors.txt";
    save_anchors(out, r.anchors);
    std::printf("%d anchors from %zu boxes, mean best IoU %.4f, %d iterations -> %s\n", k, wh.size(), r.mean_best_iou,
                r.iterations, out.string().c_str());
    for (const auto& [w, h] : r.anchors.wh) std::printf("  %.2f %.2f\n", w, h);
    return kOk;
}

int cmd_train_det(const ConfigFlags& flags) {
    const RunConfig cfg = flags.resolve(RunConfig::detection_defaults());
    auto [train, val] = detection_data(cfg);
    const fs::path dir = create_run_dir(cfg.run_root.empty() ? default_run_root() : cfg.run_root, cfg);
    std::printf("run directory %s (%zu train, %zu val)\n", dir.string().c_str(), train.size(), val.size());
    DetTrainConfig tc = cfg.det_train_config();
    tc.out_dir = dir;
    Rng rng(cfg.train.seed);
    Detector<float> model(tc.model, rng);
    const TrainResult r = train_detector(tc, model, train, val, print_epoch);
    if (r.last_eval.per_class.size()) write_text(dir / "eval.json", r.last_eval.to_json() + "\n");
    mark_run_complete(dir);
    std::printf("done: %ld steps in %.1f s, loss %.4f -> %.4f\n", r.steps, r.seconds, r.initial_loss, r.final_loss);
    if (!r.last_eval.per_class.empty()) std::printf("%s", r.last_eval.to_table().c_str());
    return kOk;
}

/// Classification data: CIFAR-10 when a directory is configured, otherwise
/// 32x32 crops of phantom chambers (4 classes).
std::pair<ClassificationSet, ClassificationSet> classification_data(RunConfig& cfg) {
    const DataConfig& d = cfg.data;
    if (!d.cifar_dir.empty()) {
        ClassificationSet train = load_cifar(cifar_files(d.cifar_dir, true));
        ClassificationSet val = load_cifar(cifar_files(d.cifar_dir, false));
        if (d.cifar_subset > 0 && static_cast<std::size_t>(d.cifar_subset) < train.size()) {
            Rng rng = Rng::derive(cfg.train.seed, 0x63696661);
            std::vector<int> idx(train.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            rng.shuffle(idx);
            ClassificationSet sub;
            for (int i = 0; i < d.cifar_subset; ++i) {
                sub.images.push_back(train.images[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
                sub.labels.push_back(train.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
            }
            train = std::move(sub);
        }
        cfg.model.num_classes = 10;
        return {train, val};
    }
    const Dataset all = synth_phantom(d.synth_n, d.synth_size, d.synth_seed);
    const Split split = split_indices(static_cast<int>(all.size()), 1.0 - std::max(d.val_ratio, 0.1), d.synth_seed);
    cfg.model.num_classes = all.classes.size();
    return {crop_objects(subset(all, split.train), 32), crop_objects(subset(all, split.val), 32)};
}

void print_cls_epoch(const ClsEpochLog& l) {
    std::printf("epoch %3d  lr %.3g  loss %.4f  top1 %.4f  top5 %.4f\n", l.epoch, l.lr, l.loss, l.top1, l.top5);
    std::fflush(stdout);
}

int cmd_train_cls(const ConfigFlags& flags, const std::string& cifar) {
    RunConfig cfg = flags.resolve(RunConfig::classification_defaults());
    if (!cifar.empty()) cfg.data.cifar_dir = cifar;
    auto [train, val] = classification_data(cfg);
    const fs::path dir = create_run_dir(cfg.run_root.empty() ? default_run_root() : cfg.run_root, cfg);
    std::printf("run directory %s (%zu train, %zu val, %d classes)\n", dir.string().c_str(), train.size(), val.size(),
                cfg.model.num_classes);
    ClsTrainConfig tc = cfg.cls_train_config();
    tc.out_dir = dir;
    Rng rng(cfg.train.seed);
    Classifier<float> model(tc.backbone, tc.num_classes, rng);
    const ClsTrainResult r = train_classifier(tc, model, train, val, print_cls_epoch);
    mark_run_complete(dir);
    std::printf("done: %ld steps in %.1f s, top1 %.4f top5 %.4f\n", r.steps, r.seconds, r.top1, r.top5);
    return kOk;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& cifar, const fs::path& out) {
    RunConfig cfg = flags.resolve(RunConfig::classification_defaults());
    if (!cifar.empty()) cfg.data.cifar_dir = cifar;
    cfg.model.block = "mrham";
    auto [train, val] = classification_data(cfg);
    std::ostringstream table;
    table << "mode       top1    top5    seconds\n";
    std::printf("%zu train, %zu val, %d epochs per mode\n", train.size(), val.size(), cfg.optim.epochs);
    for (auto mode : {ArrangementMode::rca_only, ArrangementMode::rsa_only, ArrangementMode::rca_then_rsa,
                      ArrangementMode::rsa_then_rca, ArrangementMode::parallel}) {
        RunConfig run = cfg;
        run.model.arrangement = std::string(to_string(mode));
        ClsTrainConfig tc = run.cls_train_config();
        Rng rng(run.train.seed);
        Classifier<float> model(tc.backbone, tc.num_classes, rng);
        const ClsTrainResult r = train_classifier(tc, model, train, val);
        char line[128];
        std::snprintf(line, sizeof line, "%-10s %.4f  %.4f  %.1f\n", std::string(to_string(mode)).c_str(), r.top1,
                      r.top5, r.seconds);
        std::printf("%s", line);
        std::fflush(stdout);
        table << line;
    }
    if (!out.empty()) write_text(out, table.str());
    std::printf("\n%s", table.str().c_str());
    return kOk;
}

std::vector<fs::path> image_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".png")) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

int cmd_detect(const ConfigFlags& flags, const fs::path& weights, std::vector<fs::path> images, const fs::path& dir,
               const fs::path& out, double conf, double nms) {
    if (weights.empty()) throw ConfigError("detect: --weights is required");
    if (!dir.empty())
        for (auto& p : image_files(dir)) images.push_back(p);
    if (images.empty()) throw ConfigError("detect: no input images (--image or --dir)");
    for (const auto& p : images)
        if (!fs::exists(p)) throw ConfigError("image " + p.string() + " does not exist");
    const RunConfig cfg = model_config(flags, weights);
    Detector<float> model = load_detector(cfg, weights);
    const ClassTable classes = class_table(cfg.data);
    std::vector<Sample> samples;
    for (const auto& p : images) samples.push_back({read_image(p), {}, p.stem().string()});
    const auto dets = detect_samples(model, samples, conf, nms);
    fs::create_directories(out);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        write_text(out / (s.name + ".json"),
                   detections_json(images[i].filename().string(), s.image.width, s.image.height, dets[i], classes)
                           .dump(2) + "\n");
        write_image(out / (s.name + "_det" + images[i].extension().string()), overlay(s.image, dets[i], classes));
        std::printf("%s: %zu detections\n", images[i].string().c_str(), dets[i].size());
        for (const auto& d : dets[i])
            std::printf("  class %d  conf %.3f  box %.1f %.1f %.1f %.1f\n", d.class_id, d.confidence, d.box.x_min,
                        d.box.y_min, d.box.x_max, d.box.y_max);
    }
    return kOk;
}

/// Per-image JSON files as written by `detect`, keyed by image stem.
std::vector<std::vector<Detection>> read_predictions(const fs::path& dir, const Dataset& ds) {
    std::vector<std::vector<Detection>> out;
    for (const auto& s : ds.samples) {
        const fs::path p = dir / (s.name + ".json");
        std::vector<Detection> dets;
        if (fs::exists(p)) {
            std::ifstream in(p);
            ordered_json j;
            try {
                j = ordered_json::parse(in);
                for (const auto& d : j.at("detections")) {
                    const auto& b = d.at("box");
                    dets.push_back({{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                     b.at(3).get<double>()},
                                    d.at("class_id").get<int>(),
                                    d.at("confidence").get<double>()});
                }
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError(p.string() + ": " + e.what());
            }
        }
        out.push_back(std::move(dets));
    }
    return out;
}

int cmd_eval(const ConfigFlags& flags, const fs::path& weights, const fs::path& predictions, const fs::path& data,
             const fs::path& out, double conf, double nms, bool fps) {
    if (data.empty()) throw ConfigError("eval: --data is required");
    if (weights.empty() == predictions.empty()) throw ConfigError("eval: pass exactly one of --weights, --predictions");
    if (!fs::exists(data / "manifest.txt")) throw ConfigError("eval: " + data.string() + " has no manifest.txt");
    const Dataset ds = load_dataset(data);
    report_diagnostics(ds);
    std::vector<std::vector<Detection>> dets;
    std::optional<double> speed;
    if (!weights.empty()) {
        const RunConfig cfg = model_config(flags, weights);
        Detector<float> model = load_detector(cfg, weights);
        if (ds.classes.size() != model.spec().num_classes)
            throw ConfigError("dataset has " + std::to_string(ds.classes.size()) + " classes, model " +
                              std::to_string(model.spec().num_classes));
        dets = detect_samples(model, ds.samples, 0.001, nms);
        if (fps) speed = fps_benchmark(model, 2, 10);
    } else {
        dets = read_predictions(predictions, ds);
    }
    EvalReport report = evaluate_detections(dets, gts_in_pixels(ds.samples), ds.classes.names, conf);
    report.fps = speed;
    if (!out.empty()) write_text(out, report.to_json() + "\n");
    std::printf("%s", report.to_table().c_str());
    return kOk;
}

int cmd_gradcheck(int seeds, double tol) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradient_suite(seeds, tol);
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-4s %-28s max rel err %.3e (%d entries)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.max_rel_error, r.checked);
        ok = ok && r.passed;
    }
    std::printf("%zu checks over %d seeds in %.1f s\n", results.size(), seeds,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (!ok) throw RuntimeFailure("gradient check failed");
    return kOk;
}

int cmd_bench(const ConfigFlags& flags, const fs::path& weights, int warmup, int iters) {
    const RunConfig cfg = weights.empty() ? flags.resolve(RunConfig::detection_defaults()) : model_config(flags, weights);
    Detector<float> model = load_detector(cfg, weights);
    const double fps = fps_benchmark(model, warmup, iters);
    std::printf("input %d, width %.3g, %s blocks: %.2f FPS (%.1f ms per image, batch 1, %d iterations)\n",
                cfg.model.input_size, cfg.model.width, cfg.model.block.c_str(), fps, 1000.0 / fps, iters);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MRHAM-YOLOv4-Slim fetal heart chamber detection"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Write a synthetic four-chamber phantom dataset");
    int synth_n = 64, synth_size = 320;
    std::uint64_t synth_seed = 0;
    fs::path synth_out;
    synth->add_option("--n", synth_n, "Image count")->capture_default_str();
    synth->add_option("--size", synth_size, "Square image size in pixels")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Series seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output directory")->required();

    auto* anchors = app.add_subcommand("anchors", "Fit anchors to a dataset's boxes with IoU k-means");
    fs::path anc_data, anc_out;
    int anc_k = 9, anc_input = 0;
    std::uint64_t anc_seed = 0;
    anchors->add_option("--data", anc_data, "Dataset root")->required();
    anchors->add_option("--k", anc_k, "Anchor count")->capture_default_str();
    anchors->add_option("--seed", anc_seed, "k-means seed")->capture_default_str();
    anchors->add_option("--input", anc_input, "Express sizes in letterboxed input pixels of this size");
    anchors->add_option("--out", anc_out, "Anchor file (default <data>/anchors.txt)");

    auto* train_det = app.add_subcommand("train-det", "Train the detector");
    ConfigFlags det_flags;
    det_flags.attach(train_det);

    auto* train_cls = app.add_subcommand("train-cls", "Train a backbone classifier (CIFAR-10 or phantom crops)");
    ConfigFlags cls_flags;
    std::string cls_cifar;
    cls_flags.attach(train_cls);
    train_cls->add_option("--cifar", cls_cifar, "CIFAR-10 binary directory; default: phantom chamber crops");

    auto* ablate = app.add_subcommand("ablate-attn", "Train one classifier per attention arrangement, same budget");
    ConfigFlags abl_flags;
    std::string abl_cifar;
    fs::path abl_out;
    abl_flags.attach(ablate);
    ablate->add_option("--cifar", abl_cifar, "CIFAR-10 binary directory; default: phantom chamber crops");
    ablate->add_option("--out", abl_out, "Write the result table here");

    auto* eval = app.add_subcommand("eval", "mAP@0.5, P, R, F1 on a dataset");
    ConfigFlags eval_flags;
    fs::path eval_weights, eval_preds, eval_data, eval_out;
    double eval_conf = 0.25, eval_nms = 0.45;
    bool eval_fps = false;
    eval_flags.attach(eval);
    eval->add_option("--weights", eval_weights, "Detector checkpoint (config.json beside it is used)");
    eval->add_option("--predictions", eval_preds, "Directory of per-image detection JSON from `detect`");
    eval->add_option("--dataset", eval_data, "Dataset root with ground truth")->required();
    eval->add_option("--out", eval_out, "Write the JSON report here");
    eval->add_option("--conf", eval_conf, "Confidence threshold for P/R/F1")->capture_default_str();
    eval->add_option("--nms", eval_nms, "DIoU-NMS threshold")->capture_default_str();
    eval->add_flag("--fps", eval_fps, "Also benchmark inference speed");

    auto* detect = app.add_subcommand("detect", "Detect chambers; writes JSON and box overlays");
    ConfigFlags detect_flags;
    fs::path det_weights, det_dir, det_out = "detections";
    std::vector<fs::path> det_images;
    double det_conf = 0.25, det_nms = 0.45;
    detect_flags.attach(detect);
    detect->add_option("--weights", det_weights, "Detector checkpoint")->required();
    detect->add_option("--image", det_images, "Input image (PPM or PNG, repeatable)");
    detect->add_option("--dir", det_dir, "Directory of input images");
    detect->add_option("--out", det_out, "Output directory")->capture_default_str();
    detect->add_option("--conf", det_conf, "Confidence threshold")->capture_default_str();
    detect->add_option("--nms", det_nms, "DIoU-NMS threshold")->capture_default_str();

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    int grad_seeds = 20;
    double grad_tol = 1e-3;
    grad->add_option("--seeds", grad_seeds, "Seeds to sweep")->capture_default_str();
    grad->add_option("--tol", grad_tol, "Maximum relative error")->capture_default_str();

    auto* bench = app.add_subcommand("bench", "Inference speed in frames per second");
    ConfigFlags bench_flags;
    fs::path bench_weights;
    int bench_warmup = 2, bench_iters = 10;
    bench_flags.attach(bench);
    bench->add_option("--weights", bench_weights, "Detector checkpoint (default: random weights)");
    bench->add_option("--warmup-iters", bench_warmup, "Untimed iterations")->capture_default_str();
    bench->add_option("--iters", bench_iters, "Timed iterations")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (*synth) return cmd_synth(synth_n, synth_size, synth_seed, synth_out);
        if (*anchors) return cmd_anchors(anc_data, anc_k, anc_seed, anc_input, anc_out);
        if (*train_det) return cmd_train_det(det_flags);
        if (*train_cls) return cmd_train_cls(cls_flags, cls_cifar);
        if (*ablate) return cmd_ablate(abl_flags, abl_cifar, abl_out);
        if (*eval) return cmd_eval(eval_flags, eval_weights, eval_preds, eval_data, eval_out, eval_conf, eval_nms, eval_fps);
        if (*detect) return cmd_detect(detect_flags, det_weights, det_images, det_dir, det_out, det_conf, det_nms);
        if (*grad) return cmd_gradcheck(grad_seeds, grad_tol);
        if (*bench) return cmd_bench(bench_flags, bench_weights, bench_warmup, bench_iters);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return kFailure;
    }
    return kOk;
}
