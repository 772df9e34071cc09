#include "mrham/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace mrham {

OptimConfig OptimConfig::detection_full() { return {}; }

OptimConfig OptimConfig::classification_full() {
    OptimConfig c;
    c.lr0 = 0.1;
    c.momentum = 0.9;
    c.weight_decay = 5e-4;
    c.schedule = ScheduleKind::step;
    c.epochs = 300;
    c.batch_size = 256;
    return c;
}

OptimConfig OptimConfig::detection_desk() {
    OptimConfig c;
    c.lr0 = 0.01;
    c.epochs = 50;
    c.batch_size = 8;
    c.warmup_steps = 50;
    return c;
}

OptimConfig OptimConfig::classification_desk() {
    OptimConfig c = classification_full();
    c.lr0 = 0.05;
    c.schedule = ScheduleKind::cosine;
    c.epochs = 30;
    c.batch_size = 64;
    c.warmup_steps = 50;
    return c;
}

void OptimConfig::validate() const {
    if (!(lr0 > 0)) throw std::invalid_argument("optimizer: lr0 must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
    if (epochs < 1) throw std::invalid_argument("optimizer: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("optimizer: batch_size must be >= 1");
    if (warmup_steps < 0) throw std::invalid_argument("optimizer: warmup_steps must be >= 0");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
        throw std::invalid_argument("optimizer: milestones must be ascending");
    if (!(factor > 0)) throw std::invalid_argument("optimizer: factor must be > 0");
}

double OptimConfig::lr(int epoch) const {
    return schedule == ScheduleKind::cosine ? cosine_lr(epoch, epochs, lr0) : step_lr(epoch, lr0, milestones, factor);
}

double OptimConfig::lr_at(int epoch, long step) const {
    const double base = lr(epoch);
    return warmup_steps > 0 && step < warmup_steps ? base * double(step + 1) / warmup_steps : base;
}

double cosine_lr(int epoch, int total_epochs, double lr0) {
    if (total_epochs < 1 || epoch < 0 || epoch > total_epochs)
        throw std::invalid_argument("cosine_lr: need 0 <= epoch <= total_epochs");
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

double step_lr(int epoch, double lr0, const std::vector<int>& milestones, double factor) {
    if (!std::is_sorted(milestones.begin(), milestones.end()))
        throw std::invalid_argument("step_lr: milestones must be ascending");
    const auto passed = std::upper_bound(milestones.begin(), milestones.end(), epoch) - milestones.begin();
    return lr0 * std::pow(factor, double(passed));
}

template <typename T>
void sgd_step(ParamList<T>& params, std::map<std::string, Array<T>>& velocity, double lr, double momentum,
              double weight_decay) {
    for (const auto& p : params) {
        if (p.kind == ParamKind::buffer || !p.tensor.has_grad()) continue;
        if (!p.tensor.grad().allFinite()) throw std::runtime_error("sgd_step: non-finite gradient in " + p.name);
    }
    for (auto& p : params) {
        if (p.kind == ParamKind::buffer) continue;
        auto& t = p.tensor;
        Array<T> g = t.has_grad() ? Array<T>(t.grad()) : Array<T>(Array<T>::Zero(t.numel()));
        if (p.kind == ParamKind::weight && weight_decay != 0) g += T(weight_decay) * t.values();
        auto [it, fresh] = velocity.try_emplace(p.name, Array<T>::Zero(t.numel()));
        Array<T>& v = it->second;
        if (v.size() != t.numel()) throw std::runtime_error("sgd_step: velocity shape mismatch for " + p.name);
        v = T(momentum) * v + g;
        t.values() -= T(lr) * v;
    }
}

template void sgd_step(ParamList<float>&, std::map<std::string, Array<float>>&, double, double, double);
template void sgd_step(ParamList<double>&, std::map<std::string, Array<double>>&, double, double, double);

void sgd_step(ParamList<float>& params, TrainState& state, double lr, double momentum, double weight_decay) {
    sgd_step(params, state.velocity, lr, momentum, weight_decay);
}

NamedTensors make_checkpoint(const ParamList<float>& params, const TrainState& state) {
    NamedTensors out;
    for (const auto& p : params) out.emplace_back(p.name, p.tensor.detach());
    for (const auto& [name, v] : state.velocity) out.emplace_back("velocity/" + name, Tensor<float>({int(v.size())}, v));
    out.emplace_back("state/epoch", Tensor<float>::scalar(float(state.epoch)));
    // Steps can exceed float's exact integer range; split into two exact halves.
    out.emplace_back("state/step", Tensor<float>::from({2}, {float(state.step >> 20), float(state.step & 0xFFFFF)}));
    out.emplace_back("state/best", Tensor<float>::scalar(float(state.best_metric)));
    return out;
}

TrainState restore_checkpoint(ParamList<float>& params, const NamedTensors& tensors) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, t] : tensors) by_name[name] = &t;
    TrainState state;
    for (auto& p : params) {
        const auto it = by_name.find(p.name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + p.name);
        if (it->second->shape() != p.tensor.shape())
            throw std::runtime_error("checkpoint tensor " + p.name + " has shape " + shape_str(it->second->shape()) +
                                     ", model expects " + shape_str(p.tensor.shape()));
        p.tensor.values() = it->second->values();
        if (const auto v = by_name.find("velocity/" + p.name); v != by_name.end()) {
            if (v->second->numel() != p.tensor.numel())
                throw std::runtime_error("checkpoint velocity for " + p.name + " has the wrong size");
            state.velocity[p.name] = v->second->values();
        }
    }
    if (const auto e = by_name.find("state/epoch"); e != by_name.end()) state.epoch = int(e->second->item());
    if (const auto s = by_name.find("state/step"); s != by_name.end() && s->second->numel() == 2)
        state.step = (long((*s->second)[0]) << 20) + long((*s->second)[1]);
    if (const auto b = by_name.find("state/best"); b != by_name.end()) state.best_metric = b->second->item();
    return state;
}

void load_weights(ParamList<float>& params, const fs::path& path) {
    (void)restore_checkpoint(params, load_checkpoint(path));
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// Keeps header + rows with epoch <= keep (used when resuming), or starts fresh.
void reset_log(const fs::path& path, const char* header, int keep) {
    std::vector<std::string> rows;
    if (keep > 0 && fs::exists(path)) {
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line))
            if (!line.empty() && std::stoi(line.substr(0, line.find(','))) <= keep) rows.push_back(line);
    }
    std::ofstream out(path, std::ios::trunc);
    out << header << '\n';
    for (const auto& r : rows) out << r << '\n';
}

void append_line(const fs::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    out << line << '\n';
}

}  // namespace

std::string EpochLog::csv() const {
    return std::to_string(epoch) + "," + fmt(lr) + "," + fmt(loss_box) + "," + fmt(loss_obj) + "," + fmt(loss_cls) +
           "," + (has_val ? fmt(val_map50) + "," + fmt(val_p) + "," + fmt(val_r) + "," + fmt(val_f1) : ",,,");
}

std::string ClsEpochLog::csv() const {
    return std::to_string(epoch) + "," + fmt(lr) + "," + fmt(loss) + "," + fmt(top1) + "," + fmt(top5);
}

std::vector<Sample> prepare_eval_samples(const std::vector<Sample>& samples, int input_size) {
    std::vector<Sample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(letterbox(s, input_size).first);
    return out;
}

std::vector<std::vector<Detection>> detect_batch(Detector<float>& model, const std::vector<Sample>& prepared,
                                                 double conf_threshold, double nms_iou, int batch_size) {
    NoGradGuard guard;
    std::vector<std::vector<Detection>> out;
    for (std::size_t start = 0; start < prepared.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(prepared.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const Image*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&prepared[i].image);
        const auto raw = model.forward(to_batch<float>(imgs), {});
        for (auto& d : postprocess(raw, model.spec(), conf_threshold, nms_iou)) out.push_back(std::move(d));
    }
    return out;
}

EvalReport evaluate_detector(Detector<float>& model, const std::vector<Sample>& samples,
                             const std::vector<std::string>& class_names, double conf_threshold, double nms_iou) {
    constexpr double kSweepThreshold = 0.001;
    const int size = model.spec().input_size;
    const auto prepared = prepare_eval_samples(samples, size);
    const auto dets = detect_batch(model, prepared, std::min(kSweepThreshold, conf_threshold), nms_iou);
    std::vector<std::vector<GroundTruth>> gts;
    for (const auto& s : prepared) {
        std::vector<GroundTruth> px;
        for (const auto& g : s.gts) px.push_back({g.class_id, g.box.scaled(size, size)});
        gts.push_back(std::move(px));
    }
    return evaluate_detections(dets, gts, class_names, conf_threshold);
}

namespace {

// Training view of sample `slot` in an epoch: optional mosaic and flip, then letterbox.
Sample training_view(const Dataset& train, const std::vector<int>& order, std::size_t slot,
                     const DetTrainConfig& cfg, int epoch) {
    Rng rng = Rng::derive(cfg.seed, 0x1000 + static_cast<std::uint64_t>(epoch), slot);
    const Sample& base = train.samples[static_cast<std::size_t>(order[slot])];
    const int size = cfg.model.input_size;
    Sample s;
    if (cfg.mosaic_prob > 0 && rng.bernoulli(cfg.mosaic_prob)) {
        std::array<const Sample*, 4> parts{&base, nullptr, nullptr, nullptr};
        for (int k = 1; k < 4; ++k) parts[k] = &train.samples[rng.below(train.samples.size())];
        s = mosaic(parts, size, rng);
    } else {
        s = letterbox(base, size).first;
    }
    if (cfg.hflip && rng.bernoulli(0.5)) s = hflip(s);
    return s;
}

}  // namespace

TrainResult train_detector(const DetTrainConfig& cfg, Detector<float>& model, const Dataset& train,
                           const Dataset& val, const ProgressFn& progress) {
    cfg.model.validate();
    cfg.optim.validate();
    if (train.samples.empty()) throw std::invalid_argument("train_detector: empty training set");
    for (const auto& s : train.samples)
        if (auto problem = sample_problem(s, cfg.model.num_classes); !problem.empty())
            throw std::invalid_argument("train_detector: sample " + s.name + ": " + problem);

    const auto t_start = std::chrono::steady_clock::now();
    ParamList<float> params = model.parameters();
    TrainState state;
    if (!cfg.resume.empty()) state = restore_checkpoint(params, load_checkpoint(cfg.resume));

    const bool write = !cfg.out_dir.empty();
    const fs::path csv = cfg.out_dir / "metrics.csv";
    if (write) {
        fs::create_directories(cfg.out_dir);
        reset_log(csv, kMetricHeader, state.epoch);
    }

    std::vector<std::string> names = train.classes.names;
    if (static_cast<int>(names.size()) != cfg.model.num_classes) {
        names.clear();
        for (int c = 0; c < cfg.model.num_classes; ++c) names.push_back(std::to_string(c));
    }

    TrainResult result;
    const int n = static_cast<int>(train.samples.size());
    const int bs = cfg.optim.batch_size;
    const int batches = (n + bs - 1) / bs;
    bool stop = false;
    bool first = true;
    for (int epoch = state.epoch; epoch < cfg.optim.epochs && !stop; ++epoch) {
        Rng order_rng = Rng::derive(cfg.seed, 0x04de7, static_cast<std::uint64_t>(epoch));
        const std::vector<int> order = order_rng.permutation(n);
        EpochLog log;
        log.epoch = epoch + 1;
        log.lr = cfg.optim.lr(epoch);
        int done = 0;
        for (int b = 0; b < batches; ++b) {
            if (cfg.max_steps > 0 && state.step >= cfg.max_steps) {
                stop = true;
                break;
            }
            const int start = b * bs, count = std::min(bs, n - start);
            std::vector<Sample> views(static_cast<std::size_t>(count));
            parallel_for(count, cfg.workers, [&](int i) {
                views[static_cast<std::size_t>(i)] =
                    training_view(train, order, static_cast<std::size_t>(start + i), cfg, epoch);
            });
            std::vector<const Image*> imgs;
            std::vector<std::vector<GroundTruth>> gts;
            for (const auto& v : views) {
                imgs.push_back(&v.image);
                gts.push_back(v.gts);
            }
            Rng drop_rng = Rng::derive(cfg.seed, 0xd50b + static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b));
            const ForwardContext ctx{true, &drop_rng};
            const auto raw = model.forward(to_batch<float>(imgs), ctx);
            const auto assignment = assign_targets(gts, cfg.model);
            auto loss = detection_loss(raw, assignment, cfg.model);
            const double total = loss.total.item();
            if (!std::isfinite(total)) {
                Tape<float>::current().clear();
                throw std::runtime_error("train_detector: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(b));
            }
            for (auto& p : params) p.tensor.zero_grad();
            backward(loss.total);
            sgd_step(params, state, cfg.optim.lr_at(epoch, state.step), cfg.optim.momentum, cfg.optim.weight_decay);
            ++state.step;
            if (first) result.initial_loss = total, first = false;
            log.loss_box += loss.box;
            log.loss_obj += loss.obj;
            log.loss_cls += loss.cls;
            log.loss_total += total;
            ++done;
        }
        if (done == 0) break;
        log.loss_box /= done;
        log.loss_obj /= done;
        log.loss_cls /= done;
        log.loss_total /= done;
        result.final_loss = log.loss_total;
        state.epoch = epoch + 1;

        const bool last = stop || state.epoch == cfg.optim.epochs ||
                          (cfg.max_steps > 0 && state.step >= cfg.max_steps);
        if (!val.samples.empty() && (state.epoch % std::max(cfg.eval_every, 1) == 0 || last)) {
            result.last_eval = evaluate_detector(model, val.samples, names, cfg.conf_threshold, cfg.nms_iou);
            log.has_val = true;
            log.val_map50 = result.last_eval.map50;
            log.val_p = result.last_eval.precision;
            log.val_r = result.last_eval.recall;
            log.val_f1 = result.last_eval.f1;
            if (cfg.stop_at_map > 0 && log.val_map50 >= cfg.stop_at_map) stop = true;
        }
        const double metric = log.has_val ? log.val_map50 : -log.loss_total;
        const bool best = metric > state.best_metric;
        if (best) state.best_metric = metric;
        result.log.push_back(log);
        if (write) {
            append_line(csv, log.csv());
            const NamedTensors ckpt = make_checkpoint(params, state);
            save_checkpoint(cfg.out_dir / "last.bin", ckpt);
            if (best) save_checkpoint(cfg.out_dir / "best.bin", ckpt);
        }
        if (progress) progress(log);
        if (cfg.max_steps > 0 && state.step >= cfg.max_steps) stop = true;
    }
    result.steps = state.step;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

Tensor<float> classify_all(Classifier<float>& model, const ClassificationSet& data, int batch_size) {
    NoGradGuard guard;
    const int n = static_cast<int>(data.size()), k = model.num_classes();
    Array<float> scores(std::int64_t(n) * k);
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        std::vector<const Image*> imgs;
        for (int i = start; i < end; ++i) imgs.push_back(&data.images[static_cast<std::size_t>(i)]);
        const Tensor<float> out = model.forward(to_batch<float>(imgs), {});
        scores.segment(std::int64_t(start) * k, out.numel()) = out.values();
    }
    return Tensor<float>({n, k}, std::move(scores));
}

namespace {

// Random 4-pixel-padded crop and horizontal flip, as in the usual CIFAR recipe.
Image augment_cifar(const Image& src, Rng& rng) {
    const int dx = int(rng.below(9)) - 4, dy = int(rng.below(9)) - 4;
    const bool flip = rng.bernoulli(0.5);
    Image out(src.width, src.height, 0.0f);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                const int sx = (flip ? src.width - 1 - x : x) + dx, sy = y + dy;
                if (sx >= 0 && sy >= 0 && sx < src.width && sy < src.height) out.at(c, y, x) = src.at(c, sy, sx);
            }
    return out;
}

}  // namespace

ClsTrainResult train_classifier(const ClsTrainConfig& cfg, Classifier<float>& model, const ClassificationSet& train,
                                const ClassificationSet& val, const ClsProgressFn& progress) {
    cfg.optim.validate();
    if (train.size() == 0) throw std::invalid_argument("train_classifier: empty training set");
    for (int label : train.labels)
        if (label < 0 || label >= model.num_classes())
            throw std::invalid_argument("train_classifier: label " + std::to_string(label) + " out of range");

    const auto t_start = std::chrono::steady_clock::now();
    ParamList<float> params = model.parameters();
    TrainState state;
    if (!cfg.resume.empty()) state = restore_checkpoint(params, load_checkpoint(cfg.resume));
    const bool write = !cfg.out_dir.empty();
    const fs::path csv = cfg.out_dir / "metrics.csv";
    if (write) {
        fs::create_directories(cfg.out_dir);
        reset_log(csv, kClassifierHeader, state.epoch);
    }

    ClsTrainResult result;
    const int n = static_cast<int>(train.size());
    const int bs = cfg.optim.batch_size;
    bool stop = false;
    for (int epoch = state.epoch; epoch < cfg.optim.epochs && !stop; ++epoch) {
        Rng rng = Rng::derive(cfg.seed, 0xc1a55, static_cast<std::uint64_t>(epoch));
        const std::vector<int> order = rng.permutation(n);
        ClsEpochLog log;
        log.epoch = epoch + 1;
        log.lr = cfg.optim.lr(epoch);
        int done = 0;
        for (int start = 0; start < n; start += bs) {
            if (cfg.max_steps > 0 && state.step >= cfg.max_steps) {
                stop = true;
                break;
            }
            const int end = std::min(n, start + bs);
            std::vector<Image> batch;
            std::vector<int> labels;
            for (int i = start; i < end; ++i) {
                const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
                batch.push_back(cfg.augment ? augment_cifar(train.images[idx], rng) : train.images[idx]);
                labels.push_back(train.labels[idx]);
            }
            std::vector<const Image*> ptrs;
            for (const auto& im : batch) ptrs.push_back(&im);
            const ForwardContext ctx{true, &rng};
            auto loss = softmax_cross_entropy(model.forward(to_batch<float>(ptrs), ctx), labels);
            if (!std::isfinite(loss.item())) {
                Tape<float>::current().clear();
                throw std::runtime_error("train_classifier: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(start / bs));
            }
            for (auto& p : params) p.tensor.zero_grad();
            log.loss += loss.item();
            backward(loss);
            sgd_step(params, state, cfg.optim.lr_at(epoch, state.step), cfg.optim.momentum, cfg.optim.weight_decay);
            ++state.step;
            ++done;
        }
        if (done == 0) break;
        log.loss /= done;
        state.epoch = epoch + 1;
        if (val.size() > 0) {
            const Tensor<float> scores = classify_all(model, val);
            log.top1 = topk_accuracy(scores, val.labels, 1);
            log.top5 = topk_accuracy(scores, val.labels, std::min(5, model.num_classes()));
        }
        const bool best = log.top1 > state.best_metric;
        if (best) state.best_metric = log.top1;
        result.log.push_back(log);
        result.top1 = log.top1;
        result.top5 = log.top5;
        if (write) {
            append_line(csv, log.csv());
            const NamedTensors ckpt = make_checkpoint(params, state);
            save_checkpoint(cfg.out_dir / "last.bin", ckpt);
            if (best) save_checkpoint(cfg.out_dir / "best.bin", ckpt);
        }
        if (progress) progress(log);
    }
    result.steps = state.step;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

}  // namespace mrham
