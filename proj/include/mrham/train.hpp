#pragma once

#include "mrham/backbone.hpp"
#include "mrham/data.hpp"
#include "mrham/detector.hpp"
#include "mrham/eval.hpp"
#include "mrham/serialize.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace mrham {

enum class ScheduleKind { cosine, step };

struct OptimConfig {
    double lr0 = 1e-4;
    double momentum = 0.937;
    double weight_decay = 5e-4;
    ScheduleKind schedule = ScheduleKind::cosine;
    int epochs = 1000;
    int batch_size = 4;
    std::vector<int> milestones{150, 200, 250};
    double factor = 0.1;
    int warmup_steps = 0;  // linear ramp from 0 over the first optimizer steps

    /// Detection as published: lr 1e-4, momentum 0.937, 1000 epochs, batch 4, cosine.
    static OptimConfig detection_full();
    /// Classification as published: lr 0.1, momentum 0.9, 300 epochs, batch 256, step decay.
    static OptimConfig classification_full();
    /// Small-data presets for desk runs (<= 50 epochs).
    static OptimConfig detection_desk();
    static OptimConfig classification_desk();

    void validate() const;
    /// Scheduled rate for an epoch, before warmup.
    double lr(int epoch) const;
    /// Rate for a global optimizer step inside `epoch`, warmup included.
    double lr_at(int epoch, long step) const;
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs)).
double cosine_lr(int epoch, int total_epochs, double lr0);
/// lr0 * factor^(number of milestones <= epoch).
double step_lr(int epoch, double lr0, const std::vector<int>& milestones = {150, 200, 250}, double factor = 0.1);

/// Optimizer bookkeeping. Velocities are keyed by parameter name.
struct TrainState {
    int epoch = 0;  // completed epochs
    long step = 0;  // completed optimizer steps
    double best_metric = -std::numeric_limits<double>::infinity();
    std::map<std::string, Array<float>> velocity;
};

/// v = momentum * v + g + wd * p; p -= lr * v. Decay applies to weights only;
/// buffers are skipped. Throws before touching anything if a gradient is not finite.
template <typename T>
void sgd_step(ParamList<T>& params, std::map<std::string, Array<T>>& velocity, double lr, double momentum,
              double weight_decay);
void sgd_step(ParamList<float>& params, TrainState& state, double lr, double momentum, double weight_decay);

/// Parameters, buffers, velocities ("velocity/<name>") and counters ("state/...").
NamedTensors make_checkpoint(const ParamList<float>& params, const TrainState& state);
/// Copies tensors into `params` (names and shapes must match) and returns the state.
TrainState restore_checkpoint(ParamList<float>& params, const NamedTensors& tensors);
/// Loads only parameter values, ignoring optimizer state.
void load_weights(ParamList<float>& params, const std::filesystem::path& path);

inline constexpr const char* kMetricHeader = "epoch,lr,loss_box,loss_obj,loss_cls,val_map50,val_p,val_r,val_f1";

struct EpochLog {
    int epoch = 0;
    double lr = 0, loss_box = 0, loss_obj = 0, loss_cls = 0, loss_total = 0;
    double val_map50 = 0, val_p = 0, val_r = 0, val_f1 = 0;
    bool has_val = false;

    std::string csv() const;
};

struct DetTrainConfig {
    DetectorSpec model;
    OptimConfig optim = OptimConfig::detection_desk();
    std::uint64_t seed = 0;
    int max_steps = 0;            // 0: no cap
    double mosaic_prob = 0.0;     // chance a training sample is a four-image mosaic
    bool hflip = false;
    int workers = 1;
    int eval_every = 1;           // epochs between validation passes
    double conf_threshold = 0.25; // operating point for P/R/F1
    double nms_iou = 0.45;
    std::filesystem::path out_dir;  // empty: nothing written
    std::filesystem::path resume;   // checkpoint to continue from
    /// Stop once a validation pass reaches this mAP (<= 0 disables).
    double stop_at_map = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double initial_loss = 0;  // first optimizer step
    double final_loss = 0;    // mean of the last epoch
    long steps = 0;
    double seconds = 0;
    EvalReport last_eval;
};

/// Letterboxes every sample to the model input (no augmentation).
std::vector<Sample> prepare_eval_samples(const std::vector<Sample>& samples, int input_size);

/// Inference-mode detections for already letterboxed samples, in input pixels.
std::vector<std::vector<Detection>> detect_batch(Detector<float>& model, const std::vector<Sample>& prepared,
                                                 double conf_threshold, double nms_iou, int batch_size = 8);

/// mAP/P/R/F1 of `model` on samples letterboxed to its input.
EvalReport evaluate_detector(Detector<float>& model, const std::vector<Sample>& samples,
                             const std::vector<std::string>& class_names, double conf_threshold = 0.25,
                             double nms_iou = 0.45);

using ProgressFn = std::function<void(const EpochLog&)>;

TrainResult train_detector(const DetTrainConfig& config, Detector<float>& model, const Dataset& train,
                           const Dataset& val, const ProgressFn& progress = {});

struct ClsTrainConfig {
    BackboneSpec backbone;
    int num_classes = 10;
    OptimConfig optim = OptimConfig::classification_desk();
    std::uint64_t seed = 0;
    int max_steps = 0;
    bool augment = true;  // random crop (pad 4) + horizontal flip
    std::filesystem::path out_dir;
    std::filesystem::path resume;
};

inline constexpr const char* kClassifierHeader = "epoch,lr,loss,val_top1,val_top5";

struct ClsEpochLog {
    int epoch = 0;
    double lr = 0, loss = 0, top1 = 0, top5 = 0;

    std::string csv() const;
};

struct ClsTrainResult {
    std::vector<ClsEpochLog> log;
    double top1 = 0, top5 = 0;
    long steps = 0;
    double seconds = 0;
};

/// Scores for every image, inference mode, in batches.
Tensor<float> classify_all(Classifier<float>& model, const ClassificationSet& data, int batch_size = 256);

using ClsProgressFn = std::function<void(const ClsEpochLog&)>;

ClsTrainResult train_classifier(const ClsTrainConfig& config, Classifier<float>& model, const ClassificationSet& train,
                                const ClassificationSet& val, const ClsProgressFn& progress = {});

}  // namespace mrham
