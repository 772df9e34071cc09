#pragma once

#include "mrham/detector.hpp"
#include "mrham/train.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrham {

/// Raised for malformed or inconsistent configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::string backbone = "cspdarknet53-slim";
    std::string block = "mrham";
    std::string arrangement = "rca+rsa";
    double width = 1.0;
    int input_size = 608;
    int num_classes = 4;
    int attention_reduction = 16;
    double dropblock_keep_prob = 0.9;
    int dropblock_size = 7;
    double ignore_threshold = 0.5;
    LossWeights loss;
    /// Empty: YOLOv4 defaults rescaled to the input size.
    std::vector<std::pair<double, double>> anchors;
};

struct DataConfig {
    std::string format = "dataset";  // dataset | yolo | voc | phantom
    std::filesystem::path train;     // dataset root, image dir (yolo) or annotation dir (voc)
    std::filesystem::path train_labels;  // yolo only
    std::filesystem::path val;
    std::filesystem::path val_labels;
    std::filesystem::path classes;   // class-name file; empty: chambers
    double val_ratio = 0.2;          // held-out share when no val set is given
    // Phantom series used when format is "phantom".
    int synth_n = 64;
    int synth_size = 320;
    std::uint64_t synth_seed = 0;
    // Classification.
    std::filesystem::path cifar_dir;
    int cifar_subset = 0;  // 0: all records
};

struct TrainSettings {
    std::uint64_t seed = 0;
    int max_steps = 0;
    double mosaic_prob = 0.0;
    bool hflip = false;
    int workers = 1;
    int eval_every = 1;
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
    double stop_at_map = 0.0;
    std::filesystem::path resume;
};

/// Fully resolved run description. JSON sections: model, optim, data, train, run_root.
struct RunConfig {
    ModelConfig model;
    std::string optim_preset = "detection_desk";
    OptimConfig optim = OptimConfig::detection_desk();
    DataConfig data;
    TrainSettings train;
    std::filesystem::path run_root;  // empty: default_run_root()

    /// Detection defaults; `classification_defaults` switches the optimizer preset and model head.
    static RunConfig detection_defaults();
    static RunConfig classification_defaults();

    std::string to_json() const;
    void validate() const;

    BackboneSpec backbone_spec() const;
    DetectorSpec detector_spec() const;
    DetTrainConfig det_train_config() const;
    ClsTrainConfig cls_train_config() const;
};

/// Named optimizer presets: detection_full, classification_full, detection_desk, classification_desk.
OptimConfig optim_preset(const std::string& name);

/// Applies a JSON document on top of `base`. Unknown keys anywhere are rejected.
/// An "optim.preset" key resets the optimizer before the other optim keys apply.
RunConfig apply_json(const RunConfig& base, const std::string& json_text, const std::string& source = "config");

/// "section.key=value" override; the value is parsed as JSON, falling back to a string.
RunConfig apply_override(const RunConfig& base, const std::string& assignment);

RunConfig load_run_config(const RunConfig& base, const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::string& text);

/// $MRHAM_RUN_ROOT, else "runs".
std::filesystem::path default_run_root();

/// Creates <root>/<YYYYmmdd-HHMMSS>-<hash> holding config.json and an INCOMPLETE
/// sentinel. A numeric suffix keeps repeated runs within one second apart.
std::filesystem::path create_run_dir(const std::filesystem::path& root, const RunConfig& config);

inline constexpr const char* kIncompleteSentinel = "INCOMPLETE";

/// Removes the sentinel once the run finished.
void mark_run_complete(const std::filesystem::path& run_dir);

}  // namespace mrham
