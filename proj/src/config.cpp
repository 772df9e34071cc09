#include "mrham/config.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mrham {

using nlohmann::ordered_json;

namespace {

using Handler = std::function<void(const ordered_json&)>;

template <typename V>
Handler bind(V& target) {
    return [&target](const ordered_json& v) { target = v.get<V>(); };
}

Handler bind_path(std::filesystem::path& target) {
    return [&target](const ordered_json& v) { target = v.get<std::string>(); };
}

void dispatch(const ordered_json& obj, const std::string& where, const std::map<std::string, Handler>& handlers) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        const std::string name = where.empty() ? key : where + "." + key;
        auto it = handlers.find(key);
        if (it == handlers.end()) throw ConfigError("unknown config key '" + name + "'");
        try {
            it->second(value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + name + "': " + e.what());
        }
    }
}

const char* schedule_name(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "step"; }

ScheduleKind parse_schedule(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "step") return ScheduleKind::step;
    throw ConfigError("optim.schedule must be 'cosine' or 'step', got '" + s + "'");
}

void apply_object(RunConfig& cfg, const ordered_json& root) {
    ModelConfig& m = cfg.model;
    DataConfig& d = cfg.data;
    TrainSettings& t = cfg.train;
    OptimConfig& o = cfg.optim;

    std::map<std::string, Handler> model{
        {"backbone", bind(m.backbone)},
        {"block", bind(m.block)},
        {"arrangement", bind(m.arrangement)},
        {"width", bind(m.width)},
        {"input_size", bind(m.input_size)},
        {"num_classes", bind(m.num_classes)},
        {"attention_reduction", bind(m.attention_reduction)},
        {"dropblock_keep_prob", bind(m.dropblock_keep_prob)},
        {"dropblock_size", bind(m.dropblock_size)},
        {"ignore_threshold", bind(m.ignore_threshold)},
        {"anchors", [&](const ordered_json& v) {
             if (v.is_string()) {
                 m.anchors = load_anchors(v.get<std::string>()).wh;
                 return;
             }
             m.anchors.clear();
             for (const auto& p : v) {
                 if (!p.is_array() || p.size() != 2) throw ConfigError("model.anchors: expected [w, h] pairs");
                 m.anchors.emplace_back(p[0].get<double>(), p[1].get<double>());
             }
         }},
        {"loss", [&](const ordered_json& v) {
             dispatch(v, "model.loss", {{"box", bind(m.loss.box)}, {"obj", bind(m.loss.obj)}, {"cls", bind(m.loss.cls)}});
         }},
    };

    std::map<std::string, Handler> optim{
        {"preset", [](const ordered_json&) {}},  // applied first, below
        {"lr0", bind(o.lr0)},
        {"momentum", bind(o.momentum)},
        {"weight_decay", bind(o.weight_decay)},
        {"schedule", [&](const ordered_json& v) { o.schedule = parse_schedule(v.get<std::string>()); }},
        {"epochs", bind(o.epochs)},
        {"batch_size", bind(o.batch_size)},
        {"milestones", bind(o.milestones)},
        {"factor", bind(o.factor)},
        {"warmup_steps", bind(o.warmup_steps)},
    };

    std::map<std::string, Handler> data{
        {"format", bind(d.format)},
        {"train", bind_path(d.train)},
        {"train_labels", bind_path(d.train_labels)},
        {"val", bind_path(d.val)},
        {"val_labels", bind_path(d.val_labels)},
        {"classes", bind_path(d.classes)},
        {"val_ratio", bind(d.val_ratio)},
        {"synth_n", bind(d.synth_n)},
        {"synth_size", bind(d.synth_size)},
        {"synth_seed", bind(d.synth_seed)},
        {"cifar_dir", bind_path(d.cifar_dir)},
        {"cifar_subset", bind(d.cifar_subset)},
    };

    std::map<std::string, Handler> train{
        {"seed", bind(t.seed)},
        {"max_steps", bind(t.max_steps)},
        {"mosaic_prob", bind(t.mosaic_prob)},
        {"hflip", bind(t.hflip)},
        {"workers", bind(t.workers)},
        {"eval_every", bind(t.eval_every)},
        {"conf_threshold", bind(t.conf_threshold)},
        {"nms_iou", bind(t.nms_iou)},
        {"stop_at_map", bind(t.stop_at_map)},
        {"resume", bind_path(t.resume)},
    };

    dispatch(root, "",
             {
                 {"model", [&](const ordered_json& v) { dispatch(v, "model", model); }},
                 {"optim", [&](const ordered_json& v) {
                      if (v.is_object() && v.contains("preset")) {
                          cfg.optim_preset = v["preset"].get<std::string>();
                          o = optim_preset(cfg.optim_preset);
                      }
                      dispatch(v, "optim", optim);
                  }},
                 {"data", [&](const ordered_json& v) { dispatch(v, "data", data); }},
                 {"train", [&](const ordered_json& v) { dispatch(v, "train", train); }},
                 {"run_root", bind_path(cfg.run_root)},
             });
}

}  // namespace

OptimConfig optim_preset(const std::string& name) {
    if (name == "detection_full") return OptimConfig::detection_full();
    if (name == "classification_full") return OptimConfig::classification_full();
    if (name == "detection_desk") return OptimConfig::detection_desk();
    if (name == "classification_desk") return OptimConfig::classification_desk();
    throw ConfigError("unknown optimizer preset '" + name + "'");
}

RunConfig RunConfig::detection_defaults() { return RunConfig{}; }

RunConfig RunConfig::classification_defaults() {
    RunConfig cfg;
    cfg.optim_preset = "classification_desk";
    cfg.optim = OptimConfig::classification_desk();
    cfg.model.num_classes = 10;
    cfg.model.input_size = 32;
    return cfg;
}

std::string RunConfig::to_json() const {
    ordered_json j;
    ordered_json anchors = ordered_json::array();
    for (const auto& [w, h] : model.anchors) anchors.push_back({w, h});
    j["model"] = {{"backbone", model.backbone},
                  {"block", model.block},
                  {"arrangement", model.arrangement},
                  {"width", model.width},
                  {"input_size", model.input_size},
                  {"num_classes", model.num_classes},
                  {"attention_reduction", model.attention_reduction},
                  {"dropblock_keep_prob", model.dropblock_keep_prob},
                  {"dropblock_size", model.dropblock_size},
                  {"ignore_threshold", model.ignore_threshold},
                  {"anchors", anchors},
                  {"loss", {{"box", model.loss.box}, {"obj", model.loss.obj}, {"cls", model.loss.cls}}}};
    j["optim"] = {{"preset", optim_preset},
                  {"lr0", optim.lr0},
                  {"momentum", optim.momentum},
                  {"weight_decay", optim.weight_decay},
                  {"schedule", schedule_name(optim.schedule)},
                  {"epochs", optim.epochs},
                  {"batch_size", optim.batch_size},
                  {"milestones", optim.milestones},
                  {"factor", optim.factor},
                  {"warmup_steps", optim.warmup_steps}};
    j["data"] = {{"format", data.format},
                 {"train", data.train.string()},
                 {"train_labels", data.train_labels.string()},
                 {"val", data.val.string()},
                 {"val_labels", data.val_labels.string()},
                 {"classes", data.classes.string()},
                 {"val_ratio", data.val_ratio},
                 {"synth_n", data.synth_n},
                 {"synth_size", data.synth_size},
                 {"synth_seed", data.synth_seed},
                 {"cifar_dir", data.cifar_dir.string()},
                 {"cifar_subset", data.cifar_subset}};
    j["train"] = {{"seed", train.seed},
                  {"max_steps", train.max_steps},
                  {"mosaic_prob", train.mosaic_prob},
                  {"hflip", train.hflip},
                  {"workers", train.workers},
                  {"eval_every", train.eval_every},
                  {"conf_threshold", train.conf_threshold},
                  {"nms_iou", train.nms_iou},
                  {"stop_at_map", train.stop_at_map},
                  {"resume", train.resume.string()}};
    j["run_root"] = run_root.string();
    return j.dump(2);
}

void RunConfig::validate() const {
    try {
        (void)parse_block_kind(model.block);
        (void)parse_arrangement(model.arrangement);
        optim.validate();
        if (model.num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
        if (model.input_size <= 0 || model.input_size % 32 != 0)
            throw ConfigError("model.input_size must be a positive multiple of 32, got " +
                              std::to_string(model.input_size));
        if (data.format != "dataset" && data.format != "yolo" && data.format != "voc" && data.format != "phantom")
            throw ConfigError("data.format must be dataset, yolo, voc or phantom, got '" + data.format + "'");
        if (!(data.val_ratio >= 0 && data.val_ratio < 1)) throw ConfigError("data.val_ratio must lie in [0, 1)");
        if (data.synth_n < 1 || data.synth_size < 32) throw ConfigError("data.synth_n >= 1 and synth_size >= 32 required");
        if (data.cifar_subset < 0) throw ConfigError("data.cifar_subset must be >= 0");
        if (train.workers < 1) throw ConfigError("train.workers must be >= 1");
        if (train.max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
        if (train.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
        if (!(train.mosaic_prob >= 0 && train.mosaic_prob <= 1)) throw ConfigError("train.mosaic_prob must lie in [0, 1]");
        if (!(train.conf_threshold > 0 && train.conf_threshold < 1))
            throw ConfigError("train.conf_threshold must lie in (0, 1)");
        if (!(train.nms_iou > 0 && train.nms_iou < 1)) throw ConfigError("train.nms_iou must lie in (0, 1)");
        backbone_spec().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

BackboneSpec RunConfig::backbone_spec() const {
    BackboneSpec spec = BackboneSpec::from_preset(model.backbone, parse_block_kind(model.block), model.width);
    spec.arrangement = parse_arrangement(model.arrangement);
    spec.attention_reduction = model.attention_reduction;
    spec.dropblock_keep_prob = model.dropblock_keep_prob;
    spec.dropblock_size = model.dropblock_size;
    return spec;
}

DetectorSpec RunConfig::detector_spec() const {
    DetectorSpec spec;
    spec.input_size = model.input_size;
    spec.num_classes = model.num_classes;
    spec.backbone = backbone_spec();
    spec.anchors = model.anchors.empty() ? DetectorSpec::default_anchors(model.input_size) : AnchorSet{model.anchors};
    spec.loss = model.loss;
    spec.ignore_threshold = model.ignore_threshold;
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return spec;
}

DetTrainConfig RunConfig::det_train_config() const {
    DetTrainConfig c;
    c.model = detector_spec();
    c.optim = optim;
    c.seed = train.seed;
    c.max_steps = train.max_steps;
    c.mosaic_prob = train.mosaic_prob;
    c.hflip = train.hflip;
    c.workers = train.workers;
    c.eval_every = train.eval_every;
    c.conf_threshold = train.conf_threshold;
    c.nms_iou = train.nms_iou;
    c.stop_at_map = train.stop_at_map;
    c.resume = train.resume;
    return c;
}

ClsTrainConfig RunConfig::cls_train_config() const {
    ClsTrainConfig c;
    c.backbone = backbone_spec();
    c.num_classes = model.num_classes;
    c.optim = optim;
    c.seed = train.seed;
    c.max_steps = train.max_steps;
    c.resume = train.resume;
    return c;
}

RunConfig apply_json(const RunConfig& base, const std::string& json_text, const std::string& source) {
    ordered_json root;
    try {
        root = ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    RunConfig cfg = base;
    try {
        apply_object(cfg, root);
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

RunConfig apply_override(const RunConfig& base, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    ordered_json value;
    try {
        value = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        value = text;
    }
    ordered_json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
        parts.push_back(rest.substr(0, pos));
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = ordered_json{{*it, patch}};
    return apply_json(base, patch.dump(), "--set " + key);
}

RunConfig load_run_config(const RunConfig& base, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return apply_json(base, buf.str(), path.string());
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
    return h;
}

std::filesystem::path default_run_root() {
    const char* env = std::getenv("MRHAM_RUN_ROOT");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path create_run_dir(const std::filesystem::path& root, const RunConfig& config) {
    const std::string json = config.to_json();
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    char hash[20];
    std::snprintf(hash, sizeof hash, "%08llx", static_cast<unsigned long long>(fnv1a64(json) >> 32));
    std::filesystem::create_directories(root);
    std::filesystem::path dir = root / (std::string(stamp) + "-" + hash);
    for (int k = 1; !std::filesystem::create_directory(dir); ++k)
        dir = root / (std::string(stamp) + "-" + hash + "-" + std::to_string(k));
    std::ofstream(dir / kIncompleteSentinel) << "run in progress or aborted\n";
    std::ofstream(dir / "config.json") << json << '\n';
    return dir;
}

void mark_run_complete(const std::filesystem::path& run_dir) {
    std::filesystem::remove(run_dir / kIncompleteSentinel);
}

}  // namespace mrham
