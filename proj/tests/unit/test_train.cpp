#include "doctest.h"

#include "mrham/train.hpp"

#include <filesystem>
#include <fstream>
#include <cstring>
#include <sstream>

using namespace mrham;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mrham_unit_" + name);
    fs::remove_all(p);
    return p;
}

DetTrainConfig tiny_config(int epochs) {
    DetTrainConfig cfg;
    cfg.model = DetectorSpec::mrham_yolov4_slim(64, 4, 0.125);
    cfg.optim = OptimConfig::detection_desk();
    cfg.optim.lr0 = 0.05;
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 2;
    cfg.optim.warmup_steps = 2;
    cfg.seed = 3;
    cfg.mosaic_prob = 0.5;
    return cfg;
}

}  // namespace

TEST_CASE("sgd examples") {
    Tensor<float> p = Tensor<float>::from({1}, {1.0f});
    p.set_requires_grad();
    p.grad() = Array<float>::Constant(1, 1.0f);
    ParamList<float> params{{"p", p, ParamKind::weight}};
    std::map<std::string, Array<float>> vel;
    sgd_step(params, vel, 0.1, 0.0, 0.0);
    CHECK(p[0] == doctest::Approx(0.9f));

    p.grad() = Array<float>::Zero(1);
    std::map<std::string, Array<float>> fresh;
    sgd_step(params, fresh, 0.1, 0.9, 0.0);
    CHECK(p[0] == doctest::Approx(0.9f));

    // One step with decay equals a step on the gradient of loss + wd/2 * p^2.
    Tensor<double> a = Tensor<double>::from({2}, {0.5, -2.0}), b = Tensor<double>::from({2}, {0.5, -2.0});
    a.set_requires_grad();
    b.set_requires_grad();
    a.grad() = Array<double>::Constant(2, 0.3);
    b.grad() = Array<double>::Constant(2, 0.3) + 0.01 * b.values();
    ParamList<double> pa{{"a", a, ParamKind::weight}}, pb{{"b", b, ParamKind::weight}};
    std::map<std::string, Array<double>> va, vb;
    sgd_step(pa, va, 0.2, 0.5, 0.01);
    sgd_step(pb, vb, 0.2, 0.5, 0.0);
    CHECK((a.values() - b.values()).abs().maxCoeff() < 1e-15);

    // Norm parameters are not decayed; buffers never move.
    Tensor<float> g = Tensor<float>::from({1}, {2.0f}), buf = Tensor<float>::from({1}, {7.0f});
    g.set_requires_grad();
    g.grad() = Array<float>::Zero(1);
    ParamList<float> mixed{{"g", g, ParamKind::norm}, {"buf", buf, ParamKind::buffer}};
    std::map<std::string, Array<float>> vm;
    sgd_step(mixed, vm, 0.1, 0.9, 0.5);
    CHECK(g[0] == 2.0f);
    CHECK(buf[0] == 7.0f);

    p.grad() = Array<float>::Constant(1, std::numeric_limits<float>::quiet_NaN());
    const float before = p[0];
    CHECK_THROWS(sgd_step(params, vel, 0.1, 0.9, 0.0));
    CHECK(p[0] == before);
}

TEST_CASE("learning rate schedules") {
    CHECK(cosine_lr(0, 100, 0.1) == doctest::Approx(0.1));
    CHECK(cosine_lr(100, 100, 0.1) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 0.1) == doctest::Approx(0.05));
    for (int e = 1; e <= 100; ++e) CHECK(cosine_lr(e, 100, 0.1) <= cosine_lr(e - 1, 100, 0.1));
    CHECK(step_lr(149, 0.1) == doctest::Approx(0.1));
    CHECK(step_lr(150, 0.1) == doctest::Approx(0.01));
    CHECK(step_lr(250, 0.1) == doctest::Approx(1e-4));
    CHECK_THROWS_AS(cosine_lr(5, 0, 0.1), std::invalid_argument);

    OptimConfig o = OptimConfig::detection_desk();
    o.warmup_steps = 10;
    CHECK(o.lr_at(0, 0) == doctest::Approx(o.lr0 / 10));
    CHECK(o.lr_at(0, 9) == doctest::Approx(o.lr0));
    CHECK(o.lr_at(0, 50) == doctest::Approx(o.lr0));
}

TEST_CASE("published presets") {
    const auto det = OptimConfig::detection_full();
    CHECK(det.lr0 == 1e-4);
    CHECK(det.momentum == 0.937);
    CHECK(det.epochs == 1000);
    CHECK(det.batch_size == 4);
    CHECK(det.schedule == ScheduleKind::cosine);
    const auto cls = OptimConfig::classification_full();
    CHECK(cls.lr0 == 0.1);
    CHECK(cls.momentum == 0.9);
    CHECK(cls.epochs == 300);
    CHECK(cls.batch_size == 256);
    CHECK(cls.schedule == ScheduleKind::step);
    CHECK(cls.milestones == std::vector<int>{150, 200, 250});
    CHECK(cls.factor == 0.1);
    OptimConfig bad = det;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    Rng rng(61);
    Detector<float> model(DetectorSpec::mrham_yolov4_slim(64, 4, 0.125), rng);
    ParamList<float> params = model.parameters();
    TrainState st;
    st.epoch = 3;
    st.step = 41;
    st.best_metric = 0.625;
    for (auto& p : params) {
        for (auto& v : p.tensor.values()) v = float(rng.normal());
        if (p.kind != ParamKind::buffer) st.velocity[p.name] = Array<float>::Constant(p.tensor.numel(), 0.25f);
    }
    const fs::path path = fs::temp_directory_path() / "mrham_unit_ckpt.bin";
    save_checkpoint(path, make_checkpoint(params, st));

    Rng other(62);
    Detector<float> copy(DetectorSpec::mrham_yolov4_slim(64, 4, 0.125), other);
    ParamList<float> copy_params = copy.parameters();
    const TrainState back = restore_checkpoint(copy_params, load_checkpoint(path));
    CHECK(back.epoch == 3);
    CHECK(back.step == 41);
    CHECK(back.best_metric == 0.625);
    CHECK(back.velocity.size() == st.velocity.size());
    REQUIRE(copy_params.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(std::memcmp(params[i].tensor.data(), copy_params[i].tensor.data(),
                          sizeof(float) * std::size_t(params[i].tensor.numel())) == 0);
    const fs::path path2 = fs::temp_directory_path() / "mrham_unit_ckpt2.bin";
    save_checkpoint(path2, make_checkpoint(copy_params, back));
    CHECK(slurp(path) == slurp(path2));

    Rng third(63);
    Detector<float> wrong(DetectorSpec::mrham_yolov4_slim(64, 2, 0.125), third);
    ParamList<float> wrong_params = wrong.parameters();
    CHECK_THROWS(restore_checkpoint(wrong_params, load_checkpoint(path)));
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("training is deterministic and resumable") {
    const Dataset data = synth_phantom(4, 64, 5);
    const fs::path a = scratch("run_a"), b = scratch("run_b"), c = scratch("run_c");

    auto run = [&](DetTrainConfig cfg, const fs::path& out, int workers) {
        cfg.out_dir = out;
        cfg.workers = workers;
        Rng init(cfg.seed);
        Detector<float> model(cfg.model, init);
        return train_detector(cfg, model, data, data);
    };
    const TrainResult ra = run(tiny_config(3), a, 1);
    run(tiny_config(3), b, 2);
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "last.bin") == slurp(b / "last.bin"));
    CHECK(slurp(a / "metrics.csv").rfind(std::string(kMetricHeader) + "\n", 0) == 0);
    CHECK(ra.log.size() == 3);

    // Two epochs, then resume for the third.
    DetTrainConfig first = tiny_config(3);
    first.max_steps = 4;
    run(first, c, 1);
    DetTrainConfig rest = tiny_config(3);
    rest.resume = c / "last.bin";
    run(rest, c, 1);
    CHECK(slurp(a / "metrics.csv") == slurp(c / "metrics.csv"));
    CHECK(slurp(a / "last.bin") == slurp(c / "last.bin"));
    for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("one image overfits within 200 steps") {
    Dataset data = synth_phantom(1, 64, 9);
    DetTrainConfig cfg;
    cfg.model = DetectorSpec::mrham_yolov4_slim(64, 4, 0.125);
    cfg.optim = OptimConfig::detection_desk();
    cfg.optim.lr0 = 0.1;
    cfg.optim.epochs = 200;
    cfg.optim.batch_size = 1;
    cfg.optim.warmup_steps = 20;
    cfg.eval_every = 1000;
    Rng init(1);
    Detector<float> model(cfg.model, init);
    const TrainResult r = train_detector(cfg, model, data, Dataset{});
    CHECK(r.steps == 200);
    CHECK(r.final_loss <= 0.1 * r.initial_loss);
}
