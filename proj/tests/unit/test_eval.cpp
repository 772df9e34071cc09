#include "doctest.h"

#include "mrham/eval.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace mrham;

TEST_CASE("precision, recall and F1 examples") {
    CHECK(f1_score(0.919, 0.971) == doctest::Approx(0.944).epsilon(0.0005 / 0.944));
    const PRF1 all = precision_recall_f1({5, 0, 0});
    CHECK(all.precision == 1.0);
    CHECK(all.recall == 1.0);
    CHECK(all.f1 == 1.0);
    const PRF1 m = precision_recall_f1({2, 1, 1});
    CHECK(m.precision == doctest::Approx(2.0 / 3));
    CHECK(m.recall == doctest::Approx(2.0 / 3));
    CHECK(m.f1 == doctest::Approx(2.0 / 3));
    const PRF1 none = precision_recall_f1({0, 0, 0});
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
}

TEST_CASE("F1 never exceeds the geometric or arithmetic mean") {
    Rng rng(21);
    for (int i = 0; i < 1000; ++i) {
        const double p = rng.uniform(), r = rng.uniform();
        const double f = f1_score(p, r);
        CHECK(f >= 0);
        CHECK(f <= std::sqrt(p * r) + 1e-15);
        CHECK(std::sqrt(p * r) <= (p + r) / 2 + 1e-15);
        CHECK(f <= std::min(1.0, std::max(p, r)));
    }
}

TEST_CASE("matching examples") {
    const std::vector<GroundTruth> gts{{0, {0, 0, 1, 1}}, {1, {2, 2, 3, 3}}};
    const auto exact = match_detections({{{0, 0, 1, 1}, 0, 0.9}, {{2, 2, 3, 3}, 1, 0.8}}, gts, 2);
    CHECK(exact.total.tp == 2);
    CHECK(exact.total.fp == 0);
    CHECK(exact.total.fn == 0);
    const auto dup = match_detections({{{0, 0, 1, 1}, 0, 0.7}, {{0, 0, 1, 1}, 0, 0.9}, {{0, 0, 1, 1}, 0, 0.8}}, gts, 2);
    CHECK(dup.total.tp == 1);
    CHECK(dup.total.fp == 2);
    CHECK(dup.total.fn == 1);
    CHECK(dup.is_tp == std::vector<char>{0, 1, 0});
    const auto wrong_class = match_detections({{{0, 0, 1, 1}, 1, 0.9}}, gts, 2);
    CHECK(wrong_class.total.tp == 0);
    CHECK_THROWS_AS(match_detections({{{0, 0, 1, 1}, 5, 0.9}}, gts, 2), std::invalid_argument);
}

TEST_CASE("matching agrees with the reference matcher") {
    Rng rng(22);
    for (int t = 0; t < 300; ++t) {
        const auto inst = oracle::random_instance(rng, 3, 1, 10, 30);
        oracle::Counts want;
        const auto flags = oracle::match(inst.dets[0], inst.gts[0], 0.5, want);
        const auto got = match_detections(inst.dets[0], inst.gts[0], 3, 0.5);
        CHECK(got.total.tp == want.tp);
        CHECK(got.total.fp == want.fp);
        CHECK(got.total.fn == want.fn);
        CHECK(got.is_tp == flags);
    }
}

TEST_CASE("average precision examples") {
    CHECK(average_precision(pr_curve({1}, 1)) == 1.0);
    CHECK(average_precision(pr_curve({}, 3)) == 0.0);
    // TP FP TP TP FP over 4 ground truths: 1/4 * (1 + 3/4 + 3/4).
    const std::vector<char> flags{1, 0, 1, 1, 0};
    CHECK(average_precision(pr_curve(flags, 4)) == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(oracle::ap(flags, 4) == doctest::Approx(0.625).epsilon(1e-12));
    const PRCurve c = pr_curve(flags, 4);
    for (std::size_t i = 1; i < c.recall.size(); ++i) CHECK(c.recall[i] >= c.recall[i - 1]);
    CHECK(map50({0.5, 0.9, 0.0}, {2, 3, 0}) == doctest::Approx(0.7));
}

TEST_CASE("average precision agrees with the step sum and obeys its invariants") {
    Rng rng(23);
    for (int t = 0; t < 500; ++t) {
        const int n = int(rng.below(12));
        std::vector<char> flags(static_cast<std::size_t>(n));
        int tps = 0;
        for (auto& f : flags) tps += (f = char(rng.bernoulli(0.5)));
        const int num_gt = tps + int(rng.below(4));
        const double a = average_precision(pr_curve(flags, num_gt));
        CHECK(a == doctest::Approx(oracle::ap(flags, num_gt)).epsilon(1e-12));
        CHECK(a >= 0);
        CHECK(a <= 1);
        auto tail = flags;
        tail.push_back(0);
        CHECK(average_precision(pr_curve(tail, num_gt)) <= a + 1e-15);
        for (std::size_t i = 0; i < flags.size(); ++i) {
            if (flags[i] || tps == num_gt) continue;
            auto better = flags;
            better[i] = 1;
            CHECK(average_precision(pr_curve(better, num_gt)) >= a - 1e-15);
        }
    }
}

TEST_CASE("evaluate_detections agrees with the reference mAP") {
    Rng rng(24);
    const std::vector<std::string> names{"a", "b", "c"};
    for (int t = 0; t < 100; ++t) {
        const auto inst = oracle::random_instance(rng, 3, 3, 4, 8);
        const EvalReport r = evaluate_detections(inst.dets, inst.gts, names, 0.25, 0.5);
        CHECK(r.map50 == doctest::Approx(oracle::map50(inst.dets, inst.gts, 3)).epsilon(1e-12));
        CHECK(r.map50 >= 0);
        CHECK(r.map50 <= 1);
        CHECK(r.f1 <= 1);
    }
}

TEST_CASE("report serialization") {
    const EvalReport r = evaluate_detections({{{{0, 0, 1, 1}, 0, 0.9}}}, {{{0, {0, 0, 1, 1}}}}, {"LV", "LA"});
    CHECK(r.map50 == 1.0);
    CHECK(r.notes.size() == 1);
    CHECK(r.to_json().find("\"map50\"") != std::string::npos);
    CHECK(r.to_table().find("LV") != std::string::npos);
}

TEST_CASE("top-k accuracy") {
    const Tensor<float> scores = Tensor<float>::from({3, 4}, {0.1f, 0.9f, 0.0f, 0.0f,  //
                                                              0.5f, 0.2f, 0.3f, 0.0f,  //
                                                              0.0f, 0.1f, 0.2f, 0.7f});
    const std::vector<int> labels{1, 2, 0};
    CHECK(topk_accuracy(scores, labels, 1) == doctest::Approx(1.0 / 3));
    CHECK(topk_accuracy(scores, labels, 2) == doctest::Approx(2.0 / 3));
    CHECK(topk_accuracy(scores, labels, 4) == 1.0);
    CHECK_THROWS_AS(topk_accuracy(scores, labels, 5), std::invalid_argument);
    Rng rng(25);
    Array<float> v(50 * 10);
    for (auto& x : v) x = float(rng.normal());
    std::vector<int> l;
    for (int i = 0; i < 50; ++i) l.push_back(int(rng.below(10)));
    const Tensor<float> s({50, 10}, v);
    CHECK(topk_accuracy(s, l, 5) >= topk_accuracy(s, l, 1));
}

TEST_CASE("fps benchmark counts timed calls") {
    int calls = 0;
    const double fps = fps_benchmark([&] { ++calls; }, 3, 20);
    CHECK(calls == 23);
    CHECK(fps > 0);
}
