#include "doctest.h"

#include "mrham/detector.hpp"

#include <cmath>

using namespace mrham;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

TF random_images(Shape s, Rng& rng) {
    Array<float> v(shape_numel(s));
    for (auto& x : v) x = float(rng.uniform());
    return TF(std::move(s), std::move(v));
}

// Raw predictions that decode exactly onto the assigned targets with saturated
// objectness and class scores; every other anchor is confidently empty.
RawPrediction<double> perfect_raw(const DetectorSpec& spec, const TargetAssignment& a, double sat) {
    RawPrediction<double> raw;
    for (int s = 0; s < 3; ++s) {
        const int g = spec.grid(s);
        TD t({a.batch, kAnchorsPerScale * spec.channels_per_anchor(), g, g}, 0.0);
        for (int i = 0; i < a.batch; ++i)
            for (int k = 0; k < kAnchorsPerScale; ++k)
                for (int y = 0; y < g; ++y)
                    for (int x = 0; x < g; ++x)
                        for (int c = 4; c < spec.channels_per_anchor(); ++c)
                            t.values()[TargetAssignment::raw_index(spec, s, i, k, c, y, x)] = -sat;
        raw.push_back(t);
    }
    for (const auto& p : a.positives) {
        const auto enc = encode_box(p.box_px, spec.anchor(p.scale, p.anchor), kDetectionStrides[p.scale], p.cell_x,
                                    p.cell_y);
        auto& v = raw[p.scale].values();
        for (int c = 0; c < 4; ++c)
            v[TargetAssignment::raw_index(spec, p.scale, p.image, p.anchor, c, p.cell_y, p.cell_x)] = enc[c];
        v[TargetAssignment::raw_index(spec, p.scale, p.image, p.anchor, 4, p.cell_y, p.cell_x)] = sat;
        v[TargetAssignment::raw_index(spec, p.scale, p.image, p.anchor, 5 + p.class_id, p.cell_y, p.cell_x)] = sat;
    }
    return raw;
}

}  // namespace

TEST_CASE("head shapes") {
    Rng rng(41);
    SUBCASE("608 input gives 76, 38 and 19") {
        Detector<float> det(DetectorSpec::mrham_yolov4_slim(608, 4, 0.125), rng);
        const auto raw = det.forward(random_images({1, 3, 608, 608}, rng), {});
        REQUIRE(raw.size() == 3);
        CHECK(raw[0].shape() == Shape{1, 27, 76, 76});
        CHECK(raw[1].shape() == Shape{1, 27, 38, 38});
        CHECK(raw[2].shape() == Shape{1, 27, 19, 19});
    }
    SUBCASE("160 input gives 20, 10 and 5") {
        Detector<float> det(DetectorSpec::mrham_yolov4_slim(160, 2, 0.125), rng);
        const auto raw = det.forward(random_images({2, 3, 160, 160}, rng), {});
        CHECK(raw[0].shape() == Shape{2, 21, 20, 20});
        CHECK(raw[1].shape() == Shape{2, 21, 10, 10});
        CHECK(raw[2].shape() == Shape{2, 21, 5, 5});
    }
    CHECK_THROWS_AS(DetectorSpec::mrham_yolov4_slim(100, 4, 0.125).validate(), std::invalid_argument);
}

TEST_CASE("spp keeps a constant map constant") {
    const TF x({1, 3, 7, 7}, 2.5f);
    const TF y = spp_pool(x);
    CHECK(y.shape() == Shape{1, 12, 7, 7});
    CHECK((y.values() == 2.5f).all());
}

TEST_CASE("decode examples") {
    const std::array<std::pair<double, double>, 3> anchors{{{10, 14}, {23, 27}, {37, 58}}};
    TF raw({1, 3 * 6, 2, 2}, 0.0f);
    const auto boxes = decode_boxes(raw, 0, anchors, 32, 1);
    REQUIRE(boxes.size() == 12);
    const auto& first = boxes[0];
    CHECK(first.box.cx() == doctest::Approx(16.0));
    CHECK(first.box.cy() == doctest::Approx(16.0));
    CHECK(first.box.width() == doctest::Approx(10.0));
    CHECK(first.box.height() == doctest::Approx(14.0));
    CHECK(first.objectness == doctest::Approx(0.5));
    for (const auto& d : boxes) {
        CHECK(d.box.width() == doctest::Approx(anchors[std::size_t(d.anchor)].first));
        CHECK(d.box.cx() == doctest::Approx((d.cell_x + 0.5) * 32));
    }

    for (float t : {12.0f, -12.0f}) {
        raw.values().setConstant(t);
        for (const auto& d : decode_boxes(raw, 0, anchors, 32, 1)) {
            CHECK(d.box.cx() > d.cell_x * 32.0);
            CHECK(d.box.cx() < (d.cell_x + 1) * 32.0);
            CHECK(d.box.cy() > d.cell_y * 32.0);
            CHECK(d.box.cy() < (d.cell_y + 1) * 32.0);
        }
    }
    CHECK_THROWS_AS(decode_boxes(raw, 0, anchors, 32, 2), std::invalid_argument);
}

TEST_CASE("encode inverts decode") {
    Rng rng(42);
    const std::array<std::pair<double, double>, 3> anchors{{{12, 16}, {19, 36}, {40, 28}}};
    for (int t = 0; t < 200; ++t) {
        const int cx = int(rng.below(4)), cy = int(rng.below(4)), a = int(rng.below(3));
        const Box b = Box::from_center((cx + rng.uniform(0.05, 0.95)) * 8, (cy + rng.uniform(0.05, 0.95)) * 8,
                                       rng.uniform(2, 60), rng.uniform(2, 60));
        const auto enc = encode_box(b, anchors[std::size_t(a)], 8, cx, cy);
        TD raw({1, 3 * 6, 4, 4}, 0.0);
        for (int c = 0; c < 4; ++c) raw.values()[((a * 6 + c) * 4 + cy) * 4 + cx] = enc[std::size_t(c)];
        const auto dec = decode_boxes(raw, 0, anchors, 8, 1);
        const auto& d = dec[std::size_t((a * 4 + cy) * 4 + cx)];
        CHECK(d.box.x_min == doctest::Approx(b.x_min).epsilon(1e-9));
        CHECK(d.box.y_max == doctest::Approx(b.y_max).epsilon(1e-9));
    }
}

TEST_CASE("target assignment") {
    const auto spec = DetectorSpec::mrham_yolov4_slim(608, 4, 0.125);
    SUBCASE("a box shaped like anchor 7 goes to that anchor") {
        const auto [w, h] = spec.anchors.wh[7];
        const GroundTruth gt{2, Box::from_center(0.5, 0.5, w / 608, h / 608)};
        const auto a = assign_targets(std::vector<GroundTruth>{gt}, spec);
        REQUIRE(a.positives.size() == 1);
        CHECK(a.positives[0].scale == 2);
        CHECK(a.positives[0].anchor == 1);
        CHECK(a.positives[0].cell_x == 9);
        CHECK(wh_iou(a.positives[0].box_px.width(), a.positives[0].box_px.height(), w, h) == doctest::Approx(1.0));
        CHECK(a.warnings.empty());
    }
    SUBCASE("colliding boxes keep the later one and warn") {
        const Box b = Box::from_center(0.3, 0.3, 0.1, 0.1);
        const auto a = assign_targets(std::vector<GroundTruth>{{0, b}, {3, b}}, spec);
        REQUIRE(a.positives.size() == 1);
        CHECK(a.positives[0].class_id == 3);
        CHECK(a.warnings.size() == 1);
    }
    SUBCASE("no boxes, no positives") {
        const auto a = assign_targets(std::vector<GroundTruth>{}, spec);
        CHECK(a.positives.empty());
        CHECK(a.batch == 1);
    }
    CHECK_THROWS_AS(assign_targets(std::vector<GroundTruth>{{7, {0.1, 0.1, 0.2, 0.2}}}, spec), std::invalid_argument);
}

TEST_CASE("detection loss") {
    auto spec = DetectorSpec::mrham_yolov4_slim(64, 3, 0.125);
    const std::vector<std::vector<GroundTruth>> gts{{{0, {0.1, 0.1, 0.4, 0.5}}, {2, {0.5, 0.55, 0.95, 0.9}}},
                                                    {{1, {0.3, 0.2, 0.6, 0.45}}}};
    const auto assignment = assign_targets(gts, spec);
    REQUIRE(assignment.positives.size() == 3);

    SUBCASE("perfect predictions drive the loss to zero") {
        double previous = 1e9;
        for (double sat : {4.0, 8.0, 16.0, 30.0}) {
            const auto l = detection_loss(perfect_raw(spec, assignment, sat), assignment, spec);
            CHECK(l.total.item() < previous);
            previous = l.total.item();
        }
        CHECK(previous < 1e-6);
    }
    SUBCASE("no targets leaves only the objectness term") {
        const auto empty = assign_targets(std::vector<std::vector<GroundTruth>>{{}, {}}, spec);
        Rng rng(43);
        RawPrediction<double> raw;
        for (int s = 0; s < 3; ++s) {
            const int g = spec.grid(s);
            Array<double> v(2 * 3 * spec.channels_per_anchor() * g * g);
            for (auto& x : v) x = rng.normal();
            raw.push_back(TD({2, 3 * spec.channels_per_anchor(), g, g}, v));
        }
        const auto l = detection_loss(raw, empty, spec);
        CHECK(l.box == 0.0);
        CHECK(l.cls == 0.0);
        CHECK(l.obj > 0.0);
        const auto full = detection_loss(raw, assignment, spec);
        CHECK(full.box >= 0);
        CHECK(full.cls >= 0);
        CHECK(full.total.item() >= 0);
    }
}
