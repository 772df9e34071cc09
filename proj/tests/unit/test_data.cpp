#include "doctest.h"

#include "mrham/data.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>

using namespace mrham;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mrham_unit_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

Sample gray_sample(int w, int h, std::vector<GroundTruth> gts = {}) {
    Sample s;
    s.image = Image(w, h, 0.3f);
    s.gts = std::move(gts);
    return s;
}

}  // namespace

TEST_CASE("YOLO label parsing") {
    std::vector<std::string> diag;
    const auto one = parse_yolo_labels("2 0.5 0.5 0.25 0.25\n", "a.txt", 4, diag);
    REQUIRE(one);
    REQUIRE(one->size() == 1);
    const GroundTruth& g = one->front();
    CHECK(g.class_id == 2);
    CHECK(ClassTable::chambers().names[2] == "RV");
    CHECK(g.box.x_min == doctest::Approx(0.375));
    CHECK(g.box.y_min == doctest::Approx(0.375));
    CHECK(g.box.x_max == doctest::Approx(0.625));
    CHECK(g.box.y_max == doctest::Approx(0.625));

    const auto empty = parse_yolo_labels("", "e.txt", 4, diag);
    REQUIRE(empty);
    CHECK(empty->empty());
    CHECK(diag.empty());

    for (const char* bad : {"4 0.5 0.5 0.1 0.1", "0 0.5 0.5 0 0.1", "0 0.95 0.5 0.2 0.1", "0 0.5 0.5", "x 0.5 0.5 0.1 0.1"}) {
        std::vector<std::string> d;
        CHECK_FALSE(parse_yolo_labels(std::string("0 0.5 0.5 0.1 0.1\n") + bad + "\n", "b.txt", 4, d));
        REQUIRE(d.size() >= 1);
        CHECK(d[0].rfind("b.txt:2:", 0) == 0);
    }
}

TEST_CASE("YOLO labels round trip") {
    Rng rng(51);
    std::vector<GroundTruth> gts;
    for (int i = 0; i < 20; ++i) {
        const double x = rng.uniform(0, 0.8), y = rng.uniform(0, 0.8);
        gts.push_back({int(rng.below(4)), {x, y, x + rng.uniform(0.01, 0.2), y + rng.uniform(0.01, 0.2)}});
    }
    std::vector<std::string> diag;
    const auto back = parse_yolo_labels(format_yolo_labels(gts), "rt", 4, diag);
    REQUIRE(back);
    REQUIRE(back->size() == gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
        CHECK((*back)[i].class_id == gts[i].class_id);
        CHECK(std::abs((*back)[i].box.x_min - gts[i].box.x_min) < 1e-6);
        CHECK(std::abs((*back)[i].box.y_max - gts[i].box.y_max) < 1e-6);
    }
}

TEST_CASE("loaders never emit invalid samples") {
    const fs::path root = scratch("yolo");
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    Rng rng(52);
    const std::vector<std::string> lines{"0 0.5 0.5 0.2 0.2", "1 0.1 0.1 0.5 0.5", "7 0.5 0.5 0.1 0.1",
                                         "2 0.5 0.5 -0.1 0.1", "3 nan 0.5 0.1 0.1", "garbage", "0 0.5 0.5 0.1"};
    for (int i = 0; i < 30; ++i) {
        const std::string stem = "img" + std::to_string(100 + i);
        write_ppm(root / "images" / (stem + ".ppm"), Image(8, 6, 0.5f));
        std::string text;
        const int n = int(rng.below(4));
        for (int k = 0; k < n; ++k) text += lines[rng.below(lines.size())] + "\n";
        write_text(root / "labels" / (stem + ".txt"), text);
    }
    const Dataset ds = load_yolo_dataset(root / "images", root / "labels", ClassTable::chambers());
    for (const auto& s : ds.samples) CHECK(sample_problem(s, 4).empty());
    CHECK(ds.size() + 0 <= 30);
    CHECK(!ds.diagnostics.empty());
    fs::remove_all(root);
}

TEST_CASE("VOC loader rejects inverted boxes") {
    const fs::path root = scratch("voc");
    write_ppm(root / "a.ppm", Image(100, 50, 0.2f));
    write_ppm(root / "b.ppm", Image(100, 50, 0.2f));
    write_text(root / "a.xml",
               "<annotation><filename>a.ppm</filename><size><width>100</width><height>50</height></size>"
               "<object><name>LV</name><bndbox><xmin>10</xmin><ymin>5</ymin><xmax>60</xmax><ymax>45</ymax></bndbox></object>"
               "</annotation>");
    write_text(root / "b.xml",
               "<annotation><filename>b.ppm</filename><size><width>100</width><height>50</height></size>"
               "<object><name>LA</name><bndbox><xmin>60</xmin><ymin>5</ymin><xmax>60</xmax><ymax>45</ymax></bndbox></object>"
               "</annotation>");
    const Dataset ds = load_voc_xml(root, ClassTable::chambers());
    REQUIRE(ds.size() == 1);
    CHECK(ds.samples[0].gts.size() == 1);
    // VOC pixel indices are 1-based.
    CHECK(ds.samples[0].gts[0].box.x_min == doctest::Approx(0.09));
    CHECK(ds.samples[0].gts[0].box.y_max == doctest::Approx(0.9));
    REQUIRE(!ds.diagnostics.empty());
    CHECK(ds.diagnostics[0].find("xmax <= xmin") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("CIFAR layout") {
    CHECK(cifar_record_count(3073 * 10000) == 10000);
    CHECK(5 * cifar_record_count(30730000) == 50000);
    CHECK_THROWS(cifar_record_count(3073 * 2 + 5));

    const fs::path root = scratch("cifar");
    std::string bytes;
    for (int r = 0; r < 3; ++r) {
        bytes.push_back(char(r + 4));
        for (int i = 0; i < 3072; ++i) bytes.push_back(char(i % 256));
    }
    write_text(root / "data_batch_1.bin", bytes);
    const auto set = load_cifar({root / "data_batch_1.bin"});
    REQUIRE(set.size() == 3);
    CHECK(set.labels == std::vector<int>{4, 5, 6});
    CHECK(set.images[0].width == 32);
    CHECK(set.images[0].at(0, 0, 1) == doctest::Approx(1.0f / 255));
    write_text(root / "data_batch_1.bin", bytes.substr(0, bytes.size() - 7));
    CHECK_THROWS(load_cifar({root / "data_batch_1.bin"}));
    fs::remove_all(root);
}

TEST_CASE("letterbox") {
    SUBCASE("square input at its own size is the identity") {
        const auto [s, t] = letterbox(gray_sample(64, 64, {{1, {0.1, 0.2, 0.3, 0.4}}}), 64);
        CHECK(t.scale == 1.0);
        CHECK(t.pad_x == 0);
        CHECK(t.pad_y == 0);
        CHECK(s.gts[0].box.x_min == doctest::Approx(0.1));
    }
    SUBCASE("wide input is padded top and bottom") {
        const auto [s, t] = letterbox(gray_sample(1216, 608), 608);
        CHECK(t.scale == 0.5);
        CHECK(t.pad_x == 0);
        CHECK(t.pad_y == 152);
        CHECK(s.image.width == 608);
        CHECK(s.image.height == 608);
        CHECK(s.image.at(0, 0, 300) == kPadValue);
        CHECK(s.image.at(0, 304, 300) == doctest::Approx(0.3f));
    }
    SUBCASE("forward then inverse reproduces boxes") {
        Rng rng(53);
        const LetterboxTransform t{0.37, 11, 0};
        for (int i = 0; i < 500; ++i) {
            const double x = rng.uniform(0, 500), y = rng.uniform(0, 300);
            const Box b{x, y, x + rng.uniform(1, 100), y + rng.uniform(1, 100)};
            const Box r = t.inverse(t.forward(b));
            CHECK(std::abs(r.x_min - b.x_min) < 1e-5);
            CHECK(std::abs(r.y_max - b.y_max) < 1e-5);
        }
    }
}

TEST_CASE("mosaic") {
    const Dataset ds = synth_phantom(4, 96, 5);
    const std::array<const Sample*, 4> four{&ds.samples[0], &ds.samples[1], &ds.samples[2], &ds.samples[3]};
    SUBCASE("box invariants over seeded trials") {
        for (int t = 0; t < 1000; ++t) {
            Rng rng = Rng::derive(9, t);
            const Sample m = mosaic(four, 64, rng);
            CHECK(m.image.width == 64);
            CHECK(m.gts.size() <= 16);
            for (const auto& g : m.gts) {
                CHECK(g.box.x_min >= 0);
                CHECK(g.box.y_min >= 0);
                CHECK(g.box.x_max <= 1);
                CHECK(g.box.y_max <= 1);
                CHECK(g.box.area() > 0);
                CHECK(g.class_id >= 0);
                CHECK(g.class_id < 4);
            }
        }
    }
    SUBCASE("empty inputs give an empty mosaic") {
        const Sample blank = gray_sample(50, 40);
        Rng rng(1);
        CHECK(mosaic({&blank, &blank, &blank, &blank}, 64, rng).gts.empty());
    }
    SUBCASE("same seed, same output") {
        Rng a(77), b(77);
        const Sample x = mosaic(four, 64, a), y = mosaic(four, 64, b);
        CHECK(x.image.pixels == y.image.pixels);
        REQUIRE(x.gts.size() == y.gts.size());
        for (std::size_t i = 0; i < x.gts.size(); ++i) CHECK(x.gts[i].box.x_min == y.gts[i].box.x_min);
    }
}

TEST_CASE("hflip keeps classes and mirrors boxes") {
    const Sample s = gray_sample(10, 10, {{3, {0.1, 0.2, 0.4, 0.5}}});
    const Sample f = hflip(s);
    CHECK(f.gts[0].class_id == 3);
    CHECK(f.gts[0].box.x_min == doctest::Approx(0.6));
    CHECK(f.gts[0].box.x_max == doctest::Approx(0.9));
}

TEST_CASE("phantoms") {
    const Dataset ds = synth_phantom(12, 128, 7);
    REQUIRE(ds.size() == 12);
    for (const auto& s : ds.samples) {
        REQUIRE(s.gts.size() == 4);
        std::vector<int> ids;
        for (const auto& g : s.gts) ids.push_back(g.class_id);
        std::sort(ids.begin(), ids.end());
        CHECK(ids == std::vector<int>{0, 1, 2, 3});
        CHECK(sample_problem(s, 4).empty());
        for (float p : s.image.pixels) {
            CHECK(p >= 0.0f);
            CHECK(p <= 1.0f);
        }
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = i + 1; j < 4; ++j) CHECK(iou(s.gts[i].box, s.gts[j].box) < 0.5);
    }
    const Sample again = synth_phantom_sample(128, 7, 5);
    CHECK(again.image.pixels == ds.samples[5].image.pixels);
    CHECK(format_yolo_labels(again.gts) == format_yolo_labels(ds.samples[5].gts));
    CHECK(format_yolo_labels(synth_phantom_sample(128, 8, 5).gts) != format_yolo_labels(again.gts));
}

TEST_CASE("dataset save and load") {
    const fs::path root = scratch("ds");
    const Dataset ds = synth_phantom(3, 64, 2);
    save_dataset(root, ds);
    const Dataset back = load_dataset(root);
    REQUIRE(back.size() == 3);
    CHECK(back.classes.names == ds.classes.names);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(format_yolo_labels(back.samples[i].gts) == format_yolo_labels(ds.samples[i].gts));
        CHECK(back.samples[i].image.width == 64);
    }
    fs::remove_all(root);
}

TEST_CASE("object crops") {
    const Dataset ds = synth_phantom(2, 96, 3);
    const auto crops = crop_objects(ds, 32);
    CHECK(crops.size() == 8);
    CHECK(crops.images[0].width == 32);
    CHECK(crops.labels[0] == ds.samples[0].gts[0].class_id);
}

TEST_CASE("splits and parallel loops") {
    const Split s = split_indices(10, 0.8, 3);
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 2);
    std::vector<int> all = s.train;
    all.insert(all.end(), s.val.begin(), s.val.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 10; ++i) CHECK(all[std::size_t(i)] == i);
    CHECK(split_indices(10, 0.8, 3).train == s.train);

    std::vector<int> out1(100), out4(100);
    parallel_for(100, 1, [&](int i) { out1[std::size_t(i)] = i * i; });
    parallel_for(100, 4, [&](int i) { out4[std::size_t(i)] = i * i; });
    CHECK(out1 == out4);
}

TEST_CASE("image codecs") {
    const fs::path root = scratch("img");
    Image img(5, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(i % 256) / 255.0f;
    write_ppm(root / "a.ppm", img);
    write_png(root / "a.png", img);
    CHECK(read_image(root / "a.ppm").pixels == img.pixels);
    CHECK(read_image(root / "a.png").pixels == img.pixels);
    write_text(root / "bad.ppm", "P6\n5 3\n255\nshort");
    CHECK_THROWS(read_ppm(root / "bad.ppm"));
    fs::remove_all(root);
}
