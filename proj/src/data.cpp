#include "mrham/data.hpp"

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fs = std::filesystem;

namespace mrham {

ClassTable ClassTable::chambers() { return {{"LV", "LA", "RV", "RA"}}; }

ClassTable ClassTable::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open class list " + path.string());
    ClassTable table;
    std::string line;
    while (std::getline(in, line)) {
        line.erase(line.find_last_not_of(" \t\r") + 1);
        line.erase(0, line.find_first_not_of(" \t"));
        if (!line.empty()) table.names.push_back(line);
    }
    table.validate();
    return table;
}

void ClassTable::save(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& n : names) out << n << '\n';
}

int ClassTable::find(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

void ClassTable::validate() const {
    if (names.empty()) throw std::invalid_argument("class table is empty");
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (n.empty()) throw std::invalid_argument("class table has an empty name");
        if (!seen.insert(n).second) throw std::invalid_argument("class table repeats name '" + n + "'");
    }
}

std::string sample_problem(const Sample& sample, int num_classes) {
    for (std::size_t i = 0; i < sample.gts.size(); ++i) {
        const auto& g = sample.gts[i];
        const Box& b = g.box;
        std::ostringstream msg;
        msg << "box " << i << ": ";
        if (g.class_id < 0 || g.class_id >= num_classes) {
            msg << "class " << g.class_id << " outside [0, " << num_classes << ")";
            return msg.str();
        }
        if (!(b.x_min >= 0 && b.y_min >= 0 && b.x_max <= 1 && b.y_max <= 1)) {
            msg << "outside the unit square";
            return msg.str();
        }
        if (!(b.width() > 0 && b.height() > 0)) {
            msg << "zero area";
            return msg.str();
        }
    }
    return {};
}

std::optional<std::vector<GroundTruth>> parse_yolo_labels(const std::string& text, const std::string& source,
                                                           int num_classes, std::vector<std::string>& diagnostics) {
    constexpr double tol = 1e-6;
    std::vector<GroundTruth> out;
    bool ok = true;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto report = [&](const std::string& msg) {
        diagnostics.push_back(source + ":" + std::to_string(line_no) + ": " + msg);
        ok = false;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream fields(line);
        std::vector<std::string> tok;
        for (std::string t; fields >> t;) tok.push_back(t);
        if (tok.size() != 5) {
            report("expected 5 fields, got " + std::to_string(tok.size()));
            continue;
        }
        double v[5];
        bool numeric = true;
        for (int i = 0; i < 5; ++i) {
            std::size_t used = 0;
            try {
                v[i] = std::stod(tok[i], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok[i].size() || !std::isfinite(v[i])) numeric = false;
        }
        if (!numeric) {
            report("non-numeric field");
            continue;
        }
        if (v[0] != std::floor(v[0]) || v[0] < 0 || v[0] >= num_classes) {
            report("unknown class " + tok[0]);
            continue;
        }
        if (v[3] <= 0 || v[4] <= 0) {
            report("zero-area box");
            continue;
        }
        Box b = Box::from_center(v[1], v[2], v[3], v[4]);
        if (b.x_min < -tol || b.y_min < -tol || b.x_max > 1 + tol || b.y_max > 1 + tol) {
            report("box outside [0, 1]");
            continue;
        }
        b = {std::max(b.x_min, 0.0), std::max(b.y_min, 0.0), std::min(b.x_max, 1.0), std::min(b.y_max, 1.0)};
        out.push_back({static_cast<int>(v[0]), b});
    }
    if (!ok) return std::nullopt;
    return out;
}

std::string format_yolo_labels(const std::vector<GroundTruth>& gts) {
    std::string out;
    char buf[128];
    for (const auto& g : gts) {
        std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", g.class_id, g.box.cx(), g.box.cy(), g.box.width(),
                      g.box.height());
        out += buf;
    }
    return out;
}

void write_yolo_labels(const fs::path& path, const std::vector<GroundTruth>& gts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << format_yolo_labels(gts);
}

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return ext == ".ppm" || ext == ".png";
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::function<bool(const fs::path&)>& keep) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && keep(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

// Loads one image + label file pair into `ds`, recording problems instead of throwing.
void add_labelled(Dataset& ds, const fs::path& image_path, const fs::path& label_path) {
    std::vector<GroundTruth> gts;
    if (fs::exists(label_path)) {
        auto parsed = parse_yolo_labels(read_text(label_path), label_path.string(), ds.classes.size(), ds.diagnostics);
        if (!parsed) {
            ds.diagnostics.push_back(label_path.string() + ": file rejected");
            return;
        }
        gts = std::move(*parsed);
    }
    Sample s;
    try {
        s.image = read_image(image_path);
    } catch (const std::exception& e) {
        ds.diagnostics.push_back(e.what());
        return;
    }
    s.gts = std::move(gts);
    s.name = image_path.stem().string();
    ds.samples.push_back(std::move(s));
}

}  // namespace

Dataset load_yolo_dataset(const fs::path& image_dir, const fs::path& label_dir, const ClassTable& classes) {
    classes.validate();
    Dataset ds;
    ds.classes = classes;
    for (const auto& img : sorted_files(image_dir, is_image_file))
        add_labelled(ds, img, label_dir / (img.stem().string() + ".txt"));
    return ds;
}

Dataset load_voc_xml(const fs::path& dir, const ClassTable& classes) {
    namespace pt = boost::property_tree;
    classes.validate();
    Dataset ds;
    ds.classes = classes;
    auto is_xml = [](const fs::path& p) { return p.extension() == ".xml"; };
    for (const auto& xml : sorted_files(dir, is_xml)) {
        const std::string src = xml.string();
        try {
            pt::ptree tree;
            pt::read_xml(src, tree);
            const auto& ann = tree.get_child("annotation");
            const double w = ann.get<double>("size.width"), h = ann.get<double>("size.height");
            if (!(w > 0 && h > 0)) throw std::runtime_error("non-positive image size");
            std::vector<GroundTruth> gts;
            bool bad = false;
            int obj_index = 0;
            for (const auto& [key, obj] : ann) {
                if (key != "object") continue;
                const std::string name = obj.get<std::string>("name");
                const int id = classes.find(name);
                const double x0 = obj.get<double>("bndbox.xmin"), y0 = obj.get<double>("bndbox.ymin");
                const double x1 = obj.get<double>("bndbox.xmax"), y1 = obj.get<double>("bndbox.ymax");
                const std::string where = src + ": object " + std::to_string(obj_index++);
                if (x1 <= x0 || y1 <= y0) {
                    ds.diagnostics.push_back(where + ": xmax <= xmin or ymax <= ymin");
                    bad = true;
                    continue;
                }
                if (id < 0) {
                    ds.diagnostics.push_back(where + ": class '" + name + "' not in the class table, skipped");
                    continue;
                }
                // VOC pixel indices are 1-based and inclusive.
                Box b{(x0 - 1) / w, (y0 - 1) / h, x1 / w, y1 / h};
                b = {std::clamp(b.x_min, 0.0, 1.0), std::clamp(b.y_min, 0.0, 1.0), std::clamp(b.x_max, 0.0, 1.0),
                     std::clamp(b.y_max, 0.0, 1.0)};
                if (!(b.width() > 0 && b.height() > 0)) {
                    ds.diagnostics.push_back(where + ": box outside the image");
                    bad = true;
                    continue;
                }
                gts.push_back({id, b});
            }
            if (bad) {
                ds.diagnostics.push_back(src + ": file rejected");
                continue;
            }
            const std::string filename = ann.get<std::string>("filename");
            fs::path image = dir / filename;
            if (!fs::exists(image)) image = dir.parent_path() / "JPEGImages" / filename;
            Sample s;
            s.image = read_image(image);
            s.gts = std::move(gts);
            s.name = xml.stem().string();
            ds.samples.push_back(std::move(s));
        } catch (const std::exception& e) {
            ds.diagnostics.push_back(src + ": " + e.what());
        }
    }
    return ds;
}

std::size_t cifar_record_count(std::uintmax_t bytes) {
    if (bytes % kCifarRecordBytes != 0)
        throw std::runtime_error("CIFAR file of " + std::to_string(bytes) + " bytes holds a truncated record");
    return static_cast<std::size_t>(bytes / kCifarRecordBytes);
}

ClassificationSet load_cifar(const std::vector<fs::path>& files) {
    ClassificationSet set;
    std::vector<unsigned char> rec(kCifarRecordBytes);
    for (const auto& path : files) {
        const std::size_t n = cifar_record_count(fs::file_size(path));
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open " + path.string());
        for (std::size_t r = 0; r < n; ++r) {
            in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
            if (!in) throw std::runtime_error(path.string() + ": truncated record " + std::to_string(r));
            Image img(32, 32);
            for (std::size_t k = 0; k < 3072; ++k) img.pixels[k] = rec[k + 1] / 255.0f;
            set.images.push_back(std::move(img));
            set.labels.push_back(rec[0]);
        }
    }
    return set;
}

std::vector<fs::path> cifar_files(const fs::path& dir, bool train) {
    std::vector<fs::path> out;
    if (train)
        for (int i = 1; i <= 5; ++i) out.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
        out.push_back(dir / "test_batch.bin");
    return out;
}

Box LetterboxTransform::forward(const Box& p) const {
    return {p.x_min * scale + pad_x, p.y_min * scale + pad_y, p.x_max * scale + pad_x, p.y_max * scale + pad_y};
}

Box LetterboxTransform::inverse(const Box& p) const {
    return {(p.x_min - pad_x) / scale, (p.y_min - pad_y) / scale, (p.x_max - pad_x) / scale, (p.y_max - pad_y) / scale};
}

std::pair<Sample, LetterboxTransform> letterbox(const Sample& sample, int target) {
    if (target <= 0 || target % 32 != 0)
        throw std::invalid_argument("letterbox target must be a positive multiple of 32, got " + std::to_string(target));
    const int w = sample.image.width, h = sample.image.height;
    if (w <= 0 || h <= 0) throw std::invalid_argument("letterbox: empty image");
    LetterboxTransform tf;
    tf.scale = std::min(double(target) / w, double(target) / h);
    const int nw = std::clamp(int(std::lround(w * tf.scale)), 1, target);
    const int nh = std::clamp(int(std::lround(h * tf.scale)), 1, target);
    tf.pad_x = (target - nw) / 2;
    tf.pad_y = (target - nh) / 2;

    Sample out;
    out.name = sample.name;
    const Image resized = (nw == w && nh == h) ? sample.image : resize_bilinear(sample.image, nw, nh);
    if (nw == target && nh == target) {
        out.image = resized;
    } else {
        out.image = Image(target, target, kPadValue);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < nh; ++y)
                for (int x = 0; x < nw; ++x) out.image.at(c, y + tf.pad_y, x + tf.pad_x) = resized.at(c, y, x);
    }
    const double inv = 1.0 / target;
    for (const auto& g : sample.gts) {
        const Box px = tf.forward(g.box.scaled(w, h)).scaled(inv, inv);
        out.gts.push_back({g.class_id, {std::clamp(px.x_min, 0.0, 1.0), std::clamp(px.y_min, 0.0, 1.0),
                                        std::clamp(px.x_max, 0.0, 1.0), std::clamp(px.y_max, 0.0, 1.0)}});
    }
    return {std::move(out), tf};
}

Sample mosaic(const std::array<const Sample*, 4>& samples, int target, Rng& rng) {
    if (target <= 0) throw std::invalid_argument("mosaic target must be positive");
    for (const auto* s : samples)
        if (!s || s->image.empty()) throw std::invalid_argument("mosaic needs four non-empty samples");
    constexpr double kMinKeptArea = 0.2;
    Sample out;
    out.image = Image(target, target, kPadValue);
    out.name = "mosaic";
    const int xc = static_cast<int>(rng.uniform(0.25, 0.75) * target);
    const int yc = static_cast<int>(rng.uniform(0.25, 0.75) * target);
    const std::vector<int> order = rng.permutation(4);
    for (int q = 0; q < 4; ++q) {
        const Sample& s = *samples[static_cast<std::size_t>(order[static_cast<std::size_t>(q)])];
        const double f = rng.uniform(0.5, 1.5) * 0.5 * target / std::max(s.image.width, s.image.height);
        const int nw = std::max(1, int(std::lround(s.image.width * f)));
        const int nh = std::max(1, int(std::lround(s.image.height * f)));
        const Image img = resize_bilinear(s.image, nw, nh);
        // Quadrant q: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right; the
        // image touches the mosaic center with its inner corner.
        const bool right = q % 2 == 1, bottom = q >= 2;
        const int ox = right ? xc : xc - nw, oy = bottom ? yc : yc - nh;
        const int rx0 = right ? xc : 0, rx1 = right ? target : xc;
        const int ry0 = bottom ? yc : 0, ry1 = bottom ? target : yc;
        for (int c = 0; c < 3; ++c)
            for (int y = std::max(ry0, oy); y < std::min(ry1, oy + nh); ++y)
                for (int x = std::max(rx0, ox); x < std::min(rx1, ox + nw); ++x)
                    out.image.at(c, y, x) = img.at(c, y - oy, x - ox);
        for (const auto& g : s.gts) {
            const Box px{g.box.x_min * nw + ox, g.box.y_min * nh + oy, g.box.x_max * nw + ox, g.box.y_max * nh + oy};
            const Box clipped{std::max(px.x_min, double(rx0)), std::max(px.y_min, double(ry0)),
                              std::min(px.x_max, double(rx1)), std::min(px.y_max, double(ry1))};
            if (!(clipped.width() > 0 && clipped.height() > 0)) continue;
            if (clipped.area() < kMinKeptArea * px.area()) continue;
            out.gts.push_back({g.class_id, clipped.scaled(1.0 / target, 1.0 / target)});
        }
    }
    return out;
}

Sample hflip(const Sample& sample) {
    Sample out = sample;
    const int w = sample.image.width;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < sample.image.height; ++y)
            for (int x = 0; x < w; ++x) out.image.at(c, y, x) = sample.image.at(c, y, w - 1 - x);
    for (auto& g : out.gts) g.box = {1 - g.box.x_max, g.box.y_min, 1 - g.box.x_min, g.box.y_max};
    return out;
}

ClassificationSet crop_objects(const Dataset& dataset, int size, double margin) {
    if (size < 1) throw std::invalid_argument("crop_objects: size must be >= 1");
    ClassificationSet out;
    for (const auto& s : dataset.samples) {
        const int w = s.image.width, h = s.image.height;
        for (const auto& g : s.gts) {
            const double mx = margin * g.box.width(), my = margin * g.box.height();
            const int x0 = std::clamp(int(std::floor((g.box.x_min - mx) * w)), 0, w - 1);
            const int y0 = std::clamp(int(std::floor((g.box.y_min - my) * h)), 0, h - 1);
            const int x1 = std::clamp(int(std::ceil((g.box.x_max + mx) * w)), x0 + 1, w);
            const int y1 = std::clamp(int(std::ceil((g.box.y_max + my) * h)), y0 + 1, h);
            Image crop(x1 - x0, y1 - y0);
            for (int c = 0; c < 3; ++c)
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) crop.at(c, y - y0, x - x0) = s.image.at(c, y, x);
            out.images.push_back(resize_bilinear(crop, size, size));
            out.labels.push_back(g.class_id);
        }
    }
    return out;
}

namespace {

struct Chamber {
    int class_id;
    double cx, cy, a, b, angle;  // normalized units, radians

    bool contains(double x, double y) const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
        return u * u + v * v <= 1.0;
    }
    Box bounds() const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double hx = std::sqrt(a * a * c * c + b * b * s * s);
        const double hy = std::sqrt(a * a * s * s + b * b * c * c);
        return {cx - hx, cy - hy, cx + hx, cy + hy};
    }
};

struct ChamberTemplate {
    int class_id;
    double dx, dy, a, b;
};

// Heart-frame layout: atria on top, ventricles below, right heart on the image left.
constexpr std::array<ChamberTemplate, 4> kLayout{{
    {3, -0.21, -0.19, 0.100, 0.090},  // RA: near round
    {1, 0.21, -0.19, 0.120, 0.080},   // LA: wide
    {2, -0.21, 0.17, 0.140, 0.115},   // RV: broad
    {0, 0.21, 0.17, 0.105, 0.160},    // LV: tall, elongated toward the apex
}};

void gaussian_blur(std::vector<float>& img, int size, double sigma) {
    const int r = std::max(1, int(std::ceil(3 * sigma)));
    std::vector<float> k(static_cast<std::size_t>(2 * r + 1));
    float total = 0;
    for (int i = -r; i <= r; ++i) total += k[i + r] = float(std::exp(-0.5 * i * i / (sigma * sigma)));
    for (auto& v : k) v /= total;
    std::vector<float> tmp(img.size());
    auto at = [size](int i) { return std::clamp(i, 0, size - 1); };
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float acc = 0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * img[y * size + at(x + i)];
            tmp[y * size + x] = acc;
        }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float acc = 0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[at(y + i) * size + x];
            img[y * size + x] = acc;
        }
}

}  // namespace

Sample synth_phantom_sample(int size, std::uint64_t seed, int index) {
    if (size < 32) throw std::invalid_argument("phantom size must be at least 32");
    Rng rng = Rng::derive(seed, 0x7068616e746f6dULL, static_cast<std::uint64_t>(index));
    const double deg = std::numbers::pi / 180.0;

    std::vector<Chamber> chambers;
    double hx = 0.5, hy = 0.5, scale = 1.0, rot = 0.0;
    auto inside = [](const Box& b) { return b.x_min >= 0.01 && b.y_min >= 0.01 && b.x_max <= 0.99 && b.y_max <= 0.99; };
    for (int attempt = 0;; ++attempt) {
        hx = 0.5 + rng.uniform(-0.04, 0.04);
        hy = 0.5 + rng.uniform(-0.04, 0.04);
        scale = rng.uniform(0.8, 0.95);
        rot = rng.uniform(-15, 15) * deg;
        chambers.clear();
        const double c = std::cos(rot), s = std::sin(rot);
        for (const auto& t : kLayout) {
            const double dx = (t.dx + rng.uniform(-0.015, 0.015)) * scale;
            const double dy = (t.dy + rng.uniform(-0.015, 0.015)) * scale;
            const double a = t.a * scale * rng.uniform(0.9, 1.1);
            const double b = t.b * scale * rng.uniform(0.9, 1.1);
            const double own = rng.uniform(-20, 20) * deg;
            chambers.push_back({t.class_id, hx + dx * c - dy * s, hy + dx * s + dy * c, a, b, rot + own});
        }
        bool ok = std::all_of(chambers.begin(), chambers.end(), [&](const Chamber& ch) { return inside(ch.bounds()); });
        for (int y = 0; ok && y < size; ++y)
            for (int x = 0; ok && x < size; ++x) {
                const double u = (x + 0.5) / size, v = (y + 0.5) / size;
                int hits = 0;
                for (const auto& ch : chambers) hits += ch.contains(u, v);
                ok = hits <= 1;
            }
        if (ok) break;
        if (attempt > 100) throw std::runtime_error("phantom layout rejection did not converge");
    }

    // Myocardium: one ellipse enclosing the chambers.
    const Chamber heart{-1, hx, hy, 0.43 * scale, 0.41 * scale, rot};
    const double background = rng.uniform(0.03, 0.08);
    const double muscle = rng.uniform(0.5, 0.65);
    std::array<double, 4> fluid{};
    for (auto& f : fluid) f = rng.uniform(0.08, 0.16);

    std::vector<float> gray(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size, v = (y + 0.5) / size;
            double value = heart.contains(u, v) ? muscle : background;
            for (std::size_t k = 0; k < chambers.size(); ++k)
                if (chambers[k].contains(u, v)) value = fluid[k];
            const double speckle = std::max(0.0, 1.0 + 0.35 * rng.normal());
            gray[static_cast<std::size_t>(y) * size + x] = float(value * speckle);
        }
    gaussian_blur(gray, size, rng.uniform(0.7, 1.2) * size / 160.0);

    Sample out;
    out.image = Image(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const float v = std::clamp(gray[static_cast<std::size_t>(y) * size + x], 0.0f, 1.0f);
            for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = v;
        }
    for (const auto& ch : chambers) out.gts.push_back({ch.class_id, ch.bounds()});
    std::sort(out.gts.begin(), out.gts.end(), [](const auto& l, const auto& r) { return l.class_id < r.class_id; });
    char name[32];
    std::snprintf(name, sizeof name, "%06d", index);
    out.name = name;
    return out;
}

Dataset synth_phantom(int n, int size, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("synth_phantom: n must be >= 1");
    Dataset ds;
    ds.classes = ClassTable::chambers();
    ds.samples.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ds.samples[static_cast<std::size_t>(i)] = synth_phantom_sample(size, seed, i);
    return ds;
}

std::vector<fs::path> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    std::vector<fs::path> out;
    std::string line;
    while (std::getline(in, line)) {
        line.erase(line.find_last_not_of(" \t\r") + 1);
        if (!line.empty()) out.emplace_back(line);
    }
    return out;
}

void write_manifest(const fs::path& path, const std::vector<fs::path>& entries) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& e : entries) out << e.generic_string() << '\n';
}

void save_dataset(const fs::path& root, const Dataset& dataset) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    std::vector<fs::path> entries;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const auto& s = dataset.samples[i];
        const std::string name = s.name.empty() ? std::to_string(i) : s.name;
        const fs::path rel = fs::path("images") / (name + ".ppm");
        write_ppm(root / rel, s.image);
        write_yolo_labels(root / "labels" / (name + ".txt"), s.gts);
        entries.push_back(rel);
    }
    write_manifest(root / "manifest.txt", entries);
    dataset.classes.save(root / "classes.txt");
}

Dataset load_dataset(const fs::path& root) {
    Dataset ds;
    ds.classes = fs::exists(root / "classes.txt") ? ClassTable::load(root / "classes.txt") : ClassTable::chambers();
    std::vector<fs::path> images;
    if (fs::exists(root / "manifest.txt")) {
        for (const auto& e : read_manifest(root / "manifest.txt")) images.push_back(e.is_absolute() ? e : root / e);
    } else {
        images = sorted_files(root / "images", is_image_file);
    }
    for (const auto& img : images) {
        const fs::path label = img.parent_path().parent_path() / "labels" / (img.stem().string() + ".txt");
        add_labelled(ds, img, label);
    }
    return ds;
}

Split split_indices(int n, double train_ratio, std::uint64_t seed) {
    if (n < 0 || !(train_ratio >= 0 && train_ratio <= 1))
        throw std::invalid_argument("split: ratio must lie in [0, 1]");
    Rng rng = Rng::derive(seed, 0x73706c6974ULL);
    const std::vector<int> perm = rng.permutation(n);
    const auto n_train = static_cast<std::ptrdiff_t>(std::lround(n * train_ratio));
    Split s;
    s.train.assign(perm.begin(), perm.begin() + n_train);
    s.val.assign(perm.begin() + n_train, perm.end());
    return s;
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&] {
            for (int i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace mrham
