#pragma once

#include "mrham/boxes.hpp"
#include "mrham/image.hpp"
#include "mrham/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mrham {

/// Ordered class names; the index is the class id.
struct ClassTable {
    std::vector<std::string> names;

    /// LV, LA, RV, RA -> 0..3.
    static ClassTable chambers();
    static ClassTable load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    int size() const { return static_cast<int>(names.size()); }
    /// Class id of `name`, or -1.
    int find(const std::string& name) const;
    void validate() const;
};

struct Sample {
    Image image;
    std::vector<GroundTruth> gts;  // normalized to the image
    std::string name;
};

/// Checks boxes within [0, 1]^2 with positive area and ids below num_classes.
/// Returns an empty string when valid, otherwise the first problem found.
std::string sample_problem(const Sample& sample, int num_classes);

struct Dataset {
    ClassTable classes;
    std::vector<Sample> samples;
    std::vector<std::string> diagnostics;  // one entry per rejected line or file

    std::size_t size() const { return samples.size(); }
};

/// Parses YOLO label text ("class cx cy w h" per line, normalized). Any invalid
/// line rejects the whole file: the result is empty and each problem is appended
/// to `diagnostics` as "<source>:<line>: <message>".
std::optional<std::vector<GroundTruth>> parse_yolo_labels(const std::string& text, const std::string& source,
                                                           int num_classes, std::vector<std::string>& diagnostics);
std::string format_yolo_labels(const std::vector<GroundTruth>& gts);
void write_yolo_labels(const std::filesystem::path& path, const std::vector<GroundTruth>& gts);

/// Every image in image_dir (sorted by name) paired with label_dir/<stem>.txt.
/// A missing label file counts as an image with no objects.
Dataset load_yolo_dataset(const std::filesystem::path& image_dir, const std::filesystem::path& label_dir,
                          const ClassTable& classes);

/// VOC annotations (*.xml, sorted) in `dir`. Images are resolved from <filename>
/// next to the XML or in ../JPEGImages; only PPM and PNG decode.
Dataset load_voc_xml(const std::filesystem::path& dir, const ClassTable& classes);

/// CIFAR binary records: 1 label byte + 3072 planar RGB bytes.
struct ClassificationSet {
    std::vector<Image> images;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
/// Records in a file of `bytes` bytes; throws on a partial record.
std::size_t cifar_record_count(std::uintmax_t bytes);
ClassificationSet load_cifar(const std::vector<std::filesystem::path>& files);
/// data_batch_1..5.bin (train) or test_batch.bin under `dir`.
std::vector<std::filesystem::path> cifar_files(const std::filesystem::path& dir, bool train);

/// Maps source pixels to target pixels: p' = p * scale + pad.
struct LetterboxTransform {
    double scale = 1.0;
    int pad_x = 0, pad_y = 0;

    Box forward(const Box& source_px) const;
    Box inverse(const Box& target_px) const;
};

inline constexpr float kPadValue = 0.5f;

/// Aspect-preserving resize into a target x target canvas with centered gray padding.
std::pair<Sample, LetterboxTransform> letterbox(const Sample& sample, int target);

/// Four-image mosaic on a target x target canvas. A random center splits the
/// canvas; each sample is scaled by a random factor in [0.5, 1.5] and cropped to
/// its quadrant. Boxes keeping less than 20% of their area are dropped.
Sample mosaic(const std::array<const Sample*, 4>& samples, int target, Rng& rng);

/// Mirror left-right; class ids are unchanged.
Sample hflip(const Sample& sample);

/// Synthetic four-chamber image `index` of a seeded series: dark background,
/// bright myocardium, four dark non-overlapping elliptical chambers (RA upper
/// left, LA upper right, RV lower left, LV lower right in image space),
/// multiplicative speckle and a Gaussian blur.
Sample synth_phantom_sample(int size, std::uint64_t seed, int index);
Dataset synth_phantom(int n, int size, std::uint64_t seed);

/// Every ground-truth box cropped (grown by `margin` of its size per side) and
/// resized to size x size, labelled with its class.
ClassificationSet crop_objects(const Dataset& dataset, int size, double margin = 0.1);

/// On-disk layout: images/<name>.ppm, labels/<name>.txt, manifest.txt (image
/// paths relative to the root, one per line), classes.txt.
void save_dataset(const std::filesystem::path& root, const Dataset& dataset);
/// Reads manifest.txt and classes.txt (defaulting to the chambers); labels are
/// resolved by replacing the images/ directory with labels/.
Dataset load_dataset(const std::filesystem::path& root);

std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<std::filesystem::path>& entries);

struct Split {
    std::vector<int> train, val;
};
/// Seeded permutation; the first round(n * train_ratio) indices train.
Split split_indices(int n, double train_ratio, std::uint64_t seed);

/// Runs fn(i) for i in [0, n) across `workers` threads. Each call must only
/// touch its own outputs, so results do not depend on the worker count.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace mrham
