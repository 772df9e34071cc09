#include "mrham/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace mrham {

Image::Image(int w, int h, float fill) : width(w), height(h), pixels(static_cast<std::size_t>(3) * w * h, fill) {
    if (w < 0 || h < 0) throw std::invalid_argument("image dimensions must be non-negative");
}

namespace {

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

// Reads the next whitespace-separated header token, skipping '#' comments.
int ppm_header_int(std::istream& in, const std::filesystem::path& path) {
    int c = in.get();
    while (in && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (in && c != '\n') c = in.get();
        c = in.get();
    }
    if (!in || !std::isdigit(c)) throw std::runtime_error(path.string() + ": malformed PPM header");
    int v = 0;
    while (in && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        if (v > (1 << 20)) throw std::runtime_error(path.string() + ": PPM header value too large");
        c = in.get();
    }
    return v;
}

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[2] = {};
    in.read(magic, 2);
    if (magic[0] != 'P' || magic[1] != '6') throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
    const int w = ppm_header_int(in, path), h = ppm_header_int(in, path), maxval = ppm_header_int(in, path);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::runtime_error(path.string() + ": unsupported PPM size or maxval");
    std::vector<unsigned char> raw(static_cast<std::size_t>(3) * w * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw std::runtime_error(path.string() + ": truncated PPM");
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] / float(maxval);
    return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(3) * image.width * image.height);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                raw[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] = to_byte(image.at(c, y, x));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image read_png(const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw std::runtime_error(path.string() + ": " + png.message);
    png.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> raw(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
        const std::string msg = png.message;
        png_image_free(&png);
        throw std::runtime_error(path.string() + ": " + msg);
    }
    const int w = static_cast<int>(png.width), h = static_cast<int>(png.height);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    std::vector<unsigned char> raw(static_cast<std::size_t>(3) * image.width * image.height);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                raw[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] = to_byte(image.at(c, y, x));
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, raw.data(), 0, nullptr))
        throw std::runtime_error(path.string() + ": " + png.message);
}

Image read_image(const std::filesystem::path& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    unsigned char magic[8] = {};
    const std::size_t got = std::fread(magic, 1, sizeof magic, f.get());
    f.reset();
    if (got >= 2 && magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
    if (got == 8 && png_sig_cmp(magic, 0, 8) == 0) return read_png(path);
    throw std::runtime_error(path.string() + ": unsupported image format (expected PPM P6 or PNG)");
}

void write_image(const std::filesystem::path& path, const Image& image) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    if (ext == ".png")
        write_png(path, image);
    else if (ext == ".ppm")
        write_ppm(path, image);
    else
        throw std::invalid_argument(path.string() + ": unsupported image extension (use .ppm or .png)");
}

Image resize_bilinear(const Image& image, int width, int height) {
    if (width <= 0 || height <= 0 || image.empty()) throw std::invalid_argument("resize_bilinear: empty size");
    Image out(width, height);
    const double sx = double(image.width) / width, sy = double(image.height) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(image.height - 1));
        const int y0 = int(fy), y1 = std::min(y0 + 1, image.height - 1);
        const float wy = float(fy - y0);
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(image.width - 1));
            const int x0 = int(fx), x1 = std::min(x0 + 1, image.width - 1);
            const float wx = float(fx - x0);
            for (int c = 0; c < 3; ++c) {
                const float top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
                const float bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> to_batch(const std::vector<const Image*>& images) {
    if (images.empty()) throw std::invalid_argument("to_batch: no images");
    const int w = images[0]->width, h = images[0]->height;
    const std::int64_t per = std::int64_t(3) * w * h;
    Array<T> values(per * static_cast<std::int64_t>(images.size()));
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->width != w || images[i]->height != h)
            throw std::invalid_argument("to_batch: images differ in size");
        for (std::int64_t k = 0; k < per; ++k) values[std::int64_t(i) * per + k] = T(images[i]->pixels[k]);
    }
    return Tensor<T>({static_cast<int>(images.size()), 3, h, w}, std::move(values));
}

template Tensor<float> to_batch(const std::vector<const Image*>&);
template Tensor<double> to_batch(const std::vector<const Image*>&);

void fill_rect(Image& image, int x0, int y0, int x1, int y1, const Color& color) {
    x0 = std::max(x0, 0), y0 = std::max(y0, 0);
    x1 = std::min(x1, image.width - 1), y1 = std::min(y1, image.height - 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int c = 0; c < 3; ++c) image.at(c, y, x) = color[c];
}

void draw_rect(Image& image, int x0, int y0, int x1, int y1, const Color& color, int thickness) {
    for (int t = 0; t < thickness; ++t) {
        fill_rect(image, x0 + t, y0 + t, x1 - t, y0 + t, color);
        fill_rect(image, x0 + t, y1 - t, x1 - t, y1 - t, color);
        fill_rect(image, x0 + t, y0 + t, x0 + t, y1 - t, color);
        fill_rect(image, x1 - t, y0 + t, x1 - t, y1 - t, color);
    }
}

namespace {

// Rows top to bottom, low five bits, leftmost pixel in bit 4.
using Glyph = std::array<std::uint8_t, 7>;

Glyph glyph(char ch) {
    switch (std::toupper(static_cast<unsigned char>(ch))) {
        case '0': return {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E};
        case '1': return {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E};
        case '2': return {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F};
        case '3': return {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E};
        case '4': return {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02};
        case '5': return {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E};
        case '6': return {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E};
        case '7': return {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08};
        case '8': return {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E};
        case '9': return {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C};
        case 'A': return {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
        case 'B': return {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E};
        case 'C': return {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E};
        case 'D': return {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C};
        case 'E': return {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F};
        case 'F': return {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10};
        case 'G': return {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F};
        case 'H': return {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
        case 'I': return {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E};
        case 'J': return {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C};
        case 'K': return {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11};
        case 'L': return {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F};
        case 'M': return {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11};
        case 'N': return {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11};
        case 'O': return {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E};
        case 'P': return {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10};
        case 'Q': return {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D};
        case 'R': return {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11};
        case 'S': return {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E};
        case 'T': return {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04};
        case 'U': return {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E};
        case 'V': return {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04};
        case 'W': return {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A};
        case 'X': return {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11};
        case 'Y': return {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04};
        case 'Z': return {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F};
        case '.': return {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
        case ':': return {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00};
        case '-': return {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00};
        case '_': return {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F};
        default: return {};
    }
}

}  // namespace

int draw_text(Image& image, int x, int y, const std::string& text, const Color& color, int scale) {
    int cursor = x;
    for (char ch : text) {
        const Glyph g = glyph(ch);
        for (int row = 0; row < 7; ++row)
            for (int col = 0; col < 5; ++col)
                if (g[row] & (0x10 >> col))
                    fill_rect(image, cursor + col * scale, y + row * scale, cursor + (col + 1) * scale - 1,
                              y + (row + 1) * scale - 1, color);
        cursor += 6 * scale;
    }
    return cursor - x;
}

}  // namespace mrham
