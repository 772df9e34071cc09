#pragma once

#include "mrham/tensor.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace mrham {

/// Three-channel planar image, values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;  // c * height * width + y * width + x

    Image() = default;
    Image(int w, int h, float fill = 0.0f);

    float& at(int c, int y, int x) { return pixels[index(c, y, x)]; }
    float at(int c, int y, int x) const { return pixels[index(c, y, x)]; }
    bool empty() const { return width == 0 || height == 0; }

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height + y) * width + x;
    }
};

/// Binary PPM (P6, maxval <= 255).
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// 8-bit PNG via libpng; gray and alpha inputs are converted to RGB.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Dispatches on the file's magic bytes (reading) or extension (writing).
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);

Image resize_bilinear(const Image& image, int width, int height);

/// Stacks images of equal size into an N x 3 x H x W tensor.
template <typename T>
Tensor<T> to_batch(const std::vector<const Image*>& images);

using Color = std::array<float, 3>;

void draw_rect(Image& image, int x0, int y0, int x1, int y1, const Color& color, int thickness = 1);
void fill_rect(Image& image, int x0, int y0, int x1, int y1, const Color& color);
/// 5x7 bitmap text for digits, letters, '.', ':' and ' '. Returns the drawn width.
int draw_text(Image& image, int x, int y, const std::string& text, const Color& color, int scale = 1);

}  // namespace mrham
