#include "kiim/png_io.hpp"

#include <png.h>

#include "kiim/core.hpp"

namespace kiim::pngio {

namespace {
void write_png(const std::string& path, int width, int height, const std::vector<uint8_t>& pixels,
               uint32_t format) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = format;
    if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr))
        throw IoError("png write failed: " + path + " (" + img.message + ")");
}
}  // namespace

void write_rgb(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3) throw ValidationError("write_rgb: buffer size");
    write_png(path, width, height, rgb, PNG_FORMAT_RGB);
}

void write_gray(const std::string& path, int width, int height, const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(width) * height) throw ValidationError("write_gray: buffer size");
    write_png(path, width, height, gray, PNG_FORMAT_GRAY);
}

const std::array<std::array<uint8_t, 3>, 4>& class_palette() {
    static const std::array<std::array<uint8_t, 3>, 4> palette = {{
        {128, 128, 128},  // non_irrigated
        {0, 90, 220},     // flood
        {0, 170, 60},     // sprinkler
        {220, 40, 40},    // drip
    }};
    return palette;
}

std::vector<uint8_t> colorize_classes(const std::vector<uint8_t>& classes) {
    std::vector<uint8_t> rgb(classes.size() * 3);
    for (size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] >= 4) throw ValidationError("colorize_classes: class out of range");
        const auto& c = class_palette()[classes[i]];
        rgb[3 * i] = c[0];
        rgb[3 * i + 1] = c[1];
        rgb[3 * i + 2] = c[2];
    }
    return rgb;
}

int palette_class_of(uint8_t r, uint8_t g, uint8_t b) {
    for (int k = 0; k < 4; ++k) {
        const auto& c = class_palette()[static_cast<size_t>(k)];
        if (c[0] == r && c[1] == g && c[2] == b) return k;
    }
    return -1;
}

}  // namespace kiim::pngio
