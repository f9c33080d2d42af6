#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace kiim::pngio {

// interleaved RGB8, row-major
void write_rgb(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb);
void write_gray(const std::string& path, int width, int height, const std::vector<uint8_t>& gray);

// fixed class palette: non_irrigated gray, flood blue, sprinkler green, drip red
const std::array<std::array<uint8_t, 3>, 4>& class_palette();
std::vector<uint8_t> colorize_classes(const std::vector<uint8_t>& classes);
int palette_class_of(uint8_t r, uint8_t g, uint8_t b);  // -1 when not a palette color

}  // namespace kiim::pngio
