#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "wsss/tensor.hpp"

namespace wsss {

// "WSST" tensor container.
//   magic 57 53 53 54, version 01, dtype byte, ndim byte,
//   ndim little-endian u32 dims, payload row-major.
// dtype 01 = little-endian f32, dtype 02 = u8 (label maps).
inline constexpr std::array<uint8_t, 4> kWsstMagic = {0x57, 0x53, 0x53, 0x54};
inline constexpr uint8_t kWsstVersion = 0x01;
inline constexpr uint8_t kWsstF32 = 0x01;
inline constexpr uint8_t kWsstU8 = 0x02;

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

void write_label_map(const std::filesystem::path& path, const LabelMap& m);
LabelMap read_label_map(const std::filesystem::path& path);

// 8-bit grayscale PGM, value = round(255 * p) of a [0,1] HxW map.
void write_pgm(const std::filesystem::path& path, const Tensor& map);

// Color PPM of a label map through a fixed palette (class index -> RGB).
struct Rgb {
  uint8_t r, g, b;
};
const std::vector<Rgb>& class_palette();
void write_ppm(const std::filesystem::path& path, const LabelMap& m);

}  // namespace wsss
