// PGM images and small CSV helpers.
#pragma once

#include "gmic/roi.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gmic {

using Image = GridMap<float>;
using Mask = GridMap<std::uint8_t>;

/// Binary (P5) 8-bit PGM; values are clamped to [0,1] and scaled to 0..255.
void write_pgm(const std::filesystem::path& path, const Image& image);
void write_pgm(const std::filesystem::path& path, const Mask& mask);  // nonzero -> 255
Image read_pgm(const std::filesystem::path& path);
Mask read_mask_pgm(const std::filesystem::path& path);  // nonzero -> 1

/// Round every pixel to the nearest 1/255 step, matching what write_pgm keeps.
Image quantize_8bit(const Image& image);

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
GridMap<T> upsample_nearest(const GridMap<T>& map, Index factor) {
  GridMap<T> out(map.rows() * factor, map.cols() * factor);
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < out.cols(); ++c) out(r, c) = map(r / factor, c / factor);
  return out;
}

/// Minimal CSV reader: header row plus rows of comma-separated fields.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws std::runtime_error when missing.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

}  // namespace gmic
