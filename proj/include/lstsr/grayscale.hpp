#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "lstsr/error.hpp"
#include "lstsr/raster.hpp"

namespace lstsr {

/// Min-max stretch of the valid pixels to 0..255. Nodata renders as 0 and a
/// flat grid renders as 128.
inline std::vector<std::uint8_t> grayscale_bytes(const RasterGrid& grid) {
  validate_grid(grid);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (float v : grid.values)
    if (!is_nodata(v)) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  std::vector<std::uint8_t> out(grid.values.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = grid.values[i];
    if (is_nodata(v)) continue;
    if (!(hi > lo)) {
      out[i] = 128;
      continue;
    }
    const double s = (static_cast<double>(v) - lo) / (hi - lo) * 255.0;
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(s), 0L, 255L));
  }
  return out;
}

/// Binary PGM (P5).
inline void dump_grayscale(const RasterGrid& grid, const std::filesystem::path& path) {
  const auto bytes = grayscale_bytes(grid);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << grid.width << ' ' << grid.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace lstsr
