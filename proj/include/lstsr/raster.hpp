#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lstsr/error.hpp"
#include "lstsr/field.hpp"

namespace lstsr {

/// Quiet NaN marks cloud/missing pixels both in memory and in the payload.
inline constexpr float kNodata = std::numeric_limits<float>::quiet_NaN();

inline bool is_nodata(float v) { return std::isnan(v); }
inline bool is_nodata(double v) { return std::isnan(v); }

/// LST raster as stored on disk: float32 row-major, top-left origin.
struct RasterGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  double pixel_size_m = 1000.0;
  std::vector<float> values;

  float at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  std::size_t nodata_count() const {
    std::size_t n = 0;
    for (float v : values) n += is_nodata(v) ? 1 : 0;
    return n;
  }

  /// Bitwise equality, so NaN sentinels compare equal to themselves.
  friend bool operator==(const RasterGrid& a, const RasterGrid& b) {
    if (a.width != b.width || a.height != b.height || a.pixel_size_m != b.pixel_size_m ||
        a.values.size() != b.values.size())
      return false;
    return a.values.empty() ||
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
  }
};

/// Structural checks shared by every grid (LST or covariate).
inline void validate_grid(const RasterGrid& g) {
  if (g.width == 0 || g.height == 0) throw InvalidArgument("grid dimensions must be positive");
  if (!(g.pixel_size_m > 0.0) || !std::isfinite(g.pixel_size_m))
    throw InvalidArgument("pixel_size_m must be positive");
  if (g.values.size() != g.width * g.height)
    throw ShapeError("grid payload length does not match width*height");
  for (float v : g.values)
    if (!is_nodata(v) && !std::isfinite(v)) throw InvalidArgument("grid contains infinite values");
}

/// Additional LST invariant: every valid temperature is strictly positive Kelvin.
inline void validate_lst(const RasterGrid& g) {
  validate_grid(g);
  for (float v : g.values)
    if (!is_nodata(v) && !(v > 0.0f)) throw InvalidArgument("LST values must be > 0 K");
}

namespace detail {

struct GridPaths {
  std::filesystem::path header;
  std::filesystem::path payload;
};

// "scene.lstgrid" (or bare "scene") -> scene.json + scene.bin
inline GridPaths grid_paths(const std::filesystem::path& p) {
  std::filesystem::path stem = p;
  if (stem.extension() == ".lstgrid" || stem.extension() == ".json" || stem.extension() == ".bin")
    stem.replace_extension();
  GridPaths out;
  out.header = stem;
  out.header += ".json";
  out.payload = stem;
  out.payload += ".bin";
  return out;
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

}  // namespace detail

inline void store_grid(const RasterGrid& grid, const std::filesystem::path& path) {
  validate_grid(grid);
  const auto paths = detail::grid_paths(path);
  nlohmann::json header = {{"width", grid.width},
                           {"height", grid.height},
                           {"pixel_size_m", grid.pixel_size_m},
                           {"dtype", "f32le"},
                           {"nodata", "nan"}};
  {
    std::ofstream hs(paths.header, std::ios::binary | std::ios::trunc);
    if (!hs) throw IoError("cannot open " + paths.header.string() + " for writing");
    hs << header.dump() << '\n';
    if (!hs) throw IoError("failed writing " + paths.header.string());
  }
  std::vector<std::uint32_t> raw(grid.values.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = detail::to_le(std::bit_cast<std::uint32_t>(grid.values[i]));
  std::ofstream ps(paths.payload, std::ios::binary | std::ios::trunc);
  if (!ps) throw IoError("cannot open " + paths.payload.string() + " for writing");
  ps.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
  if (!ps) throw IoError("failed writing " + paths.payload.string());
}

inline RasterGrid load_grid(const std::filesystem::path& path) {
  const auto paths = detail::grid_paths(path);
  std::ifstream hs(paths.header);
  if (!hs) throw IoError("cannot open grid header " + paths.header.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt grid header " + paths.header.string() + ": " + e.what());
  }
  RasterGrid grid;
  try {
    const auto w = header.at("width").get<long long>();
    const auto h = header.at("height").get<long long>();
    if (w <= 0 || h <= 0) throw FormatError("grid header has non-positive dimensions");
    grid.width = static_cast<std::size_t>(w);
    grid.height = static_cast<std::size_t>(h);
    grid.pixel_size_m = header.at("pixel_size_m").get<double>();
    if (header.value("dtype", std::string("f32le")) != "f32le")
      throw FormatError("unsupported dtype (expected f32le)");
    if (header.value("nodata", std::string("nan")) != "nan")
      throw FormatError("unsupported nodata encoding (expected nan)");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt grid header " + paths.header.string() + ": " + e.what());
  }
  if (!(grid.pixel_size_m > 0.0)) throw FormatError("grid header has non-positive pixel_size_m");

  std::ifstream ps(paths.payload, std::ios::binary | std::ios::ate);
  if (!ps) throw IoError("cannot open grid payload " + paths.payload.string());
  const auto bytes = static_cast<std::size_t>(ps.tellg());
  const std::size_t expected = grid.width * grid.height * sizeof(float);
  if (bytes != expected)
    throw FormatError("payload length mismatch: " + std::to_string(bytes) + " bytes, expected " +
                      std::to_string(expected));
  ps.seekg(0);
  std::vector<std::uint32_t> raw(grid.width * grid.height);
  ps.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(expected));
  if (!ps) throw IoError("failed reading " + paths.payload.string());
  grid.values.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    grid.values[i] = std::bit_cast<float>(detail::to_le(raw[i]));
  try {
    validate_grid(grid);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("invalid grid payload: ") + e.what());
  }
  return grid;
}

/// Widen a grid to the double-precision working field. Nodata stays NaN.
inline Field to_field(const RasterGrid& g) {
  Field f(g.width, g.height, 0.0, g.pixel_size_m);
  for (std::size_t i = 0; i < g.values.size(); ++i) f.values[i] = static_cast<double>(g.values[i]);
  return f;
}

inline RasterGrid to_grid(const Field& f) {
  RasterGrid g;
  g.width = f.width;
  g.height = f.height;
  g.pixel_size_m = f.pixel_size_m;
  g.values.resize(f.values.size());
  for (std::size_t i = 0; i < f.values.size(); ++i) g.values[i] = static_cast<float>(f.values[i]);
  return g;
}

/// Square window cut from a parent grid.
struct Patch {
  Field pixels;
  std::size_t row = 0;
  std::size_t col = 0;

  std::size_t size() const { return pixels.width; }
};

/// Cut every stride-lattice window of `size` pixels that is free of nodata.
/// Windows touching a cloudy pixel are dropped; order is row-major by offset.
inline std::vector<Patch> extract_patches(const RasterGrid& grid, std::size_t size,
                                          std::size_t stride) {
  if (size == 0 || size > std::min(grid.width, grid.height))
    throw InvalidArgument("patch size must be in [1, min(width, height)]");
  if (stride == 0) throw InvalidArgument("stride must be >= 1");
  if (grid.values.size() != grid.width * grid.height)
    throw ShapeError("grid payload length does not match width*height");

  // Summed-area table of nodata flags makes each window test O(1).
  const std::size_t W = grid.width + 1;
  std::vector<std::size_t> sat(W * (grid.height + 1), 0);
  for (std::size_t r = 0; r < grid.height; ++r)
    for (std::size_t c = 0; c < grid.width; ++c)
      sat[(r + 1) * W + c + 1] = sat[r * W + c + 1] + sat[(r + 1) * W + c] - sat[r * W + c] +
                                 (is_nodata(grid.at(r, c)) ? 1 : 0);

  std::vector<Patch> out;
  for (std::size_t r = 0; r + size <= grid.height; r += stride) {
    for (std::size_t c = 0; c + size <= grid.width; c += stride) {
      const std::size_t bad = sat[(r + size) * W + c + size] - sat[r * W + c + size] -
                              sat[(r + size) * W + c] + sat[r * W + c];
      if (bad != 0) continue;
      Patch p;
      p.row = r;
      p.col = c;
      p.pixels = Field(size, size, 0.0, grid.pixel_size_m);
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) p.pixels.at(i, j) = grid.at(r + i, c + j);
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace lstsr
