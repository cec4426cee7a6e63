#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lstsr/error.hpp"
#include "lstsr/field.hpp"
#include "lstsr/raster.hpp"

namespace lstsr {

enum class Generator { grf, linear_ndvi_world, checker, ramp };

inline std::string to_string(Generator g) {
  switch (g) {
    case Generator::grf: return "grf";
    case Generator::linear_ndvi_world: return "linear_ndvi_world";
    case Generator::checker: return "checker";
    case Generator::ramp: return "ramp";
  }
  return "?";
}

inline Generator parse_generator(const std::string& s) {
  if (s == "grf" || s == "gaussian_random_field") return Generator::grf;
  if (s == "linear_ndvi_world" || s == "linear") return Generator::linear_ndvi_world;
  if (s == "checker") return Generator::checker;
  if (s == "ramp") return Generator::ramp;
  throw InvalidArgument("unknown generator '" + s + "'");
}

inline constexpr double kMinLst = 200.0;
inline constexpr double kMaxLst = 350.0;

struct FieldSpec {
  Generator generator = Generator::grf;
  std::uint64_t seed = 0;
  std::size_t size = 64;
  double pixel_size_m = 1000.0;
  double corr_length_px = 8.0;  // grf and the NDVI pattern of linear_ndvi_world
  double mean_k = 300.0;
  double std_k = 5.0;
  // linear_ndvi_world: lst = slope * ndvi + intercept + N(0, noise_k)
  double slope = -20.0;
  double intercept = 310.0;
  double noise_k = 0.0;
  double ndvi_mean = 0.45;
  double ndvi_std = 0.15;
  // grf only: also emit ndvi = (lst - intercept) / slope + N(0, ndvi_noise)
  bool ndvi_proxy = false;
  double ndvi_noise = 0.05;
  // checker cell edge in pixels; checker and ramp span [low_k, high_k]
  std::size_t cell_px = 8;
  double low_k = 290.0;
  double high_k = 310.0;
  double min_k = kMinLst;
  double max_k = kMaxLst;

  void validate() const {
    if (size < 64) throw InvalidArgument("field size must be at least 64");
    if (!(pixel_size_m > 0.0)) throw InvalidArgument("pixel_size_m must be positive");
    if (!(min_k >= kMinLst && max_k <= kMaxLst && min_k < max_k))
      throw InvalidArgument("value range must lie within [200, 350] K");
    if (generator == Generator::grf || generator == Generator::linear_ndvi_world)
      if (!(corr_length_px > 0.0)) throw InvalidArgument("correlation length must be positive");
    if (!(std_k >= 0.0) || !(noise_k >= 0.0) || !(ndvi_std >= 0.0) || !(ndvi_noise >= 0.0))
      throw InvalidArgument("standard deviations must be non-negative");
    if ((generator == Generator::linear_ndvi_world || ndvi_proxy) && slope == 0.0)
      throw InvalidArgument("NDVI slope must be nonzero");
    if (generator == Generator::checker && cell_px == 0) throw InvalidArgument("checker cell must be >= 1 px");
    if (generator == Generator::checker || generator == Generator::ramp)
      if (!(low_k >= min_k && high_k <= max_k && low_k <= high_k))
        throw InvalidArgument("fixture levels outside the value range");
  }
};

struct Synthesized {
  RasterGrid lst;
  std::optional<RasterGrid> ndvi;
};

/// Zero-mean unit-variance stationary Gaussian field with covariance
/// exp(-r^2 / (2 l^2)), periodic on a size x size torus. White noise is
/// convolved with a separable Gaussian of width l / sqrt(2); that kernel is
/// the square root of the target spectrum, so this equals spectral synthesis.
inline Field unit_grf(std::size_t size, double corr_length_px, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Field noise(size, size);
  for (auto& v : noise.values) v = normal(rng);

  const double s = corr_length_px / std::sqrt(2.0);
  const long half = static_cast<long>(std::ceil(4.0 * s));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double sq = 0.0;
  for (long i = -half; i <= half; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (s * s));
    k[static_cast<std::size_t>(i + half)] = v;
    sq += v * v;
  }
  for (auto& v : k) v /= std::sqrt(sq);  // sum k^2 = 1 per axis keeps unit variance

  const long n = static_cast<long>(size);
  auto wrap = [n](long i) { return static_cast<std::size_t>(((i % n) + n) % n); };
  Field tmp(size, size), out(size, size);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      double acc = 0.0;
      for (long i = -half; i <= half; ++i)
        acc += k[static_cast<std::size_t>(i + half)] * noise.at(r, wrap(static_cast<long>(c) + i));
      tmp.at(r, c) = acc;
    }
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      double acc = 0.0;
      for (long i = -half; i <= half; ++i)
        acc += k[static_cast<std::size_t>(i + half)] * tmp.at(wrap(static_cast<long>(r) + i), c);
      out.at(r, c) = acc;
    }
  return out;
}

namespace detail {

inline RasterGrid clamped_grid(Field f, double lo, double hi) {
  for (auto& v : f.values) v = std::clamp(v, lo, hi);
  return to_grid(f);
}

}  // namespace detail

/// Deterministic under spec.seed. linear_ndvi_world also returns the NDVI grid.
inline Synthesized generate(const FieldSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t n = spec.size;
  Synthesized out;
  switch (spec.generator) {
    case Generator::grf: {
      Field f = unit_grf(n, spec.corr_length_px, rng);
      for (auto& v : f.values) v = spec.mean_k + spec.std_k * v;
      f.pixel_size_m = spec.pixel_size_m;
      out.lst = detail::clamped_grid(std::move(f), spec.min_k, spec.max_k);
      if (spec.ndvi_proxy) {
        std::normal_distribution<double> normal(0.0, 1.0);
        Field ndvi = to_field(out.lst);
        for (auto& v : ndvi.values) {
          const double noise = spec.ndvi_noise > 0.0 ? spec.ndvi_noise * normal(rng) : 0.0;
          v = (v - spec.intercept) / spec.slope + noise;
        }
        out.ndvi = to_grid(ndvi);
      }
      break;
    }
    case Generator::linear_ndvi_world: {
      Field ndvi = unit_grf(n, spec.corr_length_px, rng);
      for (auto& v : ndvi.values) v = std::clamp(spec.ndvi_mean + spec.ndvi_std * v, -1.0, 1.0);
      ndvi.pixel_size_m = spec.pixel_size_m;
      std::normal_distribution<double> normal(0.0, 1.0);
      Field lst(n, n, 0.0, spec.pixel_size_m);
      for (std::size_t i = 0; i < lst.size(); ++i) {
        const double noise = spec.noise_k > 0.0 ? spec.noise_k * normal(rng) : 0.0;
        lst.values[i] = spec.slope * ndvi.values[i] + spec.intercept + noise;
      }
      out.lst = detail::clamped_grid(std::move(lst), spec.min_k, spec.max_k);
      out.ndvi = to_grid(ndvi);
      break;
    }
    case Generator::checker: {
      Field f(n, n, 0.0, spec.pixel_size_m);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
          f.at(r, c) = ((r / spec.cell_px + c / spec.cell_px) % 2 == 0) ? spec.low_k : spec.high_k;
      out.lst = to_grid(f);
      break;
    }
    case Generator::ramp: {
      Field f(n, n, 0.0, spec.pixel_size_m);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
          f.at(r, c) = spec.low_k + (spec.high_k - spec.low_k) * static_cast<double>(c) / static_cast<double>(n - 1);
      out.lst = to_grid(f);
      break;
    }
  }
  return out;
}

}  // namespace lstsr
