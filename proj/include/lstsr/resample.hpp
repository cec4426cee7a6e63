#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lstsr/error.hpp"
#include "lstsr/field.hpp"

namespace lstsr {

enum class ResampleMethod { norm_l4, area_weighted, bicubic_up };

struct ResampleSpec {
  int ratio = 4;
  ResampleMethod method = ResampleMethod::norm_l4;
};

namespace detail {

inline void require_finite(const Field& f, const char* what) {
  for (double v : f.values)
    if (!std::isfinite(v)) throw InvalidArgument(std::string(what) + ": input contains nodata");
}

}  // namespace detail

/// Radiometric (Stefan-Boltzmann) aggregation: each coarse pixel is the fourth
/// root of the block mean of T^4.
inline Field norml4_downsample(const Field& hr, int ratio) {
  if (ratio < 1) throw InvalidArgument("norml4_downsample: ratio must be >= 1");
  const auto r = static_cast<std::size_t>(ratio);
  if (hr.width % r != 0 || hr.height % r != 0)
    throw InvalidArgument("norml4_downsample: ratio does not divide the field size");
  detail::require_finite(hr, "norml4_downsample");
  for (double v : hr.values)
    if (!(v > 0.0)) throw InvalidArgument("norml4_downsample: temperatures must be positive");

  Field out(hr.width / r, hr.height / r, 0.0, hr.pixel_size_m * ratio);
  const double n = static_cast<double>(r * r);
  for (std::size_t R = 0; R < out.height; ++R) {
    for (std::size_t C = 0; C < out.width; ++C) {
      // Scale by the block maximum: keeps T^4 well inside range and makes
      // constant blocks come back bit-exact.
      double peak = 0.0;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) peak = std::max(peak, hr.at(R * r + i, C * r + j));
      double acc = 0.0;
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          const double q = hr.at(R * r + i, C * r + j) / peak;
          const double q2 = q * q;
          acc += q2 * q2;
        }
      }
      out.at(R, C) = peak * std::sqrt(std::sqrt(acc / n));
    }
  }
  return out;
}

namespace detail {

struct OverlapTap {
  std::size_t index;
  double weight;
};

// Fine pixels overlapping [j*ratio, (j+1)*ratio) with their overlap lengths.
inline std::vector<std::vector<OverlapTap>> overlap_taps(std::size_t fine, std::size_t coarse,
                                                         double ratio) {
  std::vector<std::vector<OverlapTap>> taps(coarse);
  for (std::size_t j = 0; j < coarse; ++j) {
    const double a = static_cast<double>(j) * ratio;
    const double b = std::min(static_cast<double>(j + 1) * ratio, static_cast<double>(fine));
    const auto first = static_cast<std::size_t>(std::floor(a));
    const auto last = std::min(fine, static_cast<std::size_t>(std::ceil(b)));
    for (std::size_t i = first; i < last; ++i) {
      const double w = std::min(static_cast<double>(i + 1), b) - std::max(static_cast<double>(i), a);
      if (w > 0.0) taps[j].push_back({i, w});
    }
  }
  return taps;
}

}  // namespace detail

/// Area-weighted linear aggregation by an arbitrary ratio >= 1. Fine pixels
/// partially covered by a coarse cell contribute in proportion to the
/// overlapping area. Output size is floor(fine / ratio) on each axis.
inline Field area_weighted_downsample(const Field& hr, double ratio) {
  if (!(ratio >= 1.0) || !std::isfinite(ratio))
    throw InvalidArgument("area_weighted_downsample: ratio must be >= 1");
  detail::require_finite(hr, "area_weighted_downsample");
  const auto ow = static_cast<std::size_t>(std::floor(static_cast<double>(hr.width) / ratio + 1e-9));
  const auto oh = static_cast<std::size_t>(std::floor(static_cast<double>(hr.height) / ratio + 1e-9));
  if (ow < 1 || oh < 1) throw InvalidArgument("area_weighted_downsample: output would be empty");

  const auto tx = detail::overlap_taps(hr.width, ow, ratio);
  const auto ty = detail::overlap_taps(hr.height, oh, ratio);
  Field out(ow, oh, 0.0, hr.pixel_size_m * ratio);
  for (std::size_t R = 0; R < oh; ++R) {
    for (std::size_t C = 0; C < ow; ++C) {
      const double ref = hr.at(ty[R].front().index, tx[C].front().index);
      double acc = 0.0;
      double wsum = 0.0;
      for (const auto& y : ty[R]) {
        for (const auto& x : tx[C]) {
          const double w = y.weight * x.weight;
          acc += w * (hr.at(y.index, x.index) - ref);
          wsum += w;
        }
      }
      out.at(R, C) = ref + acc / wsum;
    }
  }
  return out;
}

inline Field area_weighted_downsample(const Field& hr, int ratio) {
  return area_weighted_downsample(hr, static_cast<double>(ratio));
}

/// Keys cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

struct CubicTaps {
  std::array<std::size_t, 4> index;
  std::array<double, 4> weight;
};

// Half-pixel-centred sampling positions with replicated borders.
inline std::vector<CubicTaps> cubic_taps(std::size_t in, int ratio) {
  const std::size_t out = in * static_cast<std::size_t>(ratio);
  std::vector<CubicTaps> taps(out);
  const auto last = static_cast<long long>(in) - 1;
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / ratio - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    const auto i0 = static_cast<long long>(base);
    for (int k = 0; k < 4; ++k) {
      const long long idx = std::clamp(i0 - 1 + k, 0LL, last);
      taps[o].index[k] = static_cast<std::size_t>(idx);
      taps[o].weight[k] = cubic_kernel(t - (k - 1));
    }
  }
  return taps;
}

// Interpolate around the tap-1 sample so constant inputs stay bit-exact.
inline double apply_taps(const CubicTaps& t, auto&& sample) {
  const double anchor = sample(t.index[1]);
  double acc = 0.0;
  for (int k = 0; k < 4; ++k) acc += t.weight[k] * (sample(t.index[k]) - anchor);
  return anchor + acc;
}

}  // namespace detail

/// Separable bicubic upsampling by an integer ratio >= 2.
inline Field bicubic_upsample(const Field& lr, int ratio) {
  if (ratio < 2) throw InvalidArgument("bicubic_upsample: ratio must be >= 2");
  if (lr.empty()) throw InvalidArgument("bicubic_upsample: empty input");
  detail::require_finite(lr, "bicubic_upsample");
  const auto r = static_cast<std::size_t>(ratio);
  const auto tx = detail::cubic_taps(lr.width, ratio);
  const auto ty = detail::cubic_taps(lr.height, ratio);

  Field rows(lr.width * r, lr.height, 0.0);
  for (std::size_t y = 0; y < lr.height; ++y)
    for (std::size_t x = 0; x < rows.width; ++x)
      rows.at(y, x) = detail::apply_taps(tx[x], [&](std::size_t i) { return lr.at(y, i); });

  Field out(lr.width * r, lr.height * r, 0.0, lr.pixel_size_m / ratio);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      out.at(y, x) = detail::apply_taps(ty[y], [&](std::size_t i) { return rows.at(i, x); });
  return out;
}

/// Interpolated low-resolution input: Norm-L4 degradation then bicubic
/// upsampling back to the original grid.
inline Field make_ilr(const Field& hr, int ratio) {
  Field ilr = bicubic_upsample(norml4_downsample(hr, ratio), ratio);
  ilr.pixel_size_m = hr.pixel_size_m;
  return ilr;
}

inline Field resample(const Field& in, const ResampleSpec& spec) {
  switch (spec.method) {
    case ResampleMethod::norm_l4: return norml4_downsample(in, spec.ratio);
    case ResampleMethod::area_weighted: return area_weighted_downsample(in, spec.ratio);
    case ResampleMethod::bicubic_up: return bicubic_upsample(in, spec.ratio);
  }
  throw InvalidArgument("unknown resample method");
}

}  // namespace lstsr
