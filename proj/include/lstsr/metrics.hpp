#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "lstsr/error.hpp"
#include "lstsr/field.hpp"

namespace lstsr {

inline double dynamic_range(const Field& gt) {
  if (gt.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(gt.values.begin(), gt.values.end());
  return *hi - *lo;
}

inline double mse(const Field& gt, const Field& sr) {
  require_same_shape(gt, sr, "mse");
  if (gt.empty()) throw InvalidArgument("mse: empty field");
  double acc = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double d = gt.values[i] - sr.values[i];
    acc += d * d;
  }
  return acc / static_cast<double>(gt.size());
}

inline double rmse(const Field& gt, const Field& sr) { return std::sqrt(mse(gt, sr)); }

/// 20 log10(DR_gt / RMSE). +inf for a perfect reconstruction; -inf when the
/// ground truth is flat but the reconstruction is not (degenerate).
inline double psnr(const Field& gt, const Field& sr) {
  const double e = rmse(gt, sr);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  const double dr = dynamic_range(gt);
  if (dr == 0.0) return -std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(dr / e);
}

/// Whole-image SSIM: means, population variances and covariance over all
/// pixels, stabilisers c1 = (0.01 DR)^2 and c2 = (0.03 DR)^2 from the truth.
inline double ssim(const Field& gt, const Field& sr) {
  require_same_shape(gt, sr, "ssim");
  if (gt.empty()) throw InvalidArgument("ssim: empty field");
  const double n = static_cast<double>(gt.size());
  double mu_g = 0.0, mu_s = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    mu_g += gt.values[i];
    mu_s += sr.values[i];
  }
  mu_g /= n;
  mu_s /= n;
  double var_g = 0.0, var_s = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double dg = gt.values[i] - mu_g;
    const double ds = sr.values[i] - mu_s;
    var_g += dg * dg;
    var_s += ds * ds;
    cov += dg * ds;
  }
  var_g /= n;
  var_s /= n;
  cov /= n;
  const double dr = dynamic_range(gt);
  const double c1 = (0.01 * dr) * (0.01 * dr);
  const double c2 = (0.03 * dr) * (0.03 * dr);
  const double num = (2.0 * mu_g * mu_s + c1) * (2.0 * cov + c2);
  const double den = (mu_g * mu_g + mu_s * mu_s + c1) * (var_g + var_s + c2);
  if (den == 0.0) return gt == sr ? 1.0 : 0.0;
  return num / den;
}

struct ImageMetrics {
  std::string id;
  double rmse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double dynamic_range = 0.0;
};

/// Aggregate over a set of images: pooled RMSE, per-image mean PSNR/SSIM.
struct MetricReport {
  double rmse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double dynamic_range = 0.0;
  std::size_t n_images = 0;
  std::size_t degenerate = 0;  // flat ground truth with nonzero error
  std::vector<ImageMetrics> images;
};

inline ImageMetrics evaluate_pair(const Field& gt, const Field& sr, std::string id = {}) {
  ImageMetrics m;
  m.id = std::move(id);
  m.rmse = rmse(gt, sr);
  m.psnr = psnr(gt, sr);
  m.ssim = ssim(gt, sr);
  m.dynamic_range = dynamic_range(gt);
  return m;
}

/// Assumes equally sized images, so pooled MSE is the mean per-image MSE.
inline MetricReport aggregate(std::vector<ImageMetrics> images) {
  if (images.empty()) throw InvalidArgument("evaluate_set: empty list");
  MetricReport rep;
  rep.n_images = images.size();
  double sq = 0.0;
  for (const auto& m : images) {
    sq += m.rmse * m.rmse;
    rep.psnr += m.psnr;
    rep.ssim += m.ssim;
    rep.dynamic_range += m.dynamic_range;
    if (m.psnr == -std::numeric_limits<double>::infinity()) ++rep.degenerate;
  }
  const double n = static_cast<double>(images.size());
  rep.rmse = std::sqrt(sq / n);
  rep.psnr /= n;
  rep.ssim /= n;
  rep.dynamic_range /= n;
  rep.images = std::move(images);
  return rep;
}

inline MetricReport evaluate_set(const std::vector<std::pair<Field, Field>>& pairs) {
  if (pairs.empty()) throw InvalidArgument("evaluate_set: empty list");
  std::vector<ImageMetrics> images;
  images.reserve(pairs.size());
  double pooled = 0.0;
  std::size_t pixels = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    images.push_back(evaluate_pair(pairs[i].first, pairs[i].second, std::to_string(i)));
    pooled += mse(pairs[i].first, pairs[i].second) * static_cast<double>(pairs[i].first.size());
    pixels += pairs[i].first.size();
  }
  MetricReport rep = aggregate(std::move(images));
  rep.rmse = std::sqrt(pooled / static_cast<double>(pixels));
  return rep;
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// CSV with header `id,rmse,psnr,ssim,dr`, one row per image.
inline void write_csv(const MetricReport& rep, std::ostream& os) {
  os << "id,rmse,psnr,ssim,dr\n";
  for (const auto& m : rep.images)
    os << m.id << ',' << format_number(m.rmse) << ',' << format_number(m.psnr) << ','
       << format_number(m.ssim) << ',' << format_number(m.dynamic_range) << '\n';
}

}  // namespace lstsr
