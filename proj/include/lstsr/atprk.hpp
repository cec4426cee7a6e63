#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lstsr/error.hpp"
#include "lstsr/field.hpp"
#include "lstsr/raster.hpp"
#include "lstsr/resample.hpp"

namespace lstsr {

struct RegressionFit {
  double slope = 0.0;
  double intercept = 0.0;
  Field residuals;  // NaN where either input is nodata
};

/// Ordinary least squares lst ~ slope * ndvi + intercept over pixels valid in both.
inline RegressionFit fit_regression(const Field& lst, const Field& ndvi) {
  require_same_shape(lst, ndvi, "fit_regression");
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < lst.size(); ++i) {
    if (is_nodata(lst.values[i]) || is_nodata(ndvi.values[i])) continue;
    sx += ndvi.values[i];
    sy += lst.values[i];
    ++n;
  }
  if (n < 2) throw NumericError("fit_regression: fewer than two valid pixels");
  const double mx = sx / static_cast<double>(n), my = sy / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lst.size(); ++i) {
    if (is_nodata(lst.values[i]) || is_nodata(ndvi.values[i])) continue;
    const double dx = ndvi.values[i] - mx;
    sxx += dx * dx;
    sxy += dx * (lst.values[i] - my);
  }
  // Summation roundoff leaves a constant covariate with variance ~ (eps * |mean|)^2.
  const double floor = 1e-12 * std::max(1.0, std::abs(mx));
  if (!(sxx > static_cast<double>(n) * floor * floor)) throw NumericError("fit_regression: NDVI has zero variance");
  RegressionFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.residuals = Field(lst.width, lst.height, 0.0, lst.pixel_size_m);
  for (std::size_t i = 0; i < lst.size(); ++i)
    fit.residuals.values[i] = (is_nodata(lst.values[i]) || is_nodata(ndvi.values[i]))
                                  ? std::numeric_limits<double>::quiet_NaN()
                                  : lst.values[i] - (fit.slope * ndvi.values[i] + fit.intercept);
  return fit;
}

/// Exponential model gamma(h) = nugget + (sill - nugget) * (1 - exp(-3h / range)).
struct Variogram {
  double nugget = 0.0;
  double sill = 1.0;
  double range_m = 1.0;
  bool pure_nugget = false;

  double gamma(double h_m) const {
    if (h_m <= 0.0) return 0.0;
    return nugget + (sill - nugget) * (1.0 - std::exp(-3.0 * h_m / range_m));
  }
  // Point covariance; the nugget only contributes at zero separation.
  double covariance(double h_m) const {
    if (h_m <= 0.0) return sill;
    return (sill - nugget) * std::exp(-3.0 * h_m / range_m);
  }
};

struct EmpiricalVariogram {
  std::vector<double> lag_px;  // mean separation of the pairs in each bin
  std::vector<double> gamma;
  std::vector<double> pairs;
};

/// Matheron semivariance in bins one pixel wide centred on 1..n_lags pixels.
inline EmpiricalVariogram empirical_variogram(const Field& r, int n_lags) {
  if (n_lags < 1) throw InvalidArgument("empirical_variogram: n_lags must be >= 1");
  const std::size_t nb = static_cast<std::size_t>(n_lags);
  std::vector<double> sum_g(nb, 0.0), sum_h(nb, 0.0), cnt(nb, 0.0);
  const long W = static_cast<long>(r.width), H = static_cast<long>(r.height), L = n_lags;
  for (long dy = 0; dy <= L; ++dy)
    for (long dx = -L; dx <= L; ++dx) {
      if (dy == 0 && dx <= 0) continue;
      const double d = std::hypot(static_cast<double>(dx), static_cast<double>(dy));
      const long bin = std::lround(d);
      if (bin < 1 || bin > L) continue;
      const auto b = static_cast<std::size_t>(bin - 1);
      for (long y = 0; y + dy < H; ++y)
        for (long x = std::max(0L, -dx); x < W && x + dx < W; ++x) {
          const double a = r.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
          const double c = r.at(static_cast<std::size_t>(y + dy), static_cast<std::size_t>(x + dx));
          if (is_nodata(a) || is_nodata(c)) continue;
          sum_g[b] += 0.5 * (a - c) * (a - c);
          sum_h[b] += d;
          cnt[b] += 1.0;
        }
    }
  EmpiricalVariogram ev;
  for (std::size_t b = 0; b < nb; ++b) {
    if (cnt[b] == 0.0) continue;
    ev.lag_px.push_back(sum_h[b] / cnt[b]);
    ev.gamma.push_back(sum_g[b] / cnt[b]);
    ev.pairs.push_back(cnt[b]);
  }
  return ev;
}

namespace detail {

struct VariogramFit {
  double nugget = 0.0, psill = 0.0, sse = std::numeric_limits<double>::infinity();
};

// Pair-count weighted least squares for nugget and partial sill at a fixed range.
inline VariogramFit fit_at_range(const EmpiricalVariogram& ev, double range_px) {
  double sw = 0, sf = 0, sff = 0, sg = 0, sfg = 0;
  std::vector<double> f(ev.gamma.size());
  for (std::size_t k = 0; k < f.size(); ++k) {
    const double w = ev.pairs[k];
    f[k] = 1.0 - std::exp(-3.0 * ev.lag_px[k] / range_px);
    sw += w;
    sf += w * f[k];
    sff += w * f[k] * f[k];
    sg += w * ev.gamma[k];
    sfg += w * f[k] * ev.gamma[k];
  }
  auto sse = [&](double n, double p) {
    double e = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      const double d = ev.gamma[k] - n - p * f[k];
      e += ev.pairs[k] * d * d;
    }
    return e;
  };
  std::vector<VariogramFit> candidates;
  const double det = sw * sff - sf * sf;
  if (det > 1e-12 * sw * sff) {
    const double n = (sff * sg - sf * sfg) / det;
    const double p = (sw * sfg - sf * sg) / det;
    if (n >= 0.0 && p >= 0.0) candidates.push_back({n, p, sse(n, p)});
  }
  if (sff > 0.0) {
    const double p = std::max(0.0, sfg / sff);
    candidates.push_back({0.0, p, sse(0.0, p)});
  }
  const double n = std::max(0.0, sg / sw);
  candidates.push_back({n, 0.0, sse(n, 0.0)});
  return *std::min_element(candidates.begin(), candidates.end(),
                           [](const VariogramFit& a, const VariogramFit& b) { return a.sse < b.sse; });
}

}  // namespace detail

/// Exponential variogram fitted to the Matheron estimate by weighted least
/// squares (weights = pair counts). The range is searched on a log grid and
/// refined by golden section. A range at or below the first lag, or no
/// structured component, collapses to a pure nugget model.
inline Variogram fit_variogram(const Field& residuals, int n_lags = 10) {
  std::size_t valid = 0;
  for (double v : residuals.values) valid += is_nodata(v) ? 0 : 1;
  if (valid < 30) throw InvalidArgument("fit_variogram: needs at least 30 valid pixels");
  const EmpiricalVariogram ev = empirical_variogram(residuals, n_lags);
  if (ev.gamma.empty()) throw NumericError("fit_variogram: no pixel pairs within the lag range");

  const double h_min = ev.lag_px.front(), h_max = ev.lag_px.back();
  const double lo = 0.1 * h_min, hi = 20.0 * h_max;
  constexpr int grid = 64;
  double best_a = lo;
  detail::VariogramFit best;
  std::vector<double> as(grid);
  for (int i = 0; i < grid; ++i) {
    as[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, static_cast<double>(i) / (grid - 1));
    const auto f = detail::fit_at_range(ev, as[static_cast<std::size_t>(i)]);
    if (f.sse < best.sse) {
      best = f;
      best_a = as[static_cast<std::size_t>(i)];
    }
  }
  // Golden-section refinement in log(range) between the neighbouring grid nodes.
  const auto it = std::find(as.begin(), as.end(), best_a);
  const auto idx = static_cast<std::size_t>(it - as.begin());
  double a = std::log(as[idx == 0 ? 0 : idx - 1]), b = std::log(as[std::min(idx + 1, as.size() - 1)]);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = detail::fit_at_range(ev, std::exp(c)).sse, fd = detail::fit_at_range(ev, std::exp(d)).sse;
  for (int iter = 0; iter < 60; ++iter) {
    if (fc < fd) {
      b = d; d = c; fd = fc;
      c = b - phi * (b - a);
      fc = detail::fit_at_range(ev, std::exp(c)).sse;
    } else {
      a = c; c = d; fc = fd;
      d = a + phi * (b - a);
      fd = detail::fit_at_range(ev, std::exp(d)).sse;
    }
  }
  const double refined = std::exp(0.5 * (a + b));
  const auto rf = detail::fit_at_range(ev, refined);
  if (rf.sse <= best.sse) {
    best = rf;
    best_a = refined;
  }

  constexpr double kTinySill = 1e-12;
  Variogram v;
  const double px = residuals.pixel_size_m;
  if (best.psill <= 0.0 || best_a <= h_min) {
    double sw = 0.0, sg = 0.0;
    for (std::size_t k = 0; k < ev.gamma.size(); ++k) {
      sw += ev.pairs[k];
      sg += ev.pairs[k] * ev.gamma[k];
    }
    v.nugget = sg / sw;
    v.sill = std::max(v.nugget, kTinySill);
    v.range_m = h_min * px;
    v.pure_nugget = true;
    return v;
  }
  v.nugget = best.nugget;
  v.sill = std::max(best.nugget + best.psill, kTinySill);
  v.range_m = best_a * px;
  return v;
}

struct AtprkModel {
  double slope = 0.0;
  double intercept = 0.0;
  Variogram variogram;
  int ratio = 4;
  int neighborhood = 5;  // coarse window edge
  int quadrature = 4;    // points per fine-pixel edge

  void validate() const {
    if (ratio < 1) throw InvalidArgument("AtprkModel: ratio must be >= 1");
    if (neighborhood < 1) throw InvalidArgument("AtprkModel: neighborhood must be >= 1");
    if (quadrature < 1) throw InvalidArgument("AtprkModel: quadrature must be >= 1");
    if (!(variogram.nugget >= 0.0) || !(variogram.sill >= variogram.nugget) || !(variogram.range_m > 0.0))
      throw InvalidArgument("AtprkModel: variogram must satisfy sill >= nugget >= 0 and range > 0");
  }
};

/// Precomputed area-to-point kriging weights. Because the coarse lattice is
/// regular and covariances are stationary, the weights depend only on where
/// the target coarse cell sits inside its (edge-clamped) window and on the
/// sub-pixel position, so they are solved once per configuration.
class AtpkWeights {
 public:
  AtpkWeights(const AtprkModel& model, std::size_t coarse_w, std::size_t coarse_h, double coarse_pixel_m)
      : ratio_(static_cast<std::size_t>(model.ratio)),
        win_w_(std::min<std::size_t>(static_cast<std::size_t>(model.neighborhood), coarse_w)),
        win_h_(std::min<std::size_t>(static_cast<std::size_t>(model.neighborhood), coarse_h)),
        half_(static_cast<std::size_t>(model.neighborhood) / 2),
        coarse_w_(coarse_w),
        coarse_h_(coarse_h) {
    model.validate();
    if (coarse_w == 0 || coarse_h == 0) throw InvalidArgument("AtpkWeights: empty coarse grid");
    build(model, coarse_pixel_m);
  }

  std::size_t window_width() const { return win_w_; }
  std::size_t window_height() const { return win_h_; }
  bool jittered() const { return jittered_; }
  double max_weight_sum_error() const { return max_sum_error_; }

  // Top-left coarse cell of the window used for coarse cell (r, c).
  std::pair<std::size_t, std::size_t> window_origin(std::size_t r, std::size_t c) const {
    return {origin(r, win_h_, coarse_h_), origin(c, win_w_, coarse_w_)};
  }

  /// Weights (row-major over the window) for fine pixel (sub_r, sub_c) of coarse cell (r, c).
  const std::vector<double>& weights(std::size_t r, std::size_t c, std::size_t sub_r, std::size_t sub_c) const {
    const auto [r0, c0] = window_origin(r, c);
    const std::size_t tr = r - r0, tc = c - c0;
    return table_[((tr * win_w_ + tc) * ratio_ + sub_r) * ratio_ + sub_c];
  }

 private:
  std::size_t origin(std::size_t i, std::size_t win, std::size_t extent) const {
    const std::size_t start = i >= half_ ? i - half_ : 0;
    return std::min(start, extent - win);
  }

  void build(const AtprkModel& model, double coarse_pixel_m) {
    const Variogram& vg = model.variogram;
    const long q = model.quadrature, R = static_cast<long>(ratio_), Q = q * R;  // points per coarse edge
    // Point separations are integer multiples of 1/Q coarse pixels; zero is exact.
    auto cov = [&](long ex, long ey) {
      if (ex == 0 && ey == 0) return vg.sill;
      const double h = std::hypot(static_cast<double>(ex), static_cast<double>(ey)) / static_cast<double>(Q);
      return vg.covariance(h * coarse_pixel_m);
    };
    // Histogram of point offsets (in 1/Q units) between two point rows.
    auto offsets = [](long base, long na, long nb, long shift) {
      std::vector<std::pair<long, double>> h;
      for (long a = 0; a < na; ++a)
        for (long b = 0; b < nb; ++b) {
          const long e = base + a - b - shift;
          auto it = std::find_if(h.begin(), h.end(), [e](const auto& p) { return p.first == e; });
          if (it == h.end()) h.emplace_back(e, 1.0);
          else it->second += 1.0;
        }
      return h;
    };
    auto avg = [&](const std::vector<std::pair<long, double>>& hx, const std::vector<std::pair<long, double>>& hy,
                   double norm) {
      double acc = 0.0;
      for (const auto& [ex, wx] : hx)
        for (const auto& [ey, wy] : hy) acc += wx * wy * cov(ex, ey);
      return acc / norm;
    };

    const long span_w = static_cast<long>(win_w_), span_h = static_cast<long>(win_h_);
    // Block-to-block covariance by coarse offset.
    auto bb_index = [&](long dy, long dx) {
      return static_cast<std::size_t>((dy + span_h - 1) * (2 * span_w - 1) + (dx + span_w - 1));
    };
    std::vector<double> bb(static_cast<std::size_t>((2 * span_h - 1) * (2 * span_w - 1)));
    const double bb_norm = static_cast<double>(Q * Q) * static_cast<double>(Q * Q);
    for (long dy = -(span_h - 1); dy < span_h; ++dy)
      for (long dx = -(span_w - 1); dx < span_w; ++dx)
        bb[bb_index(dy, dx)] = avg(offsets(dx * Q, Q, Q, 0), offsets(dy * Q, Q, Q, 0), bb_norm);

    const std::size_t n = win_w_ * win_h_;
    double scale = std::max(vg.sill, 0.0);
    const bool degenerate = !(scale > 1e-300);
    if (degenerate) scale = 1.0;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + 1), static_cast<Eigen::Index>(n + 1));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const long dy = static_cast<long>(i / win_w_) - static_cast<long>(j / win_w_);
        const long dx = static_cast<long>(i % win_w_) - static_cast<long>(j % win_w_);
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = bb[bb_index(dy, dx)] / scale;
      }
    for (std::size_t i = 0; i < n; ++i) {
      A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = 1.0;
      A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(i)) = 1.0;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (degenerate || !lu.isInvertible()) {
      for (std::size_t i = 0; i < n; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += 1e-8;
      lu.compute(A);
      jittered_ = true;
    }

    const double bp_norm = static_cast<double>(Q * Q) * static_cast<double>(q * q);
    table_.assign(n * ratio_ * ratio_, {});
    for (std::size_t tr = 0; tr < win_h_; ++tr)
      for (std::size_t tc = 0; tc < win_w_; ++tc)
        for (std::size_t sr = 0; sr < ratio_; ++sr)
          for (std::size_t sc = 0; sc < ratio_; ++sc) {
            Eigen::VectorXd rhs(static_cast<Eigen::Index>(n + 1));
            for (std::size_t j = 0; j < n; ++j) {
              const long dy = static_cast<long>(j / win_w_) - static_cast<long>(tr);
              const long dx = static_cast<long>(j % win_w_) - static_cast<long>(tc);
              rhs(static_cast<Eigen::Index>(j)) =
                  avg(offsets(dx * Q, Q, q, static_cast<long>(sc) * q), offsets(dy * Q, Q, q, static_cast<long>(sr) * q),
                      bp_norm) / scale;
            }
            rhs(static_cast<Eigen::Index>(n)) = 1.0;
            const Eigen::VectorXd sol = lu.solve(rhs);
            std::vector<double> w(n);
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              w[j] = sol(static_cast<Eigen::Index>(j));
              sum += w[j];
            }
            max_sum_error_ = std::max(max_sum_error_, std::abs(sum - 1.0));
            table_[((tr * win_w_ + tc) * ratio_ + sr) * ratio_ + sc] = std::move(w);
          }
  }

  std::size_t ratio_, win_w_, win_h_, half_, coarse_w_, coarse_h_;
  bool jittered_ = false;
  double max_sum_error_ = 0.0;
  std::vector<std::vector<double>> table_;
};

struct AtpkResult {
  Field fine;
  bool jittered = false;
  double max_weight_sum_error = 0.0;
};

/// Area-to-point kriging of coarse residuals onto the fine grid.
inline AtpkResult atpk_residuals(const Field& residual_coarse, const AtprkModel& model) {
  if (residual_coarse.empty()) throw InvalidArgument("atpk_residuals: empty residual grid");
  for (double v : residual_coarse.values)
    if (!std::isfinite(v)) throw InvalidArgument("atpk_residuals: residual grid must be complete");
  const AtpkWeights kw(model, residual_coarse.width, residual_coarse.height, residual_coarse.pixel_size_m);
  const std::size_t R = static_cast<std::size_t>(model.ratio);
  AtpkResult out;
  out.fine = Field(residual_coarse.width * R, residual_coarse.height * R, 0.0, residual_coarse.pixel_size_m / static_cast<double>(R));
  for (std::size_t r = 0; r < residual_coarse.height; ++r)
    for (std::size_t c = 0; c < residual_coarse.width; ++c) {
      const auto [r0, c0] = kw.window_origin(r, c);
      for (std::size_t sr = 0; sr < R; ++sr)
        for (std::size_t sc = 0; sc < R; ++sc) {
          const auto& w = kw.weights(r, c, sr, sc);
          double acc = 0.0;
          for (std::size_t i = 0; i < kw.window_height(); ++i)
            for (std::size_t j = 0; j < kw.window_width(); ++j)
              acc += w[i * kw.window_width() + j] * residual_coarse.at(r0 + i, c0 + j);
          out.fine.at(r * R + sr, c * R + sc) = acc;
        }
    }
  out.jittered = kw.jittered();
  out.max_weight_sum_error = kw.max_weight_sum_error();
  return out;
}

struct AtprkOptions {
  int neighborhood = 5;
  int n_lags = 10;
  int quadrature = 4;
};

struct AtprkResult {
  Field lst;
  AtprkModel model;
  bool regression_degenerate = false;
  bool jittered = false;
  double max_weight_sum_error = 0.0;
};

/// Regression on the coarse grid against area-aggregated NDVI, applied to the
/// fine NDVI, plus ATPK-downscaled regression residuals.
inline AtprkResult atprk_sharpen(const Field& lst_coarse, const Field& ndvi_fine, int ratio,
                                 const AtprkOptions& opt = {}) {
  if (ratio < 1) throw InvalidArgument("atprk_sharpen: ratio must be >= 1");
  const auto R = static_cast<std::size_t>(ratio);
  if (ndvi_fine.width != lst_coarse.width * R || ndvi_fine.height != lst_coarse.height * R)
    throw ShapeError("atprk_sharpen: NDVI grid must be ratio x the coarse LST grid");
  for (double v : lst_coarse.values)
    if (!std::isfinite(v)) throw InvalidArgument("atprk_sharpen: coarse LST must be cloud-free");
  for (double v : ndvi_fine.values)
    if (!std::isfinite(v)) throw InvalidArgument("atprk_sharpen: fine NDVI must be complete");

  Field ndvi_coarse = area_weighted_downsample(ndvi_fine, ratio);
  ndvi_coarse.pixel_size_m = lst_coarse.pixel_size_m;
  AtprkResult out;
  AtprkModel& m = out.model;
  m.ratio = ratio;
  m.neighborhood = opt.neighborhood;
  m.quadrature = opt.quadrature;
  Field residuals;
  try {
    RegressionFit fit = fit_regression(lst_coarse, ndvi_coarse);
    m.slope = fit.slope;
    m.intercept = fit.intercept;
    residuals = std::move(fit.residuals);
  } catch (const NumericError&) {
    double mean = 0.0;
    for (double v : lst_coarse.values) mean += v;
    mean /= static_cast<double>(lst_coarse.size());
    m.slope = 0.0;
    m.intercept = mean;
    residuals = lst_coarse;
    for (double& v : residuals.values) v -= mean;
    out.regression_degenerate = true;
  }
  const int lags = std::max(1, std::min<int>(opt.n_lags, static_cast<int>(std::max(lst_coarse.width, lst_coarse.height)) - 1));
  m.variogram = fit_variogram(residuals, lags);
  const AtpkResult kr = atpk_residuals(residuals, m);
  out.lst = Field(ndvi_fine.width, ndvi_fine.height, 0.0, lst_coarse.pixel_size_m / static_cast<double>(ratio));
  for (std::size_t i = 0; i < out.lst.size(); ++i)
    out.lst.values[i] = m.slope * ndvi_fine.values[i] + m.intercept + kr.fine.values[i];
  out.jittered = kr.jittered;
  out.max_weight_sum_error = kr.max_weight_sum_error;
  return out;
}

inline AtprkResult atprk_sharpen(const RasterGrid& lst_coarse, const RasterGrid& ndvi_fine, int ratio,
                                 const AtprkOptions& opt = {}) {
  validate_lst(lst_coarse);
  validate_grid(ndvi_fine);
  return atprk_sharpen(to_field(lst_coarse), to_field(ndvi_fine), ratio, opt);
}

}  // namespace lstsr
