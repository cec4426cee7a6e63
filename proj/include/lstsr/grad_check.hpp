#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lstsr/tensor.hpp"

namespace lstsr::ad {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every element; otherwise a seeded sample of this many per tensor.
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
  // Denominator floor so near-zero gradient pairs are compared absolutely.
  double floor = 1e-6;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double e = 0.0;
    for (const auto& x : entries) e = std::max(e, x.max_rel_error);
    return e;
  }
  std::size_t checked() const {
    std::size_t n = 0;
    for (const auto& x : entries) n += x.checked;
    return n;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients of `loss_fn` (which must rebuild its graph on
/// every call) against central differences.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<NamedTensor> tensors,
                                  const GradCheckOptions& opt = {}) {
  for (auto& t : tensors) t.tensor.zero_grad();
  backward(loss_fn());

  std::mt19937_64 rng(opt.seed);
  GradCheckReport report;
  for (auto& t : tensors) {
    const std::vector<double> analytic =
        t.tensor.has_grad() ? std::vector<double>(t.tensor.grad().begin(), t.tensor.grad().end())
                            : std::vector<double>(t.tensor.numel(), 0.0);
    std::vector<std::size_t> idx(t.tensor.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_samples != 0 && idx.size() > opt.max_samples) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_samples);
    }
    GradCheckEntry entry{t.name};
    auto values = t.tensor.data();
    for (std::size_t i : idx) {
      const double saved = values[i];
      values[i] = saved + opt.step;
      const double up = loss_fn().item();
      values[i] = saved - opt.step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric, opt.floor));
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[i] - numeric));
      ++entry.checked;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace lstsr::ad
