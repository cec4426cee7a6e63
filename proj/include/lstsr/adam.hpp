#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lstsr/error.hpp"
#include "lstsr/tensor.hpp"

namespace lstsr::ad {

/// Bias-corrected Adam moments, one pair of buffers per parameter.
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One in-place Adam update over `params`. Parameters without a gradient are
/// treated as having a zero gradient.
template <std::floating_point T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  // Locals: the moment stores could otherwise alias `state` and block vectorisation.
  const double b1 = state.beta1, b2 = state.beta2, lr = state.lr, eps = state.eps;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto g = params[i].grad();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    if (state.m[i].size() != w.size() || (!g.empty() && g.size() != w.size()))
      throw ShapeError("adam_step: moment/gradient shape mismatch for parameter " + std::to_string(i));
    const bool has_grad = !g.empty();
    const std::size_t n = w.size();
    T* wp = w.data();
    const T* gp = has_grad ? g.data() : nullptr;
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = has_grad ? static_cast<double>(gp[j]) : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      wp[j] = static_cast<T>(wp[j] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

}  // namespace lstsr::ad
