#pragma once

#include <cstddef>
#include <vector>

#include "lstsr/error.hpp"

namespace lstsr {

/// Dense row-major 2D field in double precision. This is the working
/// representation for every numerical routine; RasterGrid is the on-disk one.
struct Field {
  std::size_t width = 0;
  std::size_t height = 0;
  double pixel_size_m = 1.0;
  std::vector<double> values;

  Field() = default;
  Field(std::size_t w, std::size_t h, double fill = 0.0, double pixel_size = 1.0)
      : width(w), height(h), pixel_size_m(pixel_size), values(w * h, fill) {}
  Field(std::size_t w, std::size_t h, std::vector<double> v, double pixel_size = 1.0)
      : width(w), height(h), pixel_size_m(pixel_size), values(std::move(v)) {
    if (values.size() != width * height)
      throw ShapeError("field payload does not match width*height");
  }

  std::size_t size() const { return values.size(); }
  bool empty() const { return values.empty(); }

  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  bool same_shape(const Field& other) const {
    return width == other.width && height == other.height;
  }

  friend bool operator==(const Field&, const Field&) = default;
};

inline void require_same_shape(const Field& a, const Field& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace lstsr
