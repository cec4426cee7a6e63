#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <random>
#include <vector>

#include "lstsr/field.hpp"
#include "lstsr/tensor.hpp"

namespace lstsr::testing {

inline ad::Tensor<double> random_tensor(ad::Shape s, std::uint64_t seed, bool requires_grad = true,
                                        double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(s.numel());
  for (auto& x : v) x = d(rng);
  return ad::Tensor<double>::from(s, std::move(v), requires_grad);
}

inline Field random_field(std::size_t w, std::size_t h, std::uint64_t seed, double lo = 260.0,
                          double hi = 320.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Field f(w, h);
  for (auto& x : f.values) x = d(rng);
  return f;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("lstsr_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace lstsr::testing
