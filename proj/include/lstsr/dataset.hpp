#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lstsr/error.hpp"
#include "lstsr/raster.hpp"
#include "lstsr/resample.hpp"

namespace lstsr {

enum class Split { train, test, validation };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::validation: return "validation";
  }
  return "?";
}

/// HR target with its ILR input; ndvi is the co-registered fine covariate
/// when the source scene had one (used by the ATPRK baseline only).
struct PatchPair {
  Patch hr;
  Patch ilr;
  std::optional<Patch> ndvi;
};

struct PatchDataset {
  std::vector<PatchPair> pairs;
  double norm_max = 1.0;
  Split split = Split::train;
  int ratio = 4;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  bool has_ndvi() const { return !pairs.empty() && pairs.front().ndvi.has_value(); }
};

struct SplitFractions {
  double train = 0.75;
  double test = 0.25;
  double validation = 0.0;
};

struct DatasetSplits {
  PatchDataset train;
  PatchDataset test;
  PatchDataset validation;
};

inline double max_value(const std::vector<PatchPair>& pairs) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& p : pairs)
    for (double v : p.hr.pixels.values) m = std::max(m, v);
  return m;
}

/// Pairs every HR patch with make_ilr(hr, ratio), shuffles with `seed`, then
/// cuts train/test/validation by the fractions. norm_max is the train maximum
/// and is shared by all splits.
inline DatasetSplits build_dataset(const std::vector<Patch>& hr_patches, int ratio, std::uint64_t seed,
                                   SplitFractions split = {},
                                   const std::vector<Patch>* ndvi_patches = nullptr) {
  if (hr_patches.empty()) throw InvalidArgument("build_dataset: empty patch list");
  if (ratio < 2) throw InvalidArgument("build_dataset: ratio must be >= 2");
  if (split.train < 0 || split.test < 0 || split.validation < 0 ||
      std::abs(split.train + split.test + split.validation - 1.0) > 1e-9)
    throw InvalidArgument("build_dataset: split fractions must be non-negative and sum to 1");
  if (ndvi_patches && ndvi_patches->size() != hr_patches.size())
    throw InvalidArgument("build_dataset: NDVI patch count differs from LST patch count");
  for (std::size_t i = 0; i < hr_patches.size(); ++i) {
    const Field& f = hr_patches[i].pixels;
    if (f.width != f.height) throw ShapeError("build_dataset: patches must be square");
    if (f.width % static_cast<std::size_t>(ratio) != 0)
      throw InvalidArgument("build_dataset: ratio " + std::to_string(ratio) + " does not divide patch size " +
                            std::to_string(f.width));
    if (ndvi_patches && !(*ndvi_patches)[i].pixels.same_shape(f))
      throw ShapeError("build_dataset: NDVI patch shape mismatch");
  }

  std::vector<std::size_t> order(hr_patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }

  const std::size_t total = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(split.train * static_cast<double>(total)));
  const auto n_test = std::min(total - n_train,
                               static_cast<std::size_t>(std::llround(split.test * static_cast<double>(total))));
  DatasetSplits out;
  out.train.split = Split::train;
  out.test.split = Split::test;
  out.validation.split = Split::validation;
  for (std::size_t k = 0; k < total; ++k) {
    const std::size_t i = order[k];
    PatchPair pp;
    pp.hr = hr_patches[i];
    pp.ilr = Patch{make_ilr(pp.hr.pixels, ratio), pp.hr.row, pp.hr.col};
    if (ndvi_patches) pp.ndvi = (*ndvi_patches)[i];
    PatchDataset& dst = k < n_train ? out.train : (k < n_train + n_test ? out.test : out.validation);
    dst.pairs.push_back(std::move(pp));
  }
  if (out.train.empty()) throw InvalidArgument("build_dataset: train split is empty");
  const double norm_max = max_value(out.train.pairs);
  for (PatchDataset* d : {&out.train, &out.test, &out.validation}) {
    d->norm_max = norm_max;
    d->ratio = ratio;
  }
  return out;
}

namespace detail {

// Patches of one split stacked top to bottom into a single size x (size*n) grid.
inline RasterGrid stack_patches(const std::vector<const Field*>& fields) {
  const std::size_t s = fields.front()->width;
  RasterGrid g;
  g.width = s;
  g.height = s * fields.size();
  g.pixel_size_m = fields.front()->pixel_size_m;
  g.values.reserve(g.width * g.height);
  for (const Field* f : fields)
    for (double v : f->values) g.values.push_back(static_cast<float>(v));
  return g;
}

inline std::vector<Field> unstack_patches(const RasterGrid& g, std::size_t count) {
  if (count == 0 || g.height != g.width * count)
    throw FormatError("dataset grid is not a stack of " + std::to_string(count) + " square patches");
  std::vector<Field> out;
  const std::size_t s = g.width;
  for (std::size_t k = 0; k < count; ++k) {
    Field f(s, s, 0.0, g.pixel_size_m);
    for (std::size_t i = 0; i < s * s; ++i) f.values[i] = static_cast<double>(g.values[k * s * s + i]);
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace detail

/// Directory layout: manifest.json plus <split>_hr.lstgrid (and
/// <split>_ndvi.lstgrid) per non-empty split. ILR inputs are rebuilt on load.
inline void save_dataset(const DatasetSplits& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "lstsr-dataset";
  manifest["version"] = 1;
  manifest["ratio"] = ds.train.ratio;
  manifest["norm_max"] = ds.train.norm_max;
  nlohmann::json splits = nlohmann::json::object();
  for (const PatchDataset* d : {&ds.train, &ds.test, &ds.validation}) {
    const std::string name = to_string(d->split);
    nlohmann::json entry = {{"count", d->size()}, {"has_ndvi", d->has_ndvi()}};
    nlohmann::json origins = nlohmann::json::array();
    for (const auto& p : d->pairs) origins.push_back({p.hr.row, p.hr.col});
    entry["origins"] = origins;
    if (!d->empty()) {
      std::vector<const Field*> hr, ndvi;
      for (const auto& p : d->pairs) {
        hr.push_back(&p.hr.pixels);
        if (d->has_ndvi()) {
          if (!p.ndvi) throw InvalidArgument("save_dataset: NDVI missing for some patches");
          ndvi.push_back(&p.ndvi->pixels);
        }
      }
      store_grid(detail::stack_patches(hr), dir / (name + "_hr.lstgrid"));
      if (d->has_ndvi()) store_grid(detail::stack_patches(ndvi), dir / (name + "_ndvi.lstgrid"));
    }
    splits[name] = entry;
  }
  manifest["splits"] = splits;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
  if (!os) throw IoError("failed writing dataset manifest");
}

inline DatasetSplits load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open dataset manifest in " + dir.string());
  DatasetSplits out;
  try {
    const auto manifest = nlohmann::json::parse(is);
    if (manifest.value("format", std::string()) != "lstsr-dataset")
      throw FormatError("not an lstsr dataset manifest");
    const int ratio = manifest.at("ratio").get<int>();
    const double norm_max = manifest.at("norm_max").get<double>();
    if (ratio < 2 || !(norm_max > 0.0)) throw FormatError("dataset manifest has invalid ratio or norm_max");
    for (PatchDataset* d : {&out.train, &out.test, &out.validation}) {
      d->split = d == &out.train ? Split::train : (d == &out.test ? Split::test : Split::validation);
      d->ratio = ratio;
      d->norm_max = norm_max;
      const std::string name = to_string(d->split);
      if (!manifest.at("splits").contains(name)) continue;
      const auto& entry = manifest.at("splits").at(name);
      const auto count = entry.at("count").get<std::size_t>();
      if (count == 0) continue;
      const auto hr = detail::unstack_patches(load_grid(dir / (name + "_hr.lstgrid")), count);
      std::vector<Field> ndvi;
      if (entry.value("has_ndvi", false))
        ndvi = detail::unstack_patches(load_grid(dir / (name + "_ndvi.lstgrid")), count);
      const auto& origins = entry.at("origins");
      if (origins.size() != count) throw FormatError("dataset manifest origin count mismatch");
      for (std::size_t k = 0; k < count; ++k) {
        PatchPair pp;
        const auto row = origins[k].at(0).get<std::size_t>(), col = origins[k].at(1).get<std::size_t>();
        pp.hr = Patch{hr[k], row, col};
        pp.ilr = Patch{make_ilr(hr[k], ratio), row, col};
        if (!ndvi.empty()) pp.ndvi = Patch{ndvi[k], row, col};
        d->pairs.push_back(std::move(pp));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt dataset manifest: ") + e.what());
  }
  if (out.train.empty() && out.test.empty() && out.validation.empty())
    throw FormatError("dataset in " + dir.string() + " holds no patches");
  return out;
}

}  // namespace lstsr
