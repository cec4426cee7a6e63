#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lstsr/adam.hpp"
#include "lstsr/atprk.hpp"
#include "lstsr/checkpoint.hpp"
#include "lstsr/dataset.hpp"
#include "lstsr/error.hpp"
#include "lstsr/metrics.hpp"
#include "lstsr/mrunet.hpp"
#include "lstsr/raster.hpp"
#include "lstsr/resample.hpp"

namespace lstsr {

struct TrainConfig {
  int epochs = 300;
  int batch_size = 32;
  double lr = 1e-4;
  int lr_drop_epoch = 50;
  double lr_drop_factor = 100.0;
  std::uint64_t seed = 0;
  int ratio = 4;
  int checkpoint_every = 0;  // epochs between snapshots; 0 disables
  std::string checkpoint_dir;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  MruNetConfig model;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (lr_drop_epoch < 0 || lr_drop_epoch > epochs) throw InvalidArgument("lr_drop_epoch must lie in [0, epochs]");
    if (!(lr > 0.0) || !(lr_drop_factor > 0.0) || !(adam_eps > 0.0))
      throw InvalidArgument("learning rate, drop factor and eps must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw InvalidArgument("Adam betas must lie in [0, 1)");
    if (ratio < 2) throw InvalidArgument("ratio must be >= 2");
    if (checkpoint_every < 0) throw InvalidArgument("checkpoint_every must be >= 0");
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_drop_epoch", c.lr_drop_epoch},
                     {"lr_drop_factor", c.lr_drop_factor},
                     {"seed", c.seed},
                     {"ratio", c.ratio},
                     {"checkpoint_every", c.checkpoint_every},
                     {"checkpoint_dir", c.checkpoint_dir},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"epochs", "batch_size", "lr", "lr_drop_epoch", "lr_drop_factor",
                                "seed", "ratio", "checkpoint_every", "checkpoint_dir", "adam_beta1",
                                "adam_beta2", "adam_eps", "model"};
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw InvalidArgument("unknown training config key '" + key + "'");
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.lr_drop_epoch = j.value("lr_drop_epoch", d.lr_drop_epoch);
  c.lr_drop_factor = j.value("lr_drop_factor", d.lr_drop_factor);
  c.seed = j.value("seed", d.seed);
  c.ratio = j.value("ratio", d.ratio);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.model = j.contains("model") ? j.at("model").get<MruNetConfig>() : d.model;
}

/// Piecewise-constant schedule over 0-based epochs.
inline double lr_for_epoch(const TrainConfig& c, int epoch) {
  return epoch < c.lr_drop_epoch ? c.lr : c.lr / c.lr_drop_factor;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean mini-batch MSE, normalised units
  std::optional<MetricReport> test;  // Kelvin; absent without a test split
  double seconds = 0.0;
};

struct TrainResult {
  MruNet<float> best;   // lowest test RMSE (final weights when there is no test split)
  MruNet<float> last;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

/// Worker count for evaluation fan-out: LSTSR_THREADS, else the hardware.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("LSTSR_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

inline ad::Tensor<float> stack_normalised(const std::vector<const Field*>& fields, double norm_max) {
  const Field& f0 = *fields.front();
  ad::Shape s{fields.size(), 1, f0.height, f0.width};
  std::vector<float> v;
  v.reserve(s.numel());
  for (const Field* f : fields) {
    if (!f->same_shape(f0)) throw ShapeError("batch members differ in shape");
    for (double x : f->values) v.push_back(static_cast<float>(x / norm_max));
  }
  return ad::Tensor<float>::from(s, std::move(v));
}

// Runs fn(i) for i in [0, n) over `threads` workers in contiguous chunks.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t * n / threads; i < (t + 1) * n / threads; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Eval-mode forward over ILR fields in Kelvin; returns Kelvin predictions in
/// input order. Batches of `batch` patches are spread over worker threads.
inline std::vector<Field> predict(MruNet<float>& net, const std::vector<const Field*>& ilr, std::size_t batch = 8,
                                  std::size_t threads = worker_threads()) {
  std::vector<Field> out(ilr.size());
  const std::size_t nb = (ilr.size() + batch - 1) / batch;
  detail::parallel_for(nb, threads, [&](std::size_t b) {
    ad::NoGradGuard guard;
    const std::size_t lo = b * batch, hi = std::min(ilr.size(), lo + batch);
    std::vector<const Field*> chunk(ilr.begin() + static_cast<long>(lo), ilr.begin() + static_cast<long>(hi));
    const auto y = net.forward(detail::stack_normalised(chunk, net.norm_max), ad::Mode::eval);
    const auto data = y.data();
    for (std::size_t k = lo; k < hi; ++k) {
      const Field& f = *ilr[k];
      Field o(f.width, f.height, 0.0, f.pixel_size_m);
      const std::size_t off = (k - lo) * f.size();
      for (std::size_t i = 0; i < f.size(); ++i) o.values[i] = static_cast<double>(data[off + i]) * net.norm_max;
      out[k] = std::move(o);
    }
  });
  return out;
}

inline MetricReport evaluate_model(MruNet<float>& net, const PatchDataset& ds) {
  if (ds.empty()) throw InvalidArgument("evaluate_model: empty dataset");
  std::vector<const Field*> ilr;
  for (const auto& p : ds.pairs) ilr.push_back(&p.ilr.pixels);
  const auto pred = predict(net, ilr);
  std::vector<ImageMetrics> images;
  for (std::size_t i = 0; i < pred.size(); ++i)
    images.push_back(evaluate_pair(ds.pairs[i].hr.pixels, pred[i], std::to_string(i)));
  return aggregate(std::move(images));
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on pixel MSE in units of train.norm_max. The
/// epoch order is a seeded permutation; runs are bit-reproducible.
inline TrainResult train(const PatchDataset& train_set, const PatchDataset* test_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw InvalidArgument("train: empty training set");
  if (!(train_set.norm_max > 0.0)) throw InvalidArgument("train: norm_max must be positive");
  const std::size_t side = train_set.pairs.front().hr.pixels.width;
  if (side % cfg.model.spatial_multiple() != 0)
    throw InvalidArgument("train: patch size " + std::to_string(side) + " is not a multiple of 2^levels");

  MruNet<float> net = MruNet<float>::build(cfg.model, cfg.seed);
  net.norm_max = train_set.norm_max;
  auto params = net.parameter_tensors();
  ad::AdamState adam;
  adam.beta1 = cfg.adam_beta1;
  adam.beta2 = cfg.adam_beta2;
  adam.eps = cfg.adam_eps;

  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eed5eedULL);
  std::vector<std::size_t> order(train_set.size());
  std::optional<MruNet<float>> best;
  double best_rmse = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
  int best_epoch = cfg.epochs - 1;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_for_epoch(cfg, epoch);
    adam.lr = rec.lr;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<const Field*> x, y;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
        x.push_back(&train_set.pairs[order[k]].ilr.pixels);
        y.push_back(&train_set.pairs[order[k]].hr.pixels);
      }
      net.zero_grad();
      const auto pred = net.forward(detail::stack_normalised(x, net.norm_max), ad::Mode::train);
      const auto loss = ad::mse_loss(pred, detail::stack_normalised(y, net.norm_max));
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", step " << steps << " (lr " << rec.lr
            << ")";
        throw NumericError(msg.str());
      }
      ad::backward(loss);
      ad::adam_step(params, adam);
      loss_sum += lv;
      ++steps;
    }
    rec.train_loss = loss_sum / static_cast<double>(steps);

    if (test_set && !test_set->empty()) {
      rec.test = evaluate_model(net, *test_set);
      rec.test->images.clear();
      if (rec.test->rmse < best_rmse) {
        best_rmse = rec.test->rmse;
        best_epoch = epoch;
        best = net.clone();
      }
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (epoch + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << (epoch + 1) << ".mruc";
      save_checkpoint(net, std::filesystem::path(cfg.checkpoint_dir) / name.str());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(rec);
    if (on_epoch) on_epoch(history.back());
  }

  TrainResult out{best ? std::move(*best) : net.clone(), std::move(net), std::move(history), best_epoch};
  return out;
}

/// Bicubic upsampling by `ratio`, then the network on 64 x 64 tiles. Tiles
/// overlap by 8 pixels and are blended with linear feathering; a grid of
/// exactly one tile is a single untiled forward.
inline RasterGrid super_resolve(MruNet<float>& net, const RasterGrid& lr_grid, int ratio, std::size_t tile = 64,
                                std::size_t overlap = 8) {
  validate_lst(lr_grid);
  if (lr_grid.nodata_count() != 0) throw InvalidArgument("super_resolve: input contains nodata");
  if (overlap >= tile) throw InvalidArgument("super_resolve: overlap must be smaller than the tile");
  const Field ilr = bicubic_upsample(to_field(lr_grid), ratio);
  if (ilr.width < tile || ilr.height < tile)
    throw InvalidArgument("super_resolve: upsampled grid " + std::to_string(ilr.width) + "x" +
                          std::to_string(ilr.height) + " is smaller than one " + std::to_string(tile) + "-pixel tile");

  auto starts = [&](std::size_t extent) {
    std::vector<std::size_t> s;
    const std::size_t step = tile - overlap;
    for (std::size_t p = 0;; p += step) {
      if (p + tile >= extent) {
        s.push_back(extent - tile);
        break;
      }
      s.push_back(p);
    }
    return s;
  };
  const auto ys = starts(ilr.height), xs = starts(ilr.width);
  std::vector<Field> tiles;
  std::vector<std::pair<std::size_t, std::size_t>> origin;
  for (std::size_t y0 : ys)
    for (std::size_t x0 : xs) {
      Field t(tile, tile, 0.0, ilr.pixel_size_m);
      for (std::size_t r = 0; r < tile; ++r)
        for (std::size_t c = 0; c < tile; ++c) t.at(r, c) = ilr.at(y0 + r, x0 + c);
      tiles.push_back(std::move(t));
      origin.emplace_back(y0, x0);
    }
  std::vector<const Field*> ptr;
  for (const auto& t : tiles) ptr.push_back(&t);
  const auto pred = predict(net, ptr);

  Field out(ilr.width, ilr.height, 0.0, ilr.pixel_size_m);
  if (pred.size() == 1) {
    out.values = pred.front().values;
  } else {
    // Linear ramp over the overlap band at interior tile edges.
    auto ramp = [&](std::size_t i, bool taper_lo, bool taper_hi) {
      double w = 1.0;
      if (taper_lo) w = std::min(w, (static_cast<double>(i) + 1.0) / static_cast<double>(overlap + 1));
      if (taper_hi) w = std::min(w, (static_cast<double>(tile - i)) / static_cast<double>(overlap + 1));
      return w;
    };
    std::vector<double> wsum(out.size(), 0.0);
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const auto [y0, x0] = origin[k];
      for (std::size_t r = 0; r < tile; ++r) {
        const double wy = ramp(r, y0 > 0, y0 + tile < ilr.height);
        for (std::size_t c = 0; c < tile; ++c) {
          const double w = wy * ramp(c, x0 > 0, x0 + tile < ilr.width);
          const std::size_t idx = (y0 + r) * out.width + x0 + c;
          out.values[idx] += w * pred[k].at(r, c);
          wsum[idx] += w;
        }
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] /= wsum[i];
  }
  return to_grid(out);
}

enum class Method { bicubic, atprk, mrunet };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::bicubic: return "bicubic";
    case Method::atprk: return "atprk";
    case Method::mrunet: return "mrunet";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "bicubic") return Method::bicubic;
  if (s == "atprk") return Method::atprk;
  if (s == "mrunet" || s == "mru-net") return Method::mrunet;
  throw InvalidArgument("unknown method '" + s + "'");
}

struct MethodReport {
  std::string method;
  MetricReport report;
};

/// Scores each method against the HR targets of `ds`. Bicubic is always
/// included first. ATPRK sharpens the Norm-L4 coarse patch with the fine
/// NDVI stored alongside it.
inline std::vector<MethodReport> benchmark(const PatchDataset& ds, std::vector<Method> methods,
                                           MruNet<float>* net = nullptr, const AtprkOptions& atprk = {}) {
  if (ds.empty()) throw InvalidArgument("benchmark: empty dataset");
  if (std::find(methods.begin(), methods.end(), Method::bicubic) == methods.end())
    methods.insert(methods.begin(), Method::bicubic);
  std::vector<MethodReport> out;
  for (Method m : methods) {
    std::vector<Field> pred;
    switch (m) {
      case Method::bicubic:
        for (const auto& p : ds.pairs) pred.push_back(p.ilr.pixels);
        break;
      case Method::atprk: {
        if (!ds.has_ndvi()) throw InvalidArgument("benchmark: ATPRK needs NDVI patches in the dataset");
        pred.resize(ds.size());
        detail::parallel_for(ds.size(), worker_threads(), [&](std::size_t i) {
          const auto& p = ds.pairs[i];
          const Field coarse = norml4_downsample(p.hr.pixels, ds.ratio);
          pred[i] = atprk_sharpen(coarse, p.ndvi->pixels, ds.ratio, atprk).lst;
        });
        break;
      }
      case Method::mrunet: {
        if (!net) throw InvalidArgument("benchmark: MRU-Net requested without a model");
        std::vector<const Field*> ilr;
        for (const auto& p : ds.pairs) ilr.push_back(&p.ilr.pixels);
        pred = predict(*net, ilr);
        break;
      }
    }
    std::vector<ImageMetrics> images;
    for (std::size_t i = 0; i < pred.size(); ++i)
      images.push_back(evaluate_pair(ds.pairs[i].hr.pixels, pred[i], std::to_string(i)));
    out.push_back({to_string(m), aggregate(std::move(images))});
  }
  return out;
}

inline void write_benchmark_csv(const std::vector<MethodReport>& rows, std::ostream& os) {
  os << "method,rmse,psnr,ssim,n_images\n";
  for (const auto& r : rows)
    os << r.method << ',' << format_number(r.report.rmse) << ',' << format_number(r.report.psnr) << ','
       << format_number(r.report.ssim) << ',' << r.report.n_images << '\n';
}

inline void write_history_csv(const std::vector<EpochRecord>& history, std::ostream& os) {
  os << "epoch,lr,train_loss,test_rmse,test_psnr,test_ssim\n";
  for (const auto& h : history) {
    os << h.epoch << ',' << format_number(h.lr) << ',' << format_number(h.train_loss);
    if (h.test)
      os << ',' << format_number(h.test->rmse) << ',' << format_number(h.test->psnr) << ','
         << format_number(h.test->ssim);
    else
      os << ",,,";
    os << '\n';
  }
}

}  // namespace lstsr
