#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lstsr/atprk.hpp"
#include "lstsr/checkpoint.hpp"
#include "lstsr/dataset.hpp"
#include "lstsr/error.hpp"
#include "lstsr/grayscale.hpp"
#include "lstsr/metrics.hpp"
#include "lstsr/raster.hpp"
#include "lstsr/resample.hpp"
#include "lstsr/synth.hpp"
#include "lstsr/train.hpp"

namespace lstsr::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFailure = 2 };

/// Raised for flag combinations CLI11 cannot express; reported like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + p.string());
}

inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  auto stem = p;
  if (stem.extension() == ".lstgrid") stem.replace_extension();
  stem += suffix;
  stem += ".lstgrid";
  return stem;
}

inline TrainConfig read_train_config(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open training config " + p.string());
  try {
    return nlohmann::json::parse(is).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt training config " + p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Parses argv and runs one subcommand. Diagnostics go to `err`, reports to `out`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"LST single-image super-resolution toolkit", "lstsr"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic LST grid");
  FieldSpec fs;
  std::string generator = "grf", synth_out, synth_ndvi, synth_pgm;
  synth->add_option("--generator", generator, "grf | linear_ndvi_world | checker | ramp")->capture_default_str();
  synth->add_option("--corr", fs.corr_length_px, "Correlation length in pixels")->capture_default_str();
  synth->add_option("--size", fs.size, "Edge length in pixels (>= 64)")->capture_default_str();
  synth->add_option("--seed", fs.seed, "Random seed")->required();
  synth->add_option("--mean", fs.mean_k, "Mean temperature (K)")->capture_default_str();
  synth->add_option("--std", fs.std_k, "Temperature standard deviation (K)")->capture_default_str();
  synth->add_option("--slope", fs.slope, "LST per NDVI unit (K)")->capture_default_str();
  synth->add_option("--intercept", fs.intercept, "LST at NDVI 0 (K)")->capture_default_str();
  synth->add_option("--noise", fs.noise_k, "linear_ndvi_world LST noise (K)")->capture_default_str();
  synth->add_option("--ndvi-noise", fs.ndvi_noise, "grf NDVI proxy noise")->capture_default_str();
  synth->add_option("--cell", fs.cell_px, "Checker cell size (px)")->capture_default_str();
  synth->add_option("--low", fs.low_k, "Checker/ramp low level (K)")->capture_default_str();
  synth->add_option("--high", fs.high_k, "Checker/ramp high level (K)")->capture_default_str();
  synth->add_option("--pixel-size", fs.pixel_size_m, "Pixel size (m)")->capture_default_str();
  synth->add_option("--out", synth_out, "Output .lstgrid")->required();
  synth->add_option("--ndvi-out", synth_ndvi, "NDVI output (linear_ndvi_world, or grf proxy)");
  synth->add_option("--pgm", synth_pgm, "Also write a grayscale preview");

  // dataset
  auto* dataset = app.add_subcommand("dataset", "Cut patches and build train/test splits");
  std::vector<std::string> ds_inputs, ds_ndvi;
  std::size_t ds_patch = 64, ds_stride = 0;
  int ds_ratio = 4;
  double ds_train = 0.75, ds_validation = 0.0;
  std::uint64_t ds_seed = 0;
  std::string ds_out;
  dataset->add_option("--input", ds_inputs, "LST grids")->required();
  dataset->add_option("--ndvi", ds_ndvi, "Fine NDVI grids, one per input");
  dataset->add_option("--patch", ds_patch, "Patch size (px)")->capture_default_str();
  dataset->add_option("--stride", ds_stride, "Patch stride (px, default = patch)");
  dataset->add_option("--ratio", ds_ratio, "Scale ratio")->capture_default_str();
  dataset->add_option("--train-fraction", ds_train, "Train fraction")->capture_default_str();
  dataset->add_option("--validation-fraction", ds_validation, "Validation fraction")->capture_default_str();
  dataset->add_option("--seed", ds_seed, "Shuffle seed")->required();
  dataset->add_option("--out", ds_out, "Output directory")->required();

  // degrade
  auto* degrade = app.add_subcommand("degrade", "Resample a grid");
  std::string dg_in, dg_out, dg_method = "norml4", dg_pgm;
  double dg_ratio = 4;
  degrade->add_option("--input", dg_in, "Input .lstgrid")->required();
  degrade->add_option("--ratio", dg_ratio, "Scale ratio")->capture_default_str();
  degrade->add_option("--method", dg_method, "norml4 | area-weighted | bicubic | ilr")->capture_default_str();
  degrade->add_option("--out", dg_out, "Output .lstgrid")->required();
  degrade->add_option("--pgm", dg_pgm, "Also write a grayscale preview");

  // train
  auto* trn = app.add_subcommand("train", "Train MRU-Net");
  std::string tr_config, tr_data, tr_out, tr_history;
  std::uint64_t tr_seed = 0;
  int tr_epochs = 0;
  trn->add_option("--config", tr_config, "Training config (JSON)");
  trn->add_option("--data", tr_data, "Dataset directory")->required();
  trn->add_option("--out", tr_out, "Checkpoint to write (best by test RMSE)")->required();
  trn->add_option("--seed", tr_seed, "Initialisation and shuffling seed")->required();
  trn->add_option("--epochs", tr_epochs, "Override the configured epoch count");
  trn->add_option("--history", tr_history, "Per-epoch CSV");

  // eval
  auto* eval = app.add_subcommand("eval", "Benchmark methods on a dataset split");
  std::string ev_ckpt, ev_data, ev_csv, ev_split = "test", ev_images;
  std::vector<std::string> ev_methods;
  eval->add_option("--checkpoint", ev_ckpt, "MRU-Net checkpoint");
  eval->add_option("--data", ev_data, "Dataset directory")->required();
  eval->add_option("--csv", ev_csv, "Per-method CSV report");
  eval->add_option("--split", ev_split, "train | test | validation")->capture_default_str();
  eval->add_option("--methods", ev_methods, "bicubic, atprk, mrunet (default: all available)")->delimiter(',');
  eval->add_option("--images-csv", ev_images, "Per-image CSV for the MRU-Net rows");

  // sr
  auto* sr = app.add_subcommand("sr", "Super-resolve a coarse grid");
  std::string sr_ckpt, sr_in, sr_out, sr_pgm;
  int sr_ratio = 4;
  sr->add_option("--checkpoint", sr_ckpt, "MRU-Net checkpoint")->required();
  sr->add_option("--input", sr_in, "Coarse .lstgrid")->required();
  sr->add_option("--ratio", sr_ratio, "Scale ratio")->capture_default_str();
  sr->add_option("--out", sr_out, "Output .lstgrid")->required();
  sr->add_option("--pgm", sr_pgm, "Also write a grayscale preview");

  // atprk
  auto* atprk = app.add_subcommand("atprk", "ATPRK thermal sharpening");
  std::string at_lst, at_ndvi, at_out, at_pgm;
  int at_ratio = 4;
  AtprkOptions at_opt;
  atprk->add_option("--lst", at_lst, "Coarse LST .lstgrid")->required();
  atprk->add_option("--ndvi", at_ndvi, "Fine NDVI .lstgrid")->required();
  atprk->add_option("--ratio", at_ratio, "Scale ratio")->capture_default_str();
  atprk->add_option("--out", at_out, "Output .lstgrid")->required();
  atprk->add_option("--neighborhood", at_opt.neighborhood, "Kriging window edge (coarse px)")->capture_default_str();
  atprk->add_option("--lags", at_opt.n_lags, "Variogram lag bins")->capture_default_str();
  atprk->add_option("--pgm", at_pgm, "Also write a grayscale preview");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "Compare a prediction with ground truth");
  std::string mt_gt, mt_pred, mt_csv;
  metrics->add_option("--gt", mt_gt, "Ground-truth .lstgrid")->required();
  metrics->add_option("--pred", mt_pred, "Prediction .lstgrid")->required();
  metrics->add_option("--csv", mt_csv, "Write a one-row CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (synth->parsed()) {
      fs.generator = parse_generator(generator);
      fs.ndvi_proxy = fs.generator == Generator::grf && !synth_ndvi.empty();
      if (!synth_ndvi.empty() && fs.generator != Generator::grf && fs.generator != Generator::linear_ndvi_world)
        throw UsageError("--ndvi-out needs the grf or linear_ndvi_world generator");
      const auto s = generate(fs);
      store_grid(s.lst, synth_out);
      if (s.ndvi) store_grid(*s.ndvi, synth_ndvi.empty() ? detail::sibling(synth_out, "_ndvi") : std::filesystem::path(synth_ndvi));
      if (!synth_pgm.empty()) dump_grayscale(s.lst, synth_pgm);
      out << "wrote " << synth_out << " (" << s.lst.width << "x" << s.lst.height << ")\n";
    } else if (dataset->parsed()) {
      if (!ds_ndvi.empty() && ds_ndvi.size() != ds_inputs.size())
        throw UsageError("--ndvi must list one grid per --input");
      if (ds_train <= 0.0 || ds_validation < 0.0 || ds_train + ds_validation > 1.0)
        throw UsageError("train/validation fractions must be positive and sum to at most 1");
      const std::size_t stride = ds_stride == 0 ? ds_patch : ds_stride;
      std::vector<Patch> hr, ndvi;
      for (std::size_t i = 0; i < ds_inputs.size(); ++i) {
        const auto grid = load_grid(ds_inputs[i]);
        validate_lst(grid);
        auto ps = extract_patches(grid, ds_patch, stride);
        if (!ds_ndvi.empty()) {
          const auto ng = load_grid(ds_ndvi[i]);
          if (ng.width != grid.width || ng.height != grid.height)
            throw InvalidArgument("NDVI grid " + ds_ndvi[i] + " does not match " + ds_inputs[i]);
          for (const auto& p : ps) {
            Field f(ds_patch, ds_patch, 0.0, ng.pixel_size_m);
            for (std::size_t r = 0; r < ds_patch; ++r)
              for (std::size_t c = 0; c < ds_patch; ++c) f.at(r, c) = ng.at(p.row + r, p.col + c);
            for (double v : f.values)
              if (is_nodata(v)) throw InvalidArgument("NDVI has nodata under a clear LST patch");
            ndvi.push_back(Patch{std::move(f), p.row, p.col});
          }
        }
        hr.insert(hr.end(), ps.begin(), ps.end());
      }
      SplitFractions split{ds_train, 1.0 - ds_train - ds_validation, ds_validation};
      const auto splits = build_dataset(hr, ds_ratio, ds_seed, split, ds_ndvi.empty() ? nullptr : &ndvi);
      save_dataset(splits, ds_out);
      out << "patches: train " << splits.train.size() << ", test " << splits.test.size() << ", validation "
          << splits.validation.size() << "; norm_max " << format_number(splits.train.norm_max) << '\n';
    } else if (degrade->parsed()) {
      const auto grid = load_grid(dg_in);
      validate_lst(grid);
      const Field f = to_field(grid);
      const bool integral = dg_ratio == std::floor(dg_ratio);
      Field res;
      if (dg_method == "area" || dg_method == "area-weighted") {
        res = area_weighted_downsample(f, dg_ratio);
      } else if (dg_method == "norml4" || dg_method == "bicubic" || dg_method == "ilr") {
        if (!integral) throw UsageError("--method " + dg_method + " needs an integer --ratio");
        const int r = static_cast<int>(dg_ratio);
        res = dg_method == "norml4" ? norml4_downsample(f, r) : dg_method == "bicubic" ? bicubic_upsample(f, r) : make_ilr(f, r);
      } else {
        throw UsageError("unknown --method '" + dg_method + "'");
      }
      const auto g = to_grid(res);
      store_grid(g, dg_out);
      if (!dg_pgm.empty()) dump_grayscale(g, dg_pgm);
      out << "wrote " << dg_out << " (" << g.width << "x" << g.height << ")\n";
    } else if (trn->parsed()) {
      TrainConfig cfg = tr_config.empty() ? TrainConfig{} : detail::read_train_config(tr_config);
      cfg.seed = tr_seed;
      if (tr_epochs > 0) {
        cfg.epochs = tr_epochs;
        cfg.lr_drop_epoch = std::min(cfg.lr_drop_epoch, cfg.epochs);
      }
      const auto ds = load_dataset(tr_data);
      if (ds.train.ratio != cfg.ratio)
        throw InvalidArgument("dataset ratio " + std::to_string(ds.train.ratio) + " differs from config ratio " +
                              std::to_string(cfg.ratio));
      auto result = train(ds.train, ds.test.empty() ? nullptr : &ds.test, cfg, [&](const EpochRecord& r) {
        err << "epoch " << r.epoch + 1 << "/" << cfg.epochs << " lr " << r.lr << " loss " << r.train_loss;
        if (r.test) err << " test rmse " << r.test->rmse << " psnr " << r.test->psnr;
        err << '\n';
      });
      save_checkpoint(result.best, tr_out);
      if (!tr_history.empty()) {
        std::ostringstream os;
        write_history_csv(result.history, os);
        detail::write_text(tr_history, os.str());
      }
      out << "wrote " << tr_out << " (best epoch " << result.best_epoch + 1 << ")\n";
    } else if (eval->parsed()) {
      const auto ds = load_dataset(ev_data);
      const PatchDataset& part = ev_split == "train" ? ds.train
                                 : ev_split == "test" ? ds.test
                                 : ev_split == "validation" ? ds.validation
                                                            : throw UsageError("unknown --split '" + ev_split + "'");
      if (part.empty()) throw InvalidArgument("split '" + ev_split + "' is empty");
      std::vector<Method> methods;
      for (const auto& m : ev_methods) {
        try {
          methods.push_back(parse_method(m));
        } catch (const InvalidArgument& e) {
          throw UsageError(e.what());
        }
      }
      if (methods.empty()) {
        methods.push_back(Method::bicubic);
        if (part.has_ndvi()) methods.push_back(Method::atprk);
        if (!ev_ckpt.empty()) methods.push_back(Method::mrunet);
      }
      const bool wants_net = std::find(methods.begin(), methods.end(), Method::mrunet) != methods.end();
      if (wants_net && ev_ckpt.empty()) throw UsageError("--methods mrunet needs --checkpoint");
      std::optional<MruNet<float>> net;
      if (wants_net) net = load_checkpoint<float>(ev_ckpt);
      const auto rows = benchmark(part, methods, net ? &*net : nullptr);
      std::ostringstream os;
      write_benchmark_csv(rows, os);
      if (!ev_csv.empty()) detail::write_text(ev_csv, os.str());
      out << os.str();
      if (!ev_images.empty()) {
        for (const auto& r : rows)
          if (r.method == "mrunet" || (rows.size() == 1)) {
            std::ostringstream im;
            write_csv(r.report, im);
            detail::write_text(ev_images, im.str());
          }
      }
    } else if (sr->parsed()) {
      auto net = load_checkpoint<float>(sr_ckpt);
      const auto g = super_resolve(net, load_grid(sr_in), sr_ratio);
      store_grid(g, sr_out);
      if (!sr_pgm.empty()) dump_grayscale(g, sr_pgm);
      out << "wrote " << sr_out << " (" << g.width << "x" << g.height << ")\n";
    } else if (atprk->parsed()) {
      const auto r = atprk_sharpen(load_grid(at_lst), load_grid(at_ndvi), at_ratio, at_opt);
      const auto g = to_grid(r.lst);
      store_grid(g, at_out);
      if (!at_pgm.empty()) dump_grayscale(g, at_pgm);
      out << "slope=" << format_number(r.model.slope) << " intercept=" << format_number(r.model.intercept)
          << " nugget=" << format_number(r.model.variogram.nugget) << " sill=" << format_number(r.model.variogram.sill)
          << " range_m=" << format_number(r.model.variogram.range_m) << (r.jittered ? " jittered" : "") << '\n';
    } else if (metrics->parsed()) {
      const auto gt = load_grid(mt_gt), pred = load_grid(mt_pred);
      if (gt.nodata_count() || pred.nodata_count()) throw InvalidArgument("metrics: grids contain nodata");
      const auto m = evaluate_pair(to_field(gt), to_field(pred), std::filesystem::path(mt_pred).stem().string());
      out << "rmse=" << format_number(m.rmse) << " psnr=" << format_number(m.psnr) << " ssim=" << format_number(m.ssim)
          << " dr=" << format_number(m.dynamic_range) << '\n';
      if (!mt_csv.empty()) {
        std::ostringstream os;
        write_csv(aggregate({m}), os);
        detail::write_text(mt_csv, os.str());
      }
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace lstsr::cli
