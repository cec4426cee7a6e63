#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lstsr/error.hpp"
#include "lstsr/ops.hpp"
#include "lstsr/tensor.hpp"

namespace lstsr {

enum class UpsampleKind { transposed, nearest_conv };

inline std::string to_string(UpsampleKind k) {
  return k == UpsampleKind::transposed ? "transposed" : "nearest_conv";
}

inline UpsampleKind upsample_kind_from_string(const std::string& s) {
  if (s == "transposed") return UpsampleKind::transposed;
  if (s == "nearest_conv") return UpsampleKind::nearest_conv;
  throw InvalidArgument("unknown upsample kind '" + s + "'");
}

/// Architecture hyperparameters. Filters double at every encoder level.
struct MruNetConfig {
  int levels = 4;
  int base_filters = 64;
  int kernel = 3;
  int bridge_blocks = 1;
  UpsampleKind upsample = UpsampleKind::transposed;
  int in_channels = 1;
  int out_channels = 1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // Scale on the Kaiming init of the 1x1 output head; small values start the
  // network close to the ILR identity.
  double head_gain = 0.01;

  void validate() const {
    if (levels < 1) throw InvalidArgument("levels must be >= 1");
    if (base_filters < 1) throw InvalidArgument("base_filters must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("kernel must be odd and >= 1");
    if (bridge_blocks < 0) throw InvalidArgument("bridge_blocks must be >= 0");
    if (in_channels < 1 || out_channels != in_channels)
      throw InvalidArgument("global residual needs out_channels == in_channels >= 1");
    if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0))
      throw InvalidArgument("invalid batch-norm momentum/eps");
    if (!(head_gain >= 0.0) || !std::isfinite(head_gain)) throw InvalidArgument("head_gain must be finite and >= 0");
  }

  /// Input side length must be a multiple of this.
  std::size_t spatial_multiple() const { return std::size_t{1} << levels; }

  friend bool operator==(const MruNetConfig&, const MruNetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MruNetConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"base_filters", c.base_filters},
                     {"kernel", c.kernel},
                     {"bridge_blocks", c.bridge_blocks},
                     {"upsample", to_string(c.upsample)},
                     {"in_channels", c.in_channels},
                     {"out_channels", c.out_channels},
                     {"bn_momentum", c.bn_momentum},
                     {"bn_eps", c.bn_eps},
                     {"head_gain", c.head_gain}};
}

inline void from_json(const nlohmann::json& j, MruNetConfig& c) {
  static const char* const known[] = {"levels",      "base_filters", "kernel",      "bridge_blocks", "upsample",
                                      "in_channels", "out_channels", "bn_momentum", "bn_eps",        "head_gain"};
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw FormatError("unknown model config key '" + key + "'");
  MruNetConfig d;
  c.levels = j.value("levels", d.levels);
  c.base_filters = j.value("base_filters", d.base_filters);
  c.kernel = j.value("kernel", d.kernel);
  c.bridge_blocks = j.value("bridge_blocks", d.bridge_blocks);
  c.upsample = upsample_kind_from_string(j.value("upsample", to_string(d.upsample)));
  c.in_channels = j.value("in_channels", d.in_channels);
  c.out_channels = j.value("out_channels", d.out_channels);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.bn_eps = j.value("bn_eps", d.bn_eps);
  c.head_gain = j.value("head_gain", d.head_gain);
}

template <std::floating_point T>
struct NamedParam {
  std::string name;
  ad::Tensor<T> tensor;
};

/// Shapes observed during one forward pass; used to assert the U ladder.
struct ForwardTrace {
  std::vector<ad::Shape> encoder_outputs;  // after each downsampling, level 1..L
  struct SkipLink {
    int encoder_level;
    int decoder_step;  // 0-based execution order of the decoder
    std::size_t upsampled_channels;
    std::size_t skip_channels;
  };
  std::vector<SkipLink> skips;
};

namespace nn {

using ad::Mode;
using ad::Tensor;

template <std::floating_point T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  // Kaiming (He) uniform over fan-in; biases start at zero.
  Tensor<T> kaiming(ad::Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape.numel());
    for (T& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>::from(shape, std::move(v), true);
  }

 private:
  std::mt19937_64 rng_;
};

template <std::floating_point T>
struct Registry {
  std::vector<NamedParam<T>>* params;
  std::vector<NamedParam<T>>* buffers;
};

template <std::floating_point T>
struct Conv {
  Tensor<T> weight, bias;
  int stride = 1;
  int padding = 0;

  Conv() = default;
  Conv(Initializer<T>& init, std::size_t cin, std::size_t cout, std::size_t k, int stride_, int pad)
      : weight(init.kaiming({cout, cin, k, k}, cin * k * k)),
        bias(Tensor<T>::zeros({1, cout, 1, 1}, true)),
        stride(stride_),
        padding(pad) {}

  Tensor<T> operator()(const Tensor<T>& x, ad::ConvAlgo algo) const {
    return ad::conv2d(x, weight, bias, stride, padding, algo);
  }
  void collect(const std::string& p, Registry<T> r) const {
    r.params->push_back({p + ".weight", weight});
    r.params->push_back({p + ".bias", bias});
  }
};

template <std::floating_point T>
struct ConvTranspose {
  Tensor<T> weight, bias;
  int stride = 2;

  ConvTranspose() = default;
  ConvTranspose(Initializer<T>& init, std::size_t cin, std::size_t cout, std::size_t k, int stride_)
      : weight(init.kaiming({cin, cout, k, k}, cin)),
        bias(Tensor<T>::zeros({1, cout, 1, 1}, true)),
        stride(stride_) {}

  Tensor<T> operator()(const Tensor<T>& x, ad::ConvAlgo algo) const {
    return ad::conv_transpose2d(x, weight, bias, stride, algo);
  }
  void collect(const std::string& p, Registry<T> r) const {
    r.params->push_back({p + ".weight", weight});
    r.params->push_back({p + ".bias", bias});
  }
};

template <std::floating_point T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm() = default;
  BatchNorm(std::size_t c, double momentum_, double eps_)
      : gamma(Tensor<T>::full({1, c, 1, 1}, T(1), true)),
        beta(Tensor<T>::zeros({1, c, 1, 1}, true)),
        running_mean(Tensor<T>::zeros({1, c, 1, 1})),
        running_var(Tensor<T>::full({1, c, 1, 1}, T(1))),
        momentum(static_cast<T>(momentum_)),
        eps(static_cast<T>(eps_)) {}

  // Not const: train mode advances the running statistics.
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return ad::batchnorm2d(x, gamma, beta, running_mean.data(), running_var.data(), mode, momentum, eps);
  }
  void collect(const std::string& p, Registry<T> r) const {
    r.params->push_back({p + ".gamma", gamma});
    r.params->push_back({p + ".beta", beta});
    r.buffers->push_back({p + ".running_mean", running_mean});
    r.buffers->push_back({p + ".running_var", running_var});
  }
};

/// conv -> batch norm -> ReLU
template <std::floating_point T>
struct ConvBlock {
  Conv<T> conv;
  BatchNorm<T> bn;

  ConvBlock() = default;
  ConvBlock(Initializer<T>& init, const MruNetConfig& cfg, std::size_t cin, std::size_t cout)
      : conv(init, cin, cout, static_cast<std::size_t>(cfg.kernel), 1, cfg.kernel / 2),
        bn(cout, cfg.bn_momentum, cfg.bn_eps) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, ad::ConvAlgo algo) {
    return ad::relu(bn(conv(x, algo), mode));
  }
  void collect(const std::string& p, Registry<T> r) const {
    conv.collect(p + ".conv", r);
    bn.collect(p + ".bn", r);
  }
};

/// Two conv blocks plus a shortcut: identity when widths agree, otherwise a
/// 1x1 projection.
template <std::floating_point T>
struct ResidualUnit {
  ConvBlock<T> block1, block2;
  std::optional<Conv<T>> projection;

  ResidualUnit() = default;
  ResidualUnit(Initializer<T>& init, const MruNetConfig& cfg, std::size_t cin, std::size_t cout)
      : block1(init, cfg, cin, cout), block2(init, cfg, cout, cout) {
    if (cin != cout) projection.emplace(init, cin, cout, 1, 1, 0);
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, ad::ConvAlgo algo) {
    Tensor<T> y = block2(block1(x, mode, algo), mode, algo);
    return ad::add(y, projection ? (*projection)(x, algo) : x);
  }
  void collect(const std::string& p, Registry<T> r) const {
    block1.collect(p + ".block1", r);
    block2.collect(p + ".block2", r);
    if (projection) projection->collect(p + ".proj", r);
  }
};

template <std::floating_point T>
struct EncoderLevel {
  ResidualUnit<T> res;
  ConvBlock<T> conv;
  Conv<T> down;  // stride-2 convolution in place of max pooling
};

template <std::floating_point T>
struct DecoderLevel {
  ConvTranspose<T> up;   // UpsampleKind::transposed
  Conv<T> up_conv;       // UpsampleKind::nearest_conv
  ResidualUnit<T> res;
  ConvBlock<T> conv;
};

}  // namespace nn

/// Multi-residual U-Net. Predicts a residual image that is added to the
/// interpolated low-resolution input.
template <std::floating_point T>
class MruNet {
 public:
  using Tensor = ad::Tensor<T>;

  static MruNet build(const MruNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MruNet net;
    net.config_ = cfg;
    nn::Initializer<T> init(seed);
    const auto f = static_cast<std::size_t>(cfg.base_filters);
    const auto k = static_cast<std::size_t>(cfg.kernel);
    net.input_ = nn::ConvBlock<T>(init, cfg, static_cast<std::size_t>(cfg.in_channels), f);
    for (int l = 0; l < cfg.levels; ++l) {
      const std::size_t c = f << l;
      nn::EncoderLevel<T> e;
      e.res = nn::ResidualUnit<T>(init, cfg, c, c);
      e.conv = nn::ConvBlock<T>(init, cfg, c, c);
      e.down = nn::Conv<T>(init, c, 2 * c, k, 2, cfg.kernel / 2);
      net.encoders_.push_back(std::move(e));
    }
    const std::size_t deepest = f << cfg.levels;
    for (int b = 0; b < cfg.bridge_blocks; ++b)
      net.bridge_.push_back(nn::ResidualUnit<T>(init, cfg, deepest, deepest));
    for (int l = cfg.levels - 1; l >= 0; --l) {
      const std::size_t c = f << l;
      nn::DecoderLevel<T> d;
      if (cfg.upsample == UpsampleKind::transposed)
        d.up = nn::ConvTranspose<T>(init, 2 * c, c, 2, 2);
      else
        d.up_conv = nn::Conv<T>(init, 2 * c, c, k, 1, cfg.kernel / 2);
      d.res = nn::ResidualUnit<T>(init, cfg, 2 * c, c);
      d.conv = nn::ConvBlock<T>(init, cfg, c, c);
      net.decoders_.push_back(std::move(d));
    }
    net.head_ = nn::Conv<T>(init, f, static_cast<std::size_t>(cfg.out_channels), 1, 1, 0);
    for (auto& v : net.head_.weight.data()) v *= static_cast<T>(cfg.head_gain);
    return net;
  }

  MruNet(MruNet&&) noexcept = default;
  MruNet& operator=(MruNet&&) noexcept = default;
  MruNet(const MruNet&) = delete;
  MruNet& operator=(const MruNet&) = delete;

  const MruNetConfig& config() const { return config_; }

  /// Kelvin scale used to normalise inputs; carried inside checkpoints.
  double norm_max = 1.0;

  ad::ConvAlgo conv_algo = ad::ConvAlgo::gemm;

  /// ilr is (N, C, H, W) in normalised units; H and W must be multiples of
  /// 2^levels. Returns ilr + predicted residual.
  Tensor forward(const Tensor& ilr, ad::Mode mode, ForwardTrace* trace = nullptr) {
    const ad::Shape s = ilr.shape();
    const std::size_t m = config_.spatial_multiple();
    if (s.c != static_cast<std::size_t>(config_.in_channels))
      throw ShapeError("forward: expected " + std::to_string(config_.in_channels) + " input channels");
    if (s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0)
      throw ShapeError("forward: spatial dims " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       " must be multiples of " + std::to_string(m));
    const auto algo = conv_algo;
    Tensor h = input_(ilr, mode, algo);
    std::vector<Tensor> skips;
    for (auto& e : encoders_) {
      h = e.res(h, mode, algo);
      h = e.conv(h, mode, algo);
      skips.push_back(h);
      h = e.down(h, algo);
      if (trace) trace->encoder_outputs.push_back(h.shape());
    }
    for (auto& b : bridge_) h = b(h, mode, algo);
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
      auto& dec = decoders_[d];
      const std::size_t level = decoders_.size() - 1 - d;  // 0-based encoder index
      Tensor up = config_.upsample == UpsampleKind::transposed
                      ? dec.up(h, algo)
                      : dec.up_conv(ad::upsample_nearest2x(h), algo);
      const Tensor& skip = skips[level];
      if (up.shape().c != skip.shape().c)
        throw ShapeError("forward: skip channel mismatch at encoder level " + std::to_string(level + 1));
      if (trace)
        trace->skips.push_back({static_cast<int>(level + 1), static_cast<int>(d), up.shape().c, skip.shape().c});
      h = ad::concat_channels(up, skip);
      h = dec.res(h, mode, algo);
      h = dec.conv(h, mode, algo);
    }
    return ad::add(ilr, head_(h, algo));
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> params, buffers;
    collect(params, buffers);
    return params;
  }

  std::vector<NamedParam<T>> buffers() const {
    std::vector<NamedParam<T>> params, buffers;
    collect(params, buffers);
    return buffers;
  }

  /// Parameters followed by buffers: everything a checkpoint stores.
  std::vector<NamedParam<T>> state() const {
    std::vector<NamedParam<T>> params, buffers;
    collect(params, buffers);
    params.insert(params.end(), buffers.begin(), buffers.end());
    return params;
  }

  std::vector<ad::Tensor<T>> parameter_tensors() const {
    std::vector<ad::Tensor<T>> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Zeroes the final 1x1 convolution, reducing the network to identity.
  void zero_output_head() {
    for (auto& v : head_.weight.data()) v = T(0);
    for (auto& v : head_.bias.data()) v = T(0);
  }

  /// Deep copy of every parameter and running statistic.
  MruNet clone() const {
    MruNet out = build(config_, 0);
    out.norm_max = norm_max;
    out.conv_algo = conv_algo;
    auto src = state();
    auto dst = out.state();
    for (std::size_t i = 0; i < src.size(); ++i)
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
    return out;
  }

 private:
  MruNet() = default;

  void collect(std::vector<NamedParam<T>>& params, std::vector<NamedParam<T>>& buffers) const {
    nn::Registry<T> r{&params, &buffers};
    input_.collect("input", r);
    for (std::size_t l = 0; l < encoders_.size(); ++l) {
      const std::string p = "enc" + std::to_string(l + 1);
      encoders_[l].res.collect(p + ".res", r);
      encoders_[l].conv.collect(p + ".conv", r);
      encoders_[l].down.collect(p + ".down", r);
    }
    for (std::size_t b = 0; b < bridge_.size(); ++b) bridge_[b].collect("bridge" + std::to_string(b + 1), r);
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
      const std::string p = "dec" + std::to_string(decoders_.size() - d);
      if (config_.upsample == UpsampleKind::transposed)
        decoders_[d].up.collect(p + ".up", r);
      else
        decoders_[d].up_conv.collect(p + ".up", r);
      decoders_[d].res.collect(p + ".res", r);
      decoders_[d].conv.collect(p + ".conv", r);
    }
    head_.collect("head", r);
  }

  MruNetConfig config_;
  nn::ConvBlock<T> input_;
  std::vector<nn::EncoderLevel<T>> encoders_;
  std::vector<nn::ResidualUnit<T>> bridge_;
  std::vector<nn::DecoderLevel<T>> decoders_;
  nn::Conv<T> head_;
};

}  // namespace lstsr
