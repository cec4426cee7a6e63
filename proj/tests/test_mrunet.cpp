#include <chrono>
#include <cstring>

#include <gtest/gtest.h>

#include "lstsr/grad_check.hpp"
#include "lstsr/mrunet.hpp"
#include "support.hpp"

using namespace lstsr;
using lstsr::testing::random_tensor;

namespace {

MruNetConfig small(int levels = 2, int base = 8) {
  MruNetConfig c;
  c.levels = levels;
  c.base_filters = base;
  return c;
}

// Hand count: conv = cout*cin*k*k + cout, batch norm = 2c (gamma, beta).
std::size_t expected_parameters(const MruNetConfig& cfg) {
  const std::size_t k = static_cast<std::size_t>(cfg.kernel), f = static_cast<std::size_t>(cfg.base_filters);
  auto conv = [&](std::size_t cin, std::size_t cout, std::size_t kk) { return cout * cin * kk * kk + cout; };
  auto block = [&](std::size_t cin, std::size_t cout) { return conv(cin, cout, k) + 2 * cout; };
  auto unit = [&](std::size_t cin, std::size_t cout) {
    return block(cin, cout) + block(cout, cout) + (cin != cout ? conv(cin, cout, 1) : 0);
  };
  std::size_t n = block(1, f);
  for (int l = 0; l < cfg.levels; ++l) {
    const std::size_t c = f << l;
    n += unit(c, c) + block(c, c) + conv(c, 2 * c, k);
  }
  n += static_cast<std::size_t>(cfg.bridge_blocks) * unit(f << cfg.levels, f << cfg.levels);
  for (int l = 0; l < cfg.levels; ++l) {
    const std::size_t c = f << l;
    const std::size_t up = cfg.upsample == UpsampleKind::transposed ? 2 * c * c * 4 + c : conv(2 * c, c, k);
    n += up + unit(2 * c, c) + block(c, c);
  }
  return n + conv(f, 1, 1);
}

bool bit_equal(const ad::Tensor<float>& a, const ad::Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST(MruNetConfig, ValidatesAndRoundTripsThroughJson) {
  MruNetConfig c = small(3, 16);
  c.upsample = UpsampleKind::nearest_conv;
  c.head_gain = 0.5;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<MruNetConfig>(), c);
  EXPECT_THROW((nlohmann::json{{"levels", 2}, {"filters", 8}}.get<MruNetConfig>()), FormatError);
  using Mutator = void (*)(MruNetConfig&);
  for (Mutator bad : {+[](MruNetConfig& x) { x.levels = 0; }, +[](MruNetConfig& x) { x.kernel = 4; },
                   +[](MruNetConfig& x) { x.out_channels = 2; }, +[](MruNetConfig& x) { x.bn_momentum = 0.0; },
                   +[](MruNetConfig& x) { x.head_gain = -1.0; }}) {
    MruNetConfig x = small();
    bad(x);
    EXPECT_THROW(x.validate(), InvalidArgument);
  }
}

TEST(MruNet, ParameterCountMatchesHandCount) {
  for (auto cfg : {small(1, 4), small(2, 8), small(3, 32), small(4, 64)}) {
    EXPECT_EQ(MruNet<float>::build(cfg, 0).parameter_count(), expected_parameters(cfg));
  }
  MruNetConfig nc = small(2, 8);
  nc.upsample = UpsampleKind::nearest_conv;
  nc.bridge_blocks = 2;
  EXPECT_EQ(MruNet<float>::build(nc, 0).parameter_count(), expected_parameters(nc));
}

TEST(MruNet, EncoderLadderAndSkipWiring) {
  const MruNetConfig cfg = small(3, 8);
  auto net = MruNet<float>::build(cfg, 1);
  ForwardTrace trace;
  const auto x = ad::Tensor<float>::full({2, 1, 32, 32}, 0.9f);
  const auto y = net.forward(x, ad::Mode::eval, &trace);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(trace.encoder_outputs.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t side = 32u >> (l + 1);
    EXPECT_EQ(trace.encoder_outputs[l], (ad::Shape{2, 16u << l, side, side}));
  }
  ASSERT_EQ(trace.skips.size(), 3u);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(trace.skips[d].encoder_level, 3 - static_cast<int>(d));
    EXPECT_EQ(trace.skips[d].upsampled_channels, trace.skips[d].skip_channels);
    EXPECT_EQ(trace.skips[d].skip_channels, 8u << (2 - d));
  }
}

TEST(MruNet, RejectsIncompatibleInputs) {
  auto net = MruNet<float>::build(small(2, 4), 0);
  EXPECT_THROW(net.forward(ad::Tensor<float>::zeros({1, 1, 18, 16}), ad::Mode::eval), ShapeError);
  EXPECT_THROW(net.forward(ad::Tensor<float>::zeros({1, 2, 16, 16}), ad::Mode::eval), ShapeError);
}

TEST(MruNet, ZeroHeadIsBitExactIdentity) {
  auto net = MruNet<float>::build(small(2, 8), 3);
  net.zero_output_head();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto xd = random_tensor({2, 1, 16, 16}, seed, false, 0.8, 1.0);
    std::vector<float> v(xd.data().begin(), xd.data().end());
    const auto x = ad::Tensor<float>::from(xd.shape(), std::move(v), false);
    EXPECT_TRUE(bit_equal(net.forward(x, ad::Mode::eval), x));
    EXPECT_TRUE(bit_equal(net.forward(x, ad::Mode::train), x));
  }
}

TEST(MruNet, HeadGainScalesInitialResidual) {
  MruNetConfig cfg = small(2, 8);
  auto full = MruNet<double>::build([&] { auto c = cfg; c.head_gain = 1.0; return c; }(), 5);
  auto scaled = MruNet<double>::build(cfg, 5);
  const auto x = random_tensor({1, 1, 16, 16}, 9, false, 0.8, 1.0);
  const auto a = full.forward(x, ad::Mode::eval), b = scaled.forward(x, ad::Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(b.data()[i] - x.data()[i], cfg.head_gain * (a.data()[i] - x.data()[i]), 1e-12);
}

TEST(MruNet, SameSeedSameWeightsAndCloneIsDeep) {
  const auto a = MruNet<float>::build(small(), 11), b = MruNet<float>::build(small(), 11);
  const auto c = MruNet<float>::build(small(), 12);
  const auto pa = a.state(), pb = b.state(), pc = c.state();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(bit_equal(pa[i].tensor, pb[i].tensor));
    any_diff = any_diff || !bit_equal(pa[i].tensor, pc[i].tensor);
  }
  EXPECT_TRUE(any_diff);

  auto copy = a.clone();
  const auto pcopy = copy.state();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i].tensor, pcopy[i].tensor));
  copy.zero_output_head();
  const auto head = a.parameters()[a.parameters().size() - 2].tensor;  // 1x1 head weight
  bool nonzero = false;
  for (float v : head.data()) nonzero = nonzero || v != 0.0f;
  EXPECT_TRUE(nonzero);
}

TEST(MruNet, GemmAndDirectConvolutionAgree) {
  auto net = MruNet<double>::build(small(2, 4), 2);
  const auto x = random_tensor({2, 1, 16, 16}, 4, false, 0.8, 1.0);
  net.conv_algo = ad::ConvAlgo::gemm;
  const auto a = net.forward(x, ad::Mode::eval);
  net.conv_algo = ad::ConvAlgo::direct;
  const auto b = net.forward(x, ad::Mode::eval);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(MruNet, EndToEndGradientMatchesFiniteDifferences) {
  const auto start = std::chrono::steady_clock::now();
  MruNetConfig cfg = small(2, 8);
  cfg.head_gain = 1.0;  // exercise every upstream path at full strength
  auto net = MruNet<double>::build(cfg, 21);
  const auto x = random_tensor({2, 1, 16, 16}, 22, false, 0.8, 1.0);
  const auto target = random_tensor({2, 1, 16, 16}, 23, false, 0.8, 1.0);
  std::vector<ad::NamedTensor> tensors;
  for (const auto& p : net.parameters()) tensors.push_back({p.name, p.tensor});
  ad::GradCheckOptions opt;
  opt.max_samples = 6;
  opt.step = 1e-6;  // thousands of ReLUs: larger probes straddle kinks
  const auto rep = ad::grad_check([&] { return ad::mse_loss(net.forward(x, ad::Mode::train), target); },
                                  tensors, opt);
  EXPECT_GT(rep.checked(), 100u);
  EXPECT_LT(rep.max_rel_error(), 1e-3);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 60.0);
}

TEST(MruNet, EvalModeLeavesRunningStatsUntouched) {
  auto net = MruNet<float>::build(small(), 6);
  const auto before = net.clone();
  const auto x = ad::Tensor<float>::full({1, 1, 16, 16}, 0.95f);
  net.forward(x, ad::Mode::eval);
  for (std::size_t i = 0; i < net.buffers().size(); ++i)
    EXPECT_TRUE(bit_equal(net.buffers()[i].tensor, before.buffers()[i].tensor));
  net.forward(x, ad::Mode::train);
  bool moved = false;
  for (std::size_t i = 0; i < net.buffers().size(); ++i)
    moved = moved || !bit_equal(net.buffers()[i].tensor, before.buffers()[i].tensor);
  EXPECT_TRUE(moved);
}
