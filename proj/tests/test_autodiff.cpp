#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lstsr/adam.hpp"
#include "lstsr/grad_check.hpp"
#include "lstsr/ops.hpp"
#include "support.hpp"

using namespace lstsr;
using namespace lstsr::ad;
using lstsr::testing::random_tensor;
using T = Tensor<double>;

namespace {

// MSE against a fixed random target: a scalar whose gradient weights every
// output element differently.
T probe(const T& y, std::uint64_t seed = 99) {
  return mse_loss(y, random_tensor(y.shape(), seed, false));
}

}  // namespace

TEST(Conv2d, OneByOneUnitKernelIsIdentity) {
  auto x = random_tensor({2, 1, 5, 4}, 1, false);
  auto w = T::full({1, 1, 1, 1}, 1.0);
  auto b = T::zeros({1, 1, 1, 1});
  for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm}) {
    auto y = conv2d(x, w, b, 1, 0, algo);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  auto x = T::full({1, 1, 5, 5}, 1.0);
  auto w = T::full({1, 1, 3, 3}, 1.0);
  auto b = T::zeros({1, 1, 1, 1});
  for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm}) {
    auto y = conv2d(x, w, b, 1, 1, algo);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
    EXPECT_EQ(y.data()[2 * 5 + 2], 9.0);
    EXPECT_EQ(y.data()[0], 4.0);  // corner sees a 2x2 neighbourhood
    EXPECT_EQ(y.data()[2], 6.0);
  }
}

TEST(Conv2d, OutputExtentFormula) {
  auto w = T::zeros({3, 2, 3, 3});
  auto b = T::zeros({1, 3, 1, 1});
  for (std::size_t h : {5u, 8u, 9u})
    for (int s : {1, 2})
      for (int p : {0, 1}) {
        auto y = conv2d(T::zeros({1, 2, h, h + 1}), w, b, s, p);
        EXPECT_EQ(y.shape().h, (h + 2 * p - 3) / s + 1);
        EXPECT_EQ(y.shape().w, (h + 1 + 2 * p - 3) / s + 1);
        EXPECT_EQ(y.shape().c, 3u);
      }
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(T::zeros({1, 2, 4, 4}), T::zeros({1, 3, 3, 3}), T::zeros({1, 1, 1, 1}), 1, 1),
               ShapeError);
  EXPECT_THROW(conv2d(T::zeros({1, 1, 2, 2}), T::zeros({1, 1, 5, 5}), T::zeros({1, 1, 1, 1}), 1, 0),
               ShapeError);
}

TEST(Conv2d, GemmMatchesDirectForwardAndBackward) {
  struct Case { Shape x; std::size_t cout, k; int s, p; };
  for (const Case& c : {Case{{2, 3, 7, 6}, 4, 3, 1, 1}, Case{{1, 2, 8, 8}, 3, 3, 2, 1},
                        Case{{2, 4, 5, 5}, 2, 1, 1, 0}, Case{{1, 1, 6, 9}, 2, 5, 1, 2},
                        // large enough to be processed in several row blocks
                        Case{{2, 6, 40, 40}, 3, 3, 1, 1}, Case{{1, 40, 40, 40}, 40, 3, 2, 1},
                        Case{{1, 5, 33, 31}, 4, 3, 1, 0}}) {
    std::vector<std::vector<double>> outs, gx, gw, gb;
    for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm}) {
      auto x = random_tensor(c.x, 11);
      auto w = random_tensor({c.cout, c.x.c, c.k, c.k}, 12);
      auto b = random_tensor({1, c.cout, 1, 1}, 13);
      auto y = conv2d(x, w, b, c.s, c.p, algo);
      backward(probe(y));
      outs.emplace_back(y.data().begin(), y.data().end());
      gx.emplace_back(x.grad().begin(), x.grad().end());
      gw.emplace_back(w.grad().begin(), w.grad().end());
      gb.emplace_back(b.grad().begin(), b.grad().end());
    }
    for (auto* v : {&outs, &gx, &gw, &gb}) {
      ASSERT_EQ((*v)[0].size(), (*v)[1].size());
      for (std::size_t i = 0; i < (*v)[0].size(); ++i)
        EXPECT_NEAR((*v)[0][i], (*v)[1][i], 1e-12 * (1.0 + std::abs((*v)[0][i])));
    }
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm})
    for (int stride : {1, 2}) {
      auto x = random_tensor({2, 3, 6, 5}, 21);
      auto w = random_tensor({4, 3, 3, 3}, 22);
      auto b = random_tensor({1, 4, 1, 1}, 23);
      auto rep = grad_check([&] { return probe(conv2d(x, w, b, stride, 1, algo)); },
                            {{"x", x}, {"w", w}, {"b", b}});
      EXPECT_LT(rep.max_rel_error(), 1e-4) << "stride " << stride;
    }
}

TEST(ConvTranspose2d, SingleTapSpreadsKernel) {
  auto x = T::full({1, 1, 1, 1}, 3.0);
  auto w = T::from({1, 1, 2, 2}, {1.0, -2.0, 0.5, 4.0});
  auto b = T::zeros({1, 1, 1, 1});
  for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm}) {
    auto y = conv_transpose2d(x, w, b, 2, algo);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(y.data()[0], 3.0);
    EXPECT_EQ(y.data()[1], -6.0);
    EXPECT_EQ(y.data()[2], 1.5);
    EXPECT_EQ(y.data()[3], 12.0);
  }
}

TEST(ConvTranspose2d, DoublesSpatialExtent) {
  auto y = conv_transpose2d(T::zeros({2, 4, 5, 3}), T::zeros({4, 6, 2, 2}), T::zeros({1, 6, 1, 1}), 2);
  EXPECT_EQ(y.shape(), (Shape{2, 6, 10, 6}));
  EXPECT_THROW(conv_transpose2d(T::zeros({1, 3, 2, 2}), T::zeros({4, 6, 2, 2}), T::zeros({1, 6, 1, 1}), 2),
               ShapeError);
}

TEST(ConvTranspose2d, GradientAndBackendsAgree) {
  std::vector<double> ref;
  for (auto algo : {ConvAlgo::direct, ConvAlgo::gemm}) {
    auto x = random_tensor({2, 3, 4, 3}, 31);
    auto w = random_tensor({3, 2, 2, 2}, 32);
    auto b = random_tensor({1, 2, 1, 1}, 33);
    auto rep = grad_check([&] { return probe(conv_transpose2d(x, w, b, 2, algo)); },
                          {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_LT(rep.max_rel_error(), 1e-4);
    auto y = conv_transpose2d(x, w, b, 2, algo);
    if (ref.empty()) {
      ref.assign(y.data().begin(), y.data().end());
    } else {
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    }
  }
  // Overlapping taps (k=3, s=2) exercise accumulation in the scatter.
  auto x = random_tensor({1, 2, 3, 3}, 34);
  auto w = random_tensor({2, 2, 3, 3}, 35);
  auto b = random_tensor({1, 2, 1, 1}, 36);
  auto rep = grad_check([&] { return probe(conv_transpose2d(x, w, b, 2)); }, {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(rep.max_rel_error(), 1e-4);
}

TEST(BatchNorm, TrainModeStandardisesPerChannel) {
  auto x = random_tensor({4, 3, 5, 5}, 41, false, -3.0, 7.0);
  auto gamma = T::from({1, 3, 1, 1}, {0.5, 2.0, -1.5});
  auto beta = T::from({1, 3, 1, 1}, {1.0, -2.0, 0.25});
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  auto y = batchnorm2d(x, gamma, beta, std::span(rm), std::span(rv), Mode::train, 0.1, 1e-12);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    const std::size_t m = 4 * 25;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) mean += y.data()[(n * 3 + c) * 25 + i];
    mean /= m;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        const double d = y.data()[(n * 3 + c) * 25 + i] - mean;
        var += d * d;
      }
    var /= m;
    EXPECT_NEAR(mean, beta.data()[c], 1e-5);
    EXPECT_NEAR(var, gamma.data()[c] * gamma.data()[c], 1e-5);
  }
  // Running statistics moved towards the batch statistics.
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NE(rm[c], 0.0);
}

TEST(BatchNorm, SingleValueBatchCollapsesToBeta) {
  auto x = T::from({1, 2, 1, 1}, {5.0, -3.0});
  auto gamma = T::from({1, 2, 1, 1}, {2.0, 3.0});
  auto beta = T::from({1, 2, 1, 1}, {0.7, -0.2});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  auto y = batchnorm2d(x, gamma, beta, std::span(rm), std::span(rv), Mode::train);
  EXPECT_EQ(y.data()[0], 0.7);
  EXPECT_EQ(y.data()[1], -0.2);
}

TEST(BatchNorm, RejectsBadParameters) {
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  EXPECT_THROW(batchnorm2d(T::zeros({1, 3, 2, 2}), T::zeros({1, 2, 1, 1}), T::zeros({1, 2, 1, 1}),
                           std::span(rm), std::span(rv), Mode::train),
               ShapeError);
  EXPECT_THROW(batchnorm2d(T::zeros({1, 2, 2, 2}), T::zeros({1, 2, 1, 1}), T::zeros({1, 2, 1, 1}),
                           std::span(rm), std::span(rv), Mode::train, 0.1, 0.0),
               InvalidArgument);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  for (auto mode : {Mode::train, Mode::eval}) {
    auto x = random_tensor({3, 2, 4, 3}, 51, true, -2.0, 2.0);
    auto gamma = random_tensor({1, 2, 1, 1}, 52, true, 0.5, 1.5);
    auto beta = random_tensor({1, 2, 1, 1}, 53);
    std::vector<double> rm{0.1, -0.2}, rv{0.9, 1.3};
    auto rep = grad_check(
        [&] {
          std::vector<double> m = rm, v = rv;  // keep eval statistics fixed across probes
          return probe(batchnorm2d(x, gamma, beta, std::span(m), std::span(v), mode));
        },
        {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    EXPECT_LT(rep.max_rel_error(), 1e-3);
  }
}

TEST(Elementwise, Relu) {
  auto y = relu(T::from({1, 1, 1, 3}, {-1.0, 2.0, 0.0}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_EQ(y.data()[1], 2.0);
  EXPECT_EQ(y.data()[2], 0.0);
  auto x = random_tensor({2, 2, 3, 3}, 61);
  EXPECT_LT(grad_check([&] { return probe(relu(x)); }, {{"x", x}}).max_rel_error(), 1e-4);
}

TEST(Elementwise, AddConcatSliceUpsampleGradients) {
  auto a = random_tensor({2, 2, 3, 4}, 71);
  auto b = random_tensor({2, 2, 3, 4}, 72);
  auto c = random_tensor({2, 3, 3, 4}, 73);
  EXPECT_LT(grad_check([&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}}).max_rel_error(), 1e-4);
  EXPECT_LT(grad_check([&] { return probe(concat_channels(a, c)); }, {{"a", a}, {"c", c}}).max_rel_error(), 1e-4);
  EXPECT_LT(grad_check([&] { return probe(slice_channels(c, 1, 2)); }, {{"c", c}}).max_rel_error(), 1e-4);
  EXPECT_LT(grad_check([&] { return probe(upsample_nearest2x(a)); }, {{"a", a}}).max_rel_error(), 1e-4);
  EXPECT_THROW(add(a, c), ShapeError);
  EXPECT_THROW(concat_channels(a, random_tensor({2, 2, 3, 5}, 74)), ShapeError);
}

TEST(Elementwise, ConcatThenSliceRecoversInputsExactly) {
  auto a = random_tensor({3, 2, 4, 5}, 81);
  auto b = random_tensor({3, 5, 4, 5}, 82);
  auto cat = concat_channels(a, b);
  auto ra = slice_channels(cat, 0, 2);
  auto rb = slice_channels(cat, 2, 5);
  ASSERT_EQ(ra.shape(), a.shape());
  ASSERT_EQ(rb.shape(), b.shape());
  EXPECT_TRUE(std::equal(ra.data().begin(), ra.data().end(), a.data().begin()));
  EXPECT_TRUE(std::equal(rb.data().begin(), rb.data().end(), b.data().begin()));
}

TEST(MseLoss, ZeroForIdenticalInputs) {
  auto x = random_tensor({2, 1, 4, 4}, 91);
  auto loss = mse_loss(x, x.detach_copy());
  EXPECT_EQ(loss.item(), 0.0);
  backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(MseLoss, GradientIsTwiceResidualOverCount) {
  auto p = random_tensor({2, 1, 3, 5}, 92);
  auto t = random_tensor({2, 1, 3, 5}, 93, false);
  const double nm = 2.0 * 15.0;
  backward(mse_loss(p, t));
  for (std::size_t i = 0; i < p.numel(); ++i)
    EXPECT_NEAR(p.grad()[i], 2.0 * (p.data()[i] - t.data()[i]) / nm, 1e-15);
  auto rep = grad_check([&] { return mse_loss(p, t); }, {{"p", p}});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
  EXPECT_THROW(mse_loss(p, random_tensor({2, 1, 5, 3}, 94)), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  auto x = random_tensor({1, 2, 3, 3}, 101);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, FanOutAccumulates) {
  auto x = random_tensor({1, 1, 2, 2}, 102);
  backward(sum(add(x, x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalarAndReuse) {
  auto x = random_tensor({1, 1, 2, 2}, 103);
  EXPECT_THROW(backward(relu(x)), GraphError);
  auto loss = sum(relu(x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, VisitsEveryNodeExactlyOnce) {
  auto x = random_tensor({1, 2, 4, 4}, 104);
  auto w = random_tensor({2, 2, 3, 3}, 105);
  auto b = random_tensor({1, 2, 1, 1}, 106);
  auto h = relu(conv2d(x, w, b, 1, 1));
  auto branch1 = add(h, x);
  auto branch2 = conv2d(h, w, b, 1, 1);
  auto joined = add(branch1, branch2);  // diamond: h feeds both branches
  auto loss = sum(joined);
  std::vector<T> interior{h, branch1, branch2, joined, loss};
  const std::size_t ran = backward(loss);
  EXPECT_EQ(ran, 1u /*conv*/ + 1 /*relu*/ + 1 + 1 + 1 + 1 /*sum*/);
  for (auto& t : interior) EXPECT_EQ(t.backward_visits(), 1u);
}

TEST(Backward, ForwardIsDeterministic) {
  auto x = random_tensor({2, 3, 6, 6}, 107, false);
  auto w = random_tensor({4, 3, 3, 3}, 108, false);
  auto b = random_tensor({1, 4, 1, 1}, 109, false);
  auto y1 = conv2d(x, w, b, 2, 1);
  auto y2 = conv2d(x, w, b, 2, 1);
  EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto x = random_tensor({1, 1, 2, 2}, 110);
  NoGradGuard guard;
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(y), GraphError);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  auto w = T::from({1, 1, 1, 4}, {0.0, 1.0, -2.0, 5.0}, true);
  w.mutable_grad()[0] = 3.0;
  w.mutable_grad()[1] = -0.01;
  w.mutable_grad()[2] = 1e3;
  w.mutable_grad()[3] = -7.0;
  std::vector<T> params{w};
  AdamState st;
  st.lr = 0.05;
  const std::vector<double> before(w.data().begin(), w.data().end());
  adam_step(params, st);
  const double sign[] = {1, -1, 1, -1};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(before[i] - w.data()[i], 0.05 * sign[i], 1e-6);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto w = random_tensor({1, 1, 3, 3}, 111);
  w.mutable_grad();  // allocated, all zero
  std::vector<T> params{w};
  const std::vector<double> before(w.data().begin(), w.data().end());
  AdamState st;
  st.lr = 0.1;
  for (int i = 0; i < 5; ++i) adam_step(params, st);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), w.data().begin()));
}

TEST(Adam, MinimisesQuadraticLikeScalarSimulation) {
  // Independent scalar re-derivation of the Adam recurrence.
  double ws = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2.0 * ws;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ws -= 0.1 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
  }
  auto w = T::full({1, 1, 1, 1}, 1.0, true);
  std::vector<T> params{w};
  AdamState st;
  st.lr = 0.1;
  for (int t = 0; t < 100; ++t) {
    w.zero_grad();
    backward(mse_loss(w, T::zeros({1, 1, 1, 1})));  // d/dw w^2 = 2w
    adam_step(params, st);
  }
  EXPECT_LT(std::abs(w.item()), 0.1);
  EXPECT_NEAR(w.item(), ws, 1e-12);
}
