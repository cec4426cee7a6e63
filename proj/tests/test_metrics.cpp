#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "lstsr/metrics.hpp"
#include "support.hpp"

using namespace lstsr;
using lstsr::testing::random_field;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Independent oracles: long double, row/column double loop, raw-moment form.
long double oracle_mse(const Field& a, const Field& b) {
  long double s = 0.0L;
  for (std::size_t r = 0; r < a.height; ++r)
    for (std::size_t c = 0; c < a.width; ++c) {
      const long double d = static_cast<long double>(a.at(r, c)) - b.at(r, c);
      s += d * d;
    }
  return s / static_cast<long double>(a.width * a.height);
}

long double oracle_dr(const Field& f) {
  long double lo = f.at(0, 0), hi = lo;
  for (std::size_t r = 0; r < f.height; ++r)
    for (std::size_t c = 0; c < f.width; ++c) {
      lo = std::min<long double>(lo, f.at(r, c));
      hi = std::max<long double>(hi, f.at(r, c));
    }
  return hi - lo;
}

long double oracle_ssim(const Field& g, const Field& s) {
  const long double n = static_cast<long double>(g.size());
  long double sg = 0, ss = 0, sgg = 0, sss = 0, sgs = 0;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c) {
      const long double x = g.at(r, c), y = s.at(r, c);
      sg += x;
      ss += y;
      sgg += x * x;
      sss += y * y;
      sgs += x * y;
    }
  const long double mg = sg / n, ms = ss / n;
  const long double vg = sgg / n - mg * mg, vs = sss / n - ms * ms, cv = sgs / n - mg * ms;
  const long double dr = oracle_dr(g);
  const long double c1 = (0.01L * dr) * (0.01L * dr), c2 = (0.03L * dr) * (0.03L * dr);
  return (2 * mg * ms + c1) * (2 * cv + c2) / ((mg * mg + ms * ms + c1) * (vg + vs + c2));
}

Field perturbed(const Field& f, std::uint64_t seed, double amp) {
  Field noise = random_field(f.width, f.height, seed, -amp, amp);
  Field out = f;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += noise.values[i];
  return out;
}

}  // namespace

TEST(Rmse, IdentityOffsetAndSymmetry) {
  const Field g = random_field(16, 16, 1);
  EXPECT_EQ(rmse(g, g), 0.0);
  Field s = g;
  for (auto& v : s.values) v += 0.5;
  EXPECT_NEAR(rmse(g, s), 0.5, 1e-12);
  const Field t = perturbed(g, 2, 3.0);
  EXPECT_EQ(rmse(g, t), rmse(t, g));
  EXPECT_THROW(rmse(g, Field(8, 8, 1.0)), ShapeError);
}

TEST(Rmse, MatchesOracleOnRandomPairs) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const Field g = random_field(24, 20, seed);
    const Field s = perturbed(g, seed + 100, 2.0);
    EXPECT_NEAR(rmse(g, s), static_cast<double>(std::sqrt(oracle_mse(g, s))), 1e-12);
  }
}

TEST(Psnr, PowersOfTen) {
  Field g(10, 10, 0.0);
  g.at(0, 0) = 100.0;  // DR = 100
  Field s = g;
  for (auto& v : s.values) v += 1.0;  // RMSE = 1
  EXPECT_NEAR(psnr(g, s), 40.0, 1e-12);
}

TEST(Psnr, InfinitiesAndDegenerateFlag) {
  const Field g = random_field(8, 8, 4);
  EXPECT_EQ(psnr(g, g), kInf);
  const Field flat(8, 8, 300.0);
  Field off = flat;
  off.values[0] += 1.0;
  EXPECT_EQ(psnr(flat, off), -kInf);
  const auto rep = aggregate({evaluate_pair(flat, off, "a"), evaluate_pair(g, perturbed(g, 5, 1.0), "b")});
  EXPECT_EQ(rep.degenerate, 1u);
}

TEST(Psnr, StrictlyDecreasingInRmseAndAsymmetric) {
  const Field g = random_field(16, 16, 6);
  double prev = kInf;
  for (double amp : {0.01, 0.1, 0.5, 1.0, 4.0}) {
    Field s = g;
    for (auto& v : s.values) v += amp;
    const double p = psnr(g, s);
    EXPECT_LT(p, prev);
    prev = p;
  }
  // Same error, different dynamic range on each side.
  Field a(4, 4, 300.0), b(4, 4, 300.0);
  a.at(0, 0) = 310.0;
  b.at(1, 1) = 301.0;
  EXPECT_NE(psnr(a, b), psnr(b, a));
}

TEST(Ssim, SelfSimilarityIsOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Field g = random_field(20, 20, seed);
    EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
  }
}

TEST(Ssim, SignFlippedFluctuationsGoNegative) {
  const Field g = random_field(32, 32, 7, -5.0, 5.0);
  double mean = 0.0;
  for (double v : g.values) mean += v;
  mean /= static_cast<double>(g.size());
  Field s = g;
  for (auto& v : s.values) v = -v + 2.0 * mean;
  const double got = ssim(g, s);
  EXPECT_LT(got, 0.0);
  EXPECT_NEAR(got, static_cast<double>(oracle_ssim(g, s)), 1e-10);
}

TEST(Ssim, MatchesOracleAndStaysBounded) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const Field g = random_field(16, 24, seed);
    const Field s = perturbed(g, seed + 50, 10.0);
    const double got = ssim(g, s);
    EXPECT_NEAR(got, static_cast<double>(oracle_ssim(g, s)), 1e-10);
    EXPECT_LE(std::abs(got), 1.0 + 1e-12);
  }
}

TEST(EvaluateSet, SingleIdenticalPair) {
  const Field g = random_field(8, 8, 3);
  const auto rep = evaluate_set({{g, g}});
  EXPECT_EQ(rep.n_images, 1u);
  EXPECT_EQ(rep.rmse, 0.0);
  EXPECT_EQ(rep.psnr, kInf);
  EXPECT_NEAR(rep.ssim, 1.0, 1e-12);
}

TEST(EvaluateSet, TwoImageAggregation) {
  const Field g1 = random_field(8, 8, 10), g2 = random_field(8, 8, 11);
  const Field s1 = perturbed(g1, 12, 1.0), s2 = perturbed(g2, 13, 3.0);
  const auto rep = evaluate_set({{g1, s1}, {g2, s2}});
  EXPECT_EQ(rep.n_images, 2u);
  EXPECT_NEAR(rep.psnr, (psnr(g1, s1) + psnr(g2, s2)) / 2.0, 1e-12);
  EXPECT_NEAR(rep.ssim, (ssim(g1, s1) + ssim(g2, s2)) / 2.0, 1e-12);
  const double pooled = (static_cast<double>(oracle_mse(g1, s1)) + static_cast<double>(oracle_mse(g2, s2))) / 2.0;
  EXPECT_NEAR(rep.rmse, std::sqrt(pooled), 1e-12);
  EXPECT_THROW(evaluate_set({}), InvalidArgument);
}

TEST(EvaluateSet, PoolsRmseOverPixelsForUnequalSizes) {
  const Field g1 = random_field(4, 4, 20), g2 = random_field(8, 8, 21);
  const Field s1 = perturbed(g1, 22, 1.0), s2 = perturbed(g2, 23, 1.0);
  const auto rep = evaluate_set({{g1, s1}, {g2, s2}});
  const long double pooled = (oracle_mse(g1, s1) * 16 + oracle_mse(g2, s2) * 64) / 80;
  EXPECT_NEAR(rep.rmse, static_cast<double>(std::sqrt(pooled)), 1e-12);
}

TEST(Csv, HeaderRowsAndDotDecimal) {
  const Field g = random_field(8, 8, 30);
  const auto rep = evaluate_set({{g, perturbed(g, 31, 1.0)}, {g, g}});
  std::ostringstream os;
  write_csv(rep, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "id,rmse,psnr,ssim,dr");
  std::getline(is, line);
  EXPECT_EQ(line.substr(0, 2), "0,");
  EXPECT_NE(line.find('.'), std::string::npos);
  std::getline(is, line);
  EXPECT_NE(line.find(",inf,"), std::string::npos);
  EXPECT_FALSE(std::getline(is, line));
}

TEST(FormatNumber, RoundTripsAndSpecials) {
  EXPECT_EQ(format_number(0.0), "0");
  EXPECT_EQ(format_number(kInf), "inf");
  EXPECT_EQ(format_number(-kInf), "-inf");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_EQ(format_number(0.25), "0.25");
}
