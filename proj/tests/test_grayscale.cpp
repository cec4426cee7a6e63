#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "lstsr/grayscale.hpp"
#include "support.hpp"

using namespace lstsr;
using lstsr::testing::TempDir;

namespace {

RasterGrid grid_of(std::size_t w, std::size_t h, std::vector<float> v) {
  RasterGrid g;
  g.width = w;
  g.height = h;
  g.values = std::move(v);
  return g;
}

}  // namespace

TEST(Grayscale, ConstantGridIsMidGray) {
  const auto bytes = grayscale_bytes(grid_of(3, 2, std::vector<float>(6, 300.0f)));
  for (auto b : bytes) EXPECT_EQ(b, 128);
}

TEST(Grayscale, TwoValuesHitTheStretchEndpoints) {
  const auto bytes = grayscale_bytes(grid_of(2, 2, {290.0f, 310.0f, 310.0f, 290.0f}));
  EXPECT_EQ(bytes, (std::vector<std::uint8_t>{0, 255, 255, 0}));
}

TEST(Grayscale, NodataRendersBlackAndIsIgnoredByStretch) {
  const auto bytes = grayscale_bytes(grid_of(4, 1, {kNodata, 280.0f, 290.0f, 300.0f}));
  EXPECT_EQ(bytes, (std::vector<std::uint8_t>{0, 0, 128, 255}));
}

TEST(Grayscale, PgmFileSizeMatchesHeader) {
  TempDir tmp("gray");
  const auto g = grid_of(5, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  dump_grayscale(g, tmp / "g.pgm");
  std::ifstream is(tmp / "g.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n5 3\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 15);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size()]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
}

TEST(Grayscale, UnwritablePathIsIoError) {
  const auto g = grid_of(1, 1, {1.0f});
  EXPECT_THROW(dump_grayscale(g, "/nonexistent-dir/x.pgm"), IoError);
}
