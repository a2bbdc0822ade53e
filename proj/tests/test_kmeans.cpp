#include <gtest/gtest.h>

#include "support.hpp"

namespace qamret {
namespace {

using testing::Rng;

Matrix blobs(Rng& rng, const std::vector<std::vector<double>>& centers, std::size_t per, double spread) {
  Matrix m;
  for (std::size_t i = 0; i < per; ++i) {
    for (const auto& c : centers) {
      std::vector<double> p(c);
      for (double& x : p) x += spread * rng.normal();
      m.append_row(p);
    }
  }
  return m;
}

TEST(KMeans, SeparatesWellSpacedBlobs) {
  Rng rng(51);
  const auto pts = blobs(rng, {{0, 0}, {10, 0}, {0, 10}}, 20, 0.3);
  const auto res = kmeans(pts, 3, 100, 7);
  ASSERT_EQ(res.clusters, 3u);
  for (std::size_t i = 0; i < pts.rows(); ++i) EXPECT_EQ(res.assignment[i], res.assignment[i % 3]);
  EXPECT_EQ(res.assignment[0], 0u);
}

TEST(KMeans, DeterministicForSeed) {
  Rng rng(52);
  const auto pts = blobs(rng, {{0, 0, 0}, {1, 1, 1}}, 30, 0.8);
  const auto a = kmeans(pts, 4, 50, 99);
  const auto b = kmeans(pts, 4, 50, 99);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.clusters, b.clusters);
}

TEST(KMeans, KLargerThanPointCount) {
  Matrix pts;
  pts.append_row(std::vector<float>{0, 0});
  pts.append_row(std::vector<float>{1, 0});
  const auto res = kmeans(pts, 5, 10, 0);
  EXPECT_EQ(res.clusters, 2u);
  EXPECT_NE(res.assignment[0], res.assignment[1]);
}

TEST(KMeans, IdenticalPointsCollapseToOneCluster) {
  Matrix pts;
  for (int i = 0; i < 6; ++i) pts.append_row(std::vector<float>{0.5f, 0.5f});
  const auto res = kmeans(pts, 3, 10, 0);
  EXPECT_EQ(res.clusters, 1u);
  for (auto a : res.assignment) EXPECT_EQ(a, 0u);
}

TEST(KMeans, PropertyLabelsCompactAndInRange) {
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = rng.index(1, 40);
    Matrix pts;
    for (std::size_t i = 0; i < n; ++i) pts.append_row(testing::random_unit(rng, 4));
    const std::size_t k = rng.index(1, 10);
    const auto res = kmeans(pts, k, 30, rng.index(0, 1000));
    ASSERT_LE(res.clusters, std::min(k, n));
    ASSERT_GE(res.clusters, 1u);
    std::size_t next = 0;
    for (auto a : res.assignment) {
      ASSERT_LE(a, next);
      if (a == next) ++next;
    }
    ASSERT_EQ(next, res.clusters);
  }
}

TEST(KMeans, RejectsZeroK) {
  Matrix pts;
  pts.append_row(std::vector<float>{1.0f});
  EXPECT_THROW(kmeans(pts, 0, 10, 0), ConfigError);
}

}  // namespace
}  // namespace qamret
