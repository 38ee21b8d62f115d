#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "marginwb/advdir.hpp"

using namespace mw;

namespace {

PcaModel rotated_pca(std::uint64_t seed, Eigen::Index n) {
  std::mt19937_64 rng(seed);
  Eigen::HouseholderQR<Matrix> qr(mwtest::random_matrix(rng, n, n));
  PcaModel p;
  p.components = (qr.householderQ() * Matrix::Identity(n, n)).transpose();
  p.mean = mwtest::random_vector(rng, n);
  p.explained_variance = Vector::LinSpaced(n, double(n), 1.0);
  p.explained_ratio = p.explained_variance / p.explained_variance.sum();
  return p;
}

}  // namespace

TEST(AdvDir, SingleDirection) {
  const auto p = rotated_pca(1, 6);
  std::mt19937_64 rng(2);
  std::vector<Vector> xs, bs;
  for (int k = 0; k < 10; ++k) {
    const Vector x = mwtest::random_vector(rng, 6);
    xs.push_back(x);
    bs.push_back(x + (0.5 + k) * p.components.row(2).transpose());
  }
  const auto s = adv_directions(p, xs, bs);
  EXPECT_NEAR(s.p_share[2], 1.0, 1e-12);
  EXPECT_NEAR(s.p_share.sum(), 1.0, 1e-12);
  EXPECT_NEAR(s.b_adv.col(2).minCoeff(), 1.0, 1e-12);
}

TEST(AdvDir, EvenSplit) {
  const auto p = rotated_pca(3, 4);
  std::vector<Vector> xs, bs;
  for (int k = 0; k < 5; ++k) {
    const Vector x = Vector::Constant(4, double(k));
    xs.push_back(x);
    const double sgn = k % 2 ? 1.0 : -1.0;
    bs.push_back(x + (k + 1.0) * (p.components.row(0) + sgn * p.components.row(3)).transpose());
  }
  const auto s = adv_directions(p, xs, bs);
  EXPECT_NEAR(s.p_share[0], 0.5, 1e-12);
  EXPECT_NEAR(s.p_share[3], 0.5, 1e-12);
}

TEST(AdvDir, RandomMatchesColumnSums) {
  const auto p = rotated_pca(4, 7);
  std::mt19937_64 rng(5);
  std::vector<Vector> xs, bs;
  Matrix rows(30, 7);
  for (int k = 0; k < 30; ++k) {
    xs.push_back(mwtest::random_vector(rng, 7));
    bs.push_back(mwtest::random_vector(rng, 7));
    Vector beta(7);
    for (int c = 0; c < 7; ++c) beta[c] = std::abs(p.components.row(c).dot(xs.back() - bs.back()));
    rows.row(k) = beta.transpose() / beta.maxCoeff();
  }
  Vector expect(7);
  double total = 0;
  for (int c = 0; c < 7; ++c) total += (expect[c] = rows.col(c).sum());
  expect /= total;
  const auto s = adv_directions(p, xs, bs);
  EXPECT_LE((s.p_share - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(s.p_share.sum(), 1.0, 1e-10);
  for (Eigen::Index k = 1; k < 7; ++k) EXPECT_GE(s.cumulative[k], s.cumulative[k - 1]);
  EXPECT_NEAR(s.cumulative[6], 1.0, 1e-12);

  std::vector<Vector> xs2 = xs, bs2 = bs;
  std::reverse(xs2.begin(), xs2.end());
  std::reverse(bs2.begin(), bs2.end());
  EXPECT_LE((adv_directions(p, xs2, bs2).p_share - s.p_share).norm(), 1e-12);
  std::vector<Vector> bs3;
  for (std::size_t k = 0; k < xs.size(); ++k) bs3.push_back(xs[k] + 3.7 * (bs[k] - xs[k]));
  EXPECT_LE((adv_directions(p, xs, bs3).p_share - s.p_share).norm(), 1e-12);
}

TEST(AdvDir, ZeroRowsDropped) {
  const auto p = rotated_pca(6, 3);
  const Vector x = Vector::Ones(3);
  const auto s = adv_directions(p, {x, x}, {x, Vector(x + p.components.row(1).transpose())});
  EXPECT_EQ(s.dropped, 1u);
  EXPECT_EQ(s.b_adv.rows(), 1);
  EXPECT_THROW(adv_directions(p, {x}, {x}), Error);
  EXPECT_THROW(adv_directions(p, {x}, {}), Error);
}

TEST(AdvDir, CumulativeAndMarkers) {
  EXPECT_EQ(cumulative_share((Vector(3) << 1, 0, 0).finished()), Vector::Ones(3));
  const Vector c = cumulative_share(Vector::Constant(4, 0.25));
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(c[k], (k + 1) / 4.0, 1e-15);
  const auto m = variance_markers((Vector(3) << 0.5, 0.3, 0.2).finished());
  EXPECT_EQ(m.at_70, 2);
  EXPECT_EQ(m.at_99, 3);
}
