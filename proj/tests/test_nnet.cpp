#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "marginwb/data.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/train.hpp"

using namespace mw;
using mwtest::random_relu_net;

TEST(Network, IdentityForward) {
  const auto net = mwtest::affine_net(Matrix::Identity(2, 2), Vector::Zero(2));
  const Vector x = (Vector(2) << 1, 2).finished();
  EXPECT_EQ(forward(net, x).logits(), x);
}

TEST(Network, ZeroWeightsGiveZeroLogits) {
  std::vector<DenseLayer> layers{{Matrix::Zero(4, 3), Vector::Zero(4), Activation::ReLU},
                                 {Matrix::Zero(2, 4), Vector::Zero(2), Activation::None}};
  Network net(layers, {});
  EXPECT_EQ(forward(net, Vector::Constant(3, 7.0)).logits(), Vector::Zero(2));
}

TEST(Network, ForwardMatchesLoopOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = random_relu_net(rng, 5, {7}, 3);
    const Vector x = mwtest::random_vector(rng, 5);
    const auto ref = mwtest::loop_forward(net, std::vector<double>(x.data(), x.data() + x.size()));
    const Vector got = forward(net, x).logits();
    for (Eigen::Index k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], ref[static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(Network, RejectsBadShapes) {
  std::vector<DenseLayer> chain{{Matrix::Zero(4, 3), Vector::Zero(4), Activation::ReLU},
                                {Matrix::Zero(2, 5), Vector::Zero(2), Activation::None}};
  EXPECT_THROW(Network(chain, {}), Error);
  std::vector<DenseLayer> relu_head{{Matrix::Zero(2, 3), Vector::Zero(2), Activation::ReLU}};
  EXPECT_THROW(Network(relu_head, {}), Error);
  const auto net = mwtest::affine_net(Matrix::Identity(2, 2), Vector::Zero(2));
  try {
    forward(net, Vector::Zero(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
}

TEST(Network, RejectsInvertedBounds) {
  auto meta = NormalizationMeta::identity(2, 1.0, 0.0);
  std::vector<DenseLayer> layers{{Matrix::Identity(2, 2), Vector::Zero(2), Activation::None}};
  EXPECT_THROW(Network(layers, meta), Error);
}

TEST(Predict, TieGoesToLowerIndex) {
  EXPECT_EQ(argmax_index((Vector(2) << 0.1, 0.9).finished()), 1);
  EXPECT_EQ(argmax_index((Vector(2) << 0.5, 0.5).finished()), 0);
  std::mt19937_64 rng(3);
  const auto net = random_relu_net(rng, 4, {6, 6}, 5);
  for (int k = 0; k < 20; ++k) {
    const Vector x = mwtest::random_vector(rng, 4);
    Eigen::Index best = 0;
    forward(net, x).logits().maxCoeff(&best);
    EXPECT_EQ(predict(net, x), best);
  }
}

TEST(LogitDiff, LinearCase) {
  Matrix w(2, 2);
  w << 2, 0, 0, 0;
  const auto net = mwtest::affine_net(w, Vector::Zero(2));
  const auto d = logit_diff_grad(net, 0, (Vector(2) << 1, 0).finished(), 0, 1);
  EXPECT_DOUBLE_EQ(d.value, 2.0);
  EXPECT_EQ(d.gradient, (Vector(2) << 2, 0).finished());
  EXPECT_THROW(logit_diff_grad(net, 0, Vector::Zero(2), 1, 1), Error);
  EXPECT_THROW(logit_diff_grad(net, 0, Vector::Zero(2), 0, 2), Error);
}

TEST(LogitDiff, MatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  const double h = 1e-5;
  int checked = 0;
  while (checked < 40) {
    const auto net = random_relu_net(rng, 6, {10, 8}, 4);
    const Vector x = mwtest::random_vector(rng, 6);
    if (mwtest::min_abs_preactivation(net, x) < 1e-3) continue;
    for (std::size_t layer = 0; layer <= 1; ++layer) {
      const Vector a = layer == 0 ? x : forward(net, x).per_layer[1];
      const auto d = logit_diff_grad(net, layer, a, 2, 0);
      for (Eigen::Index k = 0; k < a.size(); ++k) {
        Vector p = a, m = a;
        p[k] += h;
        m[k] -= h;
        const Vector fp = forward_from(net, layer, p), fm = forward_from(net, layer, m);
        const double fd = ((fp[2] - fp[0]) - (fm[2] - fm[0])) / (2 * h);
        EXPECT_NEAR(d.gradient[k], fd, 1e-6);
      }
    }
    ++checked;
  }
}

TEST(LogitJacobian, RowsAgreeWithPairDifferences) {
  std::mt19937_64 rng(8);
  const auto net = random_relu_net(rng, 3, {5}, 3);
  const Vector x = mwtest::random_vector(rng, 3);
  const auto lj = logit_jacobian(net, 0, x);
  const auto d = logit_diff_grad(net, 0, x, 1, 2);
  EXPECT_NEAR(d.value, lj.logits[1] - lj.logits[2], 1e-14);
  EXPECT_LT((d.gradient - (lj.jacobian.row(1) - lj.jacobian.row(2)).transpose()).norm(), 1e-14);
}

TEST(Init, UniformFanInRange) {
  const auto net = init_network(4, {16}, 3, 9);
  EXPECT_LE(net.layers()[0].weights.cwiseAbs().maxCoeff(), 0.5);
  EXPECT_LE(net.layers()[1].weights.cwiseAbs().maxCoeff(), 0.25);
  EXPECT_EQ(net.num_classes(), 3);
}

TEST(Train, SeparableBlobsInterpolate) {
  BlobConfig bc;
  bc.centers = RowMatrix(2, 2);
  *bc.centers << 0, 0, 10, 0;
  bc.spread = 0.5;
  bc.samples_per_class = 50;
  bc.seed = 1;
  const auto ds = gen_blobs(bc);
  TrainConfig tc;
  tc.epochs = 50;
  tc.batch_size = 16;
  tc.seed = 2;
  const auto res = train_sgd(init_network(2, {8}, 2, 3), ds, tc);
  EXPECT_DOUBLE_EQ(res.train_accuracy, 1.0);
}

TEST(Train, ZeroLearningRateKeepsWeights) {
  BlobConfig bc;
  bc.seed = 4;
  const auto ds = gen_blobs(bc);
  const auto init = init_network(2, {8}, 2, 3);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.0;
  const auto res = train_sgd(init, ds, tc);
  for (std::size_t k = 0; k < init.depth(); ++k) {
    EXPECT_EQ(res.net.layers()[k].weights, init.layers()[k].weights);
    EXPECT_EQ(res.net.layers()[k].bias, init.layers()[k].bias);
  }
}

TEST(Train, SameSeedSameWeights) {
  BlobConfig bc;
  bc.classes = 3;
  bc.seed = 6;
  const auto ds = gen_blobs(bc);
  TrainConfig tc;
  tc.epochs = 5;
  tc.seed = 12;
  const auto a = train_sgd(init_network(2, {8, 8}, 3, 1), ds, tc);
  const auto b = train_sgd(init_network(2, {8, 8}, 3, 1), ds, tc);
  for (std::size_t k = 0; k < a.net.depth(); ++k) EXPECT_EQ(a.net.layers()[k].weights, b.net.layers()[k].weights);
}

TEST(Train, DivergenceIsReported) {
  BlobConfig bc;
  bc.seed = 6;
  bc.center_range = 1e6;
  const auto ds = gen_blobs(bc);
  TrainConfig tc;
  tc.epochs = 20;
  tc.learning_rate = 1.0;
  try {
    train_sgd(init_network(2, {8}, 2, 1), ds, tc);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
}
