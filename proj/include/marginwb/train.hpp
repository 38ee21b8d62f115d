#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "marginwb/data.hpp"
#include "marginwb/nnet.hpp"

namespace mw {

struct TrainConfig {
  int epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int lr_decay_every = 5;  // epochs; 0 disables decay
  double lr_decay_factor = 0.99;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Network net;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

inline double accuracy(const Network& net, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index k = 0; k < ds.size(); ++k)
    if (predict(net, ds.sample(k)) == static_cast<Eigen::Index>(ds.labels[static_cast<std::size_t>(k)]))
      ++hit;
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

/// Mini-batch SGD with classical momentum on the mean softmax cross-entropy.
/// No regularisation. Deterministic for a given seed.
inline TrainResult train_sgd(const Network& init, const Dataset& ds, const TrainConfig& cfg) {
  ds.validate();
  require(cfg.batch_size >= 1, ErrorKind::Domain, "batch_size must be >= 1");
  require(cfg.epochs >= 0, ErrorKind::Domain, "epochs must be >= 0");
  require(ds.dim() == init.input_dim(), ErrorKind::Shape, "dataset width != network input_dim");
  require(static_cast<Eigen::Index>(ds.class_count) <= init.num_classes(), ErrorKind::Domain,
          "dataset has more classes than the network outputs");
  require(ds.size() > 0, ErrorKind::Domain, "cannot train on an empty dataset");

  std::vector<DenseLayer> layers = init.layers();
  const std::size_t depth = layers.size();
  std::vector<Matrix> vel_w(depth);
  std::vector<Vector> vel_b(depth);
  for (std::size_t k = 0; k < depth; ++k) {
    vel_w[k] = Matrix::Zero(layers[k].weights.rows(), layers[k].weights.cols());
    vel_b[k] = Vector::Zero(layers[k].bias.size());
  }

  const auto s = static_cast<std::size_t>(ds.size());
  const Eigen::Index classes = init.num_classes();
  std::vector<std::size_t> order(s);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(derive_seed(cfg.seed, "train-shuffle"));
  double lr = cfg.learning_rate;
  double epoch_loss = 0.0;

  std::vector<Matrix> acts(depth + 1);  // columns are samples
  std::vector<Matrix> pre(depth);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0)
      lr *= cfg.lr_decay_factor;
    for (std::size_t k = s; k > 1; --k) {
      std::uniform_int_distribution<std::size_t> pick(0, k - 1);
      std::swap(order[k - 1], order[pick(rng)]);
    }
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < s; start += cfg.batch_size) {
      const std::size_t end = std::min(s, start + cfg.batch_size);
      const auto b = static_cast<Eigen::Index>(end - start);
      acts[0].resize(ds.dim(), b);
      Matrix onehot = Matrix::Zero(classes, b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const auto row = order[start + static_cast<std::size_t>(c)];
        acts[0].col(c) = ds.features.row(static_cast<Eigen::Index>(row)).transpose();
        onehot(ds.labels[row], c) = 1.0;
      }
      for (std::size_t k = 0; k < depth; ++k) {
        pre[k] = (layers[k].weights * acts[k]).colwise() + layers[k].bias;
        acts[k + 1] = layers[k].activation == Activation::ReLU ? Matrix(pre[k].cwiseMax(0.0)) : pre[k];
      }
      // softmax cross-entropy
      Matrix probs = acts[depth];
      for (Eigen::Index c = 0; c < b; ++c) {
        const double mx = probs.col(c).maxCoeff();
        probs.col(c) = (probs.col(c).array() - mx).exp();
        const double z = probs.col(c).sum();
        probs.col(c) /= z;
        for (Eigen::Index r = 0; r < classes; ++r)
          if (onehot(r, c) > 0) epoch_loss -= std::log(std::max(probs(r, c), 1e-300));
      }
      Matrix delta = (probs - onehot) / static_cast<double>(b);
      for (std::size_t k = depth; k-- > 0;) {
        const Matrix grad_w = delta * acts[k].transpose();
        const Vector grad_b = delta.rowwise().sum();
        if (k > 0) {
          delta = layers[k].weights.transpose() * delta;
          if (layers[k - 1].activation == Activation::ReLU)
            delta = delta.cwiseProduct((pre[k - 1].array() > 0.0).cast<double>().matrix());
        }
        vel_w[k] = cfg.momentum * vel_w[k] - lr * grad_w;
        vel_b[k] = cfg.momentum * vel_b[k] - lr * grad_b;
        layers[k].weights += vel_w[k];
        layers[k].bias += vel_b[k];
      }
    }
    epoch_loss /= static_cast<double>(s);
    if (!std::isfinite(epoch_loss))
      fail(ErrorKind::Numerical, "training diverged at epoch " + std::to_string(epoch));
  }
  TrainResult out{Network(std::move(layers), init.norm_meta()), 0.0, epoch_loss};
  out.train_accuracy = accuracy(out.net, ds);
  return out;
}

}  // namespace mw
