#pragma once

// Shared builders and independent reference computations for the tests.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "marginwb/nnet.hpp"

namespace mwtest {

using mw::Matrix;
using mw::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index a = 0; a < r; ++a)
    for (Eigen::Index b = 0; b < c; ++b) m(a, b) = g(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  return random_matrix(rng, n, 1, scale).col(0);
}

/// Single affine layer W x + b, no bounds.
inline mw::Network affine_net(const Matrix& w, const Vector& b) {
  mw::DenseLayer l{w, b, mw::Activation::None};
  return mw::Network({l}, mw::NormalizationMeta{});
}

inline mw::Network random_affine(std::mt19937_64& rng, Eigen::Index dim, Eigen::Index classes) {
  return affine_net(random_matrix(rng, classes, dim), random_vector(rng, classes));
}

inline mw::Network random_relu_net(std::mt19937_64& rng, Eigen::Index dim,
                                   const std::vector<Eigen::Index>& hidden, Eigen::Index classes) {
  std::vector<mw::DenseLayer> layers;
  Eigen::Index in = dim;
  for (auto w : hidden) {
    layers.push_back({random_matrix(rng, w, in, 1.0 / std::sqrt(double(in))), random_vector(rng, w, 0.5),
                      mw::Activation::ReLU});
    in = w;
  }
  layers.push_back({random_matrix(rng, classes, in, 1.0 / std::sqrt(double(in))),
                    random_vector(rng, classes, 0.5), mw::Activation::None});
  return mw::Network(std::move(layers), mw::NormalizationMeta{});
}

/// Element-by-element forward pass written with plain loops.
inline std::vector<double> loop_forward(const mw::Network& net, const std::vector<double>& x) {
  std::vector<double> a = x;
  for (const auto& l : net.layers()) {
    std::vector<double> out(static_cast<std::size_t>(l.weights.rows()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      double acc = l.bias[r];
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) acc += l.weights(r, c) * a[static_cast<std::size_t>(c)];
      if (l.activation == mw::Activation::ReLU && acc < 0) acc = 0;
      out[static_cast<std::size_t>(r)] = acc;
    }
    a = std::move(out);
  }
  return a;
}

/// Smallest |pre-activation| seen along the forward pass.
inline double min_abs_preactivation(const mw::Network& net, const Vector& x) {
  double best = std::numeric_limits<double>::infinity();
  Vector a = x;
  for (const auto& l : net.layers()) {
    Vector z = l.weights * a + l.bias;
    if (l.activation == mw::Activation::ReLU) {
      best = std::min(best, z.cwiseAbs().minCoeff());
      a = z.cwiseMax(0.0);
    } else {
      a = z;
    }
  }
  return best;
}

/// Exact distance to the decision region boundary of an affine classifier:
/// the region of class i is a polytope, so this is the nearest of its facets.
inline double affine_margin(const mw::Network& net, const Vector& x) {
  const auto& l = net.layers().front();
  const Vector f = l.weights * x + l.bias;
  Eigen::Index i = 0;
  f.maxCoeff(&i);
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < f.size(); ++j) {
    if (j == i) continue;
    best = std::min(best, (f[i] - f[j]) / (l.weights.row(i) - l.weights.row(j)).norm());
  }
  return best;
}

}  // namespace mwtest
