#pragma once

// Dense feedforward classifier: forward passes, logit-difference gradients
// with respect to any layer's activations, and weight initialisation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "marginwb/error.hpp"
#include "marginwb/rng.hpp"

namespace mw {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Activation { ReLU, None };

struct DenseLayer {
  Matrix weights;  // out_width x in_width
  Vector bias;     // out_width
  Activation activation = Activation::None;

  Eigen::Index in_width() const { return weights.cols(); }
  Eigen::Index out_width() const { return weights.rows(); }
};

enum class NormScheme { None, ZNorm, MinMax };

inline const char* to_string(NormScheme s) {
  switch (s) {
    case NormScheme::None: return "none";
    case NormScheme::ZNorm: return "znorm";
    case NormScheme::MinMax: return "minmax";
  }
  return "none";
}

inline NormScheme parse_norm_scheme(const std::string& s) {
  if (s == "none") return NormScheme::None;
  if (s == "znorm") return NormScheme::ZNorm;
  if (s == "minmax") return NormScheme::MinMax;
  fail(ErrorKind::Config, "unknown normalization scheme '" + s + "'");
}

/// Maps raw features into model space: z = (x - offset) / scale.
/// lower/upper are the feature bounds in model space and define the input
/// search box for margin searches.
struct NormalizationMeta {
  NormScheme scheme = NormScheme::None;
  Vector offsets;
  Vector scales;
  Vector lower;
  Vector upper;

  static NormalizationMeta identity(Eigen::Index dim, double lo, double hi) {
    NormalizationMeta m;
    m.offsets = Vector::Zero(dim);
    m.scales = Vector::Ones(dim);
    m.lower = Vector::Constant(dim, lo);
    m.upper = Vector::Constant(dim, hi);
    return m;
  }

  Vector apply(const Vector& raw) const {
    if (scheme == NormScheme::None) return raw;
    return ((raw - offsets).array() / scales.array()).matrix();
  }
  Vector invert(const Vector& z) const {
    if (scheme == NormScheme::None) return z;
    return (z.array() * scales.array() + offsets.array()).matrix();
  }
};

class Network {
 public:
  Network(std::vector<DenseLayer> layers, NormalizationMeta norm)
      : layers_(std::move(layers)), norm_(std::move(norm)) {
    require(!layers_.empty(), ErrorKind::Domain, "network needs at least one layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& l = layers_[k];
      require(l.bias.size() == l.out_width(), ErrorKind::Shape,
              "layer " + std::to_string(k) + ": bias length does not match weight rows");
      require(l.weights.allFinite() && l.bias.allFinite(), ErrorKind::Domain,
              "layer " + std::to_string(k) + ": non-finite parameters");
      if (k > 0) {
        require(layers_[k - 1].out_width() == l.in_width(), ErrorKind::Shape,
                "layer " + std::to_string(k) + ": input width does not chain");
      }
    }
    require(layers_.back().activation == Activation::None, ErrorKind::Domain,
            "final layer must emit raw logits");
    require(num_classes() >= 2, ErrorKind::Domain, "classifier needs at least two classes");
    const auto n = input_dim();
    if (norm_.offsets.size() == 0) norm_.offsets = Vector::Zero(n);
    if (norm_.scales.size() == 0) norm_.scales = Vector::Ones(n);
    require(norm_.offsets.size() == n && norm_.scales.size() == n, ErrorKind::Shape,
            "normalization offsets/scales must match input_dim");
    if (norm_.lower.size() != 0 || norm_.upper.size() != 0) {
      require(norm_.lower.size() == n && norm_.upper.size() == n, ErrorKind::Shape,
              "normalization bounds must match input_dim");
      require((norm_.lower.array() < norm_.upper.array()).all(), ErrorKind::Domain,
              "normalization bounds need lower < upper");
    }
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  const NormalizationMeta& norm_meta() const { return norm_; }
  std::size_t depth() const { return layers_.size(); }
  Eigen::Index input_dim() const { return layers_.front().in_width(); }
  Eigen::Index num_classes() const { return layers_.back().out_width(); }
  bool has_bounds() const { return norm_.lower.size() == input_dim(); }

  /// Width of the activation vector x^layer (layer 0 is the input).
  Eigen::Index width_at(std::size_t layer) const {
    require(layer <= layers_.size(), ErrorKind::Domain, "layer index out of range");
    return layer == 0 ? input_dim() : layers_[layer - 1].out_width();
  }

 private:
  std::vector<DenseLayer> layers_;
  NormalizationMeta norm_;
};

struct Activations {
  std::vector<Vector> per_layer;  // x^0 (input) .. x^L (logits)

  const Vector& logits() const { return per_layer.back(); }
};

namespace detail {

inline void apply_activation(Activation act, Eigen::Ref<Vector> v) {
  if (act == Activation::ReLU) v = v.cwiseMax(0.0);
}

inline void check_layer_input(const Network& net, std::size_t layer, const Vector& activ) {
  require(layer < net.depth(), ErrorKind::Domain,
          "layer index " + std::to_string(layer) + " must be below depth " +
              std::to_string(net.depth()));
  require(activ.size() == net.width_at(layer), ErrorKind::Shape,
          "activation length " + std::to_string(activ.size()) + " != layer width " +
              std::to_string(net.width_at(layer)));
}

}  // namespace detail

inline Activations forward(const Network& net, const Vector& x) {
  require(x.size() == net.input_dim(), ErrorKind::Shape,
          "input length " + std::to_string(x.size()) + " != input_dim " +
              std::to_string(net.input_dim()));
  require(x.allFinite(), ErrorKind::Domain, "input has non-finite entries");
  Activations out;
  out.per_layer.reserve(net.depth() + 1);
  out.per_layer.push_back(x);
  for (const auto& l : net.layers()) {
    Vector z = l.weights * out.per_layer.back() + l.bias;
    detail::apply_activation(l.activation, z);
    out.per_layer.push_back(std::move(z));
  }
  return out;
}

/// Logits of the network suffix that starts after activation layer `layer`.
inline Vector forward_from(const Network& net, std::size_t layer, const Vector& activ) {
  detail::check_layer_input(net, layer, activ);
  Vector a = activ;
  for (std::size_t k = layer; k < net.depth(); ++k) {
    const auto& l = net.layers()[k];
    Vector z = l.weights * a + l.bias;
    detail::apply_activation(l.activation, z);
    a = std::move(z);
  }
  return a;
}

/// Ties go to the lowest index.
inline Eigen::Index argmax_index(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

/// Highest-scoring class other than `skip`.
inline Eigen::Index argmax_excluding(const Vector& v, Eigen::Index skip) {
  Eigen::Index best = -1;
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (k == skip) continue;
    if (best < 0 || v[k] > v[best]) best = k;
  }
  return best;
}

inline Eigen::Index predict(const Network& net, const Vector& x) {
  return argmax_index(forward(net, x).logits());
}

/// Logits plus their Jacobian (num_classes x width) with respect to x^layer.
struct LogitJacobian {
  Vector logits;
  Matrix jacobian;
};

/// Reverse-mode differentiation through the suffix. The ReLU derivative is
/// taken as 0 at exactly 0.
inline LogitJacobian logit_jacobian(const Network& net, std::size_t layer, const Vector& activ) {
  detail::check_layer_input(net, layer, activ);
  const auto& layers = net.layers();
  std::vector<Vector> pre;  // pre-activations of layers layer..L-1
  pre.reserve(layers.size() - layer);
  Vector a = activ;
  for (std::size_t k = layer; k < layers.size(); ++k) {
    Vector z = layers[k].weights * a + layers[k].bias;
    pre.push_back(z);
    detail::apply_activation(layers[k].activation, z);
    a = std::move(z);
  }
  Matrix g = Matrix::Identity(net.num_classes(), net.num_classes());
  for (std::size_t k = layers.size(); k-- > layer;) {
    const auto& l = layers[k];
    if (l.activation == Activation::ReLU) {
      const Vector& z = pre[k - layer];
      for (Eigen::Index c = 0; c < z.size(); ++c)
        if (!(z[c] > 0.0)) g.col(c).setZero();
    }
    g = g * l.weights;
  }
  return {std::move(a), std::move(g)};
}

struct LogitDiff {
  double value = 0.0;  // f_i - f_j
  Vector gradient;     // grad f_i - grad f_j with respect to x^layer
};

inline LogitDiff logit_diff_grad(const Network& net, std::size_t layer, const Vector& activ,
                                 Eigen::Index i, Eigen::Index j) {
  const auto c = net.num_classes();
  require(i >= 0 && i < c && j >= 0 && j < c, ErrorKind::Domain, "class index out of range");
  require(i != j, ErrorKind::Domain, "logit difference needs two distinct classes");
  detail::check_layer_input(net, layer, activ);
  const auto& layers = net.layers();
  std::vector<Vector> pre;
  pre.reserve(layers.size() - layer);
  Vector a = activ;
  for (std::size_t k = layer; k < layers.size(); ++k) {
    Vector z = layers[k].weights * a + layers[k].bias;
    pre.push_back(z);
    detail::apply_activation(layers[k].activation, z);
    a = std::move(z);
  }
  Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(c);
  g[i] = 1.0;
  g[j] = -1.0;
  for (std::size_t k = layers.size(); k-- > layer;) {
    const auto& l = layers[k];
    if (l.activation == Activation::ReLU) {
      const Vector& z = pre[k - layer];
      for (Eigen::Index n = 0; n < z.size(); ++n)
        if (!(z[n] > 0.0)) g[n] = 0.0;
    }
    g = g * l.weights;
  }
  return {a[i] - a[j], g.transpose()};
}

/// Fresh MLP: hidden ReLU layers of the given widths plus a linear head.
/// Weights and biases are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Network init_network(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                            Eigen::Index num_classes, std::uint64_t seed,
                            NormalizationMeta norm = {}) {
  require(input_dim > 0, ErrorKind::Domain, "input_dim must be positive");
  Rng rng = make_rng(seed);
  std::vector<DenseLayer> layers;
  Eigen::Index fan_in = input_dim;
  auto make = [&](Eigen::Index out, Activation act) {
    require(out > 0, ErrorKind::Domain, "layer widths must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer l;
    l.weights.resize(out, fan_in);
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < fan_in; ++c) l.weights(r, c) = u(rng);
    l.bias.resize(out);
    for (Eigen::Index r = 0; r < out; ++r) l.bias[r] = u(rng);
    l.activation = act;
    layers.push_back(std::move(l));
    fan_in = out;
  };
  for (auto w : hidden) make(w, Activation::ReLU);
  make(num_classes, Activation::None);
  if (norm.offsets.size() == 0) {
    norm.offsets = Vector::Zero(input_dim);
    norm.scales = Vector::Ones(input_dim);
  }
  return Network(std::move(layers), std::move(norm));
}

}  // namespace mw
