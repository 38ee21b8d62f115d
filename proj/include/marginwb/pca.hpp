#pragma once

// Principal components of the training features and Kneedle-based choice of
// the number of components.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"

namespace mw {

struct PcaModel {
  Vector mean;                // n
  Matrix components;          // n_components x n, orthonormal rows
  Vector explained_variance;  // nonincreasing
  Vector explained_ratio;     // fraction of total variance per component

  Eigen::Index dim() const { return mean.size(); }
  Eigen::Index count() const { return components.rows(); }

  /// Top-m rows of the component matrix.
  Matrix top(Eigen::Index m) const {
    require(m >= 1 && m <= count(), ErrorKind::Domain,
            "requested " + std::to_string(m) + " components of " + std::to_string(count()));
    return components.topRows(m);
  }
};

inline void check_pca_invariants(const PcaModel& p, double tol = 1e-8) {
  const Matrix gram = p.components * p.components.transpose();
  const double off = (gram - Matrix::Identity(p.count(), p.count())).cwiseAbs().maxCoeff();
  require(off <= tol, ErrorKind::Numerical, "principal components are not orthonormal");
  for (Eigen::Index k = 1; k < p.explained_variance.size(); ++k)
    require(p.explained_variance[k] <= p.explained_variance[k - 1], ErrorKind::Numerical,
            "explained variance is not sorted");
}

/// Eigendecomposition of the sample covariance (divisor s-1). Each component's
/// largest-magnitude entry is made positive so repeated fits agree.
template <typename Derived>
PcaModel fit_pca(const Eigen::MatrixBase<Derived>& features, Eigen::Index n_components) {
  const Eigen::Index s = features.rows();
  const Eigen::Index n = features.cols();
  require(s >= 2, ErrorKind::Domain, "PCA needs at least two samples");
  require(n_components >= 1 && n_components <= std::min(s - 1, n), ErrorKind::Domain,
          "n_components must be in [1, min(s-1, n)]");
  PcaModel p;
  p.mean = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - p.mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(s - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  require(eig.info() == Eigen::Success, ErrorKind::Numerical, "covariance eigendecomposition failed");
  // Eigen returns ascending eigenvalues.
  const Vector& values = eig.eigenvalues();
  const Matrix& vectors = eig.eigenvectors();
  const double total = std::max(values.cwiseMax(0.0).sum(), 0.0);
  p.components.resize(n_components, n);
  p.explained_variance.resize(n_components);
  p.explained_ratio.resize(n_components);
  for (Eigen::Index k = 0; k < n_components; ++k) {
    const Eigen::Index src = n - 1 - k;
    Vector v = vectors.col(src);
    Eigen::Index big = 0;
    for (Eigen::Index c = 1; c < n; ++c)
      if (std::abs(v[c]) > std::abs(v[big]) + 1e-12) big = c;
    if (v[big] < 0) v = -v;
    p.components.row(k) = v.transpose();
    p.explained_variance[k] = std::max(values[src], 0.0);
    p.explained_ratio[k] = total > 0 ? p.explained_variance[k] / total : 0.0;
  }
  return p;
}

inline Vector transform(const PcaModel& p, const Vector& x) {
  require(x.size() == p.dim(), ErrorKind::Shape, "PCA transform: dimension mismatch");
  return p.components * (x - p.mean);
}

inline Vector inverse_transform(const PcaModel& p, const Vector& coords) {
  require(coords.size() == p.count(), ErrorKind::Shape, "PCA inverse_transform: dimension mismatch");
  return p.mean + p.components.transpose() * coords;
}

struct KneedleOptions {
  double sensitivity = 1.0;
  double fallback_ratio = 0.70;
};

struct ElbowChoice {
  Eigen::Index m = 1;            // number of components (1-based knee position)
  std::vector<double> curve;     // log10 explained variance per component
  bool fallback = false;         // true when no knee was found
};

/// Smallest count m whose cumulative share of `values` reaches `threshold`.
inline Eigen::Index components_for_ratio(const Vector& values, double threshold) {
  const double total = values.sum();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    acc += values[k];
    if (acc >= threshold * total - 1e-15) return k + 1;
  }
  return values.size();
}

/// Kneedle over (component index, log10 variance), treating the curve as
/// concave and decreasing. Only interior points are extrema candidates.
inline ElbowChoice select_components_kneedle(const Vector& explained_variance,
                                             const KneedleOptions& opt = {}) {
  const Eigen::Index n = explained_variance.size();
  require(n >= 3, ErrorKind::Domain, "Kneedle needs at least three components");
  require((explained_variance.array() > 0.0).all(), ErrorKind::Domain,
          "Kneedle needs positive explained variance");
  ElbowChoice out;
  out.curve.resize(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) out.curve[static_cast<std::size_t>(k)] = std::log10(explained_variance[k]);

  const auto& y = out.curve;
  const double ymin = *std::min_element(y.begin(), y.end());
  const double ymax = *std::max_element(y.begin(), y.end());
  std::vector<double> xn(static_cast<std::size_t>(n)), diff(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) xn[static_cast<std::size_t>(k)] = static_cast<double>(k) / static_cast<double>(n - 1);
  std::optional<Eigen::Index> knee;
  if (ymax > ymin) {
    // concave + decreasing: reverse y so the knee becomes a concave-increasing one
    for (Eigen::Index k = 0; k < n; ++k) {
      const double yn = (y[static_cast<std::size_t>(n - 1 - k)] - ymin) / (ymax - ymin);
      diff[static_cast<std::size_t>(k)] = yn - xn[static_cast<std::size_t>(k)];
    }
    std::vector<bool> is_max(static_cast<std::size_t>(n), false), is_min(static_cast<std::size_t>(n), false);
    std::vector<Eigen::Index> maxima;
    for (Eigen::Index k = 1; k + 1 < n; ++k) {
      const auto u = static_cast<std::size_t>(k);
      if (diff[u] >= diff[u - 1] && diff[u] >= diff[u + 1] &&
          (diff[u] > diff[u - 1] || diff[u] > diff[u + 1])) {
        is_max[u] = true;
        maxima.push_back(k);
      }
      if (diff[u] <= diff[u - 1] && diff[u] <= diff[u + 1] &&
          (diff[u] < diff[u - 1] || diff[u] < diff[u + 1]))
        is_min[u] = true;
    }
    if (!maxima.empty()) {
      const double step = 1.0 / static_cast<double>(n - 1);
      double threshold = 0.0;
      Eigen::Index threshold_index = maxima.front();
      bool active = true;
      for (Eigen::Index k = maxima.front(); k + 1 < n; ++k) {
        const auto u = static_cast<std::size_t>(k);
        if (is_max[u]) {
          threshold = diff[u] - opt.sensitivity * step;
          threshold_index = k;
          active = true;
        }
        if (is_min[u]) {
          threshold = 0.0;
          active = false;
        }
        if (active && diff[u + 1] < threshold) {
          // undo the reversal: position threshold_index counts from the end
          knee = n - threshold_index;
          break;
        }
      }
    }
  }
  if (knee) {
    out.m = *knee;
  } else {
    out.fallback = true;
    out.m = components_for_ratio(explained_variance, opt.fallback_ratio);
  }
  return out;
}

}  // namespace mw
