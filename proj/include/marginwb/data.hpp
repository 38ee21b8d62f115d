#pragma once

// Labelled feature matrices, synthetic blob generation, the two training-set
// corruption procedures, exact nearest-other-class distances, and
// normalization.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/rng.hpp"

namespace mw {

enum class CorruptFlag : std::uint8_t { Clean, LabelCorrupted, InputCorrupted };

inline const char* to_string(CorruptFlag f) {
  switch (f) {
    case CorruptFlag::Clean: return "clean";
    case CorruptFlag::LabelCorrupted: return "label";
    case CorruptFlag::InputCorrupted: return "input";
  }
  return "clean";
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
  RowMatrix features;                 // s x n
  std::vector<std::uint32_t> labels;  // s
  Vector lower;                       // per-feature bounds
  Vector upper;
  std::vector<CorruptFlag> flags;     // s
  std::uint32_t class_count = 0;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  Vector sample(Eigen::Index k) const { return features.row(k).transpose(); }

  void validate() const {
    const auto s = static_cast<std::size_t>(features.rows());
    require(labels.size() == s, ErrorKind::Shape, "labels length != sample count");
    require(flags.size() == s, ErrorKind::Shape, "corrupt_flags length != sample count");
    require(lower.size() == dim() && upper.size() == dim(), ErrorKind::Shape,
            "bounds length != feature count");
    for (auto l : labels)
      require(l < class_count, ErrorKind::Domain, "label outside [0, class_count)");
  }
};

struct CorruptionReport {
  double fraction_requested = 0.0;
  std::vector<std::size_t> indices_corrupted;  // sorted
  std::uint64_t seed = 0;
};

/// Observed min/max per feature, widened by `pad` of the range on each side.
/// A constant feature gets a unit-width box around its value.
inline std::pair<Vector, Vector> observed_bounds(const RowMatrix& x, double pad = 0.01) {
  Vector lo = x.colwise().minCoeff().transpose();
  Vector hi = x.colwise().maxCoeff().transpose();
  for (Eigen::Index c = 0; c < lo.size(); ++c) {
    const double range = hi[c] - lo[c];
    if (range > 0) {
      lo[c] -= pad * range;
      hi[c] += pad * range;
    } else {
      lo[c] -= 0.5;
      hi[c] += 0.5;
    }
  }
  return {lo, hi};
}

struct BlobConfig {
  std::uint32_t classes = 2;
  std::size_t samples_per_class = 100;
  Eigen::Index dim = 2;
  std::optional<RowMatrix> centers;  // classes x dim
  double center_range = 5.0;         // centers ~ U[-range, range] when not given
  double spread = 1.0;
  std::uint64_t seed = 0;
};

inline RowMatrix blob_centers(std::uint32_t classes, Eigen::Index dim, double range,
                              std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, "blob-centers"));
  std::uniform_real_distribution<double> u(-range, range);
  RowMatrix c(classes, dim);
  for (Eigen::Index r = 0; r < c.rows(); ++r)
    for (Eigen::Index k = 0; k < dim; ++k) c(r, k) = u(rng);
  return c;
}

/// Isotropic Gaussian clusters, one per class, samples ordered class by class.
inline Dataset gen_blobs(const BlobConfig& cfg) {
  require(cfg.classes >= 2, ErrorKind::Domain, "gen_blobs needs at least two classes");
  require(cfg.dim >= 2, ErrorKind::Domain, "gen_blobs needs dim >= 2");
  require(cfg.spread > 0, ErrorKind::Domain, "gen_blobs needs spread > 0");
  require(cfg.samples_per_class > 0, ErrorKind::Domain, "gen_blobs: empty dataset requested");
  RowMatrix centers =
      cfg.centers ? *cfg.centers : blob_centers(cfg.classes, cfg.dim, cfg.center_range, cfg.seed);
  require(centers.rows() == cfg.classes && centers.cols() == cfg.dim, ErrorKind::Shape,
          "gen_blobs: centers must be classes x dim");
  Rng rng = make_rng(derive_seed(cfg.seed, "blob-samples"));
  std::normal_distribution<double> noise(0.0, cfg.spread);
  const auto s = static_cast<Eigen::Index>(cfg.classes * cfg.samples_per_class);
  Dataset ds;
  ds.features.resize(s, cfg.dim);
  ds.labels.resize(static_cast<std::size_t>(s));
  ds.flags.assign(static_cast<std::size_t>(s), CorruptFlag::Clean);
  ds.class_count = cfg.classes;
  Eigen::Index row = 0;
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t k = 0; k < cfg.samples_per_class; ++k, ++row) {
      for (Eigen::Index f = 0; f < cfg.dim; ++f) ds.features(row, f) = centers(c, f) + noise(rng);
      ds.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  std::tie(ds.lower, ds.upper) = observed_bounds(ds.features);
  return ds;
}

namespace detail {

inline std::vector<std::size_t> pick_indices(std::size_t s, double fraction, Rng& rng) {
  require(fraction >= 0.0 && fraction <= 1.0, ErrorKind::Domain, "fraction must be in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(s)));
  std::vector<std::size_t> idx(s);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, s - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// Exactly round(fraction * s) samples receive a uniformly drawn label c' != c.
inline std::pair<Dataset, CorruptionReport> corrupt_labels(const Dataset& ds, double fraction,
                                                           std::uint64_t seed) {
  require(ds.class_count >= 2, ErrorKind::Domain, "cannot corrupt labels with fewer than 2 classes");
  Rng rng = make_rng(derive_seed(seed, "corrupt-labels"));
  CorruptionReport rep{fraction, detail::pick_indices(static_cast<std::size_t>(ds.size()), fraction, rng),
                       seed};
  Dataset out = ds;
  std::uniform_int_distribution<std::uint32_t> other(0, ds.class_count - 2);
  for (auto k : rep.indices_corrupted) {
    const std::uint32_t c = ds.labels[k];
    const std::uint32_t draw = other(rng);
    out.labels[k] = draw >= c ? draw + 1 : draw;
    out.flags[k] = CorruptFlag::LabelCorrupted;
  }
  return {std::move(out), std::move(rep)};
}

/// Selected samples are replaced feature-wise by draws from N(mu_x, sigma_x),
/// the mean and (population) standard deviation of that sample's own features,
/// then clipped to the dataset bounds.
inline std::pair<Dataset, CorruptionReport> corrupt_inputs_gaussian(const Dataset& ds,
                                                                    double fraction,
                                                                    std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, "corrupt-inputs"));
  CorruptionReport rep{fraction, detail::pick_indices(static_cast<std::size_t>(ds.size()), fraction, rng),
                       seed};
  Dataset out = ds;
  const auto n = ds.dim();
  for (auto k : rep.indices_corrupted) {
    const auto row = static_cast<Eigen::Index>(k);
    const double mu = ds.features.row(row).mean();
    const double sigma =
        std::sqrt((ds.features.row(row).array() - mu).square().sum() / static_cast<double>(n));
    if (sigma > 0.0) {
      std::normal_distribution<double> g(mu, sigma);
      for (Eigen::Index f = 0; f < n; ++f)
        out.features(row, f) = std::clamp(g(rng), ds.lower[f], ds.upper[f]);
    }
    out.flags[k] = CorruptFlag::InputCorrupted;
  }
  return {std::move(out), std::move(rep)};
}

/// Distance from each queried sample to its nearest differently-labelled
/// sample anywhere in the dataset (an upper bound on its margin).
inline Vector max_margin(const Dataset& ds, const std::vector<std::size_t>& index_set) {
  bool two_labels = false;
  for (std::size_t k = 1; k < ds.labels.size() && !two_labels; ++k)
    two_labels = ds.labels[k] != ds.labels[0];
  require(two_labels, ErrorKind::Domain, "max_margin is undefined for a single-class dataset");
  Vector out(static_cast<Eigen::Index>(index_set.size()));
  for (std::size_t q = 0; q < index_set.size(); ++q) {
    const auto a = index_set[q];
    require(a < ds.labels.size(), ErrorKind::Domain, "max_margin: sample index out of range");
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index b = 0; b < ds.size(); ++b) {
      if (ds.labels[static_cast<std::size_t>(b)] == ds.labels[a]) continue;
      const double d2 =
          (ds.features.row(static_cast<Eigen::Index>(a)) - ds.features.row(b)).squaredNorm();
      best = std::min(best, d2);
    }
    out[static_cast<Eigen::Index>(q)] = std::sqrt(best);
  }
  return out;
}

/// Fits per-feature offsets/scales. z-norm uses the population standard
/// deviation; a zero-variance feature keeps scale 1. Min-max of a constant
/// feature maps it to 0.
inline NormalizationMeta fit_normalization(const Dataset& ds, NormScheme scheme) {
  const auto n = ds.dim();
  NormalizationMeta m;
  m.scheme = scheme;
  m.offsets = Vector::Zero(n);
  m.scales = Vector::Ones(n);
  require(ds.size() > 0, ErrorKind::Domain, "cannot normalize an empty dataset");
  if (scheme == NormScheme::ZNorm) {
    m.offsets = ds.features.colwise().mean().transpose();
    for (Eigen::Index f = 0; f < n; ++f) {
      const double var = (ds.features.col(f).array() - m.offsets[f]).square().mean();
      if (var > 0.0) m.scales[f] = std::sqrt(var);
    }
  } else if (scheme == NormScheme::MinMax) {
    m.offsets = ds.features.colwise().minCoeff().transpose();
    const Vector hi = ds.features.colwise().maxCoeff().transpose();
    for (Eigen::Index f = 0; f < n; ++f)
      if (hi[f] > m.offsets[f]) m.scales[f] = hi[f] - m.offsets[f];
  }
  if (scheme == NormScheme::MinMax) {
    m.lower = Vector::Zero(n);
    m.upper = Vector::Ones(n);
  } else {
    m.lower = ((ds.lower - m.offsets).array() / m.scales.array()).matrix();
    m.upper = ((ds.upper - m.offsets).array() / m.scales.array()).matrix();
  }
  return m;
}

inline Dataset apply_normalization(const Dataset& ds, const NormalizationMeta& m) {
  require(m.offsets.size() == ds.dim() && m.scales.size() == ds.dim(), ErrorKind::Shape,
          "normalization meta does not match feature count");
  Dataset out = ds;
  if (m.scheme == NormScheme::None) return out;
  out.features = ((ds.features.rowwise() - m.offsets.transpose()).array().rowwise() /
                  m.scales.transpose().array())
                     .matrix();
  if (m.lower.size() == ds.dim()) {
    out.lower = m.lower;
    out.upper = m.upper;
  }
  return out;
}

inline std::pair<Dataset, NormalizationMeta> normalize(const Dataset& ds, NormScheme scheme) {
  auto meta = fit_normalization(ds, scheme);
  return {apply_normalization(ds, meta), std::move(meta)};
}

inline Dataset denormalize(const Dataset& ds, const NormalizationMeta& m) {
  Dataset out = ds;
  if (m.scheme == NormScheme::None) return out;
  out.features = ((ds.features.array().rowwise() * m.scales.transpose().array()).rowwise() +
                  m.offsets.transpose().array())
                     .matrix();
  out.lower = (ds.lower.array() * m.scales.array() + m.offsets.array()).matrix();
  out.upper = (ds.upper.array() * m.scales.array() + m.offsets.array()).matrix();
  return out;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.dim());
  out.labels.reserve(rows.size());
  out.flags.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.features.row(static_cast<Eigen::Index>(k)) = ds.features.row(static_cast<Eigen::Index>(rows[k]));
    out.labels.push_back(ds.labels[rows[k]]);
    out.flags.push_back(ds.flags[rows[k]]);
  }
  out.lower = ds.lower;
  out.upper = ds.upper;
  out.class_count = ds.class_count;
  return out;
}

}  // namespace mw
