#pragma once

// Share of boundary-point perturbations carried by each principal component.

#include <cmath>
#include <cstddef>
#include <vector>

#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/pca.hpp"

namespace mw {

struct AdvShare {
  Matrix b_adv;            // t x n_components, each row scaled to max 1
  Vector p_share;          // sums to 1
  Vector cumulative;       // prefix sums of p_share
  std::size_t dropped = 0; // rows with zero perturbation
};

inline Vector cumulative_share(const Vector& p_share) {
  Vector c(p_share.size());
  double acc = 0.0;
  for (Eigen::Index k = 0; k < p_share.size(); ++k) c[k] = (acc += p_share[k]);
  return c;
}

/// |phi(x) - phi(x_hat)| per sample in component coordinates, row-normalised by
/// its maximum, then column sums over the grand total.
inline AdvShare adv_directions(const PcaModel& pca, const std::vector<Vector>& originals,
                               const std::vector<Vector>& boundary_points) {
  require(originals.size() == boundary_points.size(), ErrorKind::Shape,
          "originals and boundary points must pair up");
  const Eigen::Index n = pca.count();
  std::vector<Vector> rows;
  AdvShare out;
  for (std::size_t k = 0; k < originals.size(); ++k) {
    require(originals[k].size() == pca.dim() && boundary_points[k].size() == pca.dim(),
            ErrorKind::Shape, "sample dimension does not match the PCA model");
    // the mean cancels in the difference
    Vector beta = (pca.components * (originals[k] - boundary_points[k])).cwiseAbs();
    const double mx = beta.maxCoeff();
    if (!(mx > 0.0)) {
      ++out.dropped;
      continue;
    }
    rows.push_back(beta / mx);
  }
  require(!rows.empty(), ErrorKind::Numerical, "every perturbation is zero");
  out.b_adv.resize(static_cast<Eigen::Index>(rows.size()), n);
  for (std::size_t r = 0; r < rows.size(); ++r) out.b_adv.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  const Vector col = out.b_adv.colwise().sum().transpose();
  out.p_share = col / col.sum();
  out.cumulative = cumulative_share(out.p_share);
  return out;
}

struct VarianceMarkers {
  Eigen::Index at_70 = 0;  // 1-based component counts
  Eigen::Index at_99 = 0;
};

inline VarianceMarkers variance_markers(const Vector& explained_ratio) {
  VarianceMarkers m;
  double acc = 0.0;
  for (Eigen::Index k = 0; k < explained_ratio.size(); ++k) {
    acc += explained_ratio[k];
    if (m.at_70 == 0 && acc >= 0.70 - 1e-12) m.at_70 = k + 1;
    if (m.at_99 == 0 && acc >= 0.99 - 1e-12) m.at_99 = k + 1;
  }
  if (m.at_70 == 0) m.at_70 = explained_ratio.size();
  if (m.at_99 == 0) m.at_99 = explained_ratio.size();
  return m;
}

}  // namespace mw
