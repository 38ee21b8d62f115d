#pragma once

// Distance-to-decision-boundary estimators: first-order Taylor, the iterative
// DeepFool-style search (single sample and batched), their principal-subspace
// constrained variants, and total-variance normalization of hidden margins.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "marginwb/data.hpp"
#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/parallel.hpp"
#include "marginwb/pca.hpp"

namespace mw {

enum class MarginStatus { Converged, ViolationRose, MaxIters, NoDescent };

inline const char* to_string(MarginStatus s) {
  switch (s) {
    case MarginStatus::Converged: return "converged";
    case MarginStatus::ViolationRose: return "violation_rose";
    case MarginStatus::MaxIters: return "max_iters";
    case MarginStatus::NoDescent: return "no_descent";
  }
  return "unknown";
}

struct MarginResult {
  double distance = 0.0;   // d_best; +inf when no boundary point was reached
  double violation = 0.0;  // v_best = |f_i - f_j| at the returned point
  Eigen::Index class_i = 0;
  Eigen::Index class_j = 1;
  int steps = 0;
  MarginStatus status = MarginStatus::Converged;
  std::optional<Vector> boundary_point;
  bool left_subspace = false;  // clipping moved the point off the search subspace
};

struct SearchConfig {
  double learning_rate = 0.25;       // gamma
  double stop_tolerance = 0.01;      // delta
  int max_iters = 100;
  double equality_threshold = 1e-3;  // epsilon
  std::optional<std::pair<Vector, Vector>> bounds;  // overrides the network's input bounds
  bool clip_to_network_bounds = true;
  bool batch_mode = false;
  std::optional<bool> signed_step;  // unset: signed o_l standard, |o_l| constrained

  void validate() const {
    require(learning_rate > 0.0 && learning_rate <= 1.0, ErrorKind::Domain,
            "learning rate must lie in (0, 1]");
    require(stop_tolerance > 0.0, ErrorKind::Domain, "stop tolerance must be positive");
    require(max_iters >= 1, ErrorKind::Domain, "max_iters must be >= 1");
    require(equality_threshold > 0.0, ErrorKind::Domain, "equality threshold must be positive");
  }
};

inline constexpr double kDegenerateNorm = 1e-12;

// ---------------------------------------------------------------- Taylor

enum class TaylorPairing { AllClasses, SecondHighest };

struct TaylorOptions {
  std::optional<Eigen::Index> target_class;     // fixes j
  std::optional<Eigen::Index> reference_class;  // fixes i (e.g. the true label); default predicted
  TaylorPairing pairing = TaylorPairing::AllClasses;
};

namespace detail {

struct PairEstimate {
  Eigen::Index j = -1;
  double distance = std::numeric_limits<double>::infinity();
  double output_margin = 0.0;
};

// o_j / ||w_j|| over the candidate classes, with w_j optionally projected onto
// the rows of `basis`. Classes whose projected gradient is degenerate are
// skipped; j = -1 when none remain.
inline PairEstimate taylor_pairs(const LogitJacobian& lj, Eigen::Index i,
                                 const std::vector<Eigen::Index>& candidates,
                                 const Matrix* basis) {
  PairEstimate best;
  for (auto j : candidates) {
    const double o = lj.logits[i] - lj.logits[j];
    Vector w = (lj.jacobian.row(i) - lj.jacobian.row(j)).transpose();
    if (basis) w = (*basis) * w;
    const double norm = w.norm();
    if (norm < kDegenerateNorm) continue;
    const double d = o / norm;
    if (best.j < 0 || d < best.distance) best = {j, d, o};
  }
  return best;
}

inline MarginResult taylor_impl(const Network& net, std::size_t layer, const Vector& activ,
                                const TaylorOptions& opt, const Matrix* basis) {
  const LogitJacobian lj = logit_jacobian(net, layer, activ);
  const Eigen::Index c = net.num_classes();
  const Eigen::Index predicted = argmax_index(lj.logits);
  const Eigen::Index i = opt.reference_class.value_or(predicted);
  require(i >= 0 && i < c, ErrorKind::Domain, "reference class out of range");
  require(lj.logits[i] >= lj.logits[predicted], ErrorKind::Domain,
          "sample is not classified as its reference class");
  std::vector<Eigen::Index> candidates;
  if (opt.target_class) {
    require(*opt.target_class >= 0 && *opt.target_class < c && *opt.target_class != i,
            ErrorKind::Domain, "target class must be a valid class other than i");
    candidates.push_back(*opt.target_class);
  } else if (opt.pairing == TaylorPairing::SecondHighest) {
    candidates.push_back(argmax_excluding(lj.logits, i));
  } else {
    for (Eigen::Index j = 0; j < c; ++j)
      if (j != i) candidates.push_back(j);
  }
  const PairEstimate best = taylor_pairs(lj, i, candidates, basis);
  if (best.j < 0) {
    if (basis) fail(ErrorKind::Unreachable, "decision boundary is unreachable inside the subspace");
    fail(ErrorKind::Numerical, "degenerate logit-difference gradient");
  }
  MarginResult r;
  r.distance = best.distance;
  r.violation = std::abs(best.output_margin);
  r.class_i = i;
  r.class_j = best.j;
  r.steps = 0;
  r.status = MarginStatus::Converged;
  return r;
}

}  // namespace detail

/// d = (f_i - f_j) / ||grad f_i - grad f_j|| at layer `layer` (0 = input).
inline MarginResult taylor_margin(const Network& net, std::size_t layer, const Vector& activ,
                                  const TaylorOptions& opt = {}) {
  return detail::taylor_impl(net, layer, activ, opt, nullptr);
}

/// Taylor estimate with the gradient difference projected onto the top-m
/// principal components: d = (f_i - f_j) / ||(grad f_i - grad f_j) P_m^T||.
inline MarginResult constrained_taylor_margin(const Network& net, const Vector& x,
                                              const PcaModel& pca, Eigen::Index m,
                                              const TaylorOptions& opt = {}) {
  require(pca.dim() == net.input_dim(), ErrorKind::Shape, "PCA dimension != network input_dim");
  const Matrix basis = pca.top(m);
  return detail::taylor_impl(net, 0, x, opt, &basis);
}

// ---------------------------------------------------------------- DeepFool

namespace detail {

struct SearchSetup {
  std::optional<std::pair<Vector, Vector>> bounds;
  const Matrix* basis = nullptr;  // m x n, orthonormal rows
  bool signed_step = true;
};

inline SearchSetup make_setup(const Network& net, std::size_t layer, const SearchConfig& cfg,
                              const Matrix* basis, bool default_signed) {
  cfg.validate();
  SearchSetup s;
  s.basis = basis;
  s.signed_step = cfg.signed_step.value_or(default_signed);
  // activation-space bounds are undefined, so only input searches clip
  if (layer == 0) {
    if (cfg.bounds) {
      s.bounds = cfg.bounds;
    } else if (cfg.clip_to_network_bounds && net.has_bounds()) {
      s.bounds = std::make_pair(net.norm_meta().lower, net.norm_meta().upper);
    }
    if (s.bounds)
      require(s.bounds->first.size() == net.input_dim() && s.bounds->second.size() == net.input_dim(),
              ErrorKind::Shape, "search bounds do not match input_dim");
  }
  return s;
}

/// State of one sample's boundary search.
struct SearchState {
  Vector origin;
  Vector point;
  Eigen::Index i = 0;
  double v_best = std::numeric_limits<double>::infinity();
  double d_best = 0.0;
  double d_current = 0.0;
  bool have_best = false;
  bool stalled = false;  // degenerate step direction
  MarginResult result;
};

inline SearchState start_search(const Network& net, std::size_t layer, const Vector& activ) {
  SearchState st;
  st.origin = activ;
  st.point = activ;
  const Vector logits = forward_from(net, layer, activ);
  st.i = argmax_index(logits);
  const Eigen::Index j = argmax_excluding(logits, st.i);
  st.result.class_i = st.i;
  st.result.class_j = j;
  st.result.distance = std::numeric_limits<double>::infinity();
  st.result.violation = std::abs(logits[st.i] - logits[j]);
  st.result.status = MarginStatus::MaxIters;
  return st;
}

struct StepOutcome {
  bool stalled = false;
  double v = 0.0;
  double d = 0.0;
  Eigen::Index j = 0;
  bool left_subspace = false;
};

// One update x_hat <- clip(x_hat - gamma r) followed by re-evaluation.
inline StepOutcome take_step(const Network& net, std::size_t layer, const SearchSetup& setup,
                             double gamma, SearchState& st) {
  StepOutcome out;
  const LogitJacobian lj = logit_jacobian(net, layer, st.point);
  const Eigen::Index c = net.num_classes();
  Eigen::Index best_l = -1;
  double best_ratio = std::numeric_limits<double>::infinity();
  double best_o = 0.0;
  Vector best_w;
  for (Eigen::Index j = 0; j < c; ++j) {
    if (j == st.i) continue;
    const double o = lj.logits[st.i] - lj.logits[j];
    Vector w = (lj.jacobian.row(st.i) - lj.jacobian.row(j)).transpose();
    if (setup.basis) w = (*setup.basis) * w;
    const double norm = w.norm();
    if (norm < kDegenerateNorm) continue;
    const double ratio = std::abs(o) / norm;
    if (best_l < 0 || ratio < best_ratio) {
      best_l = j;
      best_ratio = ratio;
      best_o = o;
      best_w = std::move(w);
    }
  }
  if (best_l < 0) {
    out.stalled = true;
    return out;
  }
  const double scale = (setup.signed_step ? best_o : std::abs(best_o)) / best_w.squaredNorm();
  Vector r = scale * best_w;
  if (setup.basis) r = setup.basis->transpose() * r;
  st.point -= gamma * r;
  if (setup.bounds) {
    const Vector before = st.point;
    st.point = st.point.cwiseMax(setup.bounds->first).cwiseMin(setup.bounds->second);
    if (setup.basis && (st.point - before).norm() > 0.0) {
      const Vector delta = st.point - st.origin;
      const Vector off = delta - setup.basis->transpose() * ((*setup.basis) * delta);
      out.left_subspace = off.norm() > 1e-9 * std::max(1.0, delta.norm());
    }
  }
  const Vector logits = forward_from(net, layer, st.point);
  out.j = argmax_excluding(logits, st.i);
  out.v = std::abs(logits[st.i] - logits[out.j]);
  out.d = (st.origin - st.point).norm();
  return out;
}

inline void accept(SearchState& st, const StepOutcome& s, int step) {
  st.v_best = s.v;
  st.d_best = s.d;
  st.have_best = true;
  st.result.distance = s.d;
  st.result.violation = s.v;
  st.result.class_j = s.j;
  st.result.steps = step;
  st.result.boundary_point = st.point;
  st.result.left_subspace = st.result.left_subspace || s.left_subspace;
}

// Converged means the returned point is on the boundary to within epsilon.
inline MarginStatus settle(const SearchState& st, const SearchConfig& cfg, MarginStatus otherwise) {
  return st.have_best && st.v_best <= cfg.equality_threshold ? MarginStatus::Converged : otherwise;
}

inline MarginResult search_single(const Network& net, std::size_t layer, const Vector& activ,
                                  const SearchConfig& cfg, const SearchSetup& setup) {
  SearchState st = start_search(net, layer, activ);
  for (int c = 0; c < cfg.max_iters; ++c) {
    const StepOutcome s = take_step(net, layer, setup, cfg.learning_rate, st);
    if (s.stalled) {
      st.result.status = MarginStatus::NoDescent;
      return st.result;
    }
    if (st.have_best && s.v >= st.v_best) {
      st.result.status = settle(st, cfg, MarginStatus::ViolationRose);
      return st.result;
    }
    if (st.have_best && std::abs(s.d - st.d_best) < cfg.stop_tolerance) {
      st.result.status = settle(st, cfg, MarginStatus::MaxIters);
      return st.result;
    }
    accept(st, s, c + 1);
  }
  st.result.status = settle(st, cfg, MarginStatus::MaxIters);
  return st.result;
}

// All samples step together; the batch stops when the mean distance changes
// by less than delta between iterations. Each sample keeps its own
// smallest-violation iterate.
inline std::vector<MarginResult> search_batch(const Network& net, std::size_t layer,
                                              const std::vector<Vector>& samples,
                                              const SearchConfig& cfg, const SearchSetup& setup,
                                              std::size_t threads) {
  require(!samples.empty(), ErrorKind::Domain, "batch margin search needs at least one sample");
  const std::size_t n = samples.size();
  std::vector<SearchState> states(n);
  parallel_for(n, threads, [&](std::size_t k) { states[k] = start_search(net, layer, samples[k]); });
  double prev_mean = 0.0;
  for (int c = 0; c < cfg.max_iters; ++c) {
    parallel_for(n, threads, [&](std::size_t k) {
      auto& st = states[k];
      if (st.stalled) return;
      const StepOutcome s = take_step(net, layer, setup, cfg.learning_rate, st);
      if (s.stalled) {
        st.stalled = true;
        return;
      }
      st.d_current = s.d;
      if (s.v < st.v_best) accept(st, s, c + 1);
    });
    double mean = 0.0;
    for (const auto& st : states) mean += st.d_current;  // fixed reduction order
    mean /= static_cast<double>(n);
    if (c > 0 && std::abs(mean - prev_mean) < cfg.stop_tolerance) break;
    prev_mean = mean;
  }
  std::vector<MarginResult> out;
  out.reserve(n);
  for (auto& st : states) {
    if (st.stalled) {
      st.result.status = MarginStatus::NoDescent;
    } else {
      st.result.status = settle(st, cfg, MarginStatus::MaxIters);
    }
    out.push_back(std::move(st.result));
  }
  return out;
}

}  // namespace detail

/// Iterative boundary search at layer `layer` (0 = input). Steps against the
/// signed output margin by default, so an iterate that overshoots the
/// boundary steps back. Input-space iterates are clipped to the bounds.
inline MarginResult deepfool_margin(const Network& net, std::size_t layer, const Vector& activ,
                                    const SearchConfig& cfg = {}) {
  const auto setup = detail::make_setup(net, layer, cfg, nullptr, true);
  return detail::search_single(net, layer, activ, cfg, setup);
}

inline std::vector<MarginResult> deepfool_margin_batch(const Network& net, std::size_t layer,
                                                       const std::vector<Vector>& samples,
                                                       const SearchConfig& cfg = {},
                                                       std::size_t threads = 1) {
  const auto setup = detail::make_setup(net, layer, cfg, nullptr, true);
  return detail::search_batch(net, layer, samples, cfg, setup, threads);
}

/// Input-space search restricted to the span of the top-m principal
/// components around the sample. Steps use |o_l| by default. The distance is
/// measured in the original feature space.
inline MarginResult constrained_deepfool_margin(const Network& net, const Vector& x,
                                                const PcaModel& pca, Eigen::Index m,
                                                const SearchConfig& cfg = {}) {
  require(pca.dim() == net.input_dim(), ErrorKind::Shape, "PCA dimension != network input_dim");
  const Matrix basis = pca.top(m);
  const auto setup = detail::make_setup(net, 0, cfg, &basis, false);
  return detail::search_single(net, 0, x, cfg, setup);
}

inline std::vector<MarginResult> constrained_deepfool_margin_batch(
    const Network& net, const std::vector<Vector>& samples, const PcaModel& pca, Eigen::Index m,
    const SearchConfig& cfg = {}, std::size_t threads = 1) {
  require(pca.dim() == net.input_dim(), ErrorKind::Shape, "PCA dimension != network input_dim");
  const Matrix basis = pca.top(m);
  const auto setup = detail::make_setup(net, 0, cfg, &basis, false);
  return detail::search_batch(net, 0, samples, cfg, setup, threads);
}

// ---------------------------------------------------------------- TV

/// sqrt of the summed per-feature sample variance (divisor s-1); rows are samples.
template <typename Derived>
double total_variance(const Eigen::MatrixBase<Derived>& activations) {
  const Eigen::Index s = activations.rows();
  require(s >= 2, ErrorKind::Domain, "total variance needs at least two samples");
  const Eigen::RowVectorXd mean = activations.colwise().mean();
  const double ss = (activations.rowwise() - mean).squaredNorm();
  return std::sqrt(ss / static_cast<double>(s - 1));
}

template <typename Derived>
Vector tv_normalize(const Vector& margins, const Eigen::MatrixBase<Derived>& activations) {
  const double tv = total_variance(activations);
  require(tv > 0.0, ErrorKind::Numerical, "total variance is zero");
  return margins / tv;
}

}  // namespace mw
