#pragma once

// Ranking and prediction metrics for complexity measures over a population of
// trained models: Kendall's tau, granulated Kendall, the conditional mutual
// information score, R^2, margin-distribution signatures and the k-fold
// linear gap predictor.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/rng.hpp"

namespace mw {

/// One trained model: hyperparameter tokens (in schema order), its complexity
/// value and generalization figures.
struct EvaluatedModel {
  std::vector<std::string> hyperparams;
  double complexity = 0.0;
  double gen_gap = 0.0;  // train_acc - test_acc
  double test_accuracy = 0.0;
};

/// What the complexity value is ranked against.
enum class Target { GenGap, TestAccuracy };

inline double target_of(const EvaluatedModel& m, Target t) {
  return t == Target::GenGap ? m.gen_gap : m.test_accuracy;
}

inline int sign_of(double v) { return (v > 0) - (v < 0); }

// ---------------------------------------------------------------- Kendall

/// Mean of sign(x1 - x2) * sign(y1 - y2) over all ordered pairs; ties count 0.
inline double kendall_tau(const std::vector<std::pair<double, double>>& pairs) {
  const std::size_t n = pairs.size();
  require(n >= 2, ErrorKind::Domain, "Kendall's tau needs at least two pairs");
  long long acc = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      acc += sign_of(pairs[a].first - pairs[b].first) * sign_of(pairs[a].second - pairs[b].second);
  // each unordered pair appears twice among ordered pairs with the same product
  return static_cast<double>(2 * acc) / (static_cast<double>(n) * static_cast<double>(n - 1));
}

inline double kendall_tau(const std::vector<EvaluatedModel>& models, Target t) {
  std::vector<std::pair<double, double>> pairs;
  pairs.reserve(models.size());
  for (const auto& m : models) pairs.emplace_back(m.complexity, target_of(m, t));
  return kendall_tau(pairs);
}

struct GranulatedResult {
  double psi = 0.0;
  std::size_t groups_used = 0;
  std::size_t groups_skipped = 0;  // fewer than two models or hyperparameter constant
};

namespace detail {

inline std::size_t schema_size(const std::vector<EvaluatedModel>& models) {
  require(!models.empty(), ErrorKind::Domain, "no models supplied");
  const std::size_t n = models.front().hyperparams.size();
  for (const auto& m : models)
    require(m.hyperparams.size() == n, ErrorKind::Domain, "models do not share a hyperparameter schema");
  return n;
}

}  // namespace detail

/// tau within each group of models that agree on every hyperparameter except
/// `hp`, averaged over groups.
inline GranulatedResult granulated_kendall(const std::vector<EvaluatedModel>& models, std::size_t hp,
                                           Target t = Target::GenGap) {
  const std::size_t n = detail::schema_size(models);
  require(hp < n, ErrorKind::Domain, "hyperparameter index out of range");
  std::map<std::vector<std::string>, std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k < models.size(); ++k) {
    auto key = models[k].hyperparams;
    key.erase(key.begin() + static_cast<std::ptrdiff_t>(hp));
    groups[key].push_back(k);
  }
  GranulatedResult out;
  double sum = 0.0;
  for (const auto& [key, members] : groups) {
    bool varies = false;
    for (auto k : members) varies = varies || models[k].hyperparams[hp] != models[members[0]].hyperparams[hp];
    if (members.size() < 2 || !varies) {
      ++out.groups_skipped;
      continue;
    }
    std::vector<std::pair<double, double>> pairs;
    for (auto k : members) pairs.emplace_back(models[k].complexity, target_of(models[k], t));
    sum += kendall_tau(pairs);
    ++out.groups_used;
  }
  require(out.groups_used > 0, ErrorKind::Domain,
          "granulated Kendall is undefined: hyperparameter " + std::to_string(hp) +
              " never varies within a group");
  out.psi = sum / static_cast<double>(out.groups_used);
  return out;
}

inline double mean_granulated(const std::vector<double>& psi) {
  require(!psi.empty(), ErrorKind::Domain, "no granulated coefficients to average");
  return std::accumulate(psi.begin(), psi.end(), 0.0) / static_cast<double>(psi.size());
}

// ---------------------------------------------------------------- CMI

struct CmiScore {
  std::map<std::pair<std::size_t, std::size_t>, double> per_pair;  // normalized I in [0, 1]
  double final_score = 0.0;  // 100 * min over pairs
};

/// Conditional mutual information between the sign of complexity changes and
/// the sign of target changes, conditioned on every pair of hyperparameters.
/// Within each conditioning group every unordered model pair is counted in
/// both orientations; pairs with a tie in either quantity are dropped; groups
/// are weighted by their retained pair count. A pair S with no retained pairs
/// (zero conditional entropy) scores 0.
inline CmiScore cmi_score(const std::vector<EvaluatedModel>& models, Target t = Target::GenGap) {
  const std::size_t n = detail::schema_size(models);
  require(n >= 3, ErrorKind::Domain, "CMI needs at least three hyperparameters");
  CmiScore out;
  double worst = 1.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> groups;
      for (std::size_t k = 0; k < models.size(); ++k)
        groups[{models[k].hyperparams[a], models[k].hyperparams[b]}].push_back(k);
      // counts[g][vs][vg], index 0 = -1, 1 = +1
      std::vector<std::array<std::array<double, 2>, 2>> counts;
      double total = 0.0;
      for (const auto& [key, members] : groups) {
        std::array<std::array<double, 2>, 2> c{};
        for (std::size_t p = 0; p < members.size(); ++p) {
          for (std::size_t q = p + 1; q < members.size(); ++q) {
            const auto& mp = models[members[p]];
            const auto& mq = models[members[q]];
            const int vs = sign_of(mp.complexity - mq.complexity);
            const int vg = sign_of(target_of(mp, t) - target_of(mq, t));
            if (vs == 0 || vg == 0) continue;
            c[vs > 0][vg > 0] += 1.0;
            c[vs < 0][vg < 0] += 1.0;
          }
        }
        const double group_total = c[0][0] + c[0][1] + c[1][0] + c[1][1];
        if (group_total > 0) {
          counts.push_back(c);
          total += group_total;
        }
      }
      double info = 0.0;
      double entropy = 0.0;
      for (const auto& c : counts) {
        const double nu = c[0][0] + c[0][1] + c[1][0] + c[1][1];
        const double pu = nu / total;
        const double ps[2] = {(c[0][0] + c[0][1]) / nu, (c[1][0] + c[1][1]) / nu};
        const double pg[2] = {(c[0][0] + c[1][0]) / nu, (c[0][1] + c[1][1]) / nu};
        for (int s = 0; s < 2; ++s)
          for (int g = 0; g < 2; ++g) {
            const double pj = c[s][g] / nu;
            if (pj > 0) info += pu * pj * std::log(pj / (ps[s] * pg[g]));
          }
        for (int g = 0; g < 2; ++g)
          if (pg[g] > 0) entropy -= pu * pg[g] * std::log(pg[g]);
      }
      double normalized = entropy > 0 ? info / entropy : 0.0;
      normalized = std::clamp(normalized, 0.0, 1.0);
      out.per_pair[{a, b}] = normalized;
      worst = std::min(worst, normalized);
    }
  }
  out.final_score = 100.0 * worst;
  return out;
}

// ---------------------------------------------------------------- R^2

inline double r_squared(const Vector& z, const Vector& zhat) {
  require(z.size() == zhat.size(), ErrorKind::Shape, "R^2: length mismatch");
  require(z.size() >= 2, ErrorKind::Domain, "R^2 needs at least two points");
  const double mean = z.mean();
  const double ss_tot = (z.array() - mean).square().sum();
  require(ss_tot > 0, ErrorKind::Domain, "R^2 is undefined for constant targets");
  return 1.0 - (zhat - z).squaredNorm() / ss_tot;
}

// ---------------------------------------------------------------- signatures

struct MarginSignature {
  double q1 = 0, q2 = 0, q3 = 0;
  double lower_fence = 0, upper_fence = 0;

  double iqr() const { return q3 - q1; }
  /// (lower fence, Q1, Q2, Q3, upper fence)
  Vector as_vector() const {
    Vector v(5);
    v << lower_fence, q1, q2, q3, upper_fence;
    return v;
  }
};

/// Quantile by linear interpolation between order statistics at (n-1)p.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline MarginSignature extract_signature(std::vector<double> margins) {
  require(!margins.empty(), ErrorKind::Domain, "cannot summarise an empty margin distribution");
  std::sort(margins.begin(), margins.end());
  MarginSignature s;
  s.q1 = quantile_sorted(margins, 0.25);
  s.q2 = quantile_sorted(margins, 0.50);
  s.q3 = quantile_sorted(margins, 0.75);
  s.lower_fence = s.q1 - 1.5 * s.iqr();
  s.upper_fence = s.q3 + 1.5 * s.iqr();
  return s;
}

// ---------------------------------------------------------------- predictor

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kRidge = 1e-10;

struct LinearPredictor {
  Vector alpha;
  double bias = 0.0;
  bool log_transform = true;
  bool underdetermined = false;  // fewer models than dim + 1
};

inline Vector feature_transform(const Vector& signature, bool log_transform) {
  if (!log_transform) return signature;
  return signature.unaryExpr([](double t) { return std::log(std::max(t, kLogFloor)); });
}

/// Least squares for g ~ alpha^T phi(theta) + b via ridge-stabilised normal
/// equations. Rows of `signatures` are models.
inline LinearPredictor fit_linear_predictor(const Matrix& signatures, const Vector& gaps,
                                            bool log_transform = true) {
  const Eigen::Index m = signatures.rows();
  const Eigen::Index d = signatures.cols();
  require(m == gaps.size(), ErrorKind::Shape, "one gap per signature row required");
  require(m >= 1 && d >= 1, ErrorKind::Domain, "empty training set");
  Matrix a(m, d + 1);
  for (Eigen::Index r = 0; r < m; ++r) {
    a.row(r).head(d) = feature_transform(signatures.row(r).transpose(), log_transform).transpose();
    a(r, d) = 1.0;
  }
  const Matrix normal = a.transpose() * a + kRidge * Matrix::Identity(d + 1, d + 1);
  const Vector rhs = a.transpose() * gaps;
  Eigen::LDLT<Matrix> ldlt(normal);
  require(ldlt.info() == Eigen::Success, ErrorKind::Numerical, "linear predictor fit failed");
  const Vector beta = ldlt.solve(rhs);
  require(beta.allFinite(), ErrorKind::Numerical, "linear predictor fit is rank deficient");
  const double resid = (normal * beta - rhs).norm();
  require(resid <= 1e-6 * std::max(1.0, rhs.norm()), ErrorKind::Numerical,
          "linear predictor fit is rank deficient beyond ridge rescue");
  LinearPredictor p;
  p.alpha = beta.head(d);
  p.bias = beta[d];
  p.log_transform = log_transform;
  p.underdetermined = m < d + 1;
  return p;
}

inline double predict_gap(const LinearPredictor& p, const Vector& signature) {
  require(signature.size() == p.alpha.size(), ErrorKind::Shape, "signature length mismatch");
  return p.alpha.dot(feature_transform(signature, p.log_transform)) + p.bias;
}

/// Seeded shuffle of [0, n) split into k contiguous folds whose sizes differ
/// by at most one.
inline std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t k,
                                                             std::uint64_t seed) {
  require(k >= 2 && k <= n, ErrorKind::Domain, "k-fold needs 2 <= k <= n");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(derive_seed(seed, "kfold"));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return folds;
}

struct CrossValidation {
  std::vector<double> r2;  // one per (shuffle, fold)
  double mean = 0.0;
  double stddev = 0.0;
};

/// Held-out R^2 of the linear predictor over `shuffles` reshuffles of a k-fold
/// split (3 x 5 by default).
inline CrossValidation cross_validate_predictor(const Matrix& signatures, const Vector& gaps,
                                                std::uint64_t seed, std::size_t k = 3,
                                                std::size_t shuffles = 5, bool log_transform = true) {
  const auto n = static_cast<std::size_t>(signatures.rows());
  require(gaps.size() == signatures.rows(), ErrorKind::Shape, "one gap per signature row required");
  CrossValidation cv;
  for (std::size_t s = 0; s < shuffles; ++s) {
    const auto folds = kfold_partition(n, k, derive_seed(seed, "cv-shuffle", s));
    for (std::size_t f = 0; f < k; ++f) {
      std::vector<char> held(n, 0);
      for (auto idx : folds[f]) held[idx] = 1;
      const auto test_n = static_cast<Eigen::Index>(folds[f].size());
      const auto train_n = static_cast<Eigen::Index>(n) - test_n;
      Matrix xtr(train_n, signatures.cols());
      Vector ytr(train_n);
      Eigen::Index r = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (!held[i]) {
          xtr.row(r) = signatures.row(static_cast<Eigen::Index>(i));
          ytr[r++] = gaps[static_cast<Eigen::Index>(i)];
        }
      const auto model = fit_linear_predictor(xtr, ytr, log_transform);
      Vector z(test_n), zhat(test_n);
      for (Eigen::Index t = 0; t < test_n; ++t) {
        const auto idx = static_cast<Eigen::Index>(folds[f][static_cast<std::size_t>(t)]);
        z[t] = gaps[idx];
        zhat[t] = predict_gap(model, signatures.row(idx).transpose());
      }
      cv.r2.push_back(r_squared(z, zhat));
    }
  }
  const double sum = std::accumulate(cv.r2.begin(), cv.r2.end(), 0.0);
  cv.mean = sum / static_cast<double>(cv.r2.size());
  double var = 0.0;
  for (double v : cv.r2) var += (v - cv.mean) * (v - cv.mean);
  cv.stddev = std::sqrt(var / static_cast<double>(cv.r2.size()));
  return cv;
}

}  // namespace mw
