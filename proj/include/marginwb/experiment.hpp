#pragma once

// Drivers behind the command-line tool: margin measurement over a dataset,
// metric evaluation over a model list, perturbation shares, and the
// capacity sweep with its report tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "marginwb/advdir.hpp"
#include "marginwb/data.hpp"
#include "marginwb/error.hpp"
#include "marginwb/io.hpp"
#include "marginwb/margin.hpp"
#include "marginwb/metrics.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/parallel.hpp"
#include "marginwb/pca.hpp"
#include "marginwb/rng.hpp"
#include "marginwb/train.hpp"

namespace mw {

// ---------------------------------------------------------------- measure

enum class Estimator { Taylor, DeepFool, ConstrainedTaylor, ConstrainedDeepFool };

inline Estimator parse_estimator(const std::string& s) {
  if (s == "taylor") return Estimator::Taylor;
  if (s == "deepfool") return Estimator::DeepFool;
  if (s == "constrained-taylor") return Estimator::ConstrainedTaylor;
  if (s == "constrained-deepfool") return Estimator::ConstrainedDeepFool;
  fail(ErrorKind::Config, "unknown estimator '" + s + "'");
}

inline const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::Taylor: return "taylor";
    case Estimator::DeepFool: return "deepfool";
    case Estimator::ConstrainedTaylor: return "constrained-taylor";
    case Estimator::ConstrainedDeepFool: return "constrained-deepfool";
  }
  return "unknown";
}

inline bool is_constrained(Estimator e) {
  return e == Estimator::ConstrainedTaylor || e == Estimator::ConstrainedDeepFool;
}

struct MeasureOptions {
  Estimator estimator = Estimator::DeepFool;
  std::size_t layer = 0;
  SearchConfig search;
  std::optional<Eigen::Index> components;  // unset: Kneedle choice
  std::size_t samples = 0;                 // 0: every sample
  std::uint64_t seed = 0;
  bool tv_normalize = false;
  std::size_t threads = 1;
};

struct MeasuredSample {
  std::size_t sample_id = 0;
  MarginResult result;
  bool unreachable = false;  // subspace estimator could not reach the boundary
};

struct MeasureReport {
  std::vector<MeasuredSample> rows;
  std::size_t skipped_misclassified = 0;
  std::optional<Eigen::Index> components_used;
  bool components_fallback = false;
  std::optional<double> total_variance;
};

inline std::string status_label(const MeasuredSample& s) {
  return s.unreachable ? "unreachable" : to_string(s.result.status);
}

/// Seeded choice of `count` distinct rows of [0, s), returned sorted.
inline std::vector<std::size_t> choose_samples(std::size_t s, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(s);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (count == 0 || count >= s) return idx;
  Rng rng = make_rng(derive_seed(seed, "sample-select"));
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, s - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Number of components for a constrained estimator: the requested count or
/// the Kneedle choice over the model's explained variance.
inline std::pair<Eigen::Index, bool> resolve_components(const PcaModel& pca,
                                                        std::optional<Eigen::Index> requested) {
  if (requested) {
    require(*requested >= 1 && *requested <= pca.count(), ErrorKind::Config,
            "--components must lie in [1, " + std::to_string(pca.count()) + "]");
    return {*requested, false};
  }
  const auto choice = select_components_kneedle(pca.explained_variance);
  return {choice.m, choice.fallback};
}

/// Margins of the correctly classified samples of `ds` (features already in
/// model space). Misclassified samples are counted and skipped.
inline MeasureReport measure_margins(const Network& net, const Dataset& ds, const MeasureOptions& opt,
                                     const PcaModel* pca = nullptr) {
  ds.validate();
  require(ds.dim() == net.input_dim(), ErrorKind::Shape, "dataset width != model input_dim");
  require(opt.layer < net.depth(), ErrorKind::Config, "--layer must be below the logit layer");
  if (is_constrained(opt.estimator)) {
    require(opt.layer == 0, ErrorKind::Config, "constrained estimators work in input space only");
    require(pca != nullptr, ErrorKind::Config, "constrained estimators need a PCA model");
    require(pca->dim() == net.input_dim(), ErrorKind::Shape, "PCA dimension != model input_dim");
  }
  opt.search.validate();

  MeasureReport rep;
  Eigen::Index m = 0;
  if (is_constrained(opt.estimator)) {
    const auto [count, fallback] = resolve_components(*pca, opt.components);
    m = count;
    rep.components_used = count;
    rep.components_fallback = fallback;
  }

  std::vector<std::size_t> ids;
  std::vector<Vector> acts;
  for (auto k : choose_samples(static_cast<std::size_t>(ds.size()), opt.samples, opt.seed)) {
    const Vector x = ds.sample(static_cast<Eigen::Index>(k));
    const auto a = forward(net, x);
    if (argmax_index(a.logits()) != static_cast<Eigen::Index>(ds.labels[k])) {
      ++rep.skipped_misclassified;
      continue;
    }
    ids.push_back(k);
    acts.push_back(a.per_layer[opt.layer]);
  }
  rep.rows.resize(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) rep.rows[k].sample_id = ids[k];
  if (ids.empty()) return rep;

  auto one = [&](std::size_t k) {
    auto& row = rep.rows[k];
    TaylorOptions topt;
    topt.reference_class = static_cast<Eigen::Index>(ds.labels[ids[k]]);
    try {
      switch (opt.estimator) {
        case Estimator::Taylor: row.result = taylor_margin(net, opt.layer, acts[k], topt); break;
        case Estimator::DeepFool: row.result = deepfool_margin(net, opt.layer, acts[k], opt.search); break;
        case Estimator::ConstrainedTaylor:
          row.result = constrained_taylor_margin(net, acts[k], *pca, m, topt);
          break;
        case Estimator::ConstrainedDeepFool:
          row.result = constrained_deepfool_margin(net, acts[k], *pca, m, opt.search);
          break;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Unreachable && e.kind() != ErrorKind::Numerical) throw;
      const Vector logits = forward_from(net, opt.layer, acts[k]);
      row.result.class_i = argmax_index(logits);
      row.result.class_j = argmax_excluding(logits, row.result.class_i);
      row.result.distance = std::numeric_limits<double>::infinity();
      row.result.violation = std::abs(logits[row.result.class_i] - logits[row.result.class_j]);
      row.result.status = MarginStatus::NoDescent;
      row.unreachable = e.kind() == ErrorKind::Unreachable;
    }
  };

  const bool batched = opt.search.batch_mode &&
                       (opt.estimator == Estimator::DeepFool || opt.estimator == Estimator::ConstrainedDeepFool);
  if (batched) {
    auto out = opt.estimator == Estimator::DeepFool
                   ? deepfool_margin_batch(net, opt.layer, acts, opt.search, opt.threads)
                   : constrained_deepfool_margin_batch(net, acts, *pca, m, opt.search, opt.threads);
    for (std::size_t k = 0; k < out.size(); ++k) rep.rows[k].result = std::move(out[k]);
  } else {
    parallel_for(ids.size(), opt.threads, one);
  }

  if (opt.tv_normalize) {
    Matrix a(static_cast<Eigen::Index>(acts.size()), acts.front().size());
    for (std::size_t k = 0; k < acts.size(); ++k) a.row(static_cast<Eigen::Index>(k)) = acts[k].transpose();
    const double tv = total_variance(a);
    require(tv > 0.0, ErrorKind::Numerical, "total variance of the layer activations is zero");
    rep.total_variance = tv;
    for (auto& row : rep.rows) row.result.distance /= tv;
  }
  return rep;
}

inline std::string measure_csv(const MeasureReport& rep) {
  std::string out = "sample_id,i,j,d,v,steps,status\n";
  for (const auto& r : rep.rows) {
    out += std::to_string(r.sample_id) + "," + std::to_string(r.result.class_i) + "," +
           std::to_string(r.result.class_j) + "," + fmt(r.result.distance) + "," + fmt(r.result.violation) +
           "," + std::to_string(r.result.steps) + "," + status_label(r) + "\n";
  }
  return out;
}

/// sample_id, x_0..x_{n-1}, xhat_0..xhat_{n-1} for every row that has a boundary point.
inline std::string boundary_csv(const MeasureReport& rep, const Dataset& ds) {
  std::string out = "sample_id";
  for (Eigen::Index c = 0; c < ds.dim(); ++c) out += ",x_" + std::to_string(c);
  for (Eigen::Index c = 0; c < ds.dim(); ++c) out += ",xhat_" + std::to_string(c);
  out += "\n";
  for (const auto& r : rep.rows) {
    if (!r.result.boundary_point || r.result.boundary_point->size() != ds.dim()) continue;
    out += std::to_string(r.sample_id);
    const Vector x = ds.sample(static_cast<Eigen::Index>(r.sample_id));
    for (Eigen::Index c = 0; c < ds.dim(); ++c) out += "," + fmt(x[c]);
    for (Eigen::Index c = 0; c < ds.dim(); ++c) out += "," + fmt((*r.result.boundary_point)[c]);
    out += "\n";
  }
  return out;
}

struct BoundaryPairs {
  std::vector<Vector> originals;
  std::vector<Vector> boundary_points;
};

inline BoundaryPairs parse_boundary_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  BoundaryPairs out;
  std::size_t width = 0;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header) {
      header = false;
      require(cells.size() >= 3 && (cells.size() - 1) % 2 == 0, ErrorKind::Config,
              "boundary CSV needs sample_id plus paired x_/xhat_ columns");
      width = (cells.size() - 1) / 2;
      continue;
    }
    require(cells.size() == 2 * width + 1, ErrorKind::Config, "ragged boundary CSV row");
    Vector x(static_cast<Eigen::Index>(width)), b(static_cast<Eigen::Index>(width));
    try {
      for (std::size_t c = 0; c < width; ++c) {
        x[static_cast<Eigen::Index>(c)] = std::stod(cells[1 + c]);
        b[static_cast<Eigen::Index>(c)] = std::stod(cells[1 + width + c]);
      }
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "non-numeric boundary CSV entry");
    }
    out.originals.push_back(std::move(x));
    out.boundary_points.push_back(std::move(b));
  }
  require(!out.originals.empty(), ErrorKind::Config, "boundary CSV has no rows");
  return out;
}

// ---------------------------------------------------------------- advdir

inline std::string advdir_csv(const PcaModel& pca, const AdvShare& share) {
  const auto marks = variance_markers(pca.explained_ratio);
  std::string out = "component_index,explained_ratio,p_share,cumulative,variance_70,variance_99\n";
  for (Eigen::Index k = 0; k < share.p_share.size(); ++k) {
    out += std::to_string(k + 1) + "," + fmt(pca.explained_ratio[k]) + "," + fmt(share.p_share[k]) + "," +
           fmt(share.cumulative[k]) + "," + (k + 1 == marks.at_70 ? "1" : "0") + "," +
           (k + 1 == marks.at_99 ? "1" : "0") + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- evaluate

enum class Metric { Kendall, Granulated, Cmi, R2 };

inline Metric parse_metric(const std::string& s) {
  if (s == "kendall") return Metric::Kendall;
  if (s == "granulated") return Metric::Granulated;
  if (s == "cmi") return Metric::Cmi;
  if (s == "r2") return Metric::R2;
  fail(ErrorKind::Config, "unknown metric '" + s + "'");
}

struct ModelEntry {
  std::string model_path;
  std::vector<std::pair<std::string, std::string>> hyperparams;  // file order
  double train_acc = 0.0;
  double test_acc = 0.0;
  json measures;  // name -> number or array
};

inline std::vector<ModelEntry> parse_models(const json& doc) {
  const json& list = doc.is_object() && doc.contains("models") ? doc.at("models") : doc;
  require(list.is_array(), ErrorKind::Config, "models file must hold a list of models");
  std::vector<ModelEntry> out;
  for (const auto& m : list) {
    try {
      ModelEntry e;
      e.model_path = m.value("model_path", std::string{});
      for (const auto& [k, v] : m.at("hyperparams").items())
        e.hyperparams.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
      e.train_acc = m.at("train_acc").get<double>();
      e.test_acc = m.at("test_acc").get<double>();
      e.measures = json::object();
      for (const auto& [k, v] : m.items())
        if (k != "model_path" && k != "hyperparams" && k != "train_acc" && k != "test_acc" && k != "measures")
          e.measures[k] = v;
      if (m.contains("measures"))
        for (const auto& [k, v] : m.at("measures").items()) e.measures[k] = v;
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      fail(ErrorKind::Config, std::string("malformed model entry: ") + ex.what());
    }
  }
  require(!out.empty(), ErrorKind::Config, "models file is empty");
  return out;
}

struct EvaluateOptions {
  Metric metric = Metric::Kendall;
  std::string measure_col;
  std::optional<Target> target;  // default: test accuracy for Kendall-type, gap otherwise
  std::optional<bool> negate;    // default: negate for CMI only
  std::uint64_t seed = 0;        // R^2 fold shuffles
};

struct EvaluateResult {
  double value = 0.0;
  std::vector<std::pair<std::string, double>> details;  // per hyperparameter / pair / fold
  json meta;
};

inline EvaluateResult evaluate_models(const std::vector<ModelEntry>& entries, const EvaluateOptions& opt) {
  require(!opt.measure_col.empty(), ErrorKind::Config, "--measure-col is required");
  const bool kendall_like = opt.metric == Metric::Kendall || opt.metric == Metric::Granulated;
  const Target target = opt.target.value_or(kendall_like ? Target::TestAccuracy : Target::GenGap);
  const bool negate = opt.negate.value_or(opt.metric == Metric::Cmi);
  const auto& names = entries.front().hyperparams;

  EvaluateResult res;
  res.meta = {{"metric", opt.metric == Metric::Kendall      ? "kendall"
                         : opt.metric == Metric::Granulated ? "granulated"
                         : opt.metric == Metric::Cmi        ? "cmi"
                                                            : "r2"},
              {"measure", opt.measure_col},
              {"target", target == Target::GenGap ? "gen_gap" : "test_acc"},
              {"negated", negate},
              {"models", entries.size()}};

  if (opt.metric == Metric::R2) {
    std::vector<Vector> sigs;
    Vector gaps(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& e = entries[k];
      require(e.measures.contains(opt.measure_col), ErrorKind::Config,
              "model " + std::to_string(k) + " lacks measure '" + opt.measure_col + "'");
      const json& v = e.measures.at(opt.measure_col);
      Vector s;
      if (v.is_array()) {
        s.resize(static_cast<Eigen::Index>(v.size()));
        for (std::size_t c = 0; c < v.size(); ++c) s[static_cast<Eigen::Index>(c)] = v[c].get<double>();
      } else {
        s = Vector::Constant(1, v.get<double>());
      }
      require(sigs.empty() || sigs.front().size() == s.size(), ErrorKind::Config,
              "signature lengths differ between models");
      sigs.push_back(s);
      gaps[static_cast<Eigen::Index>(k)] = target == Target::GenGap ? e.train_acc - e.test_acc : e.test_acc;
    }
    Matrix x(static_cast<Eigen::Index>(sigs.size()), sigs.front().size());
    for (std::size_t k = 0; k < sigs.size(); ++k) x.row(static_cast<Eigen::Index>(k)) = sigs[k].transpose();
    require(entries.size() >= 3, ErrorKind::Config, "R^2 cross-validation needs at least three models");
    const auto cv = cross_validate_predictor(x, gaps, opt.seed);
    res.value = cv.mean;
    for (std::size_t k = 0; k < cv.r2.size(); ++k)
      res.details.emplace_back("shuffle" + std::to_string(k / 3) + "_fold" + std::to_string(k % 3), cv.r2[k]);
    res.meta["r2_stddev"] = cv.stddev;
    return res;
  }

  std::vector<EvaluatedModel> models;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    require(e.hyperparams.size() == names.size(), ErrorKind::Config, "models do not share a hyperparameter schema");
    EvaluatedModel m;
    for (std::size_t h = 0; h < names.size(); ++h) {
      auto it = std::find_if(e.hyperparams.begin(), e.hyperparams.end(),
                             [&](const auto& p) { return p.first == names[h].first; });
      require(it != e.hyperparams.end(), ErrorKind::Config,
              "model " + std::to_string(k) + " lacks hyperparameter '" + names[h].first + "'");
      m.hyperparams.push_back(it->second);
    }
    require(e.measures.contains(opt.measure_col) && e.measures.at(opt.measure_col).is_number(), ErrorKind::Config,
            "model " + std::to_string(k) + " lacks numeric measure '" + opt.measure_col + "'");
    const double v = e.measures.at(opt.measure_col).get<double>();
    m.complexity = negate ? -v : v;
    m.gen_gap = e.train_acc - e.test_acc;
    m.test_accuracy = e.test_acc;
    models.push_back(std::move(m));
  }

  switch (opt.metric) {
    case Metric::Kendall:
      res.value = kendall_tau(models, target);
      break;
    case Metric::Granulated: {
      std::vector<double> psi;
      for (std::size_t h = 0; h < names.size(); ++h) {
        const auto g = granulated_kendall(models, h, target);
        psi.push_back(g.psi);
        res.details.emplace_back(names[h].first, g.psi);
        res.meta["groups_skipped"][names[h].first] = g.groups_skipped;
      }
      res.value = mean_granulated(psi);
      break;
    }
    case Metric::Cmi: {
      const auto s = cmi_score(models, target);
      for (const auto& [pair, v] : s.per_pair)
        res.details.emplace_back(names[pair.first].first + "+" + names[pair.second].first, 100.0 * v);
      res.value = s.final_score;
      res.meta["conventions"] = "both-orientation pair counting; ties dropped; zero entropy scores 0";
      break;
    }
    case Metric::R2: break;
  }
  return res;
}

inline std::string evaluate_csv(const EvaluateResult& r) {
  std::string out = "name,value\n";
  out += "score," + fmt(r.value) + "\n";
  for (const auto& [k, v] : r.details) out += k + "," + fmt(v) + "\n";
  return out;
}

inline json evaluate_json(const EvaluateResult& r) {
  json d = json::object();
  for (const auto& [k, v] : r.details) d[k] = v;
  return {{"score", r.value}, {"details", d}, {"meta", r.meta}};
}

// ---------------------------------------------------------------- sweep

struct SweepDataSpec {
  std::string source = "blobs";  // or "file"
  std::uint32_t classes = 3;
  Eigen::Index dim = 2;
  std::size_t samples_per_class = 100;
  std::size_t test_samples_per_class = 100;
  double center_range = 5.0;
  double spread = 1.0;
  std::string train_path;
  std::string test_path;
  DataFormat format = DataFormat::Bin;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "sweep-out";
  std::size_t threads = 0;  // 0: MW_THREADS or hardware
  SweepDataSpec data;
  NormScheme normalization = NormScheme::MinMax;
  double label_fraction = 0.2;
  double input_fraction = 0.2;
  std::vector<std::string> conditions{"clean", "label", "input"};
  std::vector<Eigen::Index> widths{8, 16, 32, 64, 128};
  std::size_t depth = 1;
  std::size_t seeds = 3;
  TrainConfig train;
  MeasureOptions margin;
  std::size_t histogram_bins = 20;
};

namespace detail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  require(obj.is_object(), ErrorKind::Config, where + " must be an object");
  for (const auto& [k, v] : obj.items())
    require(allowed.count(k) > 0, ErrorKind::Config, "unknown key '" + k + "' in " + where);
}

template <typename T>
void read_opt(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const json& doc) {
  using detail::check_keys;
  using detail::read_opt;
  ExperimentConfig cfg;
  check_keys(doc,
             {"seed", "output_dir", "threads", "data", "normalization", "corruption", "conditions", "model",
              "train", "margin", "histogram_bins"},
             "config");
  read_opt(doc, "seed", cfg.seed, "config");
  read_opt(doc, "output_dir", cfg.output_dir, "config");
  read_opt(doc, "threads", cfg.threads, "config");
  read_opt(doc, "histogram_bins", cfg.histogram_bins, "config");
  if (doc.contains("normalization")) cfg.normalization = parse_norm_scheme(doc.at("normalization").get<std::string>());
  if (doc.contains("conditions")) read_opt(doc, "conditions", cfg.conditions, "config");
  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    check_keys(d,
               {"source", "classes", "dim", "samples_per_class", "test_samples_per_class", "center_range", "spread",
                "train_path", "test_path", "format"},
               "data");
    read_opt(d, "source", cfg.data.source, "data");
    read_opt(d, "classes", cfg.data.classes, "data");
    read_opt(d, "dim", cfg.data.dim, "data");
    read_opt(d, "samples_per_class", cfg.data.samples_per_class, "data");
    read_opt(d, "test_samples_per_class", cfg.data.test_samples_per_class, "data");
    read_opt(d, "center_range", cfg.data.center_range, "data");
    read_opt(d, "spread", cfg.data.spread, "data");
    read_opt(d, "train_path", cfg.data.train_path, "data");
    read_opt(d, "test_path", cfg.data.test_path, "data");
    if (d.contains("format")) cfg.data.format = parse_data_format(d.at("format").get<std::string>());
  }
  if (doc.contains("corruption")) {
    const auto& c = doc.at("corruption");
    check_keys(c, {"label_fraction", "input_fraction"}, "corruption");
    read_opt(c, "label_fraction", cfg.label_fraction, "corruption");
    read_opt(c, "input_fraction", cfg.input_fraction, "corruption");
  }
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    check_keys(m, {"widths", "depth", "seeds"}, "model");
    read_opt(m, "widths", cfg.widths, "model");
    read_opt(m, "depth", cfg.depth, "model");
    read_opt(m, "seeds", cfg.seeds, "model");
  }
  if (doc.contains("train")) {
    const auto& t = doc.at("train");
    check_keys(t, {"epochs", "batch_size", "learning_rate", "momentum", "lr_decay_every", "lr_decay_factor"}, "train");
    read_opt(t, "epochs", cfg.train.epochs, "train");
    read_opt(t, "batch_size", cfg.train.batch_size, "train");
    read_opt(t, "learning_rate", cfg.train.learning_rate, "train");
    read_opt(t, "momentum", cfg.train.momentum, "train");
    read_opt(t, "lr_decay_every", cfg.train.lr_decay_every, "train");
    read_opt(t, "lr_decay_factor", cfg.train.lr_decay_factor, "train");
  }
  if (doc.contains("margin")) {
    const auto& g = doc.at("margin");
    check_keys(g, {"estimator", "gamma", "delta", "epsilon", "max_iters", "samples", "components", "batch"},
               "margin");
    if (g.contains("estimator")) cfg.margin.estimator = parse_estimator(g.at("estimator").get<std::string>());
    read_opt(g, "gamma", cfg.margin.search.learning_rate, "margin");
    read_opt(g, "delta", cfg.margin.search.stop_tolerance, "margin");
    read_opt(g, "epsilon", cfg.margin.search.equality_threshold, "margin");
    read_opt(g, "max_iters", cfg.margin.search.max_iters, "margin");
    read_opt(g, "samples", cfg.margin.samples, "margin");
    read_opt(g, "batch", cfg.margin.search.batch_mode, "margin");
    if (g.contains("components")) {
      const auto& c = g.at("components");
      if (c.is_string()) {
        require(c.get<std::string>() == "auto", ErrorKind::Config, "margin.components must be a count or \"auto\"");
      } else {
        Eigen::Index v = 0;
        read_opt(g, "components", v, "margin");
        cfg.margin.components = v;
      }
    }
  }
  return cfg;
}

inline void validate(const ExperimentConfig& cfg) {
  require(!cfg.widths.empty(), ErrorKind::Config, "model.widths must list at least one width");
  for (auto w : cfg.widths) require(w > 0, ErrorKind::Config, "model.widths must be positive");
  require(cfg.depth >= 1, ErrorKind::Config, "model.depth must be >= 1");
  require(cfg.seeds >= 1, ErrorKind::Config, "model.seeds must be >= 1");
  require(!cfg.conditions.empty(), ErrorKind::Config, "conditions must not be empty");
  for (const auto& c : cfg.conditions)
    require(c == "clean" || c == "label" || c == "input", ErrorKind::Config,
            "condition '" + c + "' is not one of clean, label, input");
  require(cfg.label_fraction >= 0 && cfg.label_fraction <= 1, ErrorKind::Config,
          "corruption.label_fraction must be in [0, 1]");
  require(cfg.input_fraction >= 0 && cfg.input_fraction <= 1, ErrorKind::Config,
          "corruption.input_fraction must be in [0, 1]");
  require(cfg.histogram_bins >= 1, ErrorKind::Config, "histogram_bins must be >= 1");
  require(cfg.data.source == "blobs" || cfg.data.source == "file", ErrorKind::Config,
          "data.source must be blobs or file");
  require(cfg.train.epochs >= 1 && cfg.train.batch_size >= 1 && cfg.train.learning_rate > 0, ErrorKind::Config,
          "train settings must be positive");
  require(cfg.margin.layer == 0, ErrorKind::Config, "the sweep measures input margins");
  try {
    cfg.margin.search.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Config, std::string("margin: ") + e.what());
  }
}

inline const char* model_kind(const std::string& condition) {
  if (condition == "label") return "label-corrupted";
  if (condition == "input") return "input-corrupted";
  return "clean";
}

struct SweepModelRow {
  std::string condition;
  Eigen::Index width = 0;
  std::size_t seed_index = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double final_loss = 0.0;
  std::size_t measured = 0;
  std::size_t skipped = 0;
  std::optional<double> mean_clean, mean_corrupt, mean_overall;
  std::map<std::string, std::size_t> statuses;
  MeasureReport margins;
};

struct SweepResult {
  std::vector<SweepModelRow> models;
  std::map<std::string, std::string> files;  // file name -> content
  json summary;
};

namespace detail {

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

// Rethrows with the failing stage named.
template <typename Fn>
auto staged(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + stage + "': " + e.what());
  }
}

}  // namespace detail

/// Trains every (condition, width, seed) model, measures the input margins of
/// its correctly classified training samples and builds the report tables.
/// Nothing is written; see write_sweep.
inline SweepResult compute_sweep(const ExperimentConfig& cfg) {
  validate(cfg);
  const std::size_t threads = cfg.threads > 0 ? std::min(cfg.threads, thread_budget()) : thread_budget();

  // data
  Dataset train_raw, test_raw;
  detail::staged("data", [&] {
    if (cfg.data.source == "blobs") {
      BlobConfig bc;
      bc.classes = cfg.data.classes;
      bc.dim = cfg.data.dim;
      bc.center_range = cfg.data.center_range;
      bc.spread = cfg.data.spread;
      bc.centers = blob_centers(bc.classes, bc.dim, bc.center_range, derive_seed(cfg.seed, "data"));
      bc.samples_per_class = cfg.data.samples_per_class;
      bc.seed = derive_seed(cfg.seed, "data-train");
      train_raw = gen_blobs(bc);
      bc.samples_per_class = cfg.data.test_samples_per_class;
      bc.seed = derive_seed(cfg.seed, "data-test");
      test_raw = gen_blobs(bc);
    } else {
      train_raw = load_dataset(cfg.data.train_path, cfg.data.format);
      test_raw = load_dataset(cfg.data.test_path, cfg.data.format);
      require(train_raw.dim() == test_raw.dim(), ErrorKind::Config, "train and test widths differ");
      test_raw.class_count = train_raw.class_count = std::max(train_raw.class_count, test_raw.class_count);
    }
    return 0;
  });

  const NormalizationMeta meta = fit_normalization(train_raw, cfg.normalization);
  const Dataset train = apply_normalization(train_raw, meta);
  const Dataset test = apply_normalization(test_raw, meta);

  std::map<std::string, Dataset> variants;
  std::map<std::string, CorruptionReport> reports;
  detail::staged("corrupt", [&] {
    for (const auto& c : cfg.conditions) {
      if (c == "clean") {
        variants[c] = train;
      } else if (c == "label") {
        auto [ds, rep] = corrupt_labels(train, cfg.label_fraction, derive_seed(cfg.seed, "corrupt-label"));
        variants[c] = std::move(ds);
        reports[c] = std::move(rep);
      } else {
        auto [ds, rep] = corrupt_inputs_gaussian(train, cfg.input_fraction, derive_seed(cfg.seed, "corrupt-input"));
        variants[c] = std::move(ds);
        reports[c] = std::move(rep);
      }
    }
    return 0;
  });

  std::optional<PcaModel> pca;
  if (is_constrained(cfg.margin.estimator)) {
    pca = detail::staged("pca", [&] {
      const auto n = std::min<Eigen::Index>(train.size() - 1, train.dim());
      return fit_pca(train.features, n);
    });
  }

  struct Job {
    std::string condition;
    Eigen::Index width;
    std::size_t seed_index;
  };
  std::vector<Job> jobs;
  for (const auto& c : cfg.conditions)
    for (auto w : cfg.widths)
      for (std::size_t s = 0; s < cfg.seeds; ++s) jobs.push_back({c, w, s});

  SweepResult res;
  res.models.resize(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t k) {
    const auto& job = jobs[k];
    const std::string tag = job.condition + ",w=" + std::to_string(job.width) + ",seed=" + std::to_string(job.seed_index);
    const Dataset& ds = variants.at(job.condition);
    const std::uint64_t model_seed =
        derive_seed(cfg.seed, "model", static_cast<std::uint64_t>(job.width) * 1000003u + job.seed_index);
    auto& row = res.models[k];
    row.condition = job.condition;
    row.width = job.width;
    row.seed_index = job.seed_index;
    TrainResult tr = detail::staged("train[" + tag + "]", [&] {
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(model_seed, "train");
      const std::vector<Eigen::Index> hidden(cfg.depth, job.width);
      NormalizationMeta nm = meta;
      return train_sgd(init_network(ds.dim(), hidden, ds.class_count, derive_seed(model_seed, "init"), nm), ds, tc);
    });
    row.train_acc = tr.train_accuracy;
    row.final_loss = tr.final_loss;
    row.test_acc = accuracy(tr.net, test);
    detail::staged("measure[" + tag + "]", [&] {
      MeasureOptions mo = cfg.margin;
      mo.seed = derive_seed(model_seed, "measure");
      mo.threads = 1;
      row.margins = measure_margins(tr.net, ds, mo, pca ? &*pca : nullptr);
      return 0;
    });
    row.skipped = row.margins.skipped_misclassified;
    std::vector<double> clean, corrupt, overall;
    for (const auto& m : row.margins.rows) {
      ++row.statuses[status_label(m)];
      if (!std::isfinite(m.result.distance)) continue;
      ++row.measured;
      overall.push_back(m.result.distance);
      (ds.flags[m.sample_id] == CorruptFlag::Clean ? clean : corrupt).push_back(m.result.distance);
    }
    row.mean_clean = detail::mean_of(clean);
    row.mean_corrupt = detail::mean_of(corrupt);
    row.mean_overall = detail::mean_of(overall);
  });

  // models.csv
  std::string models_csv =
      "condition,width,seed,train_acc,test_acc,gen_gap,final_loss,measured,skipped_misclassified,"
      "mean_margin_clean,mean_margin_corrupt,mean_margin_overall\n";
  for (const auto& r : res.models)
    models_csv += r.condition + "," + std::to_string(r.width) + "," + std::to_string(r.seed_index) + "," +
                  fmt(r.train_acc) + "," + fmt(r.test_acc) + "," + fmt(r.train_acc - r.test_acc) + "," +
                  fmt(r.final_loss) + "," + std::to_string(r.measured) + "," + std::to_string(r.skipped) + "," +
                  detail::opt_fmt(r.mean_clean) + "," + detail::opt_fmt(r.mean_corrupt) + "," +
                  detail::opt_fmt(r.mean_overall) + "\n";
  res.files["models.csv"] = models_csv;

  // capacity.csv: seed-averaged mean margin per sample type and width
  std::vector<std::string> types;
  for (const auto& c : cfg.conditions) {
    const std::string kind = model_kind(c);
    types.push_back("clean:" + kind);
    if (c == "clean") continue;  // overall equals clean for a clean model
    types.push_back("corrupt:" + kind);
    types.push_back("overall:" + kind);
  }
  auto type_value = [](const SweepModelRow& r, const std::string& type) -> std::optional<double> {
    if (type.rfind("clean:", 0) == 0) return r.mean_clean;
    if (type.rfind("corrupt:", 0) == 0) return r.mean_corrupt;
    return r.mean_overall;
  };
  std::string capacity_csv = "width";
  for (const auto& t : types) capacity_csv += "," + t;
  capacity_csv += "\n";
  json cap_json = json::array();
  for (auto w : cfg.widths) {
    capacity_csv += std::to_string(w);
    json entry = {{"width", w}};
    for (const auto& t : types) {
      const std::string cond = t.substr(t.find(':') + 1) == "clean"             ? "clean"
                               : t.substr(t.find(':') + 1) == "label-corrupted" ? "label"
                                                                                 : "input";
      std::vector<double> per_seed;
      for (const auto& r : res.models)
        if (r.condition == cond && r.width == w)
          if (auto v = type_value(r, t)) per_seed.push_back(*v);
      const auto mean = detail::mean_of(per_seed);
      capacity_csv += "," + detail::opt_fmt(mean);
      entry[t] = mean ? json(*mean) : json(nullptr);
    }
    capacity_csv += "\n";
    cap_json.push_back(entry);
  }
  res.files["capacity.csv"] = capacity_csv;

  // margins.csv
  std::string margins_csv = "condition,width,seed,sample_id,flag,i,j,d,v,steps,status\n";
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : res.models) {
    const Dataset& ds = variants.at(r.condition);
    for (const auto& m : r.margins.rows) {
      margins_csv += r.condition + "," + std::to_string(r.width) + "," + std::to_string(r.seed_index) + "," +
                     std::to_string(m.sample_id) + "," + to_string(ds.flags[m.sample_id]) + "," +
                     std::to_string(m.result.class_i) + "," + std::to_string(m.result.class_j) + "," +
                     fmt(m.result.distance) + "," + fmt(m.result.violation) + "," + std::to_string(m.result.steps) +
                     "," + status_label(m) + "\n";
      if (std::isfinite(m.result.distance)) {
        lo = std::min(lo, m.result.distance);
        hi = std::max(hi, m.result.distance);
      }
    }
  }
  res.files["margins.csv"] = margins_csv;

  // histogram.csv over shared bins
  std::string hist_csv = "condition,width,sample_type,bin_lo,bin_hi,count\n";
  if (lo <= hi) {
    const double span = hi > lo ? hi - lo : 1.0;
    const auto bins = cfg.histogram_bins;
    for (const auto& c : cfg.conditions)
      for (auto w : cfg.widths)
        for (const char* sample : {"clean", "corrupt"}) {
          if (c == "clean" && std::string(sample) == "corrupt") continue;
          std::vector<std::size_t> counts(bins, 0);
          for (const auto& r : res.models) {
            if (r.condition != c || r.width != w) continue;
            const Dataset& ds = variants.at(c);
            for (const auto& m : r.margins.rows) {
              if (!std::isfinite(m.result.distance)) continue;
              const bool is_clean = ds.flags[m.sample_id] == CorruptFlag::Clean;
              if (is_clean != (std::string(sample) == "clean")) continue;
              auto b = static_cast<std::size_t>((m.result.distance - lo) / span * static_cast<double>(bins));
              counts[std::min(b, bins - 1)]++;
            }
          }
          for (std::size_t b = 0; b < bins; ++b)
            hist_csv += c + "," + std::to_string(w) + "," + sample + ":" + model_kind(c) + "," +
                        fmt(lo + span * static_cast<double>(b) / static_cast<double>(bins)) + "," +
                        fmt(lo + span * static_cast<double>(b + 1) / static_cast<double>(bins)) + "," +
                        std::to_string(counts[b]) + "\n";
        }
  }
  res.files["histogram.csv"] = hist_csv;

  // max_margin.csv: nearest differently labelled training sample before and after corruption
  std::string mm_csv = "condition,sample_id,flag,before,after\n";
  json mm_json = json::object();
  std::vector<std::size_t> all(static_cast<std::size_t>(train.size()));
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Vector before = detail::staged("max-margin", [&] { return max_margin(train, all); });
  for (const auto& c : cfg.conditions) {
    if (c == "clean") continue;
    const Dataset& ds = variants.at(c);
    const Vector after = detail::staged("max-margin", [&] { return max_margin(ds, all); });
    for (std::size_t k = 0; k < all.size(); ++k)
      mm_csv += c + "," + std::to_string(k) + "," + to_string(ds.flags[k]) + "," +
                fmt(before[static_cast<Eigen::Index>(k)]) + "," + fmt(after[static_cast<Eigen::Index>(k)]) + "\n";
    mm_json[model_kind(c)] = {{"mean_before", before.mean()}, {"mean_after", after.mean()}};
  }
  res.files["max_margin.csv"] = mm_csv;

  json models_json = json::array();
  for (const auto& r : res.models) {
    json st = json::object();
    for (const auto& [k, v] : r.statuses) st[k] = v;
    models_json.push_back({{"condition", r.condition},
                           {"width", r.width},
                           {"seed", r.seed_index},
                           {"train_acc", r.train_acc},
                           {"test_acc", r.test_acc},
                           {"statuses", st}});
  }
  res.summary = {{"seed", cfg.seed},
                 {"estimator", to_string(cfg.margin.estimator)},
                 {"conditions", cfg.conditions},
                 {"widths", cfg.widths},
                 {"seeds", cfg.seeds},
                 {"capacity", cap_json},
                 {"max_margin", mm_json},
                 {"models", models_json}};
  res.files["summary.json"] = res.summary.dump(1) + "\n";
  return res;
}

/// Writes every report file into `dir`; on failure the files already written
/// are removed.
inline void write_outputs(const std::map<std::string, std::string>& files, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  try {
    for (const auto& [name, content] : files) {
      write_file_atomic(dir / name, content);
      written.push_back(dir / name);
    }
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) std::filesystem::remove(p, ec);
    throw;
  }
}

inline SweepResult run_capacity_sweep(const ExperimentConfig& cfg) {
  auto res = compute_sweep(cfg);
  detail::staged("write", [&] {
    write_outputs(res.files, cfg.output_dir);
    return 0;
  });
  return res;
}

}  // namespace mw
