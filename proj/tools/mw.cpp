// mw: command-line front end for the margin workbench.
//
// Every subcommand accepts --config FILE (a JSON object keyed by long option
// names); flags given on the command line override the file. The sweep
// subcommand takes the nested experiment configuration instead.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "marginwb/experiment.hpp"

namespace {

using mw::ErrorKind;
using mw::json;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Numerical:
    case ErrorKind::Unreachable: return 3;
    default: return 2;
  }
}

/// Merged view of the config file and the flags that were actually given.
class Settings {
 public:
  Settings(CLI::App* app, const std::string& config_path) {
    if (!config_path.empty()) {
      values_ = mw::detail::read_json_file(config_path);
      mw::require(values_.is_object(), ErrorKind::Config, "config file must hold a JSON object");
      for (const auto& [k, v] : values_.items()) {
        (void)v;
        mw::require(k != "config" && app->get_option_no_throw("--" + k) != nullptr, ErrorKind::Config,
                    "unknown config key '" + k + "' for " + app->get_name());
      }
    } else {
      values_ = json::object();
    }
    for (const CLI::Option* opt : app->get_options()) {
      const std::string name = opt->get_single_name();
      if (opt->count() == 0 || name == "config" || name == "help") continue;
      if (opt->get_type_size() == 0) {
        values_[name] = true;
      } else if (opt->get_expected_max() > 1) {
        values_[name] = opt->results();
      } else {
        values_[name] = opt->results().back();
      }
    }
  }

  bool has(const std::string& k) const { return values_.contains(k); }

  std::string str(const std::string& k, const std::string& dflt = "") const {
    if (!has(k)) return dflt;
    const json& v = values_.at(k);
    return v.is_string() ? v.get<std::string>() : v.dump();
  }

  std::string required(const std::string& k) const {
    mw::require(has(k), ErrorKind::Config, "--" + k + " is required");
    return str(k);
  }

  double num(const std::string& k, double dflt) const {
    if (!has(k)) return dflt;
    const json& v = values_.at(k);
    if (v.is_number()) return v.get<double>();
    try {
      std::size_t used = 0;
      const double d = std::stod(str(k), &used);
      if (used == str(k).size()) return d;
    } catch (const std::exception&) {
    }
    mw::fail(ErrorKind::Config, "--" + k + " expects a number, got '" + str(k) + "'");
  }

  long long integer(const std::string& k, long long dflt) const {
    const double d = num(k, static_cast<double>(dflt));
    mw::require(d == std::floor(d), ErrorKind::Config, "--" + k + " expects an integer");
    return static_cast<long long>(d);
  }

  std::size_t count(const std::string& k, std::size_t dflt) const {
    const long long v = integer(k, static_cast<long long>(dflt));
    mw::require(v >= 0, ErrorKind::Config, "--" + k + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& k, bool dflt) const {
    if (!has(k)) return dflt;
    const json& v = values_.at(k);
    if (v.is_boolean()) return v.get<bool>();
    const std::string s = str(k);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    mw::fail(ErrorKind::Config, "--" + k + " expects true or false");
  }

  std::vector<long long> int_list(const std::string& k, std::vector<long long> dflt) const {
    if (!has(k)) return dflt;
    std::vector<std::string> tokens;
    const json& v = values_.at(k);
    if (v.is_array()) {
      for (const auto& e : v) tokens.push_back(e.is_string() ? e.get<std::string>() : e.dump());
    } else {
      tokens.push_back(str(k));
    }
    std::vector<long long> out;
    for (const auto& t : tokens) {
      std::stringstream ss(t);
      std::string piece;
      while (std::getline(ss, piece, ',')) {
        if (piece.empty()) continue;
        try {
          std::size_t used = 0;
          out.push_back(std::stoll(piece, &used));
          mw::require(used == piece.size(), ErrorKind::Config, "--" + k + ": bad integer '" + piece + "'");
        } catch (const std::logic_error&) {
          mw::fail(ErrorKind::Config, "--" + k + ": bad integer '" + piece + "'");
        }
      }
    }
    return out;
  }

 private:
  json values_;
};

mw::DataFormat format_for(const Settings& s, const std::string& path) {
  if (s.has("format")) return mw::parse_data_format(s.str("format"));
  return std::filesystem::path(path).extension() == ".csv" ? mw::DataFormat::Csv : mw::DataFormat::Bin;
}

mw::Dataset to_model_space(const mw::Dataset& raw, const mw::Network& net) {
  if (net.norm_meta().scheme == mw::NormScheme::None) return raw;
  mw::Dataset out = mw::apply_normalization(raw, net.norm_meta());
  if (net.has_bounds()) {
    out.lower = net.norm_meta().lower;
    out.upper = net.norm_meta().upper;
  }
  return out;
}

std::size_t thread_count(const Settings& s) {
  const std::size_t cap = mw::thread_budget();
  const std::size_t want = s.count("threads", cap);
  return std::max<std::size_t>(1, std::min(want, cap));
}

void emit(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
  } else {
    mw::write_file_atomic(path, content);
  }
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Settings& s) {
  mw::BlobConfig bc;
  const auto seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  bc.classes = static_cast<std::uint32_t>(s.count("classes", 3));
  bc.dim = static_cast<Eigen::Index>(s.count("dim", 2));
  bc.center_range = s.num("center-range", 5.0);
  bc.spread = s.num("spread", 1.0);
  bc.samples_per_class = s.count("samples-per-class", 100);
  mw::require(bc.classes >= 1 && bc.dim >= 1, ErrorKind::Config, "--classes and --dim must be positive");
  mw::require(bc.spread >= 0.0, ErrorKind::Config, "--spread must be non-negative");
  bc.centers = mw::blob_centers(bc.classes, bc.dim, bc.center_range, mw::derive_seed(seed, "data"));
  bc.seed = mw::derive_seed(seed, "data-train");
  const std::string out = s.required("out");
  const mw::Dataset train = mw::gen_blobs(bc);
  mw::save_dataset(train, out, format_for(s, out));
  json summary = {{"train", out}, {"samples", train.size()}, {"dim", train.dim()}, {"classes", train.class_count}};
  if (s.has("test-out")) {
    bc.samples_per_class = s.count("test-samples-per-class", bc.samples_per_class);
    bc.seed = mw::derive_seed(seed, "data-test");
    const mw::Dataset test = mw::gen_blobs(bc);
    mw::save_dataset(test, s.str("test-out"), format_for(s, s.str("test-out")));
    summary["test"] = s.str("test-out");
    summary["test_samples"] = test.size();
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_corrupt(const Settings& s) {
  const std::string in = s.required("in");
  const std::string out = s.required("out");
  const mw::Dataset ds = mw::load_dataset(in, format_for(s, in));
  const double fraction = s.num("fraction", 0.2);
  mw::require(fraction >= 0.0 && fraction <= 1.0, ErrorKind::Config, "--fraction must be in [0, 1]");
  const auto seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  const std::string kind = s.str("kind", "label");
  std::pair<mw::Dataset, mw::CorruptionReport> res;
  if (kind == "label") {
    res = mw::corrupt_labels(ds, fraction, seed);
  } else if (kind == "gaussian") {
    res = mw::corrupt_inputs_gaussian(ds, fraction, seed);
  } else {
    mw::fail(ErrorKind::Config, "--kind must be label or gaussian");
  }
  mw::save_dataset(res.first, out, format_for(s, out));
  json report = {{"kind", kind},
                 {"fraction_requested", fraction},
                 {"seed", seed},
                 {"corrupted", res.second.indices_corrupted.size()},
                 {"indices_corrupted", res.second.indices_corrupted}};
  if (s.has("report")) mw::write_file_atomic(s.str("report"), report.dump(1) + "\n");
  report.erase("indices_corrupted");
  std::cout << report.dump() << "\n";
  return 0;
}

int cmd_train(const Settings& s) {
  const std::string data = s.required("data");
  const mw::Dataset raw = mw::load_dataset(data, format_for(s, data));
  const mw::NormScheme scheme = mw::parse_norm_scheme(s.str("norm", "minmax"));
  const mw::NormalizationMeta meta = mw::fit_normalization(raw, scheme);
  const mw::Dataset train = mw::apply_normalization(raw, meta);

  std::vector<Eigen::Index> hidden;
  for (auto w : s.int_list("hidden", {32})) {
    mw::require(w > 0, ErrorKind::Config, "--hidden widths must be positive");
    hidden.push_back(static_cast<Eigen::Index>(w));
  }
  mw::TrainConfig tc;
  tc.epochs = static_cast<int>(s.integer("epochs", tc.epochs));
  tc.batch_size = s.count("batch-size", tc.batch_size);
  tc.learning_rate = s.num("lr", tc.learning_rate);
  tc.momentum = s.num("momentum", tc.momentum);
  tc.lr_decay_every = static_cast<int>(s.integer("decay-every", tc.lr_decay_every));
  tc.lr_decay_factor = s.num("decay-factor", tc.lr_decay_factor);
  const auto seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  tc.seed = mw::derive_seed(seed, "train");
  mw::require(tc.learning_rate > 0.0 && tc.epochs >= 1 && tc.batch_size >= 1, ErrorKind::Config,
              "--lr, --epochs and --batch-size must be positive");
  const auto classes = static_cast<Eigen::Index>(s.count("classes", raw.class_count));
  const mw::TrainResult tr =
      mw::train_sgd(mw::init_network(train.dim(), hidden, classes, mw::derive_seed(seed, "init"), meta), train, tc);
  mw::save_model(tr.net, s.required("out"));

  json summary = {{"model", s.str("out")}, {"train_acc", tr.train_accuracy}, {"final_loss", tr.final_loss}};
  if (s.has("test-data")) {
    const mw::Dataset test_raw = mw::load_dataset(s.str("test-data"), format_for(s, s.str("test-data")));
    summary["test_acc"] = mw::accuracy(tr.net, mw::apply_normalization(test_raw, meta));
  }
  if (s.has("summary")) mw::write_file_atomic(s.str("summary"), summary.dump(1) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

std::optional<Eigen::Index> parse_components(const Settings& s) {
  const std::string c = s.str("components", "auto");
  if (c == "auto") return std::nullopt;
  const long long v = s.integer("components", 0);
  mw::require(v >= 1, ErrorKind::Config, "--components must be a positive count or auto");
  return static_cast<Eigen::Index>(v);
}

int cmd_measure(const Settings& s) {
  const mw::Network net = mw::load_model(s.required("model"));
  const std::string data = s.required("data");
  const mw::Dataset ds = to_model_space(mw::load_dataset(data, format_for(s, data)), net);

  mw::MeasureOptions mo;
  mo.estimator = mw::parse_estimator(s.str("estimator", "deepfool"));
  mo.layer = s.count("layer", 0);
  mo.search.learning_rate = s.num("gamma", mo.search.learning_rate);
  mo.search.stop_tolerance = s.num("delta", mo.search.stop_tolerance);
  mo.search.equality_threshold = s.num("epsilon", mo.search.equality_threshold);
  mo.search.max_iters = static_cast<int>(s.integer("max-iters", mo.search.max_iters));
  mo.search.batch_mode = s.flag("batch", false);
  mo.search.clip_to_network_bounds = !s.flag("no-clip", false);
  if (s.has("signed-step") && s.str("signed-step") != "auto") mo.search.signed_step = s.flag("signed-step", true);
  try {
    mo.search.validate();
  } catch (const mw::Error& e) {
    mw::fail(ErrorKind::Config, e.what());
  }
  mo.components = parse_components(s);
  mo.samples = s.count("samples", 0);
  mo.seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  mo.tv_normalize = s.flag("tv-normalize", false);
  mo.threads = thread_count(s);

  std::optional<mw::PcaModel> pca;
  if (mw::is_constrained(mo.estimator)) {
    if (s.has("pca")) {
      pca = mw::load_pca(s.str("pca"));
    } else {
      pca = mw::fit_pca(ds.features, std::min<Eigen::Index>(ds.size() - 1, ds.dim()));
    }
  }
  const auto rep = mw::measure_margins(net, ds, mo, pca ? &*pca : nullptr);
  const std::string out = s.str("out", "-");
  emit(out, mw::measure_csv(rep));
  if (s.has("boundary-out")) mw::write_file_atomic(s.str("boundary-out"), mw::boundary_csv(rep, ds));

  if (out != "-") {
    std::map<std::string, std::size_t> statuses;
    double sum = 0.0;
    std::size_t finite = 0;
    for (const auto& r : rep.rows) {
      ++statuses[mw::status_label(r)];
      if (std::isfinite(r.result.distance)) {
        sum += r.result.distance;
        ++finite;
      }
    }
    json summary = {{"measured", rep.rows.size()},
                    {"skipped_misclassified", rep.skipped_misclassified},
                    {"statuses", statuses},
                    {"mean_margin", finite > 0 ? json(sum / static_cast<double>(finite)) : json(nullptr)}};
    if (rep.components_used) {
      summary["components"] = *rep.components_used;
      summary["components_fallback"] = rep.components_fallback;
    }
    if (rep.total_variance) summary["total_variance"] = *rep.total_variance;
    std::cout << summary.dump() << "\n";
  }
  return 0;
}

int cmd_pca(const Settings& s) {
  const std::string data = s.required("data");
  mw::Dataset ds = mw::load_dataset(data, format_for(s, data));
  if (s.has("model")) ds = to_model_space(ds, mw::load_model(s.str("model")));
  const Eigen::Index full = std::min<Eigen::Index>(ds.size() - 1, ds.dim());
  mw::require(full >= 1, ErrorKind::Config, "PCA needs at least two samples");
  const auto requested = parse_components(s);
  mw::require(!requested || *requested <= full, ErrorKind::Config,
              "--components exceeds min(samples - 1, features) = " + std::to_string(full));
  const mw::PcaModel pca = mw::fit_pca(ds.features, requested.value_or(full));
  json doc = mw::pca_to_json(pca);
  json summary = {{"components", pca.count()}};
  if (!requested) {
    const auto choice = mw::select_components_kneedle(pca.explained_variance);
    doc["selection"] = {{"method", "kneedle"}, {"m", choice.m}, {"fallback", choice.fallback}};
    summary["selected"] = choice.m;
    summary["fallback"] = choice.fallback;
  }
  mw::write_file_atomic(s.required("out"), doc.dump(1) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_evaluate(const Settings& s) {
  const auto entries = mw::parse_models(mw::detail::read_json_file(s.required("models")));
  mw::EvaluateOptions eo;
  eo.metric = mw::parse_metric(s.str("metric", "kendall"));
  eo.measure_col = s.required("measure-col");
  if (s.has("target")) {
    const std::string t = s.str("target");
    mw::require(t == "test_acc" || t == "gen_gap", ErrorKind::Config, "--target must be test_acc or gen_gap");
    eo.target = t == "gen_gap" ? mw::Target::GenGap : mw::Target::TestAccuracy;
  }
  if (s.has("negate")) eo.negate = s.flag("negate", false);
  eo.seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  mw::EvaluateResult res;
  try {
    res = mw::evaluate_models(entries, eo);
  } catch (const mw::Error& e) {
    if (e.kind() == ErrorKind::Domain) mw::fail(ErrorKind::Config, e.what());
    throw;
  }
  std::cout << mw::fmt(res.value) << "\n";
  if (s.has("out")) {
    const std::string out = s.str("out");
    mw::write_file_atomic(out, std::filesystem::path(out).extension() == ".json"
                                   ? mw::evaluate_json(res).dump(1) + "\n"
                                   : mw::evaluate_csv(res));
  }
  return 0;
}

int cmd_advdir(const Settings& s) {
  const mw::PcaModel pca = mw::load_pca(s.required("pca"));
  const auto pairs = mw::parse_boundary_csv(mw::read_file(s.required("boundary-csv")));
  const auto share = mw::adv_directions(pca, pairs.originals, pairs.boundary_points);
  emit(s.str("out", "-"), mw::advdir_csv(pca, share));
  if (s.str("out", "-") != "-") {
    const auto marks = mw::variance_markers(pca.explained_ratio);
    std::cout << json{{"samples", pairs.originals.size() - share.dropped},
                      {"dropped", share.dropped},
                      {"variance_70", marks.at_70},
                      {"variance_99", marks.at_99}}
                     .dump()
              << "\n";
  }
  return 0;
}

int cmd_sweep(const Settings& s, const std::string& config_path) {
  json doc = config_path.empty() ? json::object() : mw::detail::read_json_file(config_path);
  mw::require(doc.is_object(), ErrorKind::Config, "config file must hold a JSON object");
  if (s.has("seed")) doc["seed"] = s.integer("seed", 0);
  if (s.has("out")) doc["output_dir"] = s.str("out");
  if (s.has("threads")) doc["threads"] = s.count("threads", 0);
  if (s.has("widths")) doc["model"]["widths"] = s.int_list("widths", {});
  if (s.has("seeds")) doc["model"]["seeds"] = s.count("seeds", 1);
  if (s.has("epochs")) doc["train"]["epochs"] = s.integer("epochs", 1);
  if (s.has("estimator")) doc["margin"]["estimator"] = s.str("estimator");
  const mw::ExperimentConfig cfg = mw::parse_experiment_config(doc);
  const auto res = mw::run_capacity_sweep(cfg);
  std::cout << json{{"output_dir", cfg.output_dir}, {"models", res.models.size()}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"margin workbench"};
  app.require_subcommand(1);
  std::map<std::string, std::string> config_paths;

  auto add = [&](const std::string& name, const std::string& desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_paths[name], "JSON settings; flags override");
    return sub;
  };

  auto* gen = add("gen-data", "generate Gaussian blob data");
  gen->add_option("--classes");
  gen->add_option("--dim");
  gen->add_option("--samples-per-class");
  gen->add_option("--test-samples-per-class");
  gen->add_option("--center-range");
  gen->add_option("--spread");
  gen->add_option("--seed");
  gen->add_option("--out", "training set path");
  gen->add_option("--test-out", "test set path (same centers)");
  gen->add_option("--format", "bin or csv; default from extension");

  auto* cor = add("corrupt", "corrupt labels or inputs of a dataset");
  cor->add_option("--in");
  cor->add_option("--out");
  cor->add_option("--kind", "label or gaussian");
  cor->add_option("--fraction");
  cor->add_option("--seed");
  cor->add_option("--format");
  cor->add_option("--report", "JSON file listing corrupted indices");

  auto* trn = add("train", "train an MLP with SGD");
  trn->add_option("--data");
  trn->add_option("--test-data");
  trn->add_option("--format");
  trn->add_option("--hidden", "comma-separated hidden widths");
  trn->add_option("--classes");
  trn->add_option("--epochs");
  trn->add_option("--batch-size");
  trn->add_option("--lr");
  trn->add_option("--momentum");
  trn->add_option("--decay-every");
  trn->add_option("--decay-factor");
  trn->add_option("--norm", "minmax, znorm or none");
  trn->add_option("--seed");
  trn->add_option("--out");
  trn->add_option("--summary");

  auto* mea = add("measure", "estimate margins of correctly classified samples");
  mea->add_option("--model");
  mea->add_option("--data");
  mea->add_option("--format");
  mea->add_option("--estimator", "taylor, deepfool, constrained-taylor, constrained-deepfool");
  mea->add_option("--layer");
  mea->add_option("--gamma");
  mea->add_option("--delta");
  mea->add_option("--epsilon");
  mea->add_option("--max-iters");
  mea->add_option("--components", "count or auto");
  mea->add_option("--pca", "PCA model for constrained estimators");
  mea->add_option("--samples", "random subset size; 0 for all");
  mea->add_option("--seed");
  mea->add_option("--signed-step", "true, false or auto");
  mea->add_flag("--batch");
  mea->add_flag("--tv-normalize");
  mea->add_flag("--no-clip");
  mea->add_option("--threads");
  mea->add_option("--out", "CSV path or - for stdout");
  mea->add_option("--boundary-out", "CSV of samples and their boundary points");

  auto* pca = add("pca", "fit a PCA model");
  pca->add_option("--data");
  pca->add_option("--format");
  pca->add_option("--model", "normalize the data as this model does");
  pca->add_option("--components", "count or auto");
  pca->add_option("--out");

  auto* eva = add("evaluate", "score a complexity measure over a model list");
  eva->add_option("--models");
  eva->add_option("--metric", "kendall, granulated, cmi or r2");
  eva->add_option("--measure-col");
  eva->add_option("--target", "test_acc or gen_gap");
  eva->add_option("--negate", "true or false");
  eva->add_option("--seed");
  eva->add_option("--out", "CSV, or JSON when the name ends in .json");

  auto* adv = add("advdir", "perturbation share per principal component");
  adv->add_option("--pca");
  adv->add_option("--boundary-csv");
  adv->add_option("--out");

  auto* swp = add("sweep", "capacity sweep over widths, seeds and corruption");
  swp->add_option("--seed");
  swp->add_option("--out", "output directory");
  swp->add_option("--threads");
  swp->add_option("--widths");
  swp->add_option("--seeds");
  swp->add_option("--epochs");
  swp->add_option("--estimator");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  const std::string name = active->get_name();
  try {
    if (name == "sweep") {
      // the sweep config is the nested experiment document, checked on parse
      return cmd_sweep(Settings(active, ""), config_paths[name]);
    }
    const Settings s(active, config_paths[name]);
    if (name == "gen-data") return cmd_gen_data(s);
    if (name == "corrupt") return cmd_corrupt(s);
    if (name == "train") return cmd_train(s);
    if (name == "measure") return cmd_measure(s);
    if (name == "pca") return cmd_pca(s);
    if (name == "evaluate") return cmd_evaluate(s);
    if (name == "advdir") return cmd_advdir(s);
  } catch (const mw::Error& e) {
    std::cerr << "mw " << name << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "mw " << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mw " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 2;
}
