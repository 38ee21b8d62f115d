#pragma once

// File formats: model and PCA documents (JSON), datasets (MWDS binary or CSV),
// and small CSV helpers.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginwb/data.hpp"
#include "marginwb/error.hpp"
#include "marginwb/nnet.hpp"
#include "marginwb/pca.hpp"

namespace mw {

using json = nlohmann::json;

inline constexpr const char* kModelVersion = "mw-model/1";
inline constexpr const char* kPcaVersion = "mw-pca/1";

namespace detail {

inline json to_json_vec(const Vector& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v[k]);
  return a;
}

inline Vector from_json_vec(const json& a, const char* what) {
  if (!a.is_array()) fail(ErrorKind::Config, std::string(what) + " must be an array");
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!a[k].is_number()) fail(ErrorKind::Config, std::string(what) + " must hold numbers");
    v[static_cast<Eigen::Index>(k)] = a[k].get<double>();
  }
  return v;
}

inline json to_json_rows(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_json_vec(m.row(r).transpose()));
  return rows;
}

inline Matrix from_json_rows(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty()) fail(ErrorKind::Config, std::string(what) + " must be a non-empty matrix");
  const auto cols = rows[0].size();
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Vector v = from_json_vec(rows[r], what);
    if (static_cast<std::size_t>(v.size()) != cols) fail(ErrorKind::Config, std::string(what) + " is ragged");
    m.row(static_cast<Eigen::Index>(r)) = v.transpose();
  }
  return m;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": " + e.what());
  }
}

inline void check_version(const json& doc, const char* expected) {
  if (!doc.contains("version") || doc["version"] != expected)
    fail(ErrorKind::Config, std::string("expected document version ") + expected);
}

}  // namespace detail

/// Writes `content` next to `path` and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  try {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
      out << content;
      if (!out) fail(ErrorKind::Io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  } catch (const std::filesystem::filesystem_error& e) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    fail(ErrorKind::Io, e.what());
  }
}

/// Round-trip formatting for doubles in CSV output.
inline std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

// ---------------------------------------------------------------- model

inline json model_to_json(const Network& net) {
  const auto& nm = net.norm_meta();
  json norm = {{"scheme", to_string(nm.scheme)},
               {"offsets", detail::to_json_vec(nm.offsets)},
               {"scales", detail::to_json_vec(nm.scales)},
               {"lower", detail::to_json_vec(nm.lower)},
               {"upper", detail::to_json_vec(nm.upper)}};
  json layers = json::array();
  for (const auto& l : net.layers())
    layers.push_back({{"w", detail::to_json_rows(l.weights)},
                      {"b", detail::to_json_vec(l.bias)},
                      {"act", l.activation == Activation::ReLU ? "relu" : "none"}});
  return {{"version", kModelVersion},
          {"input_dim", net.input_dim()},
          {"num_classes", net.num_classes()},
          {"norm", norm},
          {"layers", layers}};
}

inline Network model_from_json(const json& doc) {
  try {
    detail::check_version(doc, kModelVersion);
    NormalizationMeta nm;
    const auto& norm = doc.at("norm");
    nm.scheme = parse_norm_scheme(norm.at("scheme").get<std::string>());
    nm.offsets = detail::from_json_vec(norm.at("offsets"), "norm.offsets");
    nm.scales = detail::from_json_vec(norm.at("scales"), "norm.scales");
    nm.lower = detail::from_json_vec(norm.value("lower", json::array()), "norm.lower");
    nm.upper = detail::from_json_vec(norm.value("upper", json::array()), "norm.upper");
    std::vector<DenseLayer> layers;
    for (const auto& lj : doc.at("layers")) {
      DenseLayer l;
      l.weights = detail::from_json_rows(lj.at("w"), "layer weights");
      l.bias = detail::from_json_vec(lj.at("b"), "layer bias");
      const auto act = lj.at("act").get<std::string>();
      if (act == "relu") l.activation = Activation::ReLU;
      else if (act == "none") l.activation = Activation::None;
      else fail(ErrorKind::Config, "unknown activation '" + act + "'");
      layers.push_back(std::move(l));
    }
    Network net(std::move(layers), std::move(nm));
    if (net.input_dim() != doc.at("input_dim").get<Eigen::Index>() ||
        net.num_classes() != doc.at("num_classes").get<Eigen::Index>())
      fail(ErrorKind::Config, "declared input_dim/num_classes disagree with the layers");
    return net;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("malformed model document: ") + e.what());
  }
}

inline void save_model(const Network& net, const std::filesystem::path& path) {
  write_file_atomic(path, model_to_json(net).dump(1) + "\n");
}

inline Network load_model(const std::filesystem::path& path) {
  return model_from_json(detail::read_json_file(path));
}

// ---------------------------------------------------------------- PCA

inline json pca_to_json(const PcaModel& p) {
  return {{"version", kPcaVersion},
          {"mean", detail::to_json_vec(p.mean)},
          {"components", detail::to_json_rows(p.components)},
          {"explained_variance", detail::to_json_vec(p.explained_variance)},
          {"explained_ratio", detail::to_json_vec(p.explained_ratio)}};
}

inline PcaModel pca_from_json(const json& doc) {
  try {
    detail::check_version(doc, kPcaVersion);
    PcaModel p;
    p.mean = detail::from_json_vec(doc.at("mean"), "mean");
    p.components = detail::from_json_rows(doc.at("components"), "components");
    p.explained_variance = detail::from_json_vec(doc.at("explained_variance"), "explained_variance");
    p.explained_ratio = detail::from_json_vec(doc.at("explained_ratio"), "explained_ratio");
    if (p.components.cols() != p.mean.size() || p.explained_variance.size() != p.components.rows() ||
        p.explained_ratio.size() != p.components.rows())
      fail(ErrorKind::Config, "PCA document has inconsistent shapes");
    return p;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("malformed PCA document: ") + e.what());
  }
}

inline void save_pca(const PcaModel& p, const std::filesystem::path& path) {
  write_file_atomic(path, pca_to_json(p).dump(1) + "\n");
}

inline PcaModel load_pca(const std::filesystem::path& path) {
  return pca_from_json(detail::read_json_file(path));
}

// ---------------------------------------------------------------- datasets

enum class DataFormat { Bin, Csv };

inline DataFormat parse_data_format(const std::string& s) {
  if (s == "bin") return DataFormat::Bin;
  if (s == "csv") return DataFormat::Csv;
  fail(ErrorKind::Config, "unknown dataset format '" + s + "'");
}

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) fail(ErrorKind::Config, "dataset file is truncated");
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, buf.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline void finish_loaded(Dataset& ds) {
  for (auto l : ds.labels)
    if (l >= ds.class_count) fail(ErrorKind::Config, "dataset label outside [0, classes)");
  ds.flags.assign(ds.labels.size(), CorruptFlag::Clean);
  if (ds.size() > 0) std::tie(ds.lower, ds.upper) = observed_bounds(ds.features);
  ds.validate();
}

}  // namespace detail

/// MWDS layout: "MWDS", u32 version, u64 samples, u64 features, u32 classes,
/// then row-major f32 features and u32 labels, all little-endian.
inline std::string encode_dataset_bin(const Dataset& ds) {
  std::string buf = "MWDS";
  detail::put_le<std::uint32_t>(buf, 1);
  detail::put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(ds.size()));
  detail::put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(ds.dim()));
  detail::put_le<std::uint32_t>(buf, ds.class_count);
  for (Eigen::Index r = 0; r < ds.size(); ++r)
    for (Eigen::Index c = 0; c < ds.dim(); ++c) detail::put_le<float>(buf, static_cast<float>(ds.features(r, c)));
  for (auto l : ds.labels) detail::put_le<std::uint32_t>(buf, l);
  return buf;
}

inline Dataset decode_dataset_bin(const std::string& buf) {
  if (buf.size() < 4 || buf.compare(0, 4, "MWDS") != 0) fail(ErrorKind::Config, "not an MWDS dataset");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(buf, pos);
  if (version != 1) fail(ErrorKind::Config, "unsupported MWDS version " + std::to_string(version));
  const auto s = detail::get_le<std::uint64_t>(buf, pos);
  const auto n = detail::get_le<std::uint64_t>(buf, pos);
  Dataset ds;
  ds.class_count = detail::get_le<std::uint32_t>(buf, pos);
  if (buf.size() != pos + s * n * 4 + s * 4) fail(ErrorKind::Config, "MWDS payload size does not match header");
  ds.features.resize(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < ds.features.rows(); ++r)
    for (Eigen::Index c = 0; c < ds.features.cols(); ++c) ds.features(r, c) = detail::get_le<float>(buf, pos);
  ds.labels.resize(s);
  for (auto& l : ds.labels) l = detail::get_le<std::uint32_t>(buf, pos);
  detail::finish_loaded(ds);
  return ds;
}

inline std::string encode_dataset_csv(const Dataset& ds) {
  std::string out;
  for (Eigen::Index c = 0; c < ds.dim(); ++c) out += "f" + std::to_string(c) + ",";
  out += "label\n";
  for (Eigen::Index r = 0; r < ds.size(); ++r) {
    for (Eigen::Index c = 0; c < ds.dim(); ++c) out += fmt(ds.features(r, c)) + ",";
    out += std::to_string(ds.labels[static_cast<std::size_t>(r)]) + "\n";
  }
  return out;
}

/// Last column is the label; a non-numeric first line is treated as a header.
/// class_count is max(label) + 1.
inline Dataset decode_dataset_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::vector<std::uint32_t> labels;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) fail(ErrorKind::Config, "CSV dataset rows need features and a label");
    std::vector<double> vals;
    bool numeric = true;
    for (const auto& c : cells) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(c, &used));
        if (used != c.size()) numeric = false;
      } catch (...) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;
      }
      fail(ErrorKind::Config, "non-numeric CSV row: " + line);
    }
    first = false;
    const double lab = vals.back();
    if (lab < 0 || lab != std::floor(lab)) fail(ErrorKind::Config, "CSV label must be a non-negative integer");
    labels.push_back(static_cast<std::uint32_t>(lab));
    vals.pop_back();
    if (!rows.empty() && vals.size() != rows[0].size()) fail(ErrorKind::Config, "ragged CSV dataset");
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) fail(ErrorKind::Config, "CSV dataset is empty");
  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  ds.labels = std::move(labels);
  ds.class_count = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  detail::finish_loaded(ds);
  return ds;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Config, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path, DataFormat fmt_) {
  write_file_atomic(path, fmt_ == DataFormat::Bin ? encode_dataset_bin(ds) : encode_dataset_csv(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path, DataFormat fmt_) {
  const std::string buf = read_file(path);
  return fmt_ == DataFormat::Bin ? decode_dataset_bin(buf) : decode_dataset_csv(buf);
}

}  // namespace mw
