#include "cdfd/data.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace cdfd::data {

namespace {

constexpr const char* kTeHeader = "mode,fault_class,run_id,sample_period_h";

int sample_class(const VectorXd& priors, Rng& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (int c = 0; c < priors.size(); ++c) {
    acc += priors[c];
    if (u < acc) return c;
  }
  return static_cast<int>(priors.size()) - 1;
}

std::vector<double> parse_csv_line(const std::string& line, const std::string& file,
                                   int line_no) {
  std::vector<double> out;
  const char* p = line.data();
  const char* end = line.data() + line.size();
  while (p < end) {
    double v = 0.0;
    const auto res = std::from_chars(p, end, v);
    if (res.ec != std::errc()) {
      throw IoError(file + ":" + std::to_string(line_no) + ": malformed number");
    }
    out.push_back(v);
    p = res.ptr;
    if (p < end) {
      if (*p != ',') {
        throw IoError(file + ":" + std::to_string(line_no) + ": expected comma");
      }
      ++p;
    }
  }
  return out;
}

RawRun parse_te_file(const std::string& path, bool& empty) {
  std::ifstream in(path);
  if (!in) throw IoError("load_te_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) {
    empty = true;
    return {};
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTeHeader) {
    throw IoError(path + ":1: missing required header '" + std::string(kTeHeader) + "'");
  }
  if (!std::getline(in, line)) throw IoError(path + ":2: missing metadata row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<double> meta = parse_csv_line(line, path, 2);
  if (meta.size() != 4) throw IoError(path + ":2: metadata row needs 4 fields");

  RawRun run;
  run.mode = static_cast<int>(meta[0]);
  run.fault_class = static_cast<int>(meta[1]);
  run.run_id = static_cast<int>(meta[2]);
  run.sample_period_h = meta[3];
  if (run.mode < 1 || run.mode > 6) throw IoError(path + ":2: mode out of range 1..6");
  if (run.fault_class < 0 || run.fault_class >= kTeClassCount) {
    throw IoError(path + ":2: fault class out of range");
  }
  if (!(run.sample_period_h > 0.0)) throw IoError(path + ":2: sample period must be positive");

  std::vector<std::vector<double>> rows;
  int line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> vals = parse_csv_line(line, path, line_no);
    if (vals.size() != kTeVariableCount) {
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(kTeVariableCount) + " values, got " +
                    std::to_string(vals.size()));
    }
    rows.push_back(std::move(vals));
  }
  run.series.resize(static_cast<Eigen::Index>(rows.size()), kTeVariableCount);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < kTeVariableCount; ++c) {
      run.series(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
    }
  }
  empty = false;
  return run;
}

SegmentRecord standardize_segment(const MatrixXd& raw, int class_id, const RawRun& run) {
  SegmentRecord seg;
  seg.class_id = class_id;
  seg.mode = run.mode;
  seg.run_id = run.run_id;
  seg.values.resize(raw.rows(), raw.cols());
  const double t = static_cast<double>(raw.rows());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    const double mu = raw.col(c).mean();
    const double var = (raw.col(c).array() - mu).square().sum() / (t - 1.0);
    const double sigma = std::sqrt(var);
    if (sigma < 1e-12) {
      seg.values.col(c).setZero();
      seg.zeroed_variables.push_back(static_cast<int>(c));
    } else {
      seg.values.col(c) = (raw.col(c).array() - mu) / sigma;
    }
  }
  return seg;
}

}  // namespace

std::vector<LabeledDataset> gen_synthetic_modes(const std::vector<ModeSpec>& specs,
                                                int n_per_mode, Rng& rng) {
  if (specs.empty()) throw InvalidArgument("gen_synthetic_modes: no mode specs");
  if (n_per_mode < 1) throw InvalidArgument("gen_synthetic_modes: n_per_mode must be positive");

  std::vector<LabeledDataset> out;
  for (std::size_t m = 0; m < specs.size(); ++m) {
    const ModeSpec& spec = specs[m];
    const int n_c = static_cast<int>(spec.class_means.rows());
    const int d = static_cast<int>(spec.class_means.cols());
    if (n_c < 2) throw InvalidArgument("gen_synthetic_modes: need at least 2 classes");
    if (!(spec.cov_scale > 0.0)) throw InvalidArgument("gen_synthetic_modes: degenerate covariance");
    if (spec.transform.rows() != d || spec.transform.cols() != d ||
        spec.offset.size() != d) {
      throw InvalidArgument("gen_synthetic_modes: inconsistent dimensions");
    }
    if (spec.priors.size() != n_c || (spec.priors.array() < 0.0).any() ||
        std::abs(spec.priors.sum() - 1.0) > 1e-9) {
      throw InvalidArgument("gen_synthetic_modes: priors must lie on the simplex");
    }
    Eigen::FullPivLU<MatrixXd> lu(spec.transform);
    if (!lu.isInvertible()) {
      throw InvalidArgument("gen_synthetic_modes: mode transform is singular");
    }

    Rng mrng = rng.split(m);
    MatrixXd x(n_per_mode, d);
    VectorXi y(n_per_mode);
    for (int i = 0; i < n_per_mode; ++i) {
      const int c = sample_class(spec.priors, mrng);
      VectorXd v(d);
      for (int k = 0; k < d; ++k) v[k] = mrng.normal();
      const VectorXd base = spec.class_means.row(c).transpose() + spec.cov_scale * v;
      x.row(i) = (spec.transform * base + spec.offset).transpose();
      y[i] = c;
    }
    out.emplace_back(std::move(x), std::move(y), n_c, "mode" + std::to_string(m + 1));
  }
  return out;
}

namespace {

MatrixXd json_matrix(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) throw IoError("synthetic spec: empty matrix");
  MatrixXd m(static_cast<Eigen::Index>(rows.size()),
             static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw IoError("synthetic spec: ragged matrix");
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
  }
  return m;
}

}  // namespace

std::vector<ModeSpec> load_synthetic_spec(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("synthetic spec: parse error: " + std::string(e.what()));
  }
  const int d = j.at("dim").get<int>();
  const int n_c = j.at("classes").get<int>();
  const double cov = j.value("cov_scale", 1.0);
  MatrixXd base_means;
  if (j.contains("class_means")) {
    base_means = json_matrix(j["class_means"]);
  }

  std::vector<ModeSpec> specs;
  for (const auto& mj : j.at("modes")) {
    ModeSpec spec;
    spec.class_means = mj.contains("class_means") ? json_matrix(mj["class_means"]) : base_means;
    if (spec.class_means.rows() != n_c || spec.class_means.cols() != d) {
      throw IoError("synthetic spec: class_means shape mismatch");
    }
    spec.cov_scale = mj.value("cov_scale", cov);
    spec.transform = mj.contains("transform") ? json_matrix(mj["transform"])
                                              : MatrixXd::Identity(d, d);
    if (mj.contains("offset")) {
      const auto off = mj["offset"].get<std::vector<double>>();
      spec.offset = Eigen::Map<const VectorXd>(off.data(), static_cast<Eigen::Index>(off.size()));
    } else {
      spec.offset = VectorXd::Zero(d);
    }
    if (mj.contains("priors")) {
      const auto pri = mj["priors"].get<std::vector<double>>();
      spec.priors = Eigen::Map<const VectorXd>(pri.data(), static_cast<Eigen::Index>(pri.size()));
    } else {
      spec.priors = VectorXd::Constant(n_c, 1.0 / n_c);
    }
    specs.push_back(std::move(spec));
  }
  if (specs.empty()) throw IoError("synthetic spec: no modes");
  return specs;
}

std::vector<ModeSpec> load_synthetic_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("synthetic spec: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_synthetic_spec(ss.str());
}

TeLoadResult load_te_csv(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".csv") {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  } else {
    throw IoError("load_te_csv: no such file or directory: " + path);
  }

  TeLoadResult result;
  for (const auto& file : files) {
    bool empty = false;
    RawRun run = parse_te_file(file, empty);
    if (empty) continue;
    if (run.series.rows() < 2 * run.steps_30h()) {
      ++result.dropped;  // incomplete simulation
      continue;
    }
    result.runs.push_back(std::move(run));
  }
  return result;
}

void write_te_csv(const RawRun& run, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_te_csv: cannot open " + path);
  out << kTeHeader << '\n';
  out << run.mode << ',' << run.fault_class << ',' << run.run_id << ','
      << format_double(run.sample_period_h) << '\n';
  for (Eigen::Index i = 0; i < run.series.rows(); ++i) {
    for (Eigen::Index c = 0; c < run.series.cols(); ++c) {
      if (c > 0) out << ',';
      out << format_double(run.series(i, c));
    }
    out << '\n';
  }
  if (!out) throw IoError("write_te_csv: write failed for " + path);
}

PreprocessResult preprocess_run(const RawRun& run) {
  PreprocessResult result;
  const int n30 = run.steps_30h();
  if (n30 < 2) {
    result.reason = "sample period leaves fewer than two steps per segment";
    return result;
  }
  if (run.series.rows() < 2 * n30) {
    result.reason = "run too short for a normal and a faulty segment";
    return result;
  }
  if (run.series.cols() != kTeVariableCount) {
    result.reason = "run does not carry the 34 retained variables";
    return result;
  }
  result.normal = standardize_segment(run.series.topRows(n30), 0, run);
  result.faulty = standardize_segment(run.series.middleRows(n30, n30), run.fault_class, run);
  result.ok = true;
  return result;
}

BalanceResult balance_normal_class(const std::vector<SegmentRecord>& records,
                                   int target, Rng& rng) {
  BalanceResult result;
  std::map<int, int> counts;
  for (const auto& r : records) counts[r.class_id]++;
  if (target <= 0) {
    target = 0;
    for (const auto& [cls, count] : counts) {
      if (cls != 0) target = std::max(target, count);
    }
    if (target == 0) {  // nothing but normals
      result.records = records;
      return result;
    }
  }
  const int n_normal = counts.count(0) ? counts[0] : 0;
  if (n_normal <= target) {
    result.records = records;
    result.imbalanced = n_normal < target;
    return result;
  }
  std::vector<int> normal_idx;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].class_id == 0) normal_idx.push_back(static_cast<int>(i));
  }
  std::vector<int> chosen = rng.sample_without_replacement(n_normal, target);
  std::sort(chosen.begin(), chosen.end());
  std::vector<bool> keep(records.size(), false);
  for (const int k : chosen) keep[static_cast<std::size_t>(normal_idx[static_cast<std::size_t>(k)])] = true;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].class_id != 0 || keep[i]) result.records.push_back(records[i]);
  }
  return result;
}

VectorXd extract_features(const MatrixXd& segment) {
  const Eigen::Index t = segment.rows();
  const Eigen::Index v = segment.cols();
  if (t < 2) throw InvalidArgument("extract_features: need at least two steps");

  VectorXd out(5 * v);
  const double tbar = 0.5 * static_cast<double>(t - 1);
  double denom = 0.0;
  for (Eigen::Index s = 0; s < t; ++s) {
    denom += (static_cast<double>(s) - tbar) * (static_cast<double>(s) - tbar);
  }
  for (Eigen::Index c = 0; c < v; ++c) {
    const auto col = segment.col(c);
    const double mu = col.mean();
    const double sd = std::sqrt((col.array() - mu).square().sum() /
                                static_cast<double>(t - 1));
    double cov = 0.0;
    for (Eigen::Index s = 0; s < t; ++s) {
      cov += (static_cast<double>(s) - tbar) * (col[s] - mu);
    }
    out[5 * c + 0] = mu;
    out[5 * c + 1] = sd;
    out[5 * c + 2] = col.minCoeff();
    out[5 * c + 3] = col.maxCoeff();
    out[5 * c + 4] = cov / denom;
  }
  return out;
}

TeIngestResult te_mode_datasets(const std::string& path, Rng& rng, int balance_target) {
  const TeLoadResult loaded = load_te_csv(path);
  TeIngestResult result;
  result.dropped = loaded.dropped;

  std::map<int, std::vector<SegmentRecord>> by_mode;
  for (const auto& run : loaded.runs) {
    PreprocessResult pre = preprocess_run(run);
    if (!pre.ok) {
      ++result.dropped;
      continue;
    }
    by_mode[run.mode].push_back(std::move(pre.normal));
    by_mode[run.mode].push_back(std::move(pre.faulty));
  }

  for (auto& [mode, records] : by_mode) {
    Rng mrng = rng.split(static_cast<std::uint64_t>(mode));
    BalanceResult balanced = balance_normal_class(records, balance_target, mrng);
    result.imbalanced = result.imbalanced || balanced.imbalanced;
    const int n = static_cast<int>(balanced.records.size());
    if (n == 0) continue;
    MatrixXd feats(n, 5 * kTeVariableCount);
    VectorXi labels(n);
    for (int i = 0; i < n; ++i) {
      feats.row(i) = data::extract_features(balanced.records[static_cast<std::size_t>(i)].values).transpose();
      labels[i] = balanced.records[static_cast<std::size_t>(i)].class_id;
    }
    result.datasets.emplace_back(std::move(feats), std::move(labels), kTeClassCount,
                                 "mode" + std::to_string(mode));
  }
  return result;
}

}  // namespace cdfd::data
