#include "cdfd/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace cdfd {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

}  // namespace

std::uint64_t Rng::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

double Rng::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform01();
  double u2 = uniform01();
  // Guard against log(0).
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

std::int64_t Rng::uniform_int(std::int64_t n) {
  if (n <= 0) throw InvalidArgument("uniform_int: n must be positive");
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::int64_t>(x % un);
}

Rng Rng::split(std::uint64_t stream_index) const {
  return Rng(mix64(seed_ ^ (kGolden * (stream_index + 1))));
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  shuffle(idx);
  return idx;
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) throw InvalidArgument("sample_without_replacement: k > n");
  std::vector<int> idx = permutation(n);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

MatrixXd one_hot(const VectorXi& labels, int class_count) {
  if (class_count <= 0) throw InvalidArgument("one_hot: class_count must be positive");
  MatrixXd out = MatrixXd::Zero(labels.size(), class_count);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= class_count) {
      throw InvalidArgument("one_hot: label " + std::to_string(y) +
                            " out of range [0, " + std::to_string(class_count) + ")");
    }
    out(i, y) = 1.0;
  }
  return out;
}

LabeledDataset::LabeledDataset(MatrixXd feats, VectorXi labs, int n_classes,
                               std::string domain)
    : features(std::move(feats)),
      labels(std::move(labs)),
      class_count(n_classes),
      domain_id(std::move(domain)) {
  if (features.rows() != labels.size()) {
    throw InvalidArgument("LabeledDataset: features/labels row mismatch");
  }
  if (class_count <= 0) throw InvalidArgument("LabeledDataset: class_count must be positive");
  if (!features.allFinite()) throw InvalidArgument("LabeledDataset: features contain NaN/Inf");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw InvalidArgument("LabeledDataset: label out of range at row " + std::to_string(i));
    }
  }
}

EmpiricalDistribution::EmpiricalDistribution(MatrixXd supp, VectorXd w)
    : support(std::move(supp)), weights(std::move(w)) {
  if (support.rows() != weights.size()) {
    throw InvalidArgument("EmpiricalDistribution: support/weights size mismatch");
  }
  if (weights.size() == 0) throw InvalidArgument("EmpiricalDistribution: empty support");
  if ((weights.array() < 0.0).any()) {
    throw InvalidArgument("EmpiricalDistribution: negative weight");
  }
  if (std::abs(weights.sum() - 1.0) > 1e-9) {
    throw InvalidArgument("EmpiricalDistribution: weights must sum to 1");
  }
}

EmpiricalDistribution EmpiricalDistribution::uniform(MatrixXd supp) {
  const Eigen::Index n = supp.rows();
  if (n == 0) throw InvalidArgument("EmpiricalDistribution: empty support");
  return EmpiricalDistribution(std::move(supp),
                               VectorXd::Constant(n, 1.0 / static_cast<double>(n)));
}

EmpiricalDistribution as_empirical(const LabeledDataset& ds) {
  if (ds.rows() == 0) throw InvalidArgument("as_empirical: empty dataset");
  return EmpiricalDistribution::uniform(ds.features);
}

LabeledEmpirical LabeledEmpirical::from_dataset(const LabeledDataset& ds) {
  if (ds.rows() == 0) throw InvalidArgument("LabeledEmpirical: empty dataset");
  LabeledEmpirical e;
  e.support = ds.features;
  e.soft_labels = ds.one_hot();
  e.weights = VectorXd::Constant(ds.rows(), 1.0 / ds.rows());
  return e;
}

SimplexWeights::SimplexWeights(VectorXd v) : values(std::move(v)) {
  if (values.size() == 0) throw InvalidArgument("SimplexWeights: empty");
  if ((values.array() < -1e-12).any()) {
    throw InvalidArgument("SimplexWeights: negative entry");
  }
  if (std::abs(values.sum() - 1.0) > 1e-9) {
    throw InvalidArgument("SimplexWeights: entries must sum to 1");
  }
  values = values.cwiseMax(0.0);
}

SimplexWeights SimplexWeights::uniform(int k) {
  if (k <= 0) throw InvalidArgument("SimplexWeights: k must be positive");
  return SimplexWeights(VectorXd::Constant(k, 1.0 / k));
}

VectorXd project_to_simplex(const VectorXd& v) {
  // Sort-based projection (Held et al.): find the threshold tau with
  // sum(max(v - tau, 0)) = 1.
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double cumsum = 0.0;
  double tau = 0.0;
  int rho = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    cumsum += u[static_cast<std::size_t>(i)];
    const double candidate = (cumsum - 1.0) / static_cast<double>(i + 1);
    if (u[static_cast<std::size_t>(i)] - candidate > 0.0) {
      rho = static_cast<int>(i + 1);
      tau = candidate;
    }
  }
  (void)rho;
  return (v.array() - tau).cwiseMax(0.0);
}

int argmax_row(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = static_cast<int>(c);
  }
  return best;
}

VectorXi argmax_labels(const MatrixXd& soft_labels) {
  VectorXi out(soft_labels.rows());
  for (Eigen::Index i = 0; i < soft_labels.rows(); ++i) {
    out[i] = argmax_row(soft_labels.row(i));
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace cdfd
