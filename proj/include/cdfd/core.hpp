#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdfd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on caller-supplied data was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// The requested mode of operation is not provided.
class Unsupported : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Divergence, NaN, or loss of feasibility inside a numerical routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// Deterministic counter-based generator (splitmix64). The stream depends
// only on the seed, never on the platform or standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64();
  double uniform01();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();  // standard normal, Box-Muller
  std::int64_t uniform_int(std::int64_t n);  // [0, n)

  // Child stream derived from (seed, stream_index); independent of how many
  // values the parent has drawn.
  Rng split(std::uint64_t stream_index) const;

  std::vector<int> permutation(int n);
  std::vector<int> sample_without_replacement(int n, int k);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<std::size_t>(i)],
                v[static_cast<std::size_t>(uniform_int(i + 1))]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

Eigen::MatrixXd one_hot(const Eigen::VectorXi& labels, int class_count);

// Feature matrix (samples as rows), integer labels, and the domain the
// samples came from. Immutable by convention after construction.
struct LabeledDataset {
  MatrixXd features;
  VectorXi labels;
  int class_count = 0;
  std::string domain_id;

  LabeledDataset() = default;
  LabeledDataset(MatrixXd feats, VectorXi labs, int n_classes,
                 std::string domain = "");

  int rows() const { return static_cast<int>(features.rows()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
  MatrixXd one_hot() const { return cdfd::one_hot(labels, class_count); }
};

// Weighted point cloud; the sample support of an empirical distribution.
struct EmpiricalDistribution {
  MatrixXd support;
  VectorXd weights;

  EmpiricalDistribution() = default;
  EmpiricalDistribution(MatrixXd supp, VectorXd w);
  static EmpiricalDistribution uniform(MatrixXd supp);

  int size() const { return static_cast<int>(support.rows()); }
  int dim() const { return static_cast<int>(support.cols()); }
};

EmpiricalDistribution as_empirical(const LabeledDataset& ds);

// Point cloud with (possibly soft) label rows riding along.
struct LabeledEmpirical {
  MatrixXd support;      // n x d
  MatrixXd soft_labels;  // n x n_c, rows on the simplex
  VectorXd weights;      // n, sums to 1

  static LabeledEmpirical from_dataset(const LabeledDataset& ds);
  int size() const { return static_cast<int>(support.rows()); }
  int dim() const { return static_cast<int>(support.cols()); }
  int class_count() const { return static_cast<int>(soft_labels.cols()); }
};

// Barycentric coordinates: nonnegative, summing to one.
struct SimplexWeights {
  VectorXd values;

  SimplexWeights() = default;
  explicit SimplexWeights(VectorXd v);
  static SimplexWeights uniform(int k);

  int size() const { return static_cast<int>(values.size()); }
  double operator[](int i) const { return values[i]; }
};

// Euclidean projection onto the probability simplex.
VectorXd project_to_simplex(const VectorXd& v);

int argmax_row(const Eigen::RowVectorXd& row);
VectorXi argmax_labels(const MatrixXd& soft_labels);

// Shortest decimal form that parses back to the same double; '.' separator,
// no locale.
std::string format_double(double v);

}  // namespace cdfd
