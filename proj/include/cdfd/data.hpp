#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cdfd/core.hpp"

namespace cdfd::data {

// One simulation run in engineering units: rows are time steps, columns the
// 34 retained process variables.
struct RawRun {
  MatrixXd series;
  int mode = 0;         // 1..6
  int fault_class = 0;  // 0 = normal operation, 1..28 faults
  int run_id = 0;
  double sample_period_h = 0.05;

  // Steps spanned by thirty hours at this run's sampling period; the fault
  // is introduced right after the normal prefix.
  int steps_30h() const { return static_cast<int>(std::lround(30.0 / sample_period_h)); }
};

constexpr int kTeVariableCount = 34;
constexpr int kTeClassCount = 29;

// Class-conditional Gaussian mixture pushed through a per-mode affine map.
struct ModeSpec {
  MatrixXd class_means;  // n_c x d, in base coordinates
  double cov_scale = 1.0;
  MatrixXd transform;  // d x d, invertible
  VectorXd offset;     // d
  VectorXd priors;     // n_c, on the simplex
};

std::vector<LabeledDataset> gen_synthetic_modes(const std::vector<ModeSpec>& specs,
                                                int n_per_mode, Rng& rng);

// JSON synthetic spec: top-level {dim, classes, cov_scale, class_means,
// modes: [{transform?, offset?, priors?, class_means?}]}.
std::vector<ModeSpec> load_synthetic_spec(const std::string& json_text);
std::vector<ModeSpec> load_synthetic_spec_file(const std::string& path);

struct TeLoadResult {
  std::vector<RawRun> runs;
  int dropped = 0;  // incomplete simulations
};

// One file per run: a metadata header line, its values, then one line of 34
// reals per time step. `path` may be a single file or a directory of *.csv.
TeLoadResult load_te_csv(const std::string& path);
void write_te_csv(const RawRun& run, const std::string& path);

struct SegmentRecord {
  MatrixXd values;  // steps x 34, standardized per variable
  int class_id = 0;
  int mode = 0;
  int run_id = 0;
  std::vector<int> zeroed_variables;  // constant channels nulled out
};

struct PreprocessResult {
  bool ok = false;
  std::string reason;
  SegmentRecord normal;
  SegmentRecord faulty;
};

// Splits a run into a 30 h normal and a 30 h faulty segment and standardizes
// each variable by its own segment statistics.
PreprocessResult preprocess_run(const RawRun& run);

struct BalanceResult {
  std::vector<SegmentRecord> records;
  bool imbalanced = false;  // fewer normals than the target
};

// Subsamples the normal class down to the target count (default: the largest
// fault-class count).
BalanceResult balance_normal_class(const std::vector<SegmentRecord>& records,
                                   int target, Rng& rng);

// Per channel: mean, standard deviation, min, max, linear-trend slope.
VectorXd extract_features(const MatrixXd& segment);

// Full ingestion pipeline: load, preprocess, balance per mode, extract
// features; one dataset per mode present in the files.
struct TeIngestResult {
  std::vector<LabeledDataset> datasets;
  int dropped = 0;
  bool imbalanced = false;
};

TeIngestResult te_mode_datasets(const std::string& path, Rng& rng, int balance_target = -1);

}  // namespace cdfd::data
