#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cdfd/core.hpp"

namespace cdfd::bench {

enum class Protocol { Pairwise, MultiSource };

struct DatasetSource {
  enum class Type { Synthetic, TeCsv };
  Type type = Type::Synthetic;
  std::string synthetic_spec_json;  // inline spec text (synthetic)
  std::string path;                 // spec file or csv directory
  int n_per_mode = 150;
};

struct ExperimentConfig {
  DatasetSource dataset;
  Protocol protocol = Protocol::Pairwise;
  std::vector<std::string> methods;
  std::string method_configs_json = "{}";  // per-method parameter overrides
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  double split_fraction = 0.7;
  std::string out_dir = "bench_out";
  int jobs = 1;
  bool diagnostics = true;
};

// Parses the config JSON documented in the README. Unknown methods or
// malformed fields throw.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig parse_config_file(const std::string& path);

struct Record {
  std::string method;
  std::vector<std::string> sources;
  std::string target;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double wall_time_s = 0.0;  // emitted separately; not part of the report bytes
  std::map<std::string, double> diagnostics;
  std::string status = "ok";
  std::string error;
};

struct Aggregate {
  std::string method;
  std::string target;
  double mean = 0.0;
  double stddev = 0.0;
  int runs = 0;
  int failed = 0;
};

struct ExperimentReport {
  Protocol protocol = Protocol::Pairwise;
  std::string header_json = "{}";  // evaluation policy, dataset descriptor, seeds
  std::vector<std::string> domains;
  std::vector<Record> records;

  std::vector<Aggregate> aggregates() const;
  double mean_accuracy(const std::string& method) const;
  double mean_accuracy(const std::string& method, const std::string& target) const;
};

// Baselines only: source-only and target-only cells for the configured
// protocol.
ExperimentReport run_baselines(const ExperimentConfig& cfg);

// Ordered source/target pairs, single-source methods plus baselines.
ExperimentReport run_pairwise(const ExperimentConfig& cfg);

// Leave-one-domain-out; single-source methods see the sources concatenated,
// multi-source methods see them per domain.
ExperimentReport run_multi_source(const ExperimentConfig& cfg);

// Dispatches on cfg.protocol and emits the report into cfg.out_dir.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// Writes report.json / accuracy-matrix CSVs / timings.json. `format` is
// "json", "csv", or "all". Re-emission of the same report is byte-identical.
void emit_report(const ExperimentReport& report, const std::string& out_dir,
                 const std::string& format = "all");

ExperimentReport load_report(const std::string& dir_or_file);

bool is_single_source_method(const std::string& name);
bool is_multi_source_method(const std::string& name);

// Deterministic 64-bit FNV-1a; used to derive per-cell seeds.
std::uint64_t fnv1a(const std::string& text);

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> test;
};

SplitIndices split_indices(int n, double fraction, Rng& rng);
LabeledDataset take_subset(const LabeledDataset& ds, const std::vector<int>& idx);

}  // namespace cdfd::bench
