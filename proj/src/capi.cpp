#include "cdfd.h"

#include <cstring>
#include <filesystem>
#include <string>

#include "cdfd/bench.hpp"
#include "cdfd/core.hpp"
#include "cdfd/data.hpp"
#include "cdfd/divergences.hpp"
#include "cdfd/ot.hpp"

namespace {

thread_local std::string g_last_error;

cdfd_status to_status(const std::exception& e) {
  g_last_error = e.what();
  if (dynamic_cast<const cdfd::InvalidArgument*>(&e)) return CDFD_ERR_INVALID_ARGUMENT;
  if (dynamic_cast<const cdfd::Unsupported*>(&e)) return CDFD_ERR_UNSUPPORTED;
  if (dynamic_cast<const cdfd::IoError*>(&e)) return CDFD_ERR_IO;
  if (dynamic_cast<const cdfd::NumericError*>(&e)) return CDFD_ERR_NUMERIC;
  return CDFD_ERR_INTERNAL;
}

template <typename Fn>
cdfd_status guarded(Fn&& fn) {
  try {
    fn();
    return CDFD_OK;
  } catch (const std::exception& e) {
    return to_status(e);
  } catch (...) {
    g_last_error = "unknown error";
    return CDFD_ERR_INTERNAL;
  }
}

cdfd_status require(bool ok, const char* message) {
  if (ok) return CDFD_OK;
  g_last_error = message;
  return CDFD_ERR_INVALID_ARGUMENT;
}

}  // namespace

struct cdfd_dataset {
  cdfd::LabeledDataset ds;
};

struct cdfd_plan {
  cdfd::ot::TransportPlan plan;
};

extern "C" {

const char* cdfd_version(void) { return "1.0.0"; }

const char* cdfd_last_error(void) { return g_last_error.c_str(); }

cdfd_status cdfd_dataset_create(const double* features, int64_t rows, int64_t cols,
                                const int32_t* labels, int32_t n_classes,
                                const char* domain_id, cdfd_dataset** out) {
  if (auto rc = require(features && labels && out && rows > 0 && cols > 0,
                        "cdfd_dataset_create: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    Eigen::MatrixXd x(rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t c = 0; c < cols; ++c) x(i, c) = features[i * cols + c];
    }
    Eigen::VectorXi y(rows);
    for (int64_t i = 0; i < rows; ++i) y[i] = labels[i];
    *out = new cdfd_dataset{cdfd::LabeledDataset(std::move(x), std::move(y), n_classes,
                                                 domain_id ? domain_id : "")};
  });
}

void cdfd_dataset_free(cdfd_dataset* ds) { delete ds; }

cdfd_status cdfd_dataset_rows(const cdfd_dataset* ds, int64_t* out) {
  if (auto rc = require(ds && out, "cdfd_dataset_rows: bad arguments")) return rc;
  *out = ds->ds.rows();
  return CDFD_OK;
}

cdfd_status cdfd_dataset_cols(const cdfd_dataset* ds, int64_t* out) {
  if (auto rc = require(ds && out, "cdfd_dataset_cols: bad arguments")) return rc;
  *out = ds->ds.feature_dim();
  return CDFD_OK;
}

cdfd_status cdfd_dataset_classes(const cdfd_dataset* ds, int32_t* out) {
  if (auto rc = require(ds && out, "cdfd_dataset_classes: bad arguments")) return rc;
  *out = ds->ds.class_count;
  return CDFD_OK;
}

cdfd_status cdfd_dataset_domain(const cdfd_dataset* ds, const char** out) {
  if (auto rc = require(ds && out, "cdfd_dataset_domain: bad arguments")) return rc;
  *out = ds->ds.domain_id.c_str();
  return CDFD_OK;
}

cdfd_status cdfd_dataset_copy_features(const cdfd_dataset* ds, double* out) {
  if (auto rc = require(ds && out, "cdfd_dataset_copy_features: bad arguments")) return rc;
  const auto& f = ds->ds.features;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    for (Eigen::Index c = 0; c < f.cols(); ++c) out[i * f.cols() + c] = f(i, c);
  }
  return CDFD_OK;
}

cdfd_status cdfd_dataset_copy_labels(const cdfd_dataset* ds, int32_t* out) {
  if (auto rc = require(ds && out, "cdfd_dataset_copy_labels: bad arguments")) return rc;
  for (Eigen::Index i = 0; i < ds->ds.labels.size(); ++i) out[i] = ds->ds.labels[i];
  return CDFD_OK;
}

cdfd_status cdfd_synthetic_generate(const char* spec_json, int32_t n_per_mode,
                                    uint64_t seed, cdfd_dataset*** out, int64_t* n_out) {
  if (auto rc = require(spec_json && out && n_out, "cdfd_synthetic_generate: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    const auto specs = cdfd::data::load_synthetic_spec(spec_json);
    cdfd::Rng rng(seed);
    auto datasets = cdfd::data::gen_synthetic_modes(specs, n_per_mode, rng);
    auto** list = new cdfd_dataset*[datasets.size()];
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      list[i] = new cdfd_dataset{std::move(datasets[i])};
    }
    *out = list;
    *n_out = static_cast<int64_t>(datasets.size());
  });
}

cdfd_status cdfd_te_ingest(const char* path, uint64_t seed, int32_t balance_target,
                           cdfd_dataset*** out, int64_t* n_out, int32_t* dropped_out) {
  if (auto rc = require(path && out && n_out, "cdfd_te_ingest: bad arguments")) return rc;
  return guarded([&] {
    cdfd::Rng rng(seed);
    auto ingest = cdfd::data::te_mode_datasets(path, rng, balance_target);
    auto** list = new cdfd_dataset*[ingest.datasets.size()];
    for (std::size_t i = 0; i < ingest.datasets.size(); ++i) {
      list[i] = new cdfd_dataset{std::move(ingest.datasets[i])};
    }
    *out = list;
    *n_out = static_cast<int64_t>(ingest.datasets.size());
    if (dropped_out) *dropped_out = ingest.dropped;
  });
}

void cdfd_dataset_list_free(cdfd_dataset** list, int64_t n) {
  if (!list) return;
  for (int64_t i = 0; i < n; ++i) delete list[i];
  delete[] list;
}

namespace {

cdfd::ot::CostMatrix cost_from_buffer(const double* cost, int64_t rows, int64_t cols) {
  cdfd::ot::CostMatrix c;
  c.values.resize(rows, cols);
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) c.values(i, j) = cost[i * cols + j];
  }
  return c;
}

Eigen::MatrixXd matrix_from_buffer(const double* data, int64_t rows, int64_t cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t c = 0; c < cols; ++c) m(i, c) = data[i * cols + c];
  }
  return m;
}

}  // namespace

cdfd_status cdfd_ot_exact(const double* row_weights, int64_t n_rows,
                          const double* col_weights, int64_t n_cols, const double* cost,
                          cdfd_plan** out) {
  if (auto rc = require(row_weights && col_weights && cost && out && n_rows > 0 && n_cols > 0,
                        "cdfd_ot_exact: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    const Eigen::Map<const Eigen::VectorXd> a(row_weights, n_rows);
    const Eigen::Map<const Eigen::VectorXd> b(col_weights, n_cols);
    *out = new cdfd_plan{
        cdfd::ot::solve_ot_exact(a, b, cost_from_buffer(cost, n_rows, n_cols))};
  });
}

cdfd_status cdfd_ot_sinkhorn(const double* row_weights, int64_t n_rows,
                             const double* col_weights, int64_t n_cols,
                             const double* cost, double epsilon, int32_t max_iter,
                             double tol, cdfd_plan** out) {
  if (auto rc = require(row_weights && col_weights && cost && out && n_rows > 0 && n_cols > 0,
                        "cdfd_ot_sinkhorn: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    const Eigen::Map<const Eigen::VectorXd> a(row_weights, n_rows);
    const Eigen::Map<const Eigen::VectorXd> b(col_weights, n_cols);
    *out = new cdfd_plan{cdfd::ot::solve_ot_sinkhorn(
                             a, b, cost_from_buffer(cost, n_rows, n_cols), epsilon,
                             max_iter > 0 ? max_iter : 1000, tol > 0 ? tol : 1e-6)
                             .plan};
  });
}

void cdfd_plan_free(cdfd_plan* plan) { delete plan; }

cdfd_status cdfd_plan_copy_values(const cdfd_plan* plan, double* out) {
  if (auto rc = require(plan && out, "cdfd_plan_copy_values: bad arguments")) return rc;
  const auto& v = plan->plan.values;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index j = 0; j < v.cols(); ++j) out[i * v.cols() + j] = v(i, j);
  }
  return CDFD_OK;
}

cdfd_status cdfd_plan_cost(const cdfd_plan* plan, const double* cost, double* out) {
  if (auto rc = require(plan && cost && out, "cdfd_plan_cost: bad arguments")) return rc;
  const auto& v = plan->plan.values;
  double total = 0.0;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index j = 0; j < v.cols(); ++j) total += v(i, j) * cost[i * v.cols() + j];
  }
  *out = total;
  return CDFD_OK;
}

cdfd_status cdfd_wasserstein(const double* xs, int64_t ns, const double* xt, int64_t nt,
                             int64_t dim, double* out) {
  if (auto rc = require(xs && xt && out && ns > 0 && nt > 0 && dim > 0,
                        "cdfd_wasserstein: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    const auto p = cdfd::EmpiricalDistribution::uniform(matrix_from_buffer(xs, ns, dim));
    const auto q = cdfd::EmpiricalDistribution::uniform(matrix_from_buffer(xt, nt, dim));
    *out = cdfd::ot::wasserstein_distance(p, q);
  });
}

cdfd_status cdfd_mmd(const double* xs, int64_t ns, const double* xt, int64_t nt,
                     int64_t dim, const char* kernel, double sigma, double* out) {
  if (auto rc = require(xs && xt && kernel && out && ns > 0 && nt > 0 && dim > 0,
                        "cdfd_mmd: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    const Eigen::MatrixXd a = matrix_from_buffer(xs, ns, dim);
    const Eigen::MatrixXd b = matrix_from_buffer(xt, nt, dim);
    cdfd::div::KernelSpec spec;
    const std::string name = kernel;
    if (name == "linear") {
      spec = cdfd::div::KernelSpec::linear();
    } else if (name == "rbf") {
      spec = cdfd::div::KernelSpec::rbf(
          sigma > 0.0 ? sigma : cdfd::div::median_heuristic_sigma(a, b));
    } else if (name == "polynomial") {
      spec = cdfd::div::KernelSpec::polynomial(2, 1.0);
    } else {
      throw cdfd::InvalidArgument("cdfd_mmd: unknown kernel '" + name + "'");
    }
    *out = cdfd::div::mmd(a, b, spec);
  });
}

cdfd_status cdfd_h_distance(const double* xs, int64_t ns, const double* xt, int64_t nt,
                            int64_t dim, uint64_t seed, double* proxy_a_out,
                            double* paper_literal_out) {
  if (auto rc = require(xs && xt && ns > 0 && nt > 0 && dim > 0,
                        "cdfd_h_distance: bad arguments")) {
    return rc;
  }
  return guarded([&] {
    cdfd::Rng rng(seed);
    const auto res = cdfd::div::h_distance(matrix_from_buffer(xs, ns, dim),
                                           matrix_from_buffer(xt, nt, dim), {}, 0.5, rng);
    if (proxy_a_out) *proxy_a_out = res.proxy_a;
    if (paper_literal_out) *paper_literal_out = res.paper_literal;
  });
}

cdfd_status cdfd_run_experiment(const char* config_path, const char* protocol_override,
                                const char* out_dir_override, const char* seeds_override,
                                int32_t jobs, char* out_path_buf, size_t out_path_cap) {
  if (auto rc = require(config_path, "cdfd_run_experiment: config path required")) return rc;
  return guarded([&] {
    cdfd::bench::ExperimentConfig cfg = cdfd::bench::parse_config_file(config_path);
    if (protocol_override && *protocol_override) {
      const std::string p = protocol_override;
      if (p == "pairwise") {
        cfg.protocol = cdfd::bench::Protocol::Pairwise;
      } else if (p == "multi" || p == "multi_source") {
        cfg.protocol = cdfd::bench::Protocol::MultiSource;
      } else {
        throw cdfd::InvalidArgument("unknown protocol override '" + p + "'");
      }
    }
    if (out_dir_override && *out_dir_override) cfg.out_dir = out_dir_override;
    if (seeds_override && *seeds_override) {
      cfg.seeds.clear();
      std::string token;
      for (const char* p = seeds_override;; ++p) {
        if (*p == ',' || *p == '\0') {
          if (!token.empty()) cfg.seeds.push_back(std::stoull(token));
          token.clear();
          if (*p == '\0') break;
        } else {
          token += *p;
        }
      }
      if (cfg.seeds.empty()) throw cdfd::InvalidArgument("empty seeds override");
    }
    if (jobs > 0) cfg.jobs = jobs;
    cdfd::bench::run_experiment(cfg);
    if (out_path_buf && out_path_cap > 0) {
      std::strncpy(out_path_buf, cfg.out_dir.c_str(), out_path_cap - 1);
      out_path_buf[out_path_cap - 1] = '\0';
    }
  });
}

cdfd_status cdfd_emit_report(const char* report_path, const char* format,
                             const char* out_dir) {
  if (auto rc = require(report_path && format, "cdfd_emit_report: bad arguments")) return rc;
  return guarded([&] {
    const cdfd::bench::ExperimentReport report = cdfd::bench::load_report(report_path);
    std::string dir = out_dir && *out_dir ? out_dir : report_path;
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) dir = fs::path(dir).parent_path().string();
    cdfd::bench::emit_report(report, dir, format);
  });
}

}  // extern "C"
