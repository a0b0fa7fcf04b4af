#pragma once

#include <optional>
#include <vector>

#include "cdfd/core.hpp"

namespace cdfd::ot {

// Ground-cost descriptor carried alongside the matrix so downstream code can
// tell which cost produced a plan.
struct CostDescriptor {
  enum class Kind { SquaredEuclidean, LabelIndicator, LabelSquared, Jdot };
  Kind kind = Kind::SquaredEuclidean;
  double alpha = 1.0;  // feature term weight (Jdot)
  double beta = 0.0;   // label term weight
};

struct CostMatrix {
  MatrixXd values;  // n_s x n_t, nonnegative and finite
  CostDescriptor descriptor;
};

enum class LabelCostMode { Indicator, Squared };

// Coupling with prescribed marginals.
struct TransportPlan {
  MatrixXd values;  // n_s x n_t
  VectorXd row_marginal;
  VectorXd col_marginal;

  double cost(const MatrixXd& c) const { return (values.array() * c.array()).sum(); }
};

CostMatrix cost_matrix(const MatrixXd& x, const MatrixXd& y);

// Squared Euclidean feature cost plus a label penalty: beta * [y_i != y_j]
// (indicator) or beta * ||onehot(y_i) - onehot(y_j)||^2 (squared).
CostMatrix labeled_cost_matrix(const LabeledDataset& p, const LabeledDataset& q,
                               double beta, LabelCostMode mode);

// Soft-label variant used by barycenters and dictionaries: feature cost plus
// beta * ||y_i - y_j||^2 between label rows.
CostMatrix soft_labeled_cost_matrix(const MatrixXd& xp, const MatrixXd& yp,
                                    const MatrixXd& xq, const MatrixXd& yq,
                                    double beta);

// Exact solver: network simplex on the bipartite transport polytope. The
// returned plan is a vertex (at most n_s + n_t - 1 nonzeros).
TransportPlan solve_ot_exact(const VectorXd& row_w, const VectorXd& col_w,
                             const CostMatrix& c);

struct SinkhornResult {
  TransportPlan plan;
  int iterations = 0;
  bool converged = false;
  double marginal_residual = 0.0;
};

// Log-domain Sinkhorn with epsilon scaling; never underflows at small
// epsilon. Convergence criterion is the L1 row-marginal residual.
SinkhornResult solve_ot_sinkhorn(const VectorXd& row_w, const VectorXd& col_w,
                                 const CostMatrix& c, double epsilon,
                                 int max_iter = 1000, double tol = 1e-6);

struct SolverSpec {
  enum class Kind { Exact, Sinkhorn };
  Kind kind = Kind::Exact;
  double epsilon = 0.0;  // <= 0 picks 0.05 * mean(C)
  int max_iter = 1000;
  double tol = 1e-6;

  static SolverSpec exact() { return SolverSpec{}; }
  static SolverSpec sinkhorn(double eps = 0.0) {
    SolverSpec s;
    s.kind = Kind::Sinkhorn;
    s.epsilon = eps;
    return s;
  }
};

TransportPlan solve_ot(const VectorXd& row_w, const VectorXd& col_w,
                       const CostMatrix& c, const SolverSpec& spec);

double wasserstein_distance(const EmpiricalDistribution& p,
                            const EmpiricalDistribution& q,
                            const SolverSpec& spec = SolverSpec::exact());

// Pushes each plan row to the plan-weighted average of target points. Rows
// with non-uniform mass are normalized by their own mass; zero-mass rows map
// to zero.
MatrixXd barycentric_map(const TransportPlan& plan, const MatrixXd& x_target);

struct BarycenterResult {
  LabeledEmpirical barycenter;
  std::vector<double> objective_trace;  // one entry per iteration
  int iterations = 0;
  bool converged = false;
  // Plans from the barycenter (rows) to each input distribution (columns),
  // at the final support.
  std::vector<TransportPlan> plans;
};

struct BarycenterConfig {
  int max_iter = 50;
  double tol = 1e-7;          // RMS support displacement
  int exact_size_limit = 512;  // per side; larger problems use Sinkhorn
  double sinkhorn_epsilon = 0.0;
  // Optional fixed initial support/labels (used for warm starts).
  std::optional<MatrixXd> init_support;
  std::optional<MatrixXd> init_labels;
};

// Free-support Wasserstein barycenter with label rows, computed by
// fixed-point iteration: transport the current support to every input, then
// average the maps. The soft-label cost is beta * ||y - y'||^2 so the label
// update is the exact minimizer and the objective never increases.
BarycenterResult free_support_barycenter(const std::vector<LabeledEmpirical>& dists,
                                         const SimplexWeights& alpha, double beta,
                                         int n_support, Rng& rng,
                                         const BarycenterConfig& cfg = {});

// Class-stratified subsample used to initialize barycenter supports: roughly
// n_target/n_c points per class, capped by availability.
LabeledEmpirical stratified_subsample(const std::vector<LabeledEmpirical>& dists,
                                      int n_target, Rng& rng);

}  // namespace cdfd::ot
