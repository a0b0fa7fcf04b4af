#include "cdfd/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cdfd::ot {

namespace {

void validate_weights(const VectorXd& w, const char* side) {
  if (w.size() == 0) throw InvalidArgument(std::string(side) + " weights empty");
  if ((w.array() < 0.0).any()) {
    throw InvalidArgument(std::string(side) + " weights contain a negative entry");
  }
  if (std::abs(w.sum() - 1.0) > 1e-6) {
    throw InvalidArgument(std::string(side) + " weights must sum to 1");
  }
}

// Transportation simplex with a spanning-tree basis. Entering arcs are found
// with a block search; after a soft iteration cap the pivot rule switches to
// Bland's rule, which cannot cycle.
class TransportSimplex {
 public:
  TransportSimplex(const VectorXd& a, const VectorXd& b, const MatrixXd& c)
      : m_(static_cast<int>(a.size())),
        n_(static_cast<int>(b.size())),
        cost_(c),
        a_(a),
        b_(b) {
    // Remove float drift between the two mass totals.
    b_ *= a_.sum() / b_.sum();
    enter_tol_ = 1e-12 * (1.0 + cost_.cwiseAbs().maxCoeff());
  }

  MatrixXd solve() {
    build_northwest_basis();
    const long long soft_cap = 10LL * m_ * n_ + 1000;
    const long long hard_cap = 60LL * m_ * n_ + 10000;
    bool bland = false;
    long long it = 0;
    while (true) {
      if (++it > hard_cap) {
        throw NumericError("transport simplex: pivot limit exceeded");
      }
      if (it > soft_cap) bland = true;
      compute_duals();
      int ei, ej;
      if (!find_entering(bland, ei, ej)) break;
      pivot(ei, ej);
    }
    MatrixXd plan = MatrixXd::Zero(m_, n_);
    for (std::size_t k = 0; k < cell_i_.size(); ++k) {
      plan(cell_i_[k], cell_j_[k]) = std::max(0.0, flow_[k]);
    }
    return plan;
  }

 private:
  void build_northwest_basis() {
    const int nb = m_ + n_ - 1;
    cell_i_.reserve(nb);
    cell_j_.reserve(nb);
    flow_.reserve(nb);
    adj_.assign(m_ + n_, {});
    VectorXd ra = a_, rb = b_;
    int i = 0, j = 0;
    while (true) {
      const double t = std::max(0.0, std::min(ra[i], rb[j]));
      add_cell(i, j, t);
      ra[i] -= t;
      rb[j] -= t;
      if (i == m_ - 1 && j == n_ - 1) break;
      if (i < m_ - 1 && (ra[i] < rb[j] || j == n_ - 1)) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  void add_cell(int i, int j, double t) {
    const int k = static_cast<int>(cell_i_.size());
    cell_i_.push_back(i);
    cell_j_.push_back(j);
    flow_.push_back(t);
    adj_[i].push_back(k);
    adj_[m_ + j].push_back(k);
  }

  void compute_duals() {
    u_.assign(m_, 0.0);
    v_.assign(n_, 0.0);
    std::vector<char> seen(m_ + n_, 0);
    std::vector<int> stack = {0};
    seen[0] = 1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (const int k : adj_[node]) {
        const int i = cell_i_[k];
        const int j = cell_j_[k];
        const int other = (node == i) ? m_ + j : i;
        if (seen[other]) continue;
        seen[other] = 1;
        if (other >= m_) {
          v_[j] = cost_(i, j) - u_[i];
        } else {
          u_[i] = cost_(i, j) - v_[j];
        }
        stack.push_back(other);
      }
    }
  }

  bool find_entering(bool bland, int& ei, int& ej) {
    const long long total = static_cast<long long>(m_) * n_;
    if (bland) {
      for (long long idx = 0; idx < total; ++idx) {
        const int i = static_cast<int>(idx / n_);
        const int j = static_cast<int>(idx % n_);
        if (cost_(i, j) - u_[i] - v_[j] < -enter_tol_) {
          ei = i;
          ej = j;
          return true;
        }
      }
      return false;
    }
    const long long block =
        std::max<long long>(64, static_cast<long long>(std::sqrt(static_cast<double>(total))));
    long long scanned = 0;
    double best = -enter_tol_;
    int bi = -1, bj = -1;
    long long idx = scan_start_;
    while (scanned < total) {
      long long in_block = 0;
      while (in_block < block && scanned < total) {
        const int i = static_cast<int>(idx / n_);
        const int j = static_cast<int>(idx % n_);
        const double r = cost_(i, j) - u_[i] - v_[j];
        if (r < best) {
          best = r;
          bi = i;
          bj = j;
        }
        idx = (idx + 1) % total;
        ++in_block;
        ++scanned;
      }
      if (bi >= 0) {
        scan_start_ = idx;
        ei = bi;
        ej = bj;
        return true;
      }
    }
    return false;
  }

  // Finds the tree path between the entering arc's endpoints, alternates
  // signs around the induced cycle, and swaps the limiting arc out.
  void pivot(int ei, int ej) {
    const int src = ei;
    const int dst = m_ + ej;
    std::vector<int> parent_node(m_ + n_, -1);
    std::vector<int> parent_cell(m_ + n_, -1);
    std::vector<char> seen(m_ + n_, 0);
    std::vector<int> stack = {src};
    seen[src] = 1;
    while (!stack.empty() && !seen[dst]) {
      const int node = stack.back();
      stack.pop_back();
      for (const int k : adj_[node]) {
        const int other = (node == cell_i_[k]) ? m_ + cell_j_[k] : cell_i_[k];
        if (seen[other]) continue;
        seen[other] = 1;
        parent_node[other] = node;
        parent_cell[other] = k;
        stack.push_back(other);
        if (other == dst) break;
      }
    }
    if (!seen[dst]) throw NumericError("transport simplex: basis lost connectivity");

    std::vector<int> path_cells;
    for (int node = dst; node != src; node = parent_node[node]) {
      path_cells.push_back(parent_cell[node]);
    }
    std::reverse(path_cells.begin(), path_cells.end());

    // Signs alternate along the path starting at -1 next to the entering arc.
    double theta = std::numeric_limits<double>::infinity();
    int leaving = -1;
    for (std::size_t p = 0; p < path_cells.size(); p += 2) {
      const int k = path_cells[p];
      if (flow_[k] < theta) {
        theta = flow_[k];
        leaving = k;
      }
    }
    if (leaving < 0) throw NumericError("transport simplex: no leaving arc");

    for (std::size_t p = 0; p < path_cells.size(); ++p) {
      const int k = path_cells[p];
      flow_[k] += (p % 2 == 0) ? -theta : theta;
      if (flow_[k] < 0.0) flow_[k] = 0.0;
    }

    detach_cell(leaving);
    cell_i_[leaving] = ei;
    cell_j_[leaving] = ej;
    flow_[leaving] = theta;
    adj_[ei].push_back(leaving);
    adj_[m_ + ej].push_back(leaving);
  }

  void detach_cell(int k) {
    auto& ra = adj_[cell_i_[k]];
    ra.erase(std::find(ra.begin(), ra.end(), k));
    auto& ca = adj_[m_ + cell_j_[k]];
    ca.erase(std::find(ca.begin(), ca.end(), k));
  }

  int m_, n_;
  const MatrixXd& cost_;
  VectorXd a_, b_;
  double enter_tol_ = 0.0;
  long long scan_start_ = 0;
  std::vector<int> cell_i_, cell_j_;
  std::vector<double> flow_;
  std::vector<std::vector<int>> adj_;
  std::vector<double> u_, v_;
};

struct Reduced {
  std::vector<int> rows, cols;
  VectorXd a, b;
  MatrixXd c;
};

// Drops zero-weight rows/columns; the solvers then only see strictly
// positive marginals.
Reduced reduce_problem(const VectorXd& a, const VectorXd& b, const MatrixXd& c) {
  Reduced r;
  for (int i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) r.rows.push_back(i);
  }
  for (int j = 0; j < b.size(); ++j) {
    if (b[j] > 0.0) r.cols.push_back(j);
  }
  if (r.rows.empty() || r.cols.empty()) {
    throw InvalidArgument("transport: all weights are zero on one side");
  }
  r.a.resize(r.rows.size());
  r.b.resize(r.cols.size());
  r.c.resize(r.rows.size(), r.cols.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) r.a[i] = a[r.rows[i]];
  for (std::size_t j = 0; j < r.cols.size(); ++j) r.b[j] = b[r.cols[j]];
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    for (std::size_t j = 0; j < r.cols.size(); ++j) {
      r.c(i, j) = c(r.rows[i], r.cols[j]);
    }
  }
  r.a /= r.a.sum();
  r.b /= r.b.sum();
  return r;
}

MatrixXd scatter_plan(const Reduced& r, const MatrixXd& sub, int m, int n) {
  MatrixXd plan = MatrixXd::Zero(m, n);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    for (std::size_t j = 0; j < r.cols.size(); ++j) {
      plan(r.rows[i], r.cols[j]) = sub(i, j);
    }
  }
  return plan;
}

double logsumexp_row(const Eigen::ArrayXd& row) {
  const double mx = row.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((row - mx).exp().sum());
}

}  // namespace

CostMatrix cost_matrix(const MatrixXd& x, const MatrixXd& y) {
  if (x.cols() != y.cols()) {
    throw InvalidArgument("cost_matrix: feature dimensions differ");
  }
  CostMatrix c;
  c.values.resize(x.rows(), y.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    c.values.row(i) = (y.rowwise() - x.row(i)).rowwise().squaredNorm().transpose();
  }
  c.descriptor.kind = CostDescriptor::Kind::SquaredEuclidean;
  return c;
}

CostMatrix labeled_cost_matrix(const LabeledDataset& p, const LabeledDataset& q,
                               double beta, LabelCostMode mode) {
  if (beta < 0.0) throw InvalidArgument("labeled_cost_matrix: beta must be nonnegative");
  if (p.class_count != q.class_count) {
    throw InvalidArgument("labeled_cost_matrix: class counts differ");
  }
  CostMatrix c = cost_matrix(p.features, q.features);
  // Indicator penalty is beta on a class mismatch; the squared one-hot
  // distance between different classes is exactly 2.
  const double mismatch = (mode == LabelCostMode::Indicator) ? beta : 2.0 * beta;
  for (Eigen::Index i = 0; i < p.labels.size(); ++i) {
    for (Eigen::Index j = 0; j < q.labels.size(); ++j) {
      if (p.labels[i] != q.labels[j]) c.values(i, j) += mismatch;
    }
  }
  c.descriptor.kind = (mode == LabelCostMode::Indicator)
                          ? CostDescriptor::Kind::LabelIndicator
                          : CostDescriptor::Kind::LabelSquared;
  c.descriptor.beta = beta;
  return c;
}

CostMatrix soft_labeled_cost_matrix(const MatrixXd& xp, const MatrixXd& yp,
                                    const MatrixXd& xq, const MatrixXd& yq,
                                    double beta) {
  if (beta < 0.0) throw InvalidArgument("soft_labeled_cost_matrix: beta must be nonnegative");
  CostMatrix c = cost_matrix(xp, xq);
  if (beta > 0.0) {
    c.values += beta * cost_matrix(yp, yq).values;
  }
  c.descriptor.kind = CostDescriptor::Kind::LabelSquared;
  c.descriptor.beta = beta;
  return c;
}

TransportPlan solve_ot_exact(const VectorXd& row_w, const VectorXd& col_w,
                             const CostMatrix& c) {
  validate_weights(row_w, "row");
  validate_weights(col_w, "column");
  if (c.values.rows() != row_w.size() || c.values.cols() != col_w.size()) {
    throw InvalidArgument("solve_ot_exact: cost shape does not match weights");
  }
  if (!c.values.allFinite()) throw InvalidArgument("solve_ot_exact: cost has NaN/Inf");

  const Reduced r = reduce_problem(row_w, col_w, c.values);
  TransportSimplex simplex(r.a, r.b, r.c);
  TransportPlan plan;
  plan.values = scatter_plan(r, simplex.solve(),
                             static_cast<int>(row_w.size()),
                             static_cast<int>(col_w.size()));
  plan.row_marginal = row_w;
  plan.col_marginal = col_w;
  return plan;
}

SinkhornResult solve_ot_sinkhorn(const VectorXd& row_w, const VectorXd& col_w,
                                 const CostMatrix& c, double epsilon, int max_iter,
                                 double tol) {
  validate_weights(row_w, "row");
  validate_weights(col_w, "column");
  if (epsilon <= 0.0) throw InvalidArgument("solve_ot_sinkhorn: epsilon must be positive");
  if (c.values.rows() != row_w.size() || c.values.cols() != col_w.size()) {
    throw InvalidArgument("solve_ot_sinkhorn: cost shape does not match weights");
  }

  const Reduced r = reduce_problem(row_w, col_w, c.values);
  const int m = static_cast<int>(r.a.size());
  const int n = static_cast<int>(r.b.size());
  const Eigen::ArrayXd loga = r.a.array().log();
  const Eigen::ArrayXd logb = r.b.array().log();
  VectorXd f = VectorXd::Zero(m);
  VectorXd g = VectorXd::Zero(n);

  int total_iters = 0;
  double residual = std::numeric_limits<double>::infinity();

  auto sweep = [&](double eps) {
    // g makes columns exact, then f makes rows exact.
    for (int j = 0; j < n; ++j) {
      g[j] = eps * logb[j] - eps * logsumexp_row((f.array() - r.c.col(j).array()) / eps);
    }
    for (int i = 0; i < m; ++i) {
      f[i] = eps * loga[i] - eps * logsumexp_row((g.array() - r.c.row(i).transpose().array()) / eps);
    }
  };
  auto col_residual = [&](double eps) {
    double res = 0.0;
    for (int j = 0; j < n; ++j) {
      const double colsum =
          ((f.array() + g[j] - r.c.col(j).array()) / eps).exp().sum();
      res += std::abs(colsum - r.b[j]);
    }
    return res;
  };

  // Epsilon scaling: warm-start the potentials at a loose regularization and
  // halve toward the target. The fixed point solved last is the target one.
  const double mean_cost = std::max(1e-300, r.c.cwiseAbs().mean());
  double eps_run = std::max(epsilon, 0.125 * mean_cost);
  while (eps_run > epsilon * 1.0000001) {
    for (int it = 0; it < 60; ++it) {
      sweep(eps_run);
      ++total_iters;
      if (col_residual(eps_run) < 10.0 * tol) break;
    }
    eps_run = std::max(epsilon, 0.5 * eps_run);
  }

  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    sweep(epsilon);
    ++total_iters;
    residual = col_residual(epsilon);
    if (residual < tol) {
      converged = true;
      break;
    }
  }

  MatrixXd sub(m, n);
  for (int i = 0; i < m; ++i) {
    sub.row(i) = ((f[i] + g.array() - r.c.row(i).transpose().array()) / epsilon).exp();
  }
  SinkhornResult result;
  result.plan.values = scatter_plan(r, sub, static_cast<int>(row_w.size()),
                                    static_cast<int>(col_w.size()));
  result.plan.row_marginal = row_w;
  result.plan.col_marginal = col_w;
  result.iterations = total_iters;
  result.converged = converged;
  result.marginal_residual = residual;
  return result;
}

TransportPlan solve_ot(const VectorXd& row_w, const VectorXd& col_w,
                       const CostMatrix& c, const SolverSpec& spec) {
  if (spec.kind == SolverSpec::Kind::Exact) {
    return solve_ot_exact(row_w, col_w, c);
  }
  const double eps =
      spec.epsilon > 0.0 ? spec.epsilon : 0.05 * std::max(1e-300, c.values.mean());
  return solve_ot_sinkhorn(row_w, col_w, c, eps, spec.max_iter, spec.tol).plan;
}

double wasserstein_distance(const EmpiricalDistribution& p,
                            const EmpiricalDistribution& q, const SolverSpec& spec) {
  const CostMatrix c = cost_matrix(p.support, q.support);
  return solve_ot(p.weights, q.weights, c, spec).cost(c.values);
}

MatrixXd barycentric_map(const TransportPlan& plan, const MatrixXd& x_target) {
  if (plan.values.cols() != x_target.rows()) {
    throw InvalidArgument("barycentric_map: plan columns do not match target rows");
  }
  MatrixXd out(plan.values.rows(), x_target.cols());
  for (Eigen::Index i = 0; i < plan.values.rows(); ++i) {
    const double mass = plan.values.row(i).sum();
    if (mass > 0.0) {
      out.row(i) = (plan.values.row(i) / mass) * x_target;
    } else {
      out.row(i).setZero();
    }
  }
  return out;
}

LabeledEmpirical stratified_subsample(const std::vector<LabeledEmpirical>& dists,
                                      int n_target, Rng& rng) {
  if (dists.empty()) throw InvalidArgument("stratified_subsample: no distributions");
  const int n_c = dists[0].class_count();
  const int d = dists[0].dim();

  std::vector<std::vector<std::pair<int, int>>> pools(n_c);  // class -> (dist, row)
  for (std::size_t l = 0; l < dists.size(); ++l) {
    if (dists[l].dim() != d || dists[l].class_count() != n_c) {
      throw InvalidArgument("stratified_subsample: mismatched distributions");
    }
    for (int i = 0; i < dists[l].size(); ++i) {
      const int c = argmax_row(dists[l].soft_labels.row(i));
      pools[c].emplace_back(static_cast<int>(l), i);
    }
  }

  std::vector<int> quota(n_c, n_target / n_c);
  for (int c = 0; c < n_target % n_c; ++c) quota[c] += 1;

  // One permutation per class: quota picks come first, refills continue from
  // the leftover entries so nothing repeats until the pool is exhausted.
  std::vector<std::vector<int>> order(n_c);
  std::vector<int> taken(n_c, 0);
  for (int c = 0; c < n_c; ++c) {
    order[c] = rng.permutation(static_cast<int>(pools[c].size()));
  }

  std::vector<std::pair<int, int>> picked;
  picked.reserve(n_target);
  int shortfall = 0;
  for (int c = 0; c < n_c; ++c) {
    const int take = std::min<int>(quota[c], static_cast<int>(pools[c].size()));
    for (int t = 0; t < take; ++t) picked.push_back(pools[c][order[c][t]]);
    taken[c] = take;
    shortfall += quota[c] - take;
  }
  for (int c = 0; c < n_c && shortfall > 0; ++c) {
    while (taken[c] < static_cast<int>(pools[c].size()) && shortfall > 0) {
      picked.push_back(pools[c][order[c][taken[c]++]]);
      --shortfall;
    }
  }
  // If the pooled supports are smaller than n_target, repeat points.
  std::vector<std::pair<int, int>> all;
  for (int c = 0; c < n_c; ++c) {
    all.insert(all.end(), pools[c].begin(), pools[c].end());
  }
  while (static_cast<int>(picked.size()) < n_target) {
    picked.push_back(all[static_cast<std::size_t>(rng.uniform_int(all.size()))]);
  }

  LabeledEmpirical out;
  out.support.resize(n_target, d);
  out.soft_labels.resize(n_target, n_c);
  for (int i = 0; i < n_target; ++i) {
    out.support.row(i) = dists[picked[i].first].support.row(picked[i].second);
    out.soft_labels.row(i) = dists[picked[i].first].soft_labels.row(picked[i].second);
  }
  out.weights = VectorXd::Constant(n_target, 1.0 / n_target);
  return out;
}

BarycenterResult free_support_barycenter(const std::vector<LabeledEmpirical>& dists,
                                         const SimplexWeights& alpha, double beta,
                                         int n_support, Rng& rng,
                                         const BarycenterConfig& cfg) {
  if (dists.empty()) throw InvalidArgument("free_support_barycenter: no distributions");
  if (alpha.size() != static_cast<int>(dists.size())) {
    throw InvalidArgument("free_support_barycenter: alpha length mismatch");
  }
  const int d = dists[0].dim();
  const int n_c = dists[0].class_count();
  for (const auto& ds : dists) {
    if (ds.dim() != d || ds.class_count() != n_c) {
      throw InvalidArgument("free_support_barycenter: mismatched distributions");
    }
  }
  if (n_support < n_c) {
    throw InvalidArgument("free_support_barycenter: support smaller than class count");
  }

  // Inputs with zero weight do not influence the fixed point; drop them.
  std::vector<const LabeledEmpirical*> active;
  std::vector<double> w;
  std::vector<int> active_idx;
  for (int l = 0; l < alpha.size(); ++l) {
    if (alpha[l] > 0.0) {
      active.push_back(&dists[static_cast<std::size_t>(l)]);
      w.push_back(alpha[l]);
      active_idx.push_back(l);
    }
  }
  if (active.empty()) throw InvalidArgument("free_support_barycenter: all weights zero");

  MatrixXd x, y;
  if (cfg.init_support) {
    x = *cfg.init_support;
    y = cfg.init_labels ? *cfg.init_labels
                        : MatrixXd::Constant(n_support, n_c, 1.0 / n_c);
  } else {
    std::vector<LabeledEmpirical> pool;
    pool.reserve(active.size());
    for (const auto* p : active) pool.push_back(*p);
    const LabeledEmpirical init = stratified_subsample(pool, n_support, rng);
    x = init.support;
    y = init.soft_labels;
  }

  const VectorXd bary_w = VectorXd::Constant(n_support, 1.0 / n_support);
  SolverSpec solver = SolverSpec::exact();

  auto solve_all = [&](const MatrixXd& xs, const MatrixXd& ys,
                       std::vector<TransportPlan>& plans) {
    plans.clear();
    plans.reserve(active.size());
    double obj = 0.0;
    for (std::size_t l = 0; l < active.size(); ++l) {
      const CostMatrix c = soft_labeled_cost_matrix(xs, ys, active[l]->support,
                                                    active[l]->soft_labels, beta);
      SolverSpec s = solver;
      if (n_support > cfg.exact_size_limit || active[l]->size() > cfg.exact_size_limit) {
        s = SolverSpec::sinkhorn(cfg.sinkhorn_epsilon);
      }
      TransportPlan plan = solve_ot(bary_w, active[l]->weights, c, s);
      obj += w[l] * plan.cost(c.values);
      plans.push_back(std::move(plan));
    }
    return obj;
  };

  BarycenterResult result;
  std::vector<TransportPlan> plans;
  for (int it = 0; it < cfg.max_iter; ++it) {
    const double obj = solve_all(x, y, plans);
    result.objective_trace.push_back(obj);
    result.iterations = it + 1;

    MatrixXd nx = MatrixXd::Zero(n_support, d);
    MatrixXd ny = MatrixXd::Zero(n_support, n_c);
    for (std::size_t l = 0; l < active.size(); ++l) {
      nx += w[l] * barycentric_map(plans[l], active[l]->support);
      ny += w[l] * barycentric_map(plans[l], active[l]->soft_labels);
    }
    ny = ny.cwiseMax(0.0);

    const double disp = std::sqrt(((nx - x).squaredNorm() + (ny - y).squaredNorm()) /
                                  static_cast<double>(n_support));
    x = std::move(nx);
    y = std::move(ny);
    if (disp < cfg.tol) {
      result.converged = true;
      break;
    }
  }

  const double final_obj = solve_all(x, y, plans);
  result.objective_trace.push_back(final_obj);
  // Plans are indexed like the input list; zero-weight inputs get an empty
  // placeholder.
  result.plans.assign(dists.size(), TransportPlan{});
  for (std::size_t l = 0; l < active_idx.size(); ++l) {
    result.plans[static_cast<std::size_t>(active_idx[l])] = std::move(plans[l]);
  }

  // Simplex drift over the iterations is at float scale; normalize once.
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double s = y.row(i).sum();
    if (s > 0.0) y.row(i) /= s;
  }
  result.barycenter.support = std::move(x);
  result.barycenter.soft_labels = std::move(y);
  result.barycenter.weights = bary_w;
  return result;
}

}  // namespace cdfd::ot
