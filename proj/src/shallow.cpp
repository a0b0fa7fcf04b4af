#include "cdfd/shallow.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_set>

namespace cdfd::shallow {

namespace {

std::string row_bytes(const Eigen::RowVectorXd& row) {
  return std::string(reinterpret_cast<const char*>(row.data()),
                     static_cast<std::size_t>(row.size()) * sizeof(double));
}

}  // namespace

TcaModel tca_fit(const MatrixXd& source, const MatrixXd& target,
                 const div::KernelSpec& kernel, double mu, int n_components) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("tca_fit: empty sample set");
  }
  if (source.cols() != target.cols()) throw InvalidArgument("tca_fit: dimension mismatch");
  if (!(mu > 0.0)) throw InvalidArgument("tca_fit: mu must be positive");
  const int n = static_cast<int>(source.rows() + target.rows());
  if (n_components < 1 || n_components > n) {
    throw InvalidArgument("tca_fit: n_components out of range");
  }

  MatrixXd joint(n, source.cols());
  joint << source, target;
  const MatrixXd k = div::kernel_matrix(joint, joint, kernel);
  const div::JointKernelMatrices jm =
      div::joint_kernel_matrices(source, target, kernel, div::MmdForm::Standard);
  const MatrixXd h = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / n);

  // Pencil B w = lambda A w with A = I + mu K L K (positive definite for
  // mu > 0 and a PSD kernel) and B = K H K. Reduce through the Cholesky
  // factor of A so no ridge is needed on the singular side.
  const MatrixXd a = MatrixXd::Identity(n, n) + mu * (k * jm.l * k);
  const MatrixXd b = k * h * k;
  Eigen::LLT<MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) {
    throw NumericError("tca_fit: I + mu*KLK is not positive definite");
  }
  const MatrixXd r = llt.matrixU();
  const MatrixXd rinv = r.template triangularView<Eigen::Upper>().solve(
      MatrixXd::Identity(n, n));
  MatrixXd s = rinv.transpose() * b * rinv;
  s = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(s);
  if (eig.info() != Eigen::Success) throw NumericError("tca_fit: eigensolver failed");

  const VectorXd evals = eig.eigenvalues();  // ascending
  const double lam_max = std::max(evals[n - 1], 0.0);
  const double floor = std::max(1e-12, 1e-9 * std::max(lam_max, 1.0));

  TcaModel model;
  model.joint = joint;
  model.kernel = kernel;
  model.mu = mu;
  model.requested_dim = n_components;

  std::vector<int> keep;
  for (int c = 0; c < n_components; ++c) {
    const int idx = n - 1 - c;
    if (idx < 0 || evals[idx] <= floor) break;
    keep.push_back(idx);
  }
  model.effective_dim = static_cast<int>(keep.size());
  if (model.effective_dim == 0) {
    throw NumericError("tca_fit: K H K has no numerically valid directions");
  }
  model.w.resize(n, model.effective_dim);
  model.eigenvalues.resize(model.effective_dim);
  for (int c = 0; c < model.effective_dim; ++c) {
    VectorXd w = rinv * eig.eigenvectors().col(keep[static_cast<std::size_t>(c)]);
    const double lam = evals[keep[static_cast<std::size_t>(c)]];
    // Scale so that w' B w = 1, matching the constraint.
    w /= std::sqrt(lam);
    model.w.col(c) = w;
    model.eigenvalues[c] = lam;
  }
  return model;
}

MatrixXd tca_transform(const TcaModel& model, const MatrixXd& x, bool allow_extension) {
  if (x.cols() != model.joint.cols()) {
    throw InvalidArgument("tca_transform: dimension mismatch");
  }
  if (!allow_extension && !(x.rows() == model.joint.rows() && x == model.joint)) {
    std::unordered_set<std::string> joint_rows;
    for (Eigen::Index i = 0; i < model.joint.rows(); ++i) {
      joint_rows.insert(row_bytes(model.joint.row(i)));
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (joint_rows.count(row_bytes(x.row(i))) == 0) {
        throw Unsupported(
            "tca_transform: row is not part of the training joint set; "
            "pass allow_extension to project new points");
      }
    }
  }
  return div::kernel_matrix(x, model.joint, model.kernel) * model.w;
}

MatrixXd tca_transform_joint(const TcaModel& model) {
  return tca_transform(model, model.joint, false);
}

LabeledDataset otda_adapt(const LabeledDataset& source, const MatrixXd& target,
                          const ot::SolverSpec& solver) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("otda_adapt: empty input");
  }
  const ot::CostMatrix c = ot::cost_matrix(source.features, target);
  const VectorXd a = VectorXd::Constant(source.rows(), 1.0 / source.rows());
  const VectorXd b = VectorXd::Constant(target.rows(), 1.0 / target.rows());
  const ot::TransportPlan plan = ot::solve_ot(a, b, c, solver);
  return LabeledDataset(ot::barycentric_map(plan, target), source.labels,
                        source.class_count, source.domain_id + "->target");
}

namespace {

struct StackedSources {
  MatrixXd x;
  MatrixXd onehot;
  std::vector<int> group;  // row -> source index
  std::vector<int> sizes;
  int class_count = 0;
};

StackedSources stack_sources(const std::vector<const LabeledDataset*>& sources) {
  if (sources.empty()) throw InvalidArgument("jdot: no sources");
  int rows = 0;
  const int d = sources[0]->feature_dim();
  const int n_c = sources[0]->class_count;
  for (const auto* s : sources) {
    if (s->rows() == 0) throw InvalidArgument("jdot: empty source");
    if (s->feature_dim() != d || s->class_count != n_c) {
      throw InvalidArgument("jdot: sources disagree on dimensions");
    }
    rows += s->rows();
  }
  StackedSources st;
  st.x.resize(rows, d);
  st.onehot.resize(rows, n_c);
  st.group.reserve(rows);
  st.class_count = n_c;
  int at = 0;
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const auto* s = sources[k];
    st.x.middleRows(at, s->rows()) = s->features;
    st.onehot.middleRows(at, s->rows()) = s->one_hot();
    for (int i = 0; i < s->rows(); ++i) st.group.push_back(static_cast<int>(k));
    st.sizes.push_back(s->rows());
    at += s->rows();
  }
  return st;
}

VectorXd row_weights(const StackedSources& st, const VectorXd& alpha) {
  VectorXd w(st.x.rows());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const int k = st.group[static_cast<std::size_t>(i)];
    w[i] = alpha[k] / static_cast<double>(st.sizes[static_cast<std::size_t>(k)]);
  }
  return w;
}

constexpr double kLogFloor = 1e-12;

// -Y log(Yhat)^T, the pairwise cross-entropy between source labels and
// target predictions.
MatrixXd pairwise_cce(const MatrixXd& onehot, const MatrixXd& probs) {
  const MatrixXd logp = probs.array().max(kLogFloor).min(1.0).log().matrix();
  return -(onehot * logp.transpose());
}

}  // namespace

JdotResult jdot_alternation(const std::vector<const LabeledDataset*>& sources,
                            const MatrixXd& target, const JdotConfig& cfg,
                            const nn::NetArch& arch, bool update_alpha) {
  if (cfg.feature_weight < 0.0 || cfg.label_weight < 0.0) {
    throw InvalidArgument("jdot: cost weights must be nonnegative");
  }
  if (target.rows() == 0) throw InvalidArgument("jdot: empty target");
  const StackedSources st = stack_sources(sources);
  const int n_src = static_cast<int>(st.x.rows());
  const int n_tgt = static_cast<int>(target.rows());
  const int n_groups = static_cast<int>(sources.size());

  Rng rng(cfg.train.seed);
  nn::FeedForwardNet net(arch, rng);
  {
    // Warm start keeps the first plan from matching on garbage predictions.
    LabeledDataset pooled(st.x, argmax_labels(st.onehot), st.class_count, "jdot-pool");
    nn::TrainConfig warm = cfg.train;
    warm.epochs = std::max(1, cfg.warm_start_epochs);
    warm.seed = rng.split(1).seed();
    nn::train_erm(net, pooled, warm);
  }

  const MatrixXd feat_cost = cfg.feature_weight * ot::cost_matrix(st.x, target).values;
  const VectorXd tgt_w = VectorXd::Constant(n_tgt, 1.0 / n_tgt);
  VectorXd alpha = VectorXd::Constant(n_groups, 1.0 / n_groups);

  auto cost_for = [&](const nn::FeedForwardNet& h) {
    MatrixXd c = feat_cost;
    if (cfg.label_weight > 0.0) {
      c += cfg.label_weight * pairwise_cce(st.onehot, h.forward(target, "main"));
    }
    return c;
  };
  auto solve_plan = [&](const MatrixXd& c, const VectorXd& a) {
    ot::CostMatrix cm;
    cm.values = c;
    cm.descriptor.kind = ot::CostDescriptor::Kind::Jdot;
    cm.descriptor.alpha = cfg.feature_weight;
    cm.descriptor.beta = cfg.label_weight;
    return ot::solve_ot_exact(a, tgt_w, cm);
  };

  JdotResult result;
  MatrixXd c = cost_for(net);
  ot::TransportPlan plan = solve_plan(c, row_weights(st, alpha));
  result.objective_trace.push_back(plan.cost(c));

  for (int outer = 0; outer < cfg.outer_iters; ++outer) {
    // Classifier step: weighted cross-entropy on target points against the
    // plan-transported source labels. Reverted if it fails to improve the
    // plan-weighted loss (the inner minimization is inexact).
    if (cfg.label_weight > 0.0) {
      const VectorXd snapshot = net.flatten();
      const VectorXd colmass = plan.values.colwise().sum().transpose();
      const MatrixXd soft_targets = plan.values.transpose() * st.onehot;  // n_t x n_c
      auto plan_label_loss = [&](const nn::FeedForwardNet& h) {
        return (plan.values.array() * pairwise_cce(st.onehot, h.forward(target, "main")).array())
            .sum();
      };
      const double before = plan_label_loss(net);
      for (int step = 0; step < cfg.inner_epochs; ++step) {
        const nn::ForwardCache cache = net.features_cached(target);
        const MatrixXd probs = net.head_output(cache.z, "main");
        MatrixXd dlogits(n_tgt, st.class_count);
        for (int j = 0; j < n_tgt; ++j) {
          dlogits.row(j) = colmass[j] * probs.row(j) - soft_targets.row(j);
        }
        nn::NetGrads grads(net);
        const MatrixXd dz = nn::head_backward(net, "main", cache.z, dlogits, grads);
        nn::extractor_backward(net, cache, dz, grads);
        nn::sgd_step(net, grads, cfg.train.lr, cfg.train.weight_decay);
      }
      if (plan_label_loss(net) > before) {
        net.set_flat(snapshot);
        result.reverted_iters.push_back(outer);
      }
    }

    // Weight step: projected gradient on the simplex using the per-unit
    // transport cost of each source block, backtracking on the objective.
    if (update_alpha && n_groups > 1) {
      c = cost_for(net);
      plan = solve_plan(c, row_weights(st, alpha));
      const double f_cur = plan.cost(c);
      VectorXd grad(n_groups);
      for (int k = 0; k < n_groups; ++k) grad[k] = 0.0;
      VectorXd mass(n_groups);
      mass.setZero();
      for (int i = 0; i < n_src; ++i) {
        const int k = st.group[static_cast<std::size_t>(i)];
        grad[k] += plan.values.row(i).dot(c.row(i));
        mass[k] += plan.values.row(i).sum();
      }
      for (int k = 0; k < n_groups; ++k) {
        if (mass[k] > 1e-12) {
          grad[k] /= mass[k];
        } else {
          // Unused source: rate it by the independent-coupling cost.
          double indep = 0.0;
          int at = 0;
          for (int g = 0; g < k; ++g) at += st.sizes[static_cast<std::size_t>(g)];
          for (int i = 0; i < st.sizes[static_cast<std::size_t>(k)]; ++i) {
            indep += c.row(at + i).dot(tgt_w);
          }
          grad[k] = indep / st.sizes[static_cast<std::size_t>(k)];
        }
      }
      const double scale = std::max(grad.cwiseAbs().maxCoeff(), 1e-12);
      double step = 0.5;
      for (int attempt = 0; attempt < 6; ++attempt) {
        const VectorXd candidate = project_to_simplex(alpha - (step / scale) * grad);
        const ot::TransportPlan trial = solve_plan(c, row_weights(st, candidate));
        if (trial.cost(c) <= f_cur) {
          alpha = candidate;
          break;
        }
        step *= 0.5;
      }
    }

    c = cost_for(net);
    plan = solve_plan(c, row_weights(st, alpha));
    result.objective_trace.push_back(plan.cost(c));
  }

  result.net = std::move(net);
  result.alpha = SimplexWeights(alpha);
  return result;
}

JdotResult jdot_fit(const LabeledDataset& source, const MatrixXd& target,
                    const JdotConfig& cfg, const nn::NetArch& arch) {
  return jdot_alternation({&source}, target, cfg, arch, false);
}

}  // namespace cdfd::shallow
