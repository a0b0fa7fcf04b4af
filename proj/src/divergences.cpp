#include "cdfd/divergences.hpp"

#include <algorithm>
#include <cmath>

namespace cdfd::div {

void validate(const KernelSpec& k) {
  if (k.kind == KernelSpec::Kind::Rbf && !(k.sigma > 0.0)) {
    throw InvalidArgument("KernelSpec: rbf sigma must be positive");
  }
  if (k.kind == KernelSpec::Kind::Polynomial && k.degree < 1) {
    throw InvalidArgument("KernelSpec: polynomial degree must be at least 1");
  }
}

MatrixXd kernel_matrix(const MatrixXd& x, const MatrixXd& y, const KernelSpec& k) {
  validate(k);
  if (x.cols() != y.cols()) throw InvalidArgument("kernel_matrix: dimension mismatch");
  switch (k.kind) {
    case KernelSpec::Kind::Linear:
      return x * y.transpose();
    case KernelSpec::Kind::Polynomial: {
      MatrixXd g = (x * y.transpose()).array() + k.offset;
      return g.array().pow(k.degree);
    }
    case KernelSpec::Kind::Rbf: {
      MatrixXd out(x.rows(), y.rows());
      const double inv = 1.0 / (2.0 * k.sigma * k.sigma);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        out.row(i) = (-(y.rowwise() - x.row(i)).rowwise().squaredNorm() * inv)
                         .array()
                         .exp()
                         .transpose();
      }
      return out;
    }
  }
  throw InvalidArgument("kernel_matrix: unknown kernel");
}

double median_heuristic_sigma(const MatrixXd& xs, const MatrixXd& xt) {
  MatrixXd pooled(xs.rows() + xt.rows(), xs.cols());
  pooled << xs, xt;
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(pooled.rows()) * (pooled.rows() - 1) / 2);
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) {
      dists.push_back((pooled.row(i) - pooled.row(j)).norm());
    }
  }
  if (dists.empty()) return 1.0;
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  const double med = dists[dists.size() / 2];
  return med > 0.0 ? med : 1.0;
}

JointKernelMatrices joint_kernel_matrices(const MatrixXd& xs, const MatrixXd& xt,
                                          const KernelSpec& kernel, MmdForm form) {
  const Eigen::Index ns = xs.rows();
  const Eigen::Index nt = xt.rows();
  if (ns == 0 || nt == 0) throw InvalidArgument("joint_kernel_matrices: empty sample set");
  MatrixXd pooled(ns + nt, xs.cols());
  pooled << xs, xt;

  JointKernelMatrices out;
  out.k = kernel_matrix(pooled, pooled, kernel);
  out.l = MatrixXd::Zero(ns + nt, ns + nt);
  const double ss = 1.0 / static_cast<double>(ns * ns);
  const double tt = 1.0 / static_cast<double>(nt * nt);
  const double st = 1.0 / static_cast<double>(ns * nt);
  if (form == MmdForm::Standard) {
    out.l.topLeftCorner(ns, ns).setConstant(ss);
    out.l.bottomRightCorner(nt, nt).setConstant(tt);
    out.l.topRightCorner(ns, nt).setConstant(-st);
    out.l.bottomLeftCorner(nt, ns).setConstant(-st);
  } else {
    // Identity blocks scaled as printed; the cross penalty sits only on the
    // rectangular diagonal.
    for (Eigen::Index i = 0; i < ns; ++i) out.l(i, i) = ss;
    for (Eigen::Index j = 0; j < nt; ++j) out.l(ns + j, ns + j) = tt;
    for (Eigen::Index i = 0; i < std::min(ns, nt); ++i) {
      out.l(i, ns + i) = -2.0 * st;
      out.l(ns + i, i) = -2.0 * st;
    }
  }
  return out;
}

double mmd(const MatrixXd& xs, const MatrixXd& xt, const KernelSpec& kernel,
           MmdForm form) {
  validate(kernel);
  if (xs.cols() != xt.cols()) throw InvalidArgument("mmd: dimension mismatch");
  // Tr(KL) without forming the joint matrices.
  const double ns = static_cast<double>(xs.rows());
  const double nt = static_cast<double>(xt.rows());
  double value = 0.0;
  if (form == MmdForm::Standard) {
    value = kernel_matrix(xs, xs, kernel).sum() / (ns * ns) +
            kernel_matrix(xt, xt, kernel).sum() / (nt * nt) -
            2.0 * kernel_matrix(xs, xt, kernel).sum() / (ns * nt);
  } else {
    // The literal layout is not built from a PSD quadratic form, so it can
    // be legitimately negative; return it unclamped.
    const JointKernelMatrices jm = joint_kernel_matrices(xs, xt, kernel, form);
    return (jm.k.array() * jm.l.transpose().array()).sum();
  }
  if (value < 0.0) {
    if (value < -1e-6) throw NumericError("mmd: estimate strongly negative");
    value = 0.0;
  }
  return value;
}

double mmd(const EmpiricalDistribution& p, const EmpiricalDistribution& q,
           const KernelSpec& kernel, MmdForm form) {
  return mmd(p.support, q.support, kernel, form);
}

namespace {

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace

HDistanceResult h_distance(const MatrixXd& xs, const MatrixXd& xt,
                           const LogisticTrainSpec& trainer, double holdout_fraction,
                           Rng& rng) {
  if (xs.rows() == 0 || xt.rows() == 0) {
    throw InvalidArgument("h_distance: one of the sample sets is empty");
  }
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw InvalidArgument("h_distance: holdout fraction must be in (0, 1)");
  }

  const int n = static_cast<int>(xs.rows() + xt.rows());
  MatrixXd pooled(n, xs.cols());
  pooled << xs, xt;
  VectorXd domain(n);
  domain.head(xs.rows()).setZero();
  domain.tail(xt.rows()).setOnes();

  const std::vector<int> perm = rng.permutation(n);
  const int n_hold = std::max(1, static_cast<int>(std::lround(holdout_fraction * n)));
  const int n_train = n - n_hold;
  if (n_train < 1) throw InvalidArgument("h_distance: not enough samples for a split");
  // A single point per domain cannot be split into train and holdout.
  if (xs.rows() < 2 || xt.rows() < 2) {
    throw InvalidArgument("h_distance: need at least two samples per domain");
  }

  MatrixXd x_train(n_train, pooled.cols()), x_hold(n_hold, pooled.cols());
  VectorXd d_train(n_train), d_hold(n_hold);
  for (int i = 0; i < n_train; ++i) {
    x_train.row(i) = pooled.row(perm[static_cast<std::size_t>(i)]);
    d_train[i] = domain[perm[static_cast<std::size_t>(i)]];
  }
  for (int i = 0; i < n_hold; ++i) {
    x_hold.row(i) = pooled.row(perm[static_cast<std::size_t>(n_train + i)]);
    d_hold[i] = domain[perm[static_cast<std::size_t>(n_train + i)]];
  }

  // Full-batch logistic regression.
  VectorXd w = VectorXd::Zero(pooled.cols());
  double b = 0.0;
  for (int step = 0; step < trainer.steps; ++step) {
    VectorXd p(n_train);
    for (int i = 0; i < n_train; ++i) p[i] = sigmoid(x_train.row(i).dot(w) + b);
    const VectorXd err = (p - d_train) / static_cast<double>(n_train);
    w -= trainer.lr * (x_train.transpose() * err);
    b -= trainer.lr * err.sum();
  }

  double bce = 0.0;
  int wrong = 0;
  for (int i = 0; i < n_hold; ++i) {
    double p = sigmoid(x_hold.row(i).dot(w) + b);
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    bce += -(d_hold[i] * std::log(p) + (1.0 - d_hold[i]) * std::log(1.0 - p));
    if ((p >= 0.5 ? 1.0 : 0.0) != d_hold[i]) ++wrong;
  }
  bce /= static_cast<double>(n_hold);
  const double err01 = static_cast<double>(wrong) / static_cast<double>(n_hold);

  HDistanceResult out;
  out.paper_literal = 2.0 * (1.0 - bce);
  out.proxy_a = std::clamp(2.0 * (1.0 - 2.0 * err01), 0.0, 2.0);
  out.holdout_error = err01;
  return out;
}

}  // namespace cdfd::div
