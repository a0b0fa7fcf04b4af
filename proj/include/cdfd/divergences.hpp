#pragma once

#include "cdfd/core.hpp"

namespace cdfd::div {

struct KernelSpec {
  enum class Kind { Linear, Rbf, Polynomial };
  Kind kind = Kind::Rbf;
  double sigma = 1.0;  // rbf bandwidth
  int degree = 2;      // polynomial
  double offset = 1.0;

  static KernelSpec linear() { return {Kind::Linear, 0.0, 0, 0.0}; }
  static KernelSpec rbf(double sigma) { return {Kind::Rbf, sigma, 0, 0.0}; }
  static KernelSpec polynomial(int degree, double offset) {
    return {Kind::Polynomial, 0.0, degree, offset};
  }
};

void validate(const KernelSpec& k);

MatrixXd kernel_matrix(const MatrixXd& x, const MatrixXd& y, const KernelSpec& k);

// Median pairwise distance over the pooled samples; the usual rbf bandwidth
// heuristic.
double median_heuristic_sigma(const MatrixXd& xs, const MatrixXd& xt);

// Layout of the coefficient matrix L pairing with the joint kernel matrix.
// Standard fills the cross blocks densely with -1/(n_s n_t); PaperLiteral
// keeps 1/n^2 and -2/(n_s n_t) only on block diagonals.
enum class MmdForm { Standard, PaperLiteral };

struct JointKernelMatrices {
  MatrixXd k;  // (n_s + n_t) square, blocks [K_ss K_st; K_ts K_tt]
  MatrixXd l;
};

JointKernelMatrices joint_kernel_matrices(const MatrixXd& xs, const MatrixXd& xt,
                                          const KernelSpec& kernel,
                                          MmdForm form = MmdForm::Standard);

// Biased squared MMD estimate, Tr(KL). Tiny negative values from rounding
// are clamped to zero.
double mmd(const EmpiricalDistribution& p, const EmpiricalDistribution& q,
           const KernelSpec& kernel, MmdForm form = MmdForm::Standard);
double mmd(const MatrixXd& xs, const MatrixXd& xt, const KernelSpec& kernel,
           MmdForm form = MmdForm::Standard);

struct LogisticTrainSpec {
  int steps = 500;
  double lr = 0.1;
};

struct HDistanceResult {
  double paper_literal = 0.0;  // 2 * (1 - mean holdout BCE)
  double proxy_a = 0.0;        // 2 * (1 - 2 * holdout 0/1 error), clamped to [0, 2]
  double holdout_error = 0.0;
};

// Trains a logistic domain discriminator (0 = first sample set, 1 = second)
// on a split of the pooled data and scores it on the rest.
HDistanceResult h_distance(const MatrixXd& xs, const MatrixXd& xt,
                           const LogisticTrainSpec& trainer, double holdout_fraction,
                           Rng& rng);

}  // namespace cdfd::div
