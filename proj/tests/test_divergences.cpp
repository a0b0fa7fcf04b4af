#include "doctest.h"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "cdfd/divergences.hpp"
#include "oracles.hpp"

using namespace cdfd;
using namespace cdfd::div;

TEST_SUITE_BEGIN("divergences");

TEST_CASE("mmd vanishes on identical samples") {
  Rng rng(3);
  const MatrixXd x = oracles::random_matrix(10, 4, rng);
  for (const auto& k : {KernelSpec::linear(), KernelSpec::rbf(1.3),
                        KernelSpec::polynomial(2, 1.0)}) {
    CHECK(mmd(x, x, k) < 1e-9);
  }
}

TEST_CASE("mmd with a linear kernel is the squared mean difference") {
  MatrixXd a(1, 1), b(1, 1);
  a << 0.0;
  b << 2.0;
  CHECK(mmd(a, b, KernelSpec::linear()) == doctest::Approx(4.0).epsilon(1e-9));

  Rng rng(5);
  const MatrixXd xs = oracles::random_matrix(7, 3, rng);
  const MatrixXd xt = oracles::random_matrix(9, 3, rng);
  const Eigen::RowVectorXd diff = xs.colwise().mean() - xt.colwise().mean();
  CHECK(mmd(xs, xt, KernelSpec::linear()) ==
        doctest::Approx(diff.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("mmd matches the double-sum oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd xs = oracles::random_matrix(8, 3, rng);
    const MatrixXd xt = oracles::random_matrix(8, 3, rng);
    const double got = mmd(xs, xt, KernelSpec::rbf(1.0));
    const double want = oracles::mmd_double_sum(
        xs, xt, [](const auto& a, const auto& b) { return oracles::rbf_scalar(a, b, 1.0); });
    CHECK(std::abs(got - want) < 1e-10);
  }
}

TEST_CASE("mmd is symmetric and translation invariant for the linear kernel") {
  Rng rng(11);
  const MatrixXd xs = oracles::random_matrix(6, 2, rng);
  const MatrixXd xt = oracles::random_matrix(9, 2, rng);
  CHECK(mmd(xs, xt, KernelSpec::rbf(0.7)) == mmd(xt, xs, KernelSpec::rbf(0.7)));

  Eigen::RowVector2d shift(3.5, -1.2);
  const MatrixXd xs2 = xs.rowwise() + shift;
  const MatrixXd xt2 = xt.rowwise() + shift;
  CHECK(std::abs(mmd(xs, xt, KernelSpec::linear()) - mmd(xs2, xt2, KernelSpec::linear())) <
        1e-9);
}

TEST_CASE("joint kernel coefficient matrix, literal block layout") {
  Rng rng(13);
  const MatrixXd xs = oracles::random_matrix(2, 2, rng);
  const MatrixXd xt = oracles::random_matrix(3, 2, rng);
  const JointKernelMatrices jm =
      joint_kernel_matrices(xs, xt, KernelSpec::linear(), MmdForm::PaperLiteral);
  REQUIRE(jm.l.rows() == 5);
  // 1/n_s^2 and 1/n_t^2 on the block diagonals, -2/(n_s n_t) on the
  // rectangular diagonal, zero elsewhere.
  MatrixXd expected = MatrixXd::Zero(5, 5);
  expected(0, 0) = expected(1, 1) = 1.0 / 4.0;
  expected(2, 2) = expected(3, 3) = expected(4, 4) = 1.0 / 9.0;
  expected(0, 2) = expected(1, 3) = -2.0 / 6.0;
  expected(2, 0) = expected(3, 1) = -2.0 / 6.0;
  CHECK((jm.l - expected).cwiseAbs().maxCoeff() == 0.0);
  CHECK(jm.k.isApprox(jm.k.transpose()));
}

TEST_CASE("standard coefficient matrix reproduces mmd as Tr(KL)") {
  Rng rng(17);
  const MatrixXd xs = oracles::random_matrix(4, 3, rng);
  const MatrixXd xt = oracles::random_matrix(5, 3, rng);
  const KernelSpec k = KernelSpec::rbf(0.9);
  const JointKernelMatrices jm = joint_kernel_matrices(xs, xt, k, MmdForm::Standard);
  const double trace = (jm.k * jm.l).trace();
  CHECK(trace == doctest::Approx(mmd(xs, xt, k)).epsilon(1e-10));
}

TEST_CASE("kernel matrices are positive semidefinite") {
  Rng rng(19);
  const MatrixXd x = oracles::random_matrix(8, 3, rng);
  for (const auto& k : {KernelSpec::linear(), KernelSpec::rbf(1.0)}) {
    const MatrixXd km = kernel_matrix(x, x, k);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(km);
    CHECK(eig.eigenvalues().minCoeff() > -1e-8);
  }
  CHECK_THROWS_AS(kernel_matrix(x, x, KernelSpec::rbf(0.0)), InvalidArgument);
}

TEST_CASE("paper-literal mmd form is available behind the flag") {
  Rng rng(23);
  const MatrixXd xs = oracles::random_matrix(5, 2, rng);
  const MatrixXd xt = oracles::random_matrix(5, 2, rng);
  // The literal layout is not a PSD quadratic form and may go negative;
  // it only has to be finite and computed from the printed blocks.
  const double literal = mmd(xs, xt, KernelSpec::rbf(1.0), MmdForm::PaperLiteral);
  CHECK(std::isfinite(literal));
  const JointKernelMatrices jm =
      joint_kernel_matrices(xs, xt, KernelSpec::rbf(1.0), MmdForm::PaperLiteral);
  CHECK(literal == doctest::Approx((jm.k * jm.l).trace()).epsilon(1e-12));
  CHECK(mmd(xs, xt, KernelSpec::rbf(1.0), MmdForm::Standard) >= 0.0);
}

TEST_CASE("h_distance is near chance for identical clouds") {
  Rng rng(29);
  const MatrixXd x = oracles::random_matrix(120, 3, rng, -1.0, 1.0);
  MatrixXd y = x;
  std::vector<int> perm = rng.permutation(120);
  for (int i = 0; i < 120; ++i) y.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  Rng hrng(1);
  const HDistanceResult res = h_distance(x, y, {}, 0.5, hrng);
  CHECK(res.proxy_a <= 0.15);
}

TEST_CASE("h_distance saturates for separated clouds") {
  Rng rng(31);
  const MatrixXd xs = oracles::random_matrix(80, 2, rng, -11.0, -9.0);
  const MatrixXd xt = oracles::random_matrix(80, 2, rng, 9.0, 11.0);
  Rng hrng(2);
  const HDistanceResult res = h_distance(xs, xt, {}, 0.5, hrng);
  CHECK(res.proxy_a >= 1.9);
  CHECK(res.proxy_a <= 2.0);
  CHECK(res.paper_literal > 1.5);
}

TEST_CASE("h_distance rejects degenerate inputs") {
  MatrixXd one(1, 2);
  one << 0.0, 1.0;
  Rng rng(3);
  CHECK_THROWS_AS(h_distance(one, one, {}, 0.5, rng), InvalidArgument);
  MatrixXd two(2, 2);
  two << 0.0, 1.0, 1.0, 0.0;
  CHECK_THROWS_AS(h_distance(two, two, {}, 1.5, rng), InvalidArgument);
}

TEST_CASE("h_distance grows with separation") {
  Rng rng(37);
  const MatrixXd base = oracles::random_matrix(100, 2, rng, -1.0, 1.0);
  std::vector<double> values;
  for (const double sep : {0.0, 2.0, 8.0}) {
    MatrixXd shifted = base;
    shifted.col(0).array() += sep;
    Rng hrng(7);
    values.push_back(h_distance(base, shifted, {}, 0.5, hrng).proxy_a);
  }
  int violations = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] < values[i - 1] - 1e-12) ++violations;
  }
  CHECK(violations == 0);
  CHECK(values.back() > values.front());
}

TEST_CASE("median heuristic returns a positive bandwidth") {
  Rng rng(41);
  const MatrixXd xs = oracles::random_matrix(10, 2, rng);
  const MatrixXd xt = oracles::random_matrix(10, 2, rng);
  CHECK(median_heuristic_sigma(xs, xt) > 0.0);
}

TEST_SUITE_END();
