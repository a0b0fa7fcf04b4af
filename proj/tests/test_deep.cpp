#include "doctest.h"

#include <cmath>

#include "cdfd/deep.hpp"
#include "oracles.hpp"

using namespace cdfd;
using namespace cdfd::deep;

namespace {

// Translated 2-class blobs where the shift confuses a source-only decision
// boundary but keeps classes recoverable after alignment.
struct ShiftedPair {
  LabeledDataset source;
  LabeledDataset target;
};

ShiftedPair shifted_pair(cdfd::Rng& rng, int n_per_class = 60) {
  MatrixXd means(2, 2);
  means << 0, 0, 3, 0;
  ShiftedPair pair;
  pair.source = oracles::make_blobs(means, 0.5, n_per_class, rng, "src");
  VectorXd t(2);
  t << -3.0, 5.0;
  pair.target = oracles::translate(
      oracles::make_blobs(means, 0.5, n_per_class, rng, "tgt"), t);
  return pair;
}

}  // namespace

TEST_SUITE_BEGIN("deep");

TEST_CASE("mmdnet with zero lambda reproduces plain erm") {
  Rng rng(3);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.4, 30, rng);
  const MatrixXd target = oracles::random_matrix(40, 2, rng);

  DeepDaConfig cfg;
  cfg.lambda = 0.0;
  cfg.train.epochs = 40;
  cfg.train.seed = 5;
  const nn::NetArch arch = nn::NetArch::classifier(2, 2, 8, 4);
  const MmdnetResult fit = mmdnet_fit(source, target, cfg, arch);

  Rng nrng(cfg.train.seed);
  nn::FeedForwardNet plain(arch, nrng);
  const nn::TrainResult erm = nn::train_erm(plain, source, cfg.train);

  REQUIRE(fit.loss_trace.size() == erm.loss_curve.size());
  for (std::size_t i = 0; i < erm.loss_curve.size(); ++i) {
    CHECK(std::abs(fit.loss_trace[i] - erm.loss_curve[i]) < 1e-9);
  }
  CHECK((fit.net.flatten() - plain.flatten()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mmdnet does not increase the latent mmd on identical domains") {
  Rng rng(7);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.4, 40, rng);
  DeepDaConfig cfg;
  cfg.train.epochs = 60;
  cfg.train.seed = 9;
  cfg.kernel = div::KernelSpec::linear();
  cfg.median_sigma = false;
  const MmdnetResult fit =
      mmdnet_fit(source, source.features, cfg, nn::NetArch::classifier(2, 2, 12, 6));
  CHECK(fit.mmd_post <= fit.mmd_pre + 1e-9);
}

TEST_CASE("mmdnet aligns translated blobs and lifts target accuracy") {
  Rng rng(11);
  const ShiftedPair pair = shifted_pair(rng);

  DeepDaConfig cfg;
  cfg.lambda = 4.0;
  cfg.kernel = div::KernelSpec::linear();
  cfg.median_sigma = false;
  cfg.train.epochs = 250;
  cfg.train.lr = 0.03;
  cfg.train.seed = 13;
  const nn::NetArch arch = nn::NetArch::classifier(2, 2, 16, 8);
  const MmdnetResult fit = mmdnet_fit(pair.source, pair.target.features, cfg, arch);
  CHECK(fit.mmd_post < 0.25 * fit.mmd_pre);

  Rng nrng(cfg.train.seed);
  nn::FeedForwardNet plain(arch, nrng);
  nn::train_erm(plain, pair.source, cfg.train);
  const double src_only = nn::accuracy(plain, pair.target);
  const double adapted = nn::accuracy(fit.net, pair.target);
  CHECK(adapted >= src_only + 0.10);
}

TEST_CASE("dann reversal with zero strength sends no gradient to the extractor") {
  Rng rng(17);
  nn::NetArch arch = nn::NetArch::classifier(3, 2, 6, 4);
  arch.heads["domain"] = nn::HeadSpec{1, nn::HeadSpec::Activation::Sigmoid};
  Rng nrng(18);
  nn::FeedForwardNet net(arch, nrng);
  const MatrixXd xs = oracles::random_matrix(10, 3, rng);
  const MatrixXd xt = oracles::random_matrix(10, 3, rng);
  MatrixXd onehot = MatrixXd::Zero(10, 2);
  for (int i = 0; i < 10; ++i) onehot(i, i % 2) = 1.0;

  // The domain branch contributes nothing to the extractor at lambda 0:
  // gradients equal the class-only gradients exactly.
  nn::NetGrads with_domain(net);
  dann_loss_grad(net, xs, onehot, xt, 0.0, with_domain);
  nn::NetGrads class_only(net);
  cce_loss_grad(net, xs, onehot, "main", class_only);
  for (std::size_t l = 0; l < with_domain.extractor.size(); ++l) {
    CHECK((with_domain.extractor[l].w - class_only.extractor[l].w).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK((with_domain.extractor[l].b - class_only.extractor[l].b).cwiseAbs().maxCoeff() ==
          0.0);
  }
  // The domain head itself still learns.
  CHECK(with_domain.heads.at("domain").w.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("dann pushes domain accuracy toward chance on translated blobs") {
  Rng rng(19);
  const ShiftedPair pair = shifted_pair(rng);

  DeepDaConfig cfg;
  cfg.lambda_rev = 1.5;
  cfg.train.epochs = 250;
  cfg.train.lr = 0.03;
  cfg.train.seed = 21;
  const DannResult fit = dann_fit(pair.source, pair.target.features, cfg,
                                  nn::NetArch::classifier(2, 2, 16, 8));
  CHECK(fit.domain_accuracy >= 0.4);
  CHECK(fit.domain_accuracy <= 0.7);
  CHECK(nn::accuracy(fit.net, pair.source) >= 0.9);
}

TEST_CASE("dann on identical domains sits at chance") {
  Rng rng(23);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.4, 50, rng);
  DeepDaConfig cfg;
  cfg.train.epochs = 40;
  cfg.train.seed = 25;
  const DannResult fit = dann_fit(source, source.features, cfg,
                                  nn::NetArch::classifier(2, 2, 12, 6));
  CHECK(fit.domain_accuracy >= 0.4);
  CHECK(fit.domain_accuracy <= 0.6);
}

TEST_CASE("deepjdot single-pair batch collapses to the pointwise cost") {
  Rng rng(29);
  Rng nrng(30);
  nn::FeedForwardNet net(nn::NetArch::classifier(3, 2, 6, 4), nrng);
  const MatrixXd xs = oracles::random_matrix(1, 3, rng);
  const MatrixXd xt = oracles::random_matrix(1, 3, rng);
  MatrixXd y(1, 2);
  y << 1.0, 0.0;

  DeepDaConfig cfg;
  cfg.feature_weight = 0.7;
  cfg.label_weight = 1.3;
  nn::NetGrads grads(net);
  const double loss = deepjdot_loss_grad(net, xs, y, xt, cfg, grads);

  const MatrixXd zs = net.features(xs);
  const MatrixXd zt = net.features(xt);
  const MatrixXd probs = net.forward(xt, "main");
  const double expected = cfg.feature_weight * (zs - zt).squaredNorm() +
                          cfg.label_weight * (-std::log(std::max(1e-12, probs(0, 0))));
  CHECK(loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("deepjdot with zeroed transport weights equals plain erm") {
  Rng rng(31);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.4, 30, rng);
  const MatrixXd target = oracles::random_matrix(30, 2, rng);

  DeepDaConfig cfg;
  cfg.feature_weight = 0.0;
  cfg.label_weight = 0.0;
  cfg.train.epochs = 30;
  cfg.train.seed = 33;
  const nn::NetArch arch = nn::NetArch::classifier(2, 2, 8, 4);
  const DeepJdotResult fit = deepjdot_fit(source, target, cfg, arch);

  Rng nrng(cfg.train.seed);
  nn::FeedForwardNet plain(arch, nrng);
  nn::train_erm(plain, source, cfg.train);
  CHECK((fit.net.flatten() - plain.flatten()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("deepjdot adapts translated blobs") {
  Rng rng(37);
  const ShiftedPair pair = shifted_pair(rng);

  DeepDaConfig cfg;
  cfg.lambda = 1.0;
  cfg.feature_weight = 1.0;
  cfg.label_weight = 1.0;
  cfg.train.epochs = 150;
  cfg.train.lr = 0.03;
  cfg.train.seed = 39;
  const nn::NetArch arch = nn::NetArch::classifier(2, 2, 16, 8);
  const DeepJdotResult fit = deepjdot_fit(pair.source, pair.target.features, cfg, arch);

  Rng nrng(cfg.train.seed);
  nn::FeedForwardNet plain(arch, nrng);
  nn::train_erm(plain, pair.source, cfg.train);
  const double src_only = nn::accuracy(plain, pair.target);
  CHECK(nn::accuracy(fit.net, pair.target) >= src_only + 0.10);
  // Batch plans stay feasible.
  nn::NetGrads grads(fit.net);
  ot::TransportPlan plan;
  DeepDaConfig probe = cfg;
  deepjdot_loss_grad(fit.net, pair.source.features.topRows(16),
                     pair.source.one_hot().topRows(16),
                     pair.target.features.topRows(16), probe, grads, &plan);
  CHECK((plan.values.rowwise().sum() - plan.row_marginal).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((plan.values.colwise().sum().transpose() - plan.col_marginal)
            .cwiseAbs()
            .maxCoeff() < 1e-6);
}

TEST_CASE("m3sda moment penalty vanishes on identical batches") {
  Rng rng(41);
  Rng nrng(42);
  nn::NetArch arch = nn::NetArch::classifier(3, 2, 6, 4);
  arch.heads.clear();
  arch.heads["h0"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
  arch.heads["h1"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
  nn::FeedForwardNet net(arch, nrng);

  const MatrixXd x = oracles::random_matrix(12, 3, rng);
  DeepDaConfig cfg;
  nn::NetGrads grads(net);
  const double omega = m3sda_omega_grad(net, {x, x}, x, cfg, grads);
  CHECK(omega == 0.0);

  // Permutation invariance within each batch.
  MatrixXd shuffled = x;
  std::vector<int> perm = rng.permutation(12);
  for (int i = 0; i < 12; ++i) shuffled.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  nn::NetGrads g2(net);
  const double omega_perm = m3sda_omega_grad(net, {x, shuffled}, x, cfg, g2);
  CHECK(omega_perm < 1e-12);
}

TEST_CASE("m3sda literal pair multiplier is available") {
  Rng rng(43);
  Rng nrng(44);
  nn::NetArch arch = nn::NetArch::classifier(2, 2, 5, 3);
  arch.heads.clear();
  arch.heads["h0"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
  arch.heads["h1"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
  arch.heads["h2"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
  nn::FeedForwardNet net(arch, nrng);
  std::vector<MatrixXd> batches = {oracles::random_matrix(8, 2, rng),
                                   oracles::random_matrix(8, 2, rng),
                                   oracles::random_matrix(8, 2, rng)};
  const MatrixXd xt = oracles::random_matrix(8, 2, rng);

  DeepDaConfig normalized;
  DeepDaConfig literal;
  literal.literal_pair_multiplier = true;
  nn::NetGrads g1(net), g2(net);
  const double o1 = m3sda_omega_grad(net, batches, xt, normalized, g1);
  const double o2 = m3sda_omega_grad(net, batches, xt, literal, g2);
  // Three sources: the pairwise sum is scaled by 1/3 in one form and by 3 in
  // the other, so the literal value is strictly larger.
  CHECK(o2 > o1);
}

TEST_CASE("m3sda rejects a single source") {
  Rng rng(47);
  MatrixXd means(2, 2);
  means << -1, 0, 1, 0;
  const LabeledDataset s = oracles::make_blobs(means, 0.4, 10, rng);
  DeepDaConfig cfg;
  CHECK_THROWS_AS(m3sda_fit({s}, s.features, cfg, false, nn::NetArch::classifier(2, 2)),
                  InvalidArgument);
}

TEST_CASE("m3sda beats the best single-source baseline on translated blobs") {
  Rng rng(53);
  // Classes split along axis 0; sources shifted both along the class axis
  // and along their own private axes.
  MatrixXd means(2, 4);
  means << -1.5, 0, 0, 0, 1.5, 0, 0, 0;
  const LabeledDataset base = oracles::make_blobs(means, 0.5, 50, rng, "base");

  auto shift = [&](double a, int axis) {
    VectorXd t = VectorXd::Zero(4);
    t[0] = 3.0;
    t[axis] = a;
    return oracles::translate(oracles::make_blobs(means, 0.5, 50, rng, "s"), t);
  };
  const std::vector<LabeledDataset> sources = {shift(6.0, 1), shift(6.0, 2),
                                               shift(6.0, 3)};
  const LabeledDataset target = base;

  DeepDaConfig cfg;
  cfg.lambda = 2.0;
  cfg.train.epochs = 120;
  cfg.train.lr = 0.05;
  cfg.train.seed = 55;
  const M3sdaResult fit =
      m3sda_fit(sources, target.features, cfg, false, nn::NetArch::classifier(4, 2, 16, 8));
  const MatrixXd probs = m3sda_predict(fit.net, target.features, fit.weights);
  int correct = 0;
  for (int i = 0; i < target.rows(); ++i) {
    if (argmax_row(probs.row(i)) == target.labels[i]) ++correct;
  }
  const double m3sda_acc = static_cast<double>(correct) / target.rows();

  double best_single = 0.0;
  for (const auto& s : sources) {
    Rng nrng(cfg.train.seed);
    nn::FeedForwardNet plain(nn::NetArch::classifier(4, 2, 16, 8), nrng);
    nn::train_erm(plain, s, cfg.train);
    best_single = std::max(best_single, nn::accuracy(plain, target));
  }
  CHECK(m3sda_acc >= best_single);
}

TEST_CASE("m3sda beta variant trains paired heads") {
  Rng rng(59);
  MatrixXd means(2, 2);
  means << -1.5, 0, 1.5, 0;
  const LabeledDataset s1 = oracles::make_blobs(means, 0.4, 30, rng, "s1");
  const LabeledDataset s2 = oracles::translate(
      oracles::make_blobs(means, 0.4, 30, rng, "s2"), VectorXd::Constant(2, 1.0));
  const MatrixXd target = oracles::make_blobs(means, 0.4, 30, rng, "t").features;

  DeepDaConfig cfg;
  cfg.train.epochs = 40;
  cfg.train.seed = 61;
  const M3sdaResult fit =
      m3sda_fit({s1, s2}, target, cfg, true, nn::NetArch::classifier(2, 2, 12, 6));
  CHECK(fit.net.has_head("p0"));
  CHECK(fit.net.has_head("p1"));
  const MatrixXd probs = m3sda_predict(fit.net, target, fit.weights);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("m3sda_predict weighting rules") {
  Rng rng(67);
  nn::NetArch arch = nn::NetArch::classifier(3, 4, 5, 4);
  arch.heads.clear();
  arch.heads["h0"] = nn::HeadSpec{4, nn::HeadSpec::Activation::Softmax};
  arch.heads["h1"] = nn::HeadSpec{4, nn::HeadSpec::Activation::Softmax};
  arch.heads["h2"] = nn::HeadSpec{4, nn::HeadSpec::Activation::Softmax};
  Rng nrng(68);
  nn::FeedForwardNet net(arch, nrng);
  const MatrixXd x = oracles::random_matrix(6, 3, rng);

  // One-hot weights pick out a single head.
  VectorXd w = VectorXd::Zero(3);
  w[1] = 1.0;
  const MatrixXd z = net.features(x);
  CHECK((m3sda_predict(net, x, w) - net.head_output(z, "h1")).cwiseAbs().maxCoeff() ==
        0.0);

  // Uniform weights equal the arithmetic mean of the heads.
  const VectorXd u = VectorXd::Constant(3, 1.0 / 3.0);
  const MatrixXd avg = (net.head_output(z, "h0") + net.head_output(z, "h1") +
                        net.head_output(z, "h2")) /
                       3.0;
  CHECK((m3sda_predict(net, x, u) - avg).cwiseAbs().maxCoeff() < 1e-12);

  // Identical heads: the weighted vote equals any single head.
  net.head("h1") = net.head("h0");
  net.head("h2") = net.head("h0");
  VectorXd mixed(3);
  mixed << 0.2, 0.5, 0.3;
  CHECK((m3sda_predict(net, x, mixed) - net.head_output(z, "h0")).cwiseAbs().maxCoeff() <
        1e-12);

  VectorXd bad(3);
  bad << 0.5, 0.2, 0.2;
  CHECK_THROWS_AS(m3sda_predict(net, x, bad), InvalidArgument);
}

TEST_CASE("deep loss gradients match finite differences") {
  Rng rng(71);
  const MatrixXd xs = oracles::random_matrix(6, 3, rng, -1.0, 1.0);
  const MatrixXd xt = oracles::random_matrix(7, 3, rng, -1.0, 1.0);
  MatrixXd ys = MatrixXd::Zero(6, 2);
  for (int i = 0; i < 6; ++i) ys(i, i % 2) = 1.0;

  SUBCASE("mmd linear and rbf") {
    Rng nrng(72);
    nn::FeedForwardNet net(nn::NetArch::classifier(3, 2, 6, 4), nrng);
    for (const auto& kernel : {div::KernelSpec::linear(), div::KernelSpec::rbf(0.8)}) {
      nn::NetGrads grads(net);
      mmd_latent_loss_grad(net, xs, xt, kernel, grads);
      auto loss = [&]() {
        return div::mmd(net.features(xs), net.features(xt), kernel);
      };
      Rng prng(73);
      const auto report = oracles::fd_check(net, loss, grads.flatten(net), 12, prng);
      CHECK(report.ok);
    }
  }

  SUBCASE("m3sda moments") {
    nn::NetArch arch = nn::NetArch::classifier(3, 2, 6, 4);
    arch.heads.clear();
    arch.heads["h0"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
    arch.heads["h1"] = nn::HeadSpec{2, nn::HeadSpec::Activation::Softmax};
    Rng nrng(74);
    nn::FeedForwardNet net(arch, nrng);
    DeepDaConfig cfg;
    const std::vector<MatrixXd> batches = {xs, oracles::random_matrix(6, 3, rng)};
    nn::NetGrads grads(net);
    m3sda_omega_grad(net, batches, xt, cfg, grads);
    auto loss = [&]() {
      nn::FeedForwardNet copy = net;
      nn::NetGrads scratch(copy);
      return m3sda_omega_grad(copy, batches, xt, cfg, scratch);
    };
    Rng prng(75);
    const auto report = oracles::fd_check(net, loss, grads.flatten(net), 12, prng);
    CHECK(report.ok);
  }
}

TEST_SUITE_END();
