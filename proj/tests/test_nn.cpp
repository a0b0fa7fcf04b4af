#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "cdfd/deep.hpp"
#include "cdfd/nn.hpp"
#include "oracles.hpp"

using namespace cdfd;
using namespace cdfd::nn;

namespace {

FeedForwardNet small_net(int input = 3, int n_c = 3, std::uint64_t seed = 1,
                         int hidden = 5, int latent = 4) {
  Rng rng(seed);
  return FeedForwardNet(NetArch::classifier(input, n_c, hidden, latent), rng);
}

}  // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("forward with zero parameters is the uniform distribution") {
  FeedForwardNet net = small_net();
  net.set_flat(VectorXd::Zero(static_cast<Eigen::Index>(net.param_count())));
  Rng rng(2);
  const MatrixXd x = oracles::random_matrix(6, 3, rng);
  const MatrixXd probs = net.forward(x, "main");
  CHECK((probs.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("forward on an empty batch returns an empty matrix") {
  FeedForwardNet net = small_net();
  const MatrixXd probs = net.forward(MatrixXd(0, 3), "main");
  CHECK(probs.rows() == 0);
  CHECK(probs.cols() == 3);
}

TEST_CASE("forward is deterministic per seed") {
  Rng rng(9);
  const MatrixXd x = oracles::random_matrix(4, 3, rng);
  FeedForwardNet a = small_net(3, 3, 77);
  FeedForwardNet b = small_net(3, 3, 77);
  CHECK(a.forward(x, "main") == b.forward(x, "main"));
  FeedForwardNet c = small_net(3, 3, 78);
  CHECK(a.forward(x, "main") != c.forward(x, "main"));
}

TEST_CASE("softmax rows sum to one and unknown heads are rejected") {
  FeedForwardNet net = small_net();
  Rng rng(4);
  const MatrixXd x = oracles::random_matrix(5, 3, rng);
  const MatrixXd probs = net.forward(x, "main");
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(net.forward(x, "nope"), InvalidArgument);
}

TEST_CASE("parameter count matches the architecture descriptor") {
  FeedForwardNet net = small_net(3, 4, 1, 5, 2);
  // 3->5, 5->5, 5->2 extractor, 2->4 head, plus biases.
  const std::size_t expected = (3 * 5 + 5) + (5 * 5 + 5) + (5 * 2 + 2) + (2 * 4 + 4);
  CHECK(net.param_count() == expected);
  CHECK(net.flatten().size() == static_cast<Eigen::Index>(expected));
}

TEST_CASE("cce loss closed forms and oracle") {
  MatrixXd y(2, 3);
  y << 1, 0, 0, 0, 0, 1;
  CHECK(cce_loss(y, y) <= 1e-10);

  const MatrixXd uniform = MatrixXd::Constant(4, 29, 1.0 / 29.0);
  MatrixXd labels = MatrixXd::Zero(4, 29);
  for (int i = 0; i < 4; ++i) labels(i, i * 3) = 1.0;
  CHECK(cce_loss(uniform, labels) == doctest::Approx(std::log(29.0)).epsilon(1e-12));

  Rng rng(5);
  MatrixXd probs = oracles::random_matrix(6, 4, rng, 0.05, 1.0);
  for (int i = 0; i < 6; ++i) probs.row(i) /= probs.row(i).sum();
  MatrixXd onehot = MatrixXd::Zero(6, 4);
  for (int i = 0; i < 6; ++i) onehot(i, rng.uniform_int(4)) = 1.0;
  CHECK(std::abs(cce_loss(probs, onehot) - oracles::cce_loop(probs, onehot)) < 1e-10);

  CHECK_THROWS_AS(cce_loss(probs, MatrixXd::Zero(6, 3)), InvalidArgument);
}

TEST_CASE("softmax cross-entropy gradient at the logits is (p - y) / n") {
  Rng rng(6);
  const MatrixXd logits = oracles::random_matrix(5, 4, rng, -2.0, 2.0);
  MatrixXd onehot = MatrixXd::Zero(5, 4);
  for (int i = 0; i < 5; ++i) onehot(i, rng.uniform_int(4)) = 1.0;
  const MatrixXd probs = softmax_rows(logits);
  const MatrixXd analytic = cce_grad_logits(probs, onehot);
  const double h = 1e-6;
  for (int i = 0; i < 5; ++i) {
    for (int c = 0; c < 4; ++c) {
      MatrixXd up = logits, down = logits;
      up(i, c) += h;
      down(i, c) -= h;
      const double fd =
          (cce_loss(softmax_rows(up), onehot) - cce_loss(softmax_rows(down), onehot)) /
          (2.0 * h);
      CHECK(std::abs(fd - analytic(i, c)) < 1e-8);
    }
  }
}

TEST_CASE("backprop matches finite differences on every layer") {
  FeedForwardNet net = small_net(3, 3, 21);
  Rng rng(22);
  const MatrixXd x = oracles::random_matrix(8, 3, rng, -1.0, 1.0);
  MatrixXd onehot = MatrixXd::Zero(8, 3);
  for (int i = 0; i < 8; ++i) onehot(i, rng.uniform_int(3)) = 1.0;

  NetGrads grads(net);
  deep::cce_loss_grad(net, x, onehot, "main", grads);
  const VectorXd analytic = grads.flatten(net);
  auto loss = [&]() { return cce_loss(net.forward(x, "main"), onehot); };
  Rng prng(23);
  const auto report = oracles::fd_check(net, loss, analytic, 30, prng);
  CHECK(report.ok);
  CHECK(report.worst_rel < 1e-4);
}

TEST_CASE("train_erm separates separable blobs") {
  Rng rng(31);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset ds = oracles::make_blobs(means, 0.4, 40, rng);
  FeedForwardNet net = small_net(2, 2, 5, 16, 8);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 7;
  const TrainResult res = train_erm(net, ds, cfg);
  CHECK(accuracy(net, ds) >= 0.99);
  CHECK(res.loss_curve.back() <= res.loss_curve.front());
}

TEST_CASE("train_erm memorizes a single sample") {
  MatrixXd x(1, 2);
  x << 0.3, -0.4;
  VectorXi y(1);
  y << 1;
  const LabeledDataset ds(x, y, 3, "one");
  FeedForwardNet net = small_net(2, 3, 3, 8, 4);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  const TrainResult res = train_erm(net, ds, cfg);
  CHECK(res.loss_curve.back() < 0.01);
}

TEST_CASE("two identical samples with conflicting labels stay ambiguous") {
  MatrixXd x(2, 2);
  x << 1.0, 1.0, 1.0, 1.0;
  VectorXi y(2);
  y << 0, 1;
  const LabeledDataset ds(x, y, 2, "conflict");
  FeedForwardNet net = small_net(2, 2, 9, 8, 4);
  TrainConfig cfg;
  cfg.epochs = 300;
  const TrainResult res = train_erm(net, ds, cfg);
  CHECK(accuracy(net, ds) == doctest::Approx(0.5));
  CHECK(res.loss_curve.back() >= std::log(2.0) - 1e-6);
}

TEST_CASE("full-batch descent on the convex head problem never increases the loss") {
  // Head-only training of softmax regression is convex; below the stability
  // bound the full-batch loss is monotone.
  Rng rng(41);
  const MatrixXd x = oracles::random_matrix(30, 4, rng, -1.0, 1.0);
  MatrixXd onehot = MatrixXd::Zero(30, 3);
  for (int i = 0; i < 30; ++i) onehot(i, rng.uniform_int(3)) = 1.0;

  Rng nrng(42);
  FeedForwardNet net(NetArch::classifier(4, 3, 4, 4), nrng);
  // Latent = raw features through the identity would need a bespoke net;
  // train the head on the fixed latent representation instead.
  const MatrixXd z = net.features(x);
  const double zmax = z.rowwise().squaredNorm().maxCoeff();
  const double lr = 1.0 / std::max(1.0, zmax);

  auto head_loss = [&]() { return cce_loss(net.head_output(z, "main"), onehot); };
  double previous = head_loss();
  for (int step = 0; step < 200; ++step) {
    NetGrads grads(net);
    const MatrixXd probs = net.head_output(z, "main");
    head_backward(net, "main", z, cce_grad_logits(probs, onehot), grads);
    Affine& head = net.head("main");
    head.w -= lr * grads.heads.at("main").w;
    head.b -= lr * grads.heads.at("main").b;
    const double current = head_loss();
    CHECK(current <= previous + 1e-6);
    previous = current;
  }
}

TEST_CASE("gradient reversal forwards identically and scales the backward pass") {
  FeedForwardNet net = small_net(3, 2, 55);
  Rng rng(56);
  const MatrixXd x = oracles::random_matrix(5, 3, rng);
  CHECK(grad_reversal_forward(net, x) == net.features(x));
}

TEST_CASE("accuracy argmax with deterministic tie-breaks") {
  FeedForwardNet net = small_net(2, 29, 3, 4, 4);
  net.set_flat(VectorXd::Zero(static_cast<Eigen::Index>(net.param_count())));
  // Uniform probabilities predict class 0 everywhere (lowest index wins).
  Rng rng(8);
  MatrixXd x = oracles::random_matrix(58, 2, rng);
  VectorXi y(58);
  for (int i = 0; i < 58; ++i) y[i] = i % 29;  // balanced
  const LabeledDataset ds(x, y, 29, "bal");
  CHECK(accuracy(net, ds) == doctest::Approx(1.0 / 29.0));

  // Perfect predictor.
  MatrixXd means(3, 2);
  means << -4, 0, 0, 4, 4, 0;
  Rng brng(9);
  const LabeledDataset blobs = oracles::make_blobs(means, 0.2, 20, brng);
  FeedForwardNet strong = small_net(2, 3, 10, 16, 8);
  TrainConfig cfg;
  cfg.epochs = 150;
  train_erm(strong, blobs, cfg);
  CHECK(accuracy(strong, blobs) == doctest::Approx(1.0));

  // Loop-oracle comparison on random predictions.
  const MatrixXd probs = net.forward(x, "main");
  int correct = 0;
  for (int i = 0; i < 58; ++i) {
    int best = 0;
    for (int c = 1; c < 29; ++c) {
      if (probs(i, c) > probs(i, best)) best = c;
    }
    if (best == y[i]) ++correct;
  }
  CHECK(accuracy(net, ds) == doctest::Approx(static_cast<double>(correct) / 58.0));
}

TEST_CASE("checkpoints round-trip exactly") {
  NetArch arch = NetArch::classifier(4, 3, 6, 5);
  arch.heads["domain"] = HeadSpec{1, HeadSpec::Activation::Sigmoid};
  Rng rng(77);
  FeedForwardNet net(arch, rng);
  const std::string path = "checkpoint_test.json";
  save_checkpoint(net, path);
  const FeedForwardNet loaded = load_checkpoint(path);
  CHECK(loaded.flatten() == net.flatten());
  CHECK(loaded.arch().heads.size() == 2);
  CHECK(loaded.arch().heads.at("domain").out_dim == 1);
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_checkpoint("missing_checkpoint.json"), IoError);
}

TEST_SUITE_END();
