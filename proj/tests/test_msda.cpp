#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "cdfd/msda.hpp"
#include "oracles.hpp"

using namespace cdfd;
using namespace cdfd::msda;

namespace {

std::vector<LabeledDataset> translated_family(Rng& rng, int n_modes, int n_per_class,
                                              double step = 3.0) {
  MatrixXd means(3, 2);
  means << 0, 0, 3.5, 0, 0, 3.5;
  std::vector<LabeledDataset> out;
  for (int m = 0; m < n_modes; ++m) {
    VectorXd t(2);
    t << step * m, 0.5 * step * m;
    out.push_back(oracles::translate(
        oracles::make_blobs(means, 0.45, n_per_class, rng, "m" + std::to_string(m)), t));
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("msda");

TEST_CASE("wbt with one source behaves like plain transport adaptation") {
  Rng rng(3);
  MatrixXd means(2, 2);
  means << 0, 0, 3, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.45, 50, rng);
  VectorXd t(2);
  t << -2.0, 4.0;
  const LabeledDataset target = oracles::translate(
      oracles::make_blobs(means, 0.45, 50, rng), t);

  WbtConfig cfg;
  cfg.beta = 10.0;
  cfg.train.epochs = 120;
  cfg.train.seed = 5;
  Rng wrng(7);
  const WbtResult wbt = wbt_fit({source}, target.features, cfg, wrng);
  const double wbt_acc = nn::accuracy(wbt.classifier, target);

  const LabeledDataset adapted = shallow::otda_adapt(source, target.features);
  Rng nrng(5);
  nn::FeedForwardNet net(nn::NetArch::classifier(2, 2, 32, 16), nrng);
  nn::TrainConfig tcfg;
  tcfg.epochs = 120;
  tcfg.seed = 5;
  nn::train_erm(net, adapted, tcfg);
  const double otda_acc = nn::accuracy(net, target);

  CHECK(std::abs(wbt_acc - otda_acc) <= 0.03);
}

TEST_CASE("wbt recenters symmetric translations onto the target") {
  Rng rng(11);
  MatrixXd means(3, 2);
  means << 0, 0, 4, 0, 0, 4;
  const LabeledDataset base = oracles::make_blobs(means, 0.3, 30, rng, "base");
  VectorXd t(2);
  t << 3.0, -2.0;
  const std::vector<LabeledDataset> sources = {oracles::translate(base, t),
                                               oracles::translate(base, -t)};
  WbtConfig cfg;
  cfg.beta = 50.0;
  cfg.barycenter.max_iter = 40;
  cfg.train.epochs = 60;
  Rng wrng(13);
  const WbtResult fit = wbt_fit(sources, base.features, cfg, wrng);

  for (int c = 0; c < 3; ++c) {
    Eigen::RowVector2d mean = Eigen::RowVector2d::Zero();
    Eigen::RowVector2d want = Eigen::RowVector2d::Zero();
    int n = 0, nb = 0;
    for (int i = 0; i < fit.transported.rows(); ++i) {
      if (fit.transported.labels[i] == c) {
        mean += fit.transported.features.row(i);
        ++n;
      }
    }
    for (int i = 0; i < base.rows(); ++i) {
      if (base.labels[i] == c) {
        want += base.features.row(i);
        ++nb;
      }
    }
    REQUIRE(n > 0);
    CHECK((mean / n - want / nb).norm() < 0.12);
  }
}

TEST_CASE("wbt without label cost mixes scrambled labels to uniform") {
  Rng rng(17);
  const MatrixXd x = oracles::random_matrix(40, 2, rng);
  VectorXi y1(40), y2(40);
  for (int i = 0; i < 40; ++i) {
    y1[i] = i % 2;
    y2[i] = 1 - y1[i];  // fully flipped labels, identical features
  }
  const std::vector<LabeledDataset> sources = {LabeledDataset(x, y1, 2, "a"),
                                               LabeledDataset(x, y2, 2, "b")};
  WbtConfig cfg;
  cfg.beta = 0.0;
  cfg.n_support = 40;
  cfg.train.epochs = 10;
  Rng wrng(19);
  const WbtResult fit = wbt_fit(sources, x, cfg, wrng);
  const MatrixXd& soft = fit.barycenter.barycenter.soft_labels;
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < soft.rows(); ++i) {
    for (Eigen::Index c = 0; c < soft.cols(); ++c) {
      const double p = soft(i, c);
      if (p > 1e-12) entropy -= p * std::log(p);
    }
  }
  entropy /= soft.rows();
  CHECK(entropy >= 0.9 * std::log(2.0));
}

TEST_CASE("wjdot with a single source equals jdot") {
  Rng rng(23);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.4, 30, rng);
  const MatrixXd target =
      oracles::translate(oracles::make_blobs(means, 0.4, 30, rng), VectorXd::Constant(2, 1.5))
          .features;

  shallow::JdotConfig cfg;
  cfg.outer_iters = 3;
  cfg.warm_start_epochs = 30;
  cfg.train.epochs = 30;
  cfg.train.seed = 25;
  const nn::NetArch arch = nn::NetArch::classifier(2, 2, 8, 4);
  const WjdotResult wj = wjdot_fit({source}, target, cfg, arch);
  const shallow::JdotResult jd = shallow::jdot_fit(source, target, cfg, arch);

  CHECK(wj.model.alpha.size() == 1);
  CHECK(wj.model.alpha[0] == doctest::Approx(1.0));
  REQUIRE(wj.objective_trace.size() == jd.objective_trace.size());
  for (std::size_t i = 0; i < jd.objective_trace.size(); ++i) {
    CHECK(std::abs(wj.objective_trace[i] - jd.objective_trace[i]) < 1e-9);
  }
}

TEST_CASE("wjdot concentrates weight on the source matching the target") {
  Rng rng(29);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  auto blob = [&](double dx, double dy, const char* name) {
    VectorXd t(2);
    t << dx, dy;
    return oracles::translate(oracles::make_blobs(means, 0.4, 40, rng, name), t);
  };
  const LabeledDataset s1 = blob(8.0, 0.0, "far1");
  const LabeledDataset s2 = blob(0.0, 0.0, "match");
  const LabeledDataset s3 = blob(0.0, 8.0, "far2");
  const MatrixXd target = blob(0.0, 0.0, "tgt").features;  // duplicates s2's law

  shallow::JdotConfig cfg;
  cfg.outer_iters = 10;
  cfg.warm_start_epochs = 40;
  cfg.inner_epochs = 10;
  cfg.train.epochs = 40;
  cfg.train.seed = 31;
  const WjdotResult fit =
      wjdot_fit({s1, s2, s3}, target, cfg, nn::NetArch::classifier(2, 2, 12, 6));
  CHECK(fit.model.alpha[1] >= 0.8);
  for (std::size_t i = 1; i < fit.objective_trace.size(); ++i) {
    CHECK(fit.objective_trace[i] <= fit.objective_trace[i - 1] + 1e-6);
  }
}

TEST_CASE("wjdot accuracy is stable across seeds when sources are identical") {
  Rng rng(37);
  MatrixXd means(2, 2);
  means << -2.5, 0, 2.5, 0;
  const LabeledDataset base = oracles::make_blobs(means, 0.4, 40, rng, "b");
  const std::vector<LabeledDataset> sources = {base, base, base};
  const LabeledDataset target = oracles::make_blobs(means, 0.4, 40, rng, "t");

  std::vector<double> accs;
  for (const std::uint64_t seed : {101ULL, 202ULL, 303ULL}) {
    shallow::JdotConfig cfg;
    cfg.outer_iters = 4;
    cfg.warm_start_epochs = 60;
    cfg.train.epochs = 60;
    cfg.train.seed = seed;
    const WjdotResult fit =
        wjdot_fit(sources, target.features, cfg, nn::NetArch::classifier(2, 2, 12, 6));
    accs.push_back(nn::accuracy(fit.model.net, target));
  }
  for (const double a : accs) {
    CHECK(std::abs(a - accs[0]) <= 0.01);
  }
}

TEST_CASE("pseudo labels on an identical cloud restore the label histogram") {
  Rng rng(41);
  const MatrixXd x = oracles::random_matrix(30, 2, rng);
  VectorXi y(30);
  for (int i = 0; i < 30; ++i) y[i] = i % 3;
  const LabeledDataset source(x, y, 3, "s");
  const MatrixXd soft = pseudo_label_target({source}, x);
  REQUIRE(soft.rows() == 30);
  for (int i = 0; i < 30; ++i) {
    CHECK(soft.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
  // Identical clouds transport class mass one-to-one: per-class totals match.
  const VectorXi hard = argmax_labels(soft);
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 30; ++i) counts[hard[i]]++;
  CHECK(counts[0] == 10);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 10);
}

TEST_CASE("pseudo label of a single target point is the class-frequency vector") {
  Rng rng(43);
  MatrixXd x = oracles::random_matrix(10, 2, rng);
  VectorXi y(10);
  for (int i = 0; i < 10; ++i) y[i] = i < 7 ? 0 : 1;  // 70/30 split
  const LabeledDataset source(x, y, 2, "s");
  const MatrixXd target = oracles::random_matrix(1, 2, rng);
  const MatrixXd soft = pseudo_label_target({source}, target);
  CHECK(soft(0, 0) == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(soft(0, 1) == doctest::Approx(0.3).epsilon(1e-9));
}

TEST_CASE("pseudo labels are accurate for well-separated sources") {
  Rng rng(47);
  MatrixXd means(2, 2);
  means << -4, 0, 4, 0;
  const LabeledDataset s1 = oracles::make_blobs(means, 0.4, 40, rng, "s1");
  const LabeledDataset s2 = oracles::make_blobs(means, 0.4, 40, rng, "s2");
  const LabeledDataset target = oracles::make_blobs(means, 0.4, 40, rng, "t");
  const MatrixXd soft = pseudo_label_target({s1, s2}, target.features);
  const VectorXi hard = argmax_labels(soft);
  int correct = 0;
  for (int i = 0; i < target.rows(); ++i) {
    if (hard[i] == target.labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / target.rows() >= 0.9);
}

TEST_CASE("dadil with one atom converges to the barycenter of the domains") {
  Rng rng(53);
  auto family = translated_family(rng, 3, 12, 2.0);
  const std::vector<LabeledDataset> sources = {family[0], family[1]};
  const MatrixXd target = family[2].features;

  DadilConfig cfg;
  cfg.n_atoms = 1;
  cfg.iterations = 30;
  cfg.beta = 1.0;
  Rng drng(55);
  const DadilResult fit = dadil_fit(sources, target, cfg, drng);

  // Oracle: the uniform-weight barycenter over the same three domains.
  std::vector<LabeledEmpirical> domains;
  for (const auto& s : sources) domains.push_back(LabeledEmpirical::from_dataset(s));
  LabeledEmpirical tgt;
  tgt.support = target;
  tgt.soft_labels = pseudo_label_target(sources, target);
  tgt.weights = VectorXd::Constant(target.rows(), 1.0 / target.rows());
  domains.push_back(tgt);
  Rng brng(57);
  ot::BarycenterConfig bcfg;
  bcfg.max_iter = 40;
  const ot::BarycenterResult bary = ot::free_support_barycenter(
      domains, SimplexWeights::uniform(3), cfg.beta, fit.dictionary.atoms[0].size(),
      brng, bcfg);
  // Mean transport cost from the barycenter to the domains.
  double oracle = 0.0;
  for (std::size_t l = 0; l < domains.size(); ++l) {
    const ot::CostMatrix c = ot::soft_labeled_cost_matrix(
        bary.barycenter.support, bary.barycenter.soft_labels, domains[l].support,
        domains[l].soft_labels, cfg.beta);
    oracle += bary.plans[l].cost(c.values) / 3.0;
  }
  CHECK(std::abs(fit.loss_trace.back() - oracle) <= 0.05 * oracle);
}

TEST_CASE("dadil reconstructs a duplicated domain almost perfectly") {
  Rng rng(59);
  MatrixXd means(2, 2);
  means << -2, 0, 2, 0;
  const LabeledDataset source = oracles::make_blobs(means, 0.5, 20, rng);

  DadilConfig cfg;
  cfg.n_atoms = 1;
  cfg.atom_size = 40;
  cfg.iterations = 40;
  Rng drng(61);
  const DadilResult fit = dadil_fit({source}, source.features, cfg, drng);
  CHECK(fit.loss_trace.back() < 0.05 * fit.loss_trace.front());
}

TEST_CASE("dadil keeps every weight vector on the simplex") {
  Rng rng(67);
  auto family = translated_family(rng, 4, 10, 2.5);
  const std::vector<LabeledDataset> sources = {family[0], family[1], family[2]};
  DadilConfig cfg;
  cfg.iterations = 8;
  Rng drng(69);
  const DadilResult fit = dadil_fit(sources, family[3].features, cfg, drng);
  for (const auto& w : fit.dictionary.weights) {
    CHECK((w.values.array() >= 0.0).all());
    CHECK(w.values.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Atom soft labels stay distributions.
  for (const auto& atom : fit.dictionary.atoms) {
    for (Eigen::Index i = 0; i < atom.soft_labels.rows(); ++i) {
      CHECK(atom.soft_labels.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
      CHECK((atom.soft_labels.row(i).array() >= 0.0).all());
    }
  }
  CHECK_THROWS_AS(
      dadil_fit(sources, family[3].features,
                [] {
                  DadilConfig c;
                  c.n_atoms = 100000;
                  return c;
                }(),
                drng),
      InvalidArgument);
}

TEST_CASE("dadil-r degenerate coordinates reproduce atoms exactly") {
  Rng rng(71);
  Dictionary dict;
  for (int k = 0; k < 3; ++k) {
    LabeledEmpirical atom;
    atom.support = oracles::random_matrix(8, 2, rng);
    atom.soft_labels = MatrixXd::Zero(8, 2);
    for (int i = 0; i < 8; ++i) atom.soft_labels(i, i % 2) = 1.0;
    atom.weights = VectorXd::Constant(8, 1.0 / 8.0);
    dict.atoms.push_back(std::move(atom));
  }
  VectorXd alpha = VectorXd::Zero(3);
  alpha[1] = 1.0;
  dict.weights = {SimplexWeights::uniform(3), SimplexWeights(alpha)};

  const LabeledDataset recon = dadil_r_transform(dict);
  CHECK(recon.features == dict.atoms[1].support);
  CHECK(recon.labels == argmax_labels(dict.atoms[1].soft_labels));

  // Single-atom dictionary: reconstruction is that atom, whatever alpha is.
  Dictionary single;
  single.atoms.push_back(dict.atoms[0]);
  single.weights = {SimplexWeights::uniform(1), SimplexWeights::uniform(1)};
  const LabeledDataset r1 = dadil_r_transform(single);
  CHECK(r1.features == dict.atoms[0].support);
}

TEST_CASE("dadil-e weights atomic classifiers") {
  Rng rng(73);
  MatrixXd means(2, 2);
  means << -3, 0, 3, 0;
  Dictionary dict;
  for (int k = 0; k < 2; ++k) {
    const LabeledDataset blob = oracles::make_blobs(means, 0.4, 15, rng);
    LabeledEmpirical atom;
    atom.support = blob.features;
    atom.soft_labels = blob.one_hot();
    atom.weights = VectorXd::Constant(blob.rows(), 1.0 / blob.rows());
    dict.atoms.push_back(std::move(atom));
  }
  dict.weights = {SimplexWeights::uniform(2), SimplexWeights::uniform(2)};

  nn::TrainConfig cfg;
  cfg.epochs = 80;
  const auto atomic =
      train_atomic_classifiers(dict, nn::NetArch::classifier(2, 2, 12, 6), cfg);
  REQUIRE(atomic.size() == 2);

  const MatrixXd x = oracles::random_matrix(10, 2, rng, -4.0, 4.0);
  const MatrixXd probs = dadil_e_predict(dict, atomic, x);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Single-atom dictionary: the vote is the atomic classifier itself.
  Dictionary single;
  single.atoms.push_back(dict.atoms[0]);
  single.weights = {SimplexWeights::uniform(1)};
  const auto one = train_atomic_classifiers(single, nn::NetArch::classifier(2, 2, 12, 6), cfg);
  CHECK((dadil_e_predict(single, one, x) - one[0].forward(x, "main"))
            .cwiseAbs()
            .maxCoeff() == 0.0);

  // Identical atoms with uniform coordinates equal any single classifier.
  Dictionary twins;
  twins.atoms = {dict.atoms[0], dict.atoms[0]};
  twins.weights = {SimplexWeights::uniform(2)};
  std::vector<nn::FeedForwardNet> same = {one[0], one[0]};
  CHECK((dadil_e_predict(twins, same, x) - one[0].forward(x, "main"))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("dictionary serialization round-trips exactly") {
  Rng rng(79);
  Dictionary dict;
  for (int k = 0; k < 2; ++k) {
    LabeledEmpirical atom;
    atom.support = oracles::random_matrix(5, 3, rng, -2.0, 2.0);
    atom.soft_labels = MatrixXd::Constant(5, 2, 0.5);
    atom.weights = VectorXd::Constant(5, 0.2);
    dict.atoms.push_back(std::move(atom));
  }
  VectorXd w(2);
  w << 0.25, 0.75;
  dict.weights = {SimplexWeights(w), SimplexWeights::uniform(2)};

  const std::string path = "dict_test.json";
  save_dictionary(dict, path);
  const Dictionary loaded = load_dictionary(path);
  REQUIRE(loaded.atoms.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(loaded.atoms[k].support == dict.atoms[k].support);
    CHECK(loaded.atoms[k].soft_labels == dict.atoms[k].soft_labels);
  }
  CHECK(loaded.weights[0].values == dict.weights[0].values);
  CHECK(loaded.weights[1].values == dict.weights[1].values);
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_dictionary("missing_dict.json"), IoError);
}

TEST_SUITE_END();
