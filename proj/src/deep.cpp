#include "cdfd/deep.hpp"

#include <cmath>
#include <string>

namespace cdfd::deep {

namespace {

// Deterministic per-domain batch streams: each epoch reshuffles with a seed
// derived from (run seed, domain, epoch).
struct BatchStream {
  std::vector<int> order;
  int at = 0;

  void reshuffle(int n, Rng rng) {
    order = rng.permutation(n);
    at = 0;
  }
  std::vector<int> next(int len) {
    std::vector<int> idx;
    idx.reserve(len);
    for (int i = 0; i < len; ++i) {
      if (at >= static_cast<int>(order.size())) at = 0;
      idx.push_back(order[static_cast<std::size_t>(at++)]);
    }
    return idx;
  }
};

MatrixXd take_rows(const MatrixXd& m, const std::vector<int>& idx) {
  MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

// VJP of a softmax row: ds is dL/dprobs, result is dL/dlogits.
Eigen::RowVectorXd softmax_vjp(const Eigen::RowVectorXd& probs,
                               const Eigen::RowVectorXd& ds) {
  const double dot = probs.dot(ds);
  return probs.array() * (ds.array() - dot);
}

}  // namespace

double cce_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& x,
                     const MatrixXd& onehot, const std::string& head,
                     nn::NetGrads& grads) {
  const nn::ForwardCache cache = net.features_cached(x);
  const MatrixXd probs = net.head_output(cache.z, head);
  const MatrixXd dz =
      nn::head_backward(net, head, cache.z, nn::cce_grad_logits(probs, onehot), grads);
  nn::extractor_backward(net, cache, dz, grads);
  return nn::cce_loss(probs, onehot);
}

double mmd_latent_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                            const MatrixXd& xt, const div::KernelSpec& kernel,
                            nn::NetGrads& grads) {
  const nn::ForwardCache cs = net.features_cached(xs);
  const nn::ForwardCache ct = net.features_cached(xt);
  const double m = static_cast<double>(xs.rows());
  const double n = static_cast<double>(xt.rows());

  MatrixXd dzs = MatrixXd::Zero(cs.z.rows(), cs.z.cols());
  MatrixXd dzt = MatrixXd::Zero(ct.z.rows(), ct.z.cols());
  double value = 0.0;

  if (kernel.kind == div::KernelSpec::Kind::Linear) {
    const Eigen::RowVectorXd mu_s = cs.z.colwise().mean();
    const Eigen::RowVectorXd mu_t = ct.z.colwise().mean();
    const Eigen::RowVectorXd diff = mu_s - mu_t;
    value = diff.squaredNorm();
    dzs.rowwise() += (2.0 / m) * diff;
    dzt.rowwise() -= (2.0 / n) * diff;
  } else if (kernel.kind == div::KernelSpec::Kind::Rbf) {
    const double inv = 1.0 / (kernel.sigma * kernel.sigma);
    const MatrixXd kss = div::kernel_matrix(cs.z, cs.z, kernel);
    const MatrixXd ktt = div::kernel_matrix(ct.z, ct.z, kernel);
    const MatrixXd kst = div::kernel_matrix(cs.z, ct.z, kernel);
    value = kss.sum() / (m * m) + ktt.sum() / (n * n) - 2.0 * kst.sum() / (m * n);
    // d k(a,b) / d a = -k(a,b) (a-b) / sigma^2
    for (Eigen::Index i = 0; i < cs.z.rows(); ++i) {
      for (Eigen::Index j = 0; j < cs.z.rows(); ++j) {
        dzs.row(i) += (2.0 / (m * m)) * (-kss(i, j) * inv) * (cs.z.row(i) - cs.z.row(j));
      }
      for (Eigen::Index j = 0; j < ct.z.rows(); ++j) {
        dzs.row(i) -= (2.0 / (m * n)) * (-kst(i, j) * inv) * (cs.z.row(i) - ct.z.row(j));
      }
    }
    for (Eigen::Index j = 0; j < ct.z.rows(); ++j) {
      for (Eigen::Index i = 0; i < ct.z.rows(); ++i) {
        dzt.row(j) += (2.0 / (n * n)) * (-ktt(j, i) * inv) * (ct.z.row(j) - ct.z.row(i));
      }
      for (Eigen::Index i = 0; i < cs.z.rows(); ++i) {
        dzt.row(j) -= (2.0 / (m * n)) * (-kst(i, j) * inv) * (ct.z.row(j) - cs.z.row(i));
      }
    }
  } else {
    throw Unsupported("mmd_latent_loss_grad: polynomial kernel not wired up here");
  }

  if (value < 0.0) value = 0.0;
  nn::extractor_backward(net, cs, dzs, grads);
  nn::extractor_backward(net, ct, dzt, grads);
  return value;
}

DannLosses dann_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                          const MatrixXd& onehot_s, const MatrixXd& xt,
                          double lambda_rev, nn::NetGrads& grads) {
  const nn::ForwardCache cs = net.features_cached(xs);
  const nn::ForwardCache ct = net.features_cached(xt);

  DannLosses losses;

  // Class branch on source.
  const MatrixXd probs = net.head_output(cs.z, "main");
  losses.class_loss = nn::cce_loss(probs, onehot_s);
  MatrixXd dzs = nn::head_backward(net, "main", cs.z, nn::cce_grad_logits(probs, onehot_s), grads);

  // Domain branch on both, label 0 = source, 1 = target.
  MatrixXd z_all(cs.z.rows() + ct.z.rows(), cs.z.cols());
  z_all << cs.z, ct.z;
  VectorXd d(z_all.rows());
  d.head(cs.z.rows()).setZero();
  d.tail(ct.z.rows()).setOnes();
  const MatrixXd dom = net.head_output(z_all, "domain");
  losses.domain_loss = nn::bce_loss(dom, d);
  const MatrixXd dz_dom =
      nn::head_backward(net, "domain", z_all, nn::bce_grad_logits(dom, d), grads);

  // Reversal: the extractor descends on -lambda_rev * domain loss.
  dzs -= lambda_rev * dz_dom.topRows(cs.z.rows());
  const MatrixXd dzt = -lambda_rev * dz_dom.bottomRows(ct.z.rows());
  nn::extractor_backward(net, cs, dzs, grads);
  nn::extractor_backward(net, ct, dzt, grads);
  return losses;
}

double deepjdot_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                          const MatrixXd& onehot_s, const MatrixXd& xt,
                          const DeepDaConfig& cfg, nn::NetGrads& grads,
                          ot::TransportPlan* plan_out) {
  const nn::ForwardCache cs = net.features_cached(xs);
  const nn::ForwardCache ct = net.features_cached(xt);
  const MatrixXd probs_t = net.head_output(ct.z, "main");

  MatrixXd cost = cfg.feature_weight * ot::cost_matrix(cs.z, ct.z).values;
  if (cfg.label_weight > 0.0) {
    const MatrixXd logp = probs_t.array().max(1e-12).min(1.0).log().matrix();
    cost += cfg.label_weight * (-(onehot_s * logp.transpose()));
  }

  ot::CostMatrix cm;
  cm.values = cost;
  cm.descriptor.kind = ot::CostDescriptor::Kind::Jdot;
  cm.descriptor.alpha = cfg.feature_weight;
  cm.descriptor.beta = cfg.label_weight;
  const VectorXd a = VectorXd::Constant(xs.rows(), 1.0 / xs.rows());
  const VectorXd b = VectorXd::Constant(xt.rows(), 1.0 / xt.rows());
  const ot::TransportPlan plan =
      cfg.epsilon > 0.0
          ? ot::solve_ot_sinkhorn(a, b, cm, cfg.epsilon).plan
          : ot::solve_ot_exact(a, b, cm);
  const double loss = plan.cost(cost);

  // Gradients with the plan frozen.
  const VectorXd row_mass = plan.values.rowwise().sum();
  const VectorXd col_mass = plan.values.colwise().sum().transpose();
  MatrixXd dzs =
      2.0 * cfg.feature_weight * (row_mass.asDiagonal() * cs.z - plan.values * ct.z);
  MatrixXd dzt =
      2.0 * cfg.feature_weight *
      (col_mass.asDiagonal() * ct.z - plan.values.transpose() * cs.z);
  if (cfg.label_weight > 0.0) {
    const MatrixXd dlogits_t =
        cfg.label_weight *
        (col_mass.asDiagonal() * probs_t - plan.values.transpose() * onehot_s);
    dzt += nn::head_backward(net, "main", ct.z, dlogits_t, grads);
  }
  nn::extractor_backward(net, cs, dzs, grads);
  nn::extractor_backward(net, ct, dzt, grads);
  if (plan_out) *plan_out = plan;
  return loss;
}

double m3sda_omega_grad(const nn::FeedForwardNet& net,
                        const std::vector<MatrixXd>& source_batches,
                        const MatrixXd& xt, const DeepDaConfig& cfg,
                        nn::NetGrads& grads) {
  const int n_src = static_cast<int>(source_batches.size());
  if (n_src < 1) throw InvalidArgument("m3sda_omega_grad: no source batches");

  std::vector<nn::ForwardCache> caches;
  caches.reserve(source_batches.size());
  for (const auto& x : source_batches) caches.push_back(net.features_cached(x));
  const nn::ForwardCache ct = net.features_cached(xt);

  const int orders = std::max(1, cfg.moment_orders);
  const int zd = static_cast<int>(ct.z.cols());

  // Entry-wise moment vectors per domain and order.
  auto moment = [&](const MatrixXd& z, int p) -> Eigen::RowVectorXd {
    if (p == 1) return z.colwise().mean();
    return z.array().pow(p).colwise().mean();
  };
  // d moment_p / d z(a, c) = p z(a,c)^{p-1} / rows
  auto moment_backward = [&](const MatrixXd& z, int p,
                             const Eigen::RowVectorXd& up) -> MatrixXd {
    const double inv = 1.0 / static_cast<double>(z.rows());
    if (p == 1) {
      MatrixXd g(z.rows(), z.cols());
      g.rowwise() = up * inv;
      return g;
    }
    MatrixXd g = (z.array().pow(p - 1) * static_cast<double>(p) * inv).matrix();
    return g.array().rowwise() * up.array();
  };

  std::vector<MatrixXd> dzs(source_batches.size());
  for (std::size_t k = 0; k < source_batches.size(); ++k) {
    dzs[k] = MatrixXd::Zero(caches[k].z.rows(), zd);
  }
  MatrixXd dzt = MatrixXd::Zero(ct.z.rows(), zd);

  double omega = 0.0;
  const double st_scale = 1.0 / static_cast<double>(n_src);
  for (int p = 1; p <= orders; ++p) {
    const Eigen::RowVectorXd mu_t = moment(ct.z, p);
    std::vector<Eigen::RowVectorXd> mu_s;
    for (std::size_t k = 0; k < caches.size(); ++k) mu_s.push_back(moment(caches[k].z, p));

    // Source-target alignment.
    for (std::size_t k = 0; k < caches.size(); ++k) {
      const Eigen::RowVectorXd v = mu_s[k] - mu_t;
      const double norm = v.norm();
      omega += st_scale * norm;
      if (norm > 0.0) {
        const Eigen::RowVectorXd dir = (st_scale / norm) * v;
        dzs[k] += moment_backward(caches[k].z, p, dir);
        dzt -= moment_backward(ct.z, p, dir);
      }
    }
    // Pairwise source alignment.
    if (n_src >= 2) {
      const double n_pairs = 0.5 * n_src * (n_src - 1);
      const double pair_scale = cfg.literal_pair_multiplier ? n_pairs : 1.0 / n_pairs;
      for (int i = 0; i < n_src; ++i) {
        for (int j = i + 1; j < n_src; ++j) {
          const Eigen::RowVectorXd v = mu_s[static_cast<std::size_t>(i)] -
                                       mu_s[static_cast<std::size_t>(j)];
          const double norm = v.norm();
          omega += pair_scale * norm;
          if (norm > 0.0) {
            const Eigen::RowVectorXd dir = (pair_scale / norm) * v;
            dzs[static_cast<std::size_t>(i)] +=
                moment_backward(caches[static_cast<std::size_t>(i)].z, p, dir);
            dzs[static_cast<std::size_t>(j)] -=
                moment_backward(caches[static_cast<std::size_t>(j)].z, p, dir);
          }
        }
      }
    }
  }

  for (std::size_t k = 0; k < caches.size(); ++k) {
    nn::extractor_backward(net, caches[k], dzs[k], grads);
  }
  nn::extractor_backward(net, ct, dzt, grads);
  return omega;
}

MmdnetResult mmdnet_fit(const LabeledDataset& source, const MatrixXd& target,
                        const DeepDaConfig& cfg, const nn::NetArch& arch) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("mmdnet_fit: empty input");
  }
  Rng rng(cfg.train.seed);
  nn::FeedForwardNet net(arch, rng);
  const MatrixXd onehot = source.one_hot();

  div::KernelSpec kernel = cfg.kernel;
  if (kernel.kind == div::KernelSpec::Kind::Rbf && cfg.median_sigma) {
    kernel.sigma = div::median_heuristic_sigma(net.features(source.features),
                                               net.features(target));
  }
  MmdnetResult result;
  result.mmd_pre = div::mmd(net.features(source.features), net.features(target), kernel);

  const int n = source.rows();
  const int bs = std::max(1, std::min(cfg.train.batch_size, n));
  Rng base(cfg.train.seed);
  Rng tgt_base = Rng(cfg.train.seed).split(0x7a51);
  BatchStream tgt_stream;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Rng erng = base.split(static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = erng.permutation(n);
    tgt_stream.reshuffle(static_cast<int>(target.rows()),
                         tgt_base.split(static_cast<std::uint64_t>(epoch)));
    for (int start = 0; start < n; start += bs) {
      const int len = std::min(bs, n - start);
      std::vector<int> sidx(order.begin() + start, order.begin() + start + len);
      const MatrixXd xb = take_rows(source.features, sidx);
      const MatrixXd yb = take_rows(onehot, sidx);
      nn::NetGrads grads(net);
      cce_loss_grad(net, xb, yb, "main", grads);
      if (cfg.lambda != 0.0) {
        const MatrixXd xtb = take_rows(target, tgt_stream.next(len));
        nn::NetGrads mmd_grads(net);
        div::KernelSpec kb = kernel;
        if (kb.kind == div::KernelSpec::Kind::Rbf && cfg.median_sigma) {
          kb.sigma = div::median_heuristic_sigma(net.features(xb), net.features(xtb));
        }
        mmd_latent_loss_grad(net, xb, xtb, kb, mmd_grads);
        grads.add_scaled(mmd_grads, cfg.lambda);
      }
      nn::sgd_step(net, grads, cfg.train.lr, cfg.train.weight_decay);
    }
    double loss = nn::cce_loss(net.forward(source.features, "main"), onehot);
    if (cfg.lambda != 0.0) {
      loss += cfg.lambda *
              div::mmd(net.features(source.features), net.features(target), kernel);
    }
    if (!std::isfinite(loss)) {
      throw NumericError("mmdnet_fit: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_trace.push_back(loss);
  }

  result.mmd_post = div::mmd(net.features(source.features), net.features(target), kernel);
  result.net = std::move(net);
  return result;
}

DannResult dann_fit(const LabeledDataset& source, const MatrixXd& target,
                    const DeepDaConfig& cfg, const nn::NetArch& arch) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("dann_fit: empty input");
  }
  nn::NetArch full = arch;
  full.heads["domain"] = nn::HeadSpec{1, nn::HeadSpec::Activation::Sigmoid};
  Rng rng(cfg.train.seed);
  nn::FeedForwardNet net(full, rng);
  const MatrixXd onehot = source.one_hot();

  const int n = source.rows();
  const int bs = std::max(1, std::min(cfg.train.batch_size, n));
  Rng base(cfg.train.seed);
  Rng tgt_base = Rng(cfg.train.seed).split(0x7a52);
  BatchStream tgt_stream;
  DannResult result;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Rng erng = base.split(static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = erng.permutation(n);
    tgt_stream.reshuffle(static_cast<int>(target.rows()),
                         tgt_base.split(static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    int steps = 0;
    for (int start = 0; start < n; start += bs) {
      const int len = std::min(bs, n - start);
      std::vector<int> sidx(order.begin() + start, order.begin() + start + len);
      const MatrixXd xb = take_rows(source.features, sidx);
      const MatrixXd yb = take_rows(onehot, sidx);
      const MatrixXd xtb = take_rows(target, tgt_stream.next(len));
      nn::NetGrads grads(net);
      const DannLosses losses = dann_loss_grad(net, xb, yb, xtb, cfg.lambda_rev, grads);
      nn::sgd_step(net, grads, cfg.train.lr, cfg.train.weight_decay);
      epoch_loss += losses.class_loss + losses.domain_loss;
      ++steps;
    }
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("dann_fit: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_trace.push_back(epoch_loss / std::max(1, steps));
  }

  // Final domain discriminability on a holdout slice of each side.
  Rng hrng = Rng(cfg.train.seed).split(0x7a53);
  const std::vector<int> sperm = hrng.permutation(n);
  const std::vector<int> tperm = hrng.permutation(static_cast<int>(target.rows()));
  const int sh = std::max(1, n / 4);
  const int th = std::max(1, static_cast<int>(target.rows()) / 4);
  int correct = 0;
  for (int i = 0; i < sh; ++i) {
    const MatrixXd p = net.forward(source.features.row(sperm[static_cast<std::size_t>(i)]), "domain");
    if (p(0, 0) < 0.5) ++correct;
  }
  for (int i = 0; i < th; ++i) {
    const MatrixXd p = net.forward(target.row(tperm[static_cast<std::size_t>(i)]), "domain");
    if (p(0, 0) >= 0.5) ++correct;
  }
  result.domain_accuracy = static_cast<double>(correct) / static_cast<double>(sh + th);
  result.net = std::move(net);
  return result;
}

DeepJdotResult deepjdot_fit(const LabeledDataset& source, const MatrixXd& target,
                            const DeepDaConfig& cfg, const nn::NetArch& arch) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("deepjdot_fit: empty input");
  }
  Rng rng(cfg.train.seed);
  nn::FeedForwardNet net(arch, rng);
  const MatrixXd onehot = source.one_hot();

  const int n = source.rows();
  const int bs = std::max(1, std::min(cfg.train.batch_size, n));
  Rng base(cfg.train.seed);
  Rng tgt_base = Rng(cfg.train.seed).split(0x7a54);
  BatchStream tgt_stream;
  DeepJdotResult result;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Rng erng = base.split(static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = erng.permutation(n);
    tgt_stream.reshuffle(static_cast<int>(target.rows()),
                         tgt_base.split(static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    int steps = 0;
    for (int start = 0; start < n; start += bs) {
      const int len = std::min(bs, n - start);
      std::vector<int> sidx(order.begin() + start, order.begin() + start + len);
      const MatrixXd xb = take_rows(source.features, sidx);
      const MatrixXd yb = take_rows(onehot, sidx);
      const MatrixXd xtb = take_rows(target, tgt_stream.next(len));
      nn::NetGrads grads(net);
      double loss = cce_loss_grad(net, xb, yb, "main", grads);
      if (cfg.lambda != 0.0 && (cfg.feature_weight > 0.0 || cfg.label_weight > 0.0)) {
        nn::NetGrads tgrads(net);
        const double transport = deepjdot_loss_grad(net, xb, yb, xtb, cfg, tgrads);
        grads.add_scaled(tgrads, cfg.lambda);
        loss += cfg.lambda * transport;
      }
      nn::sgd_step(net, grads, cfg.train.lr, cfg.train.weight_decay);
      epoch_loss += loss;
      ++steps;
    }
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("deepjdot_fit: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_trace.push_back(epoch_loss / std::max(1, steps));
  }
  result.net = std::move(net);
  return result;
}

M3sdaResult m3sda_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const DeepDaConfig& cfg, bool beta_variant,
                      const nn::NetArch& base_arch) {
  const int n_src = static_cast<int>(sources.size());
  if (n_src < 2) {
    throw InvalidArgument("m3sda_fit: needs at least two sources; use a single-source method");
  }
  if (target.rows() == 0) throw InvalidArgument("m3sda_fit: empty target");
  const int n_c = sources[0].class_count;
  for (const auto& s : sources) {
    if (s.rows() < 2) throw InvalidArgument("m3sda_fit: source too small");
    if (s.class_count != n_c) throw InvalidArgument("m3sda_fit: class counts differ");
  }

  nn::NetArch arch = base_arch;
  arch.heads.clear();
  for (int k = 0; k < n_src; ++k) {
    arch.heads["h" + std::to_string(k)] = nn::HeadSpec{n_c, nn::HeadSpec::Activation::Softmax};
    if (beta_variant) {
      arch.heads["p" + std::to_string(k)] = nn::HeadSpec{n_c, nn::HeadSpec::Activation::Softmax};
    }
  }
  Rng rng(cfg.train.seed);
  nn::FeedForwardNet net(arch, rng);

  // Hold out a slice of each source for the prediction weights.
  std::vector<MatrixXd> train_x(sources.size()), train_y(sources.size());
  std::vector<MatrixXd> hold_x(sources.size());
  std::vector<VectorXi> hold_y(sources.size());
  for (std::size_t k = 0; k < sources.size(); ++k) {
    Rng srng = Rng(cfg.train.seed).split(0x5000 + k);
    const int nk = sources[k].rows();
    const std::vector<int> perm = srng.permutation(nk);
    const int nh = std::max(1, nk / 5);
    const int ntr = nk - nh;
    const MatrixXd onehot = sources[k].one_hot();
    train_x[k].resize(ntr, sources[k].feature_dim());
    train_y[k].resize(ntr, n_c);
    hold_x[k].resize(nh, sources[k].feature_dim());
    hold_y[k].resize(nh);
    for (int i = 0; i < ntr; ++i) {
      train_x[k].row(i) = sources[k].features.row(perm[static_cast<std::size_t>(i)]);
      train_y[k].row(i) = onehot.row(perm[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < nh; ++i) {
      hold_x[k].row(i) = sources[k].features.row(perm[static_cast<std::size_t>(ntr + i)]);
      hold_y[k][i] = sources[k].labels[perm[static_cast<std::size_t>(ntr + i)]];
    }
  }

  int max_rows = 0;
  for (const auto& x : train_x) max_rows = std::max(max_rows, static_cast<int>(x.rows()));
  const int bs = std::max(1, std::min(cfg.train.batch_size, max_rows));
  const int steps_per_epoch = (max_rows + bs - 1) / bs;

  std::vector<BatchStream> streams(sources.size());
  BatchStream tgt_stream;
  const double disc_scale = 1.0 / static_cast<double>(n_src);

  M3sdaResult result;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    for (std::size_t k = 0; k < sources.size(); ++k) {
      streams[k].reshuffle(static_cast<int>(train_x[k].rows()),
                           Rng(cfg.train.seed).split(0x6000 + k).split(epoch));
    }
    tgt_stream.reshuffle(static_cast<int>(target.rows()),
                         Rng(cfg.train.seed).split(0x6fff).split(epoch));
    double epoch_loss = 0.0, epoch_omega = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<MatrixXd> xb(sources.size()), yb(sources.size());
      std::vector<std::vector<int>> idx(sources.size());
      for (std::size_t k = 0; k < sources.size(); ++k) {
        idx[k] = streams[k].next(bs);
        xb[k] = take_rows(train_x[k], idx[k]);
        yb[k] = take_rows(train_y[k], idx[k]);
      }
      const MatrixXd xtb = take_rows(target, tgt_stream.next(bs));

      // Phase 1: per-source risks plus the moment penalty.
      nn::NetGrads grads(net);
      double loss = 0.0;
      for (std::size_t k = 0; k < sources.size(); ++k) {
        nn::NetGrads g(net);
        const double l = cce_loss_grad(net, xb[k], yb[k], "h" + std::to_string(k), g);
        grads.add_scaled(g, disc_scale);
        loss += disc_scale * l;
      }
      if (cfg.lambda != 0.0) {
        nn::NetGrads g(net);
        const double omega = m3sda_omega_grad(net, xb, xtb, cfg, g);
        grads.add_scaled(g, cfg.lambda);
        loss += cfg.lambda * omega;
        epoch_omega += omega;
      }
      nn::sgd_step(net, grads, cfg.train.lr, cfg.train.weight_decay);
      epoch_loss += loss;

      if (beta_variant) {
        // Phase 2: paired heads maximize target discrepancy while staying
        // accurate on their sources; only p-heads move.
        {
          nn::NetGrads grads2(net);
          const nn::ForwardCache ct = net.features_cached(xtb);
          for (std::size_t k = 0; k < sources.size(); ++k) {
            const std::string pk = "p" + std::to_string(k);
            nn::NetGrads grisk(net);
            cce_loss_grad(net, xb[k], yb[k], pk, grisk);
            grads2.add_scaled(grisk, disc_scale);
            const MatrixXd ph = net.head_output(ct.z, "h" + std::to_string(k));
            const MatrixXd pp = net.head_output(ct.z, pk);
            MatrixXd dlogits(pp.rows(), pp.cols());
            const double scale = disc_scale / static_cast<double>(pp.rows());
            for (Eigen::Index j = 0; j < pp.rows(); ++j) {
              Eigen::RowVectorXd s =
                  -scale * (pp.row(j) - ph.row(j)).array().sign().matrix();
              dlogits.row(j) = softmax_vjp(pp.row(j), s);
            }
            nn::head_backward(net, pk, ct.z, dlogits, grads2);
          }
          // Zero every gradient except the paired heads.
          nn::NetGrads masked(net);
          for (std::size_t k = 0; k < sources.size(); ++k) {
            const std::string pk = "p" + std::to_string(k);
            masked.heads[pk] = grads2.heads[pk];
          }
          nn::sgd_step(net, masked, cfg.train.lr, 0.0);
        }
        // Phase 3: the extractor minimizes the same discrepancy.
        {
          nn::NetGrads grads3(net);
          const nn::ForwardCache ct = net.features_cached(xtb);
          MatrixXd dzt = MatrixXd::Zero(ct.z.rows(), ct.z.cols());
          for (std::size_t k = 0; k < sources.size(); ++k) {
            const MatrixXd ph = net.head_output(ct.z, "h" + std::to_string(k));
            const MatrixXd pp = net.head_output(ct.z, "p" + std::to_string(k));
            const double scale = disc_scale / static_cast<double>(pp.rows());
            MatrixXd dlog_h(ph.rows(), ph.cols()), dlog_p(pp.rows(), pp.cols());
            for (Eigen::Index j = 0; j < pp.rows(); ++j) {
              const Eigen::RowVectorXd sgn =
                  (ph.row(j) - pp.row(j)).array().sign().matrix();
              dlog_h.row(j) = softmax_vjp(ph.row(j), scale * sgn);
              dlog_p.row(j) = softmax_vjp(pp.row(j), -scale * sgn);
            }
            nn::NetGrads scratch(net);
            dzt += nn::head_backward(net, "h" + std::to_string(k), ct.z, dlog_h, scratch);
            dzt += nn::head_backward(net, "p" + std::to_string(k), ct.z, dlog_p, scratch);
          }
          nn::extractor_backward(net, ct, dzt, grads3);
          nn::NetGrads masked(net);
          masked.extractor = grads3.extractor;
          nn::sgd_step(net, masked, cfg.train.lr, 0.0);
        }
      }
    }
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("m3sda_fit: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_trace.push_back(epoch_loss / steps_per_epoch);
    result.omega_trace.push_back(epoch_omega / steps_per_epoch);
  }

  // Prediction weights from holdout accuracy.
  VectorXd acc(n_src);
  for (int k = 0; k < n_src; ++k) {
    acc[k] = nn::accuracy(net, hold_x[static_cast<std::size_t>(k)],
                          hold_y[static_cast<std::size_t>(k)], "h" + std::to_string(k));
  }
  if (acc.sum() <= 0.0) {
    result.weights = VectorXd::Constant(n_src, 1.0 / n_src);
    result.uniform_weight_fallback = true;
  } else {
    result.weights = acc / acc.sum();
  }
  result.net = std::move(net);
  return result;
}

MatrixXd m3sda_predict(const nn::FeedForwardNet& net, const MatrixXd& x,
                       const VectorXd& weights) {
  if (std::abs(weights.sum() - 1.0) > 1e-6 || (weights.array() < 0.0).any()) {
    throw InvalidArgument("m3sda_predict: weights must lie on the simplex");
  }
  const MatrixXd z = net.features(x);
  MatrixXd out;
  for (int k = 0; k < weights.size(); ++k) {
    const MatrixXd p = net.head_output(z, "h" + std::to_string(k));
    if (out.size() == 0) {
      out = weights[k] * p;
    } else {
      out += weights[k] * p;
    }
  }
  return out;
}

}  // namespace cdfd::deep
