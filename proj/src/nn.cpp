#include "cdfd/nn.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace cdfd::nn {

namespace {

Affine init_affine(int out, int in, Rng& rng) {
  // Glorot-uniform weights. Biases start at a small positive constant so no
  // unit begins exactly on the ReLU kink.
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Affine layer;
  layer.w.resize(out, in);
  for (Eigen::Index i = 0; i < layer.w.rows(); ++i) {
    for (Eigen::Index j = 0; j < layer.w.cols(); ++j) {
      layer.w(i, j) = rng.uniform(-a, a);
    }
  }
  layer.b = VectorXd::Constant(out, 0.01);
  return layer;
}

constexpr double kProbFloor = 1e-12;

}  // namespace

NetArch NetArch::classifier(int input_dim, int n_classes, int hidden, int latent) {
  NetArch arch;
  arch.input_dim = input_dim;
  arch.hidden_dim = hidden;
  arch.latent_dim = latent;
  arch.heads["main"] = HeadSpec{n_classes, HeadSpec::Activation::Softmax};
  return arch;
}

FeedForwardNet::FeedForwardNet(const NetArch& arch, Rng& rng) : arch_(arch) {
  if (arch.input_dim <= 0 || arch.hidden_dim <= 0 || arch.latent_dim <= 0) {
    throw InvalidArgument("FeedForwardNet: dimensions must be positive");
  }
  extractor_.push_back(init_affine(arch.hidden_dim, arch.input_dim, rng));
  extractor_.push_back(init_affine(arch.hidden_dim, arch.hidden_dim, rng));
  extractor_.push_back(init_affine(arch.latent_dim, arch.hidden_dim, rng));
  for (const auto& [name, spec] : arch.heads) {
    if (spec.out_dim <= 0) throw InvalidArgument("FeedForwardNet: head out_dim must be positive");
    heads_[name] = init_affine(spec.out_dim, arch.latent_dim, rng);
  }
}

ForwardCache FeedForwardNet::features_cached(const MatrixXd& x) const {
  if (x.cols() != arch_.input_dim) {
    throw InvalidArgument("FeedForwardNet: input dimension mismatch");
  }
  ForwardCache c;
  c.x = x;
  c.h1_pre = (x * extractor_[0].w.transpose()).rowwise() + extractor_[0].b.transpose();
  c.h1 = c.h1_pre.cwiseMax(0.0);
  c.h2_pre = (c.h1 * extractor_[1].w.transpose()).rowwise() + extractor_[1].b.transpose();
  c.h2 = c.h2_pre.cwiseMax(0.0);
  c.z = (c.h2 * extractor_[2].w.transpose()).rowwise() + extractor_[2].b.transpose();
  return c;
}

MatrixXd FeedForwardNet::features(const MatrixXd& x) const {
  return features_cached(x).z;
}

MatrixXd FeedForwardNet::head_logits(const MatrixXd& z, const std::string& head) const {
  const Affine& h = this->head(head);
  return (z * h.w.transpose()).rowwise() + h.b.transpose();
}

MatrixXd FeedForwardNet::head_output(const MatrixXd& z, const std::string& head) const {
  const MatrixXd logits = head_logits(z, head);
  const HeadSpec& spec = arch_.heads.at(head);
  if (spec.activation == HeadSpec::Activation::Softmax) {
    return softmax_rows(logits);
  }
  return (1.0 / (1.0 + (-logits.array()).exp())).matrix();
}

MatrixXd FeedForwardNet::forward(const MatrixXd& x, const std::string& head) const {
  if (x.rows() == 0) {
    return MatrixXd(0, arch_.heads.at(head).out_dim);
  }
  return head_output(features(x), head);
}

const Affine& FeedForwardNet::head(const std::string& name) const {
  auto it = heads_.find(name);
  if (it == heads_.end()) throw InvalidArgument("FeedForwardNet: unknown head '" + name + "'");
  return it->second;
}

Affine& FeedForwardNet::head(const std::string& name) {
  auto it = heads_.find(name);
  if (it == heads_.end()) throw InvalidArgument("FeedForwardNet: unknown head '" + name + "'");
  return it->second;
}

std::vector<std::string> FeedForwardNet::head_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : heads_) names.push_back(name);
  return names;
}

std::size_t FeedForwardNet::param_count() const {
  std::size_t n = 0;
  for (const auto& l : extractor_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
  for (const auto& [_, l] : heads_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
  return n;
}

VectorXd FeedForwardNet::flatten() const {
  VectorXd out(param_count());
  Eigen::Index at = 0;
  auto put = [&](const Affine& l) {
    out.segment(at, l.w.size()) = Eigen::Map<const VectorXd>(l.w.data(), l.w.size());
    at += l.w.size();
    out.segment(at, l.b.size()) = l.b;
    at += l.b.size();
  };
  for (const auto& l : extractor_) put(l);
  for (const auto& [_, l] : heads_) put(l);
  return out;
}

void FeedForwardNet::set_flat(const VectorXd& params) {
  if (params.size() != static_cast<Eigen::Index>(param_count())) {
    throw InvalidArgument("FeedForwardNet: parameter vector size mismatch");
  }
  Eigen::Index at = 0;
  auto take = [&](Affine& l) {
    Eigen::Map<VectorXd>(l.w.data(), l.w.size()) = params.segment(at, l.w.size());
    at += l.w.size();
    l.b = params.segment(at, l.b.size());
    at += l.b.size();
  };
  for (auto& l : extractor_) take(l);
  for (auto& [_, l] : heads_) take(l);
}

NetGrads::NetGrads(const FeedForwardNet& net) {
  for (const auto& l : net.extractor()) {
    Affine g;
    g.w = MatrixXd::Zero(l.w.rows(), l.w.cols());
    g.b = VectorXd::Zero(l.b.size());
    extractor.push_back(std::move(g));
  }
  for (const auto& name : net.head_names()) {
    const Affine& l = net.head(name);
    Affine g;
    g.w = MatrixXd::Zero(l.w.rows(), l.w.cols());
    g.b = VectorXd::Zero(l.b.size());
    heads[name] = std::move(g);
  }
}

void NetGrads::add_scaled(const NetGrads& other, double scale) {
  for (std::size_t i = 0; i < extractor.size(); ++i) {
    extractor[i].w += scale * other.extractor[i].w;
    extractor[i].b += scale * other.extractor[i].b;
  }
  for (auto& [name, g] : heads) {
    const auto it = other.heads.find(name);
    if (it != other.heads.end()) {
      g.w += scale * it->second.w;
      g.b += scale * it->second.b;
    }
  }
}

VectorXd NetGrads::flatten(const FeedForwardNet& net) const {
  VectorXd out(net.param_count());
  Eigen::Index at = 0;
  auto put = [&](const Affine& l) {
    out.segment(at, l.w.size()) = Eigen::Map<const VectorXd>(l.w.data(), l.w.size());
    at += l.w.size();
    out.segment(at, l.b.size()) = l.b;
    at += l.b.size();
  };
  for (const auto& l : extractor) put(l);
  for (const auto& [_, l] : heads) put(l);
  return out;
}

MatrixXd head_backward(const FeedForwardNet& net, const std::string& head,
                       const MatrixXd& z, const MatrixXd& d_logits, NetGrads& grads) {
  const Affine& h = net.head(head);
  Affine& g = grads.heads.at(head);
  g.w += d_logits.transpose() * z;
  g.b += d_logits.colwise().sum().transpose();
  return d_logits * h.w;
}

void extractor_backward(const FeedForwardNet& net, const ForwardCache& cache,
                        const MatrixXd& dz, NetGrads& grads) {
  const auto& layers = net.extractor();
  grads.extractor[2].w += dz.transpose() * cache.h2;
  grads.extractor[2].b += dz.colwise().sum().transpose();
  MatrixXd dh2 = dz * layers[2].w;
  dh2 = dh2.array() * (cache.h2_pre.array() > 0.0).cast<double>();
  grads.extractor[1].w += dh2.transpose() * cache.h1;
  grads.extractor[1].b += dh2.colwise().sum().transpose();
  MatrixXd dh1 = dh2 * layers[1].w;
  dh1 = dh1.array() * (cache.h1_pre.array() > 0.0).cast<double>();
  grads.extractor[0].w += dh1.transpose() * cache.x;
  grads.extractor[0].b += dh1.colwise().sum().transpose();
}

MatrixXd grad_reversal_forward(const FeedForwardNet& net, const MatrixXd& x) {
  return net.features(x);
}

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

double cce_loss(const MatrixXd& probs, const MatrixXd& onehot) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols()) {
    throw InvalidArgument("cce_loss: shape mismatch");
  }
  if (probs.rows() == 0) return 0.0;
  const auto clipped = probs.array().max(kProbFloor).min(1.0);
  return -(onehot.array() * clipped.log()).sum() / static_cast<double>(probs.rows());
}

MatrixXd cce_grad_logits(const MatrixXd& probs, const MatrixXd& onehot) {
  return (probs - onehot) / static_cast<double>(probs.rows());
}

double bce_loss(const MatrixXd& probs, const VectorXd& targets) {
  if (probs.rows() != targets.size()) throw InvalidArgument("bce_loss: shape mismatch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double p = std::clamp(probs(i, 0), kProbFloor, 1.0 - kProbFloor);
    loss += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
  }
  return loss / static_cast<double>(probs.rows());
}

MatrixXd bce_grad_logits(const MatrixXd& probs, const VectorXd& targets) {
  return (probs.col(0) - targets) / static_cast<double>(probs.rows());
}

void sgd_step(FeedForwardNet& net, const NetGrads& grads, double lr,
              double weight_decay) {
  auto& layers = net.extractor();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].w -= lr * (grads.extractor[i].w + weight_decay * layers[i].w);
    layers[i].b -= lr * grads.extractor[i].b;
  }
  for (const auto& name : net.head_names()) {
    Affine& h = net.head(name);
    const Affine& g = grads.heads.at(name);
    h.w -= lr * (g.w + weight_decay * h.w);
    h.b -= lr * g.b;
  }
}

TrainResult train_erm(FeedForwardNet& net, const LabeledDataset& ds,
                      const TrainConfig& cfg, const std::string& head) {
  if (ds.rows() == 0) throw InvalidArgument("train_erm: empty dataset");
  if (cfg.lr <= 0.0) throw InvalidArgument("train_erm: lr must be positive");
  if (cfg.epochs < 1) throw InvalidArgument("train_erm: epochs must be at least 1");
  const MatrixXd onehot = ds.one_hot();
  Rng rng(cfg.seed);

  TrainResult result;
  const int n = ds.rows();
  const int bs = std::max(1, std::min(cfg.batch_size, n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = erng.permutation(n);
    for (int start = 0; start < n; start += bs) {
      const int len = std::min(bs, n - start);
      MatrixXd xb(len, ds.feature_dim());
      MatrixXd yb(len, ds.class_count);
      for (int i = 0; i < len; ++i) {
        xb.row(i) = ds.features.row(order[static_cast<std::size_t>(start + i)]);
        yb.row(i) = onehot.row(order[static_cast<std::size_t>(start + i)]);
      }
      const ForwardCache cache = net.features_cached(xb);
      const MatrixXd probs = net.head_output(cache.z, head);
      NetGrads grads(net);
      const MatrixXd dz = head_backward(net, head, cache.z, cce_grad_logits(probs, yb), grads);
      extractor_backward(net, cache, dz, grads);
      sgd_step(net, grads, cfg.lr, cfg.weight_decay);
    }
    const double loss = cce_loss(net.forward(ds.features, head), onehot);
    if (!std::isfinite(loss)) {
      throw NumericError("train_erm: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_curve.push_back(loss);
  }
  return result;
}

double accuracy(const FeedForwardNet& net, const MatrixXd& x, const VectorXi& labels,
                const std::string& head) {
  if (x.rows() == 0) return 0.0;
  const MatrixXd probs = net.forward(x, head);
  int correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (argmax_row(probs.row(i)) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

double accuracy(const FeedForwardNet& net, const LabeledDataset& ds,
                const std::string& head) {
  return accuracy(net, ds.features, ds.labels, head);
}

void save_checkpoint(const FeedForwardNet& net, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cdfd-checkpoint";
  j["version"] = 1;
  j["arch"]["input_dim"] = net.arch().input_dim;
  j["arch"]["hidden_dim"] = net.arch().hidden_dim;
  j["arch"]["latent_dim"] = net.arch().latent_dim;
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [name, spec] : net.arch().heads) {
    heads[name] = {
        {"out_dim", spec.out_dim},
        {"activation", spec.activation == HeadSpec::Activation::Softmax ? "softmax" : "sigmoid"}};
  }
  j["arch"]["heads"] = heads;
  const VectorXd params = net.flatten();
  j["params"] = std::vector<double>(params.data(), params.data() + params.size());

  std::ofstream out(path);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out << j.dump();
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

FeedForwardNet load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_checkpoint: parse error: " + std::string(e.what()));
  }
  if (j.value("format", "") != "cdfd-checkpoint" || j.value("version", 0) != 1) {
    throw IoError("load_checkpoint: unrecognized checkpoint format");
  }
  NetArch arch;
  arch.input_dim = j["arch"]["input_dim"].get<int>();
  arch.hidden_dim = j["arch"]["hidden_dim"].get<int>();
  arch.latent_dim = j["arch"]["latent_dim"].get<int>();
  for (const auto& [name, spec] : j["arch"]["heads"].items()) {
    HeadSpec hs;
    hs.out_dim = spec["out_dim"].get<int>();
    hs.activation = spec["activation"].get<std::string>() == "softmax"
                        ? HeadSpec::Activation::Softmax
                        : HeadSpec::Activation::Sigmoid;
    arch.heads[name] = hs;
  }
  Rng rng(0);
  FeedForwardNet net(arch, rng);
  const auto params = j["params"].get<std::vector<double>>();
  net.set_flat(Eigen::Map<const VectorXd>(params.data(), static_cast<Eigen::Index>(params.size())));
  return net;
}

}  // namespace cdfd::nn
