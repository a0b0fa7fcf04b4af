#pragma once

#include <map>
#include <string>
#include <vector>

#include "cdfd/core.hpp"

namespace cdfd::nn {

struct HeadSpec {
  enum class Activation { Softmax, Sigmoid };
  int out_dim = 0;
  Activation activation = Activation::Softmax;
};

struct NetArch {
  int input_dim = 0;
  int hidden_dim = 32;
  int latent_dim = 16;
  std::map<std::string, HeadSpec> heads;

  static NetArch classifier(int input_dim, int n_classes, int hidden = 32,
                            int latent = 16);
};

struct Affine {
  MatrixXd w;  // out x in
  VectorXd b;  // out
};

struct ForwardCache {
  MatrixXd x, h1_pre, h1, h2_pre, h2, z;
};

// Two hidden ReLU layers into a linear latent, plus named affine heads.
// Gradients are hand-derived; see the backprop helpers below.
class FeedForwardNet {
 public:
  FeedForwardNet() = default;
  FeedForwardNet(const NetArch& arch, Rng& rng);

  const NetArch& arch() const { return arch_; }

  MatrixXd features(const MatrixXd& x) const;  // phi(x), n x latent_dim
  ForwardCache features_cached(const MatrixXd& x) const;
  MatrixXd head_logits(const MatrixXd& z, const std::string& head) const;
  // Softmax or sigmoid applied according to the head spec.
  MatrixXd forward(const MatrixXd& x, const std::string& head) const;
  MatrixXd head_output(const MatrixXd& z, const std::string& head) const;

  std::size_t param_count() const;
  VectorXd flatten() const;
  void set_flat(const VectorXd& params);

  const Affine& head(const std::string& name) const;
  Affine& head(const std::string& name);
  const std::vector<Affine>& extractor() const { return extractor_; }
  std::vector<Affine>& extractor() { return extractor_; }
  bool has_head(const std::string& name) const { return heads_.count(name) > 0; }
  std::vector<std::string> head_names() const;

 private:
  NetArch arch_;
  std::vector<Affine> extractor_;  // input->hidden, hidden->hidden, hidden->latent
  std::map<std::string, Affine> heads_;
};

// Gradient accumulator shaped like the net.
struct NetGrads {
  std::vector<Affine> extractor;
  std::map<std::string, Affine> heads;

  explicit NetGrads(const FeedForwardNet& net);
  void add_scaled(const NetGrads& other, double scale);
  VectorXd flatten(const FeedForwardNet& net) const;
};

// Accumulates head gradients for upstream logit gradient dT and returns the
// gradient w.r.t. the latent rows.
MatrixXd head_backward(const FeedForwardNet& net, const std::string& head,
                       const MatrixXd& z, const MatrixXd& d_logits, NetGrads& grads);

// Accumulates extractor gradients for upstream latent gradient dZ.
void extractor_backward(const FeedForwardNet& net, const ForwardCache& cache,
                        const MatrixXd& dz, NetGrads& grads);

// Identical forward values to features(); callers flip the sign and scale of
// the latent gradient before extractor_backward to realize the reversal.
MatrixXd grad_reversal_forward(const FeedForwardNet& net, const MatrixXd& x);

MatrixXd softmax_rows(const MatrixXd& logits);
double cce_loss(const MatrixXd& probs, const MatrixXd& onehot);
// d(cce)/d(logits) for softmax heads: (probs - onehot) / n.
MatrixXd cce_grad_logits(const MatrixXd& probs, const MatrixXd& onehot);
double bce_loss(const MatrixXd& probs, const VectorXd& targets);
MatrixXd bce_grad_logits(const MatrixXd& probs, const VectorXd& targets);

struct TrainConfig {
  double lr = 0.05;
  int batch_size = 64;
  int epochs = 300;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // full-batch loss per epoch (post-update)
};

// Plain minibatch SGD on softmax cross-entropy for the given head.
TrainResult train_erm(FeedForwardNet& net, const LabeledDataset& ds,
                      const TrainConfig& cfg, const std::string& head = "main");

double accuracy(const FeedForwardNet& net, const LabeledDataset& ds,
                const std::string& head = "main");
double accuracy(const FeedForwardNet& net, const MatrixXd& x, const VectorXi& labels,
                const std::string& head = "main");

// Versioned JSON checkpoint: architecture descriptor plus the flat parameter
// vector. Round-trips exactly.
void save_checkpoint(const FeedForwardNet& net, const std::string& path);
FeedForwardNet load_checkpoint(const std::string& path);

void sgd_step(FeedForwardNet& net, const NetGrads& grads, double lr,
              double weight_decay);

}  // namespace cdfd::nn
