#pragma once

#include <vector>

#include "cdfd/core.hpp"
#include "cdfd/divergences.hpp"
#include "cdfd/nn.hpp"
#include "cdfd/ot.hpp"

namespace cdfd::deep {

struct DeepDaConfig {
  double lambda = 1.0;  // weight on the adaptation loss
  nn::TrainConfig train;
  // mmd-net
  div::KernelSpec kernel = div::KernelSpec::rbf(1.0);
  bool median_sigma = true;  // refresh the rbf bandwidth from each batch
  // dann
  double lambda_rev = 1.0;
  // deepjdot
  double feature_weight = 1.0;
  double label_weight = 1.0;
  double epsilon = 0.0;  // > 0 solves batch plans with sinkhorn instead
  // m3sda
  int moment_orders = 2;
  bool literal_pair_multiplier = false;  // multiply the pairwise term by C(N,2)
};

// Loss-and-gradient entry points. The training loops call these, and the
// finite-difference tests call the same code, so the checked gradient is the
// trained one.

double cce_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& x,
                     const MatrixXd& onehot, const std::string& head,
                     nn::NetGrads& grads);

// MMD between latent batches, differentiated through the extractor.
double mmd_latent_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                            const MatrixXd& xt, const div::KernelSpec& kernel,
                            nn::NetGrads& grads);

struct DannLosses {
  double class_loss = 0.0;
  double domain_loss = 0.0;
};

// Class CCE on the source plus domain BCE on both batches. The domain head
// receives its own descent gradient while the extractor receives the domain
// gradient scaled by -lambda_rev (gradient reversal).
DannLosses dann_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                          const MatrixXd& onehot_s, const MatrixXd& xt,
                          double lambda_rev, nn::NetGrads& grads);

// Batch transport term: gamma-weighted feature distance between latents plus
// the classifier loss on transported labels, with the plan held constant.
double deepjdot_loss_grad(const nn::FeedForwardNet& net, const MatrixXd& xs,
                          const MatrixXd& onehot_s, const MatrixXd& xt,
                          const DeepDaConfig& cfg, nn::NetGrads& grads,
                          ot::TransportPlan* plan_out = nullptr);

// Moment alignment penalties on latent batch means, orders 1..moment_orders.
// Returns omega_src_tgt + omega_src_src.
double m3sda_omega_grad(const nn::FeedForwardNet& net,
                        const std::vector<MatrixXd>& source_batches,
                        const MatrixXd& xt, const DeepDaConfig& cfg,
                        nn::NetGrads& grads);

struct MmdnetResult {
  nn::FeedForwardNet net;
  std::vector<double> loss_trace;  // per-epoch full-batch combined loss
  double mmd_pre = 0.0;
  double mmd_post = 0.0;
};

MmdnetResult mmdnet_fit(const LabeledDataset& source, const MatrixXd& target,
                        const DeepDaConfig& cfg, const nn::NetArch& arch);

struct DannResult {
  nn::FeedForwardNet net;
  std::vector<double> loss_trace;
  double domain_accuracy = 0.0;  // holdout domain classification at the end
};

DannResult dann_fit(const LabeledDataset& source, const MatrixXd& target,
                    const DeepDaConfig& cfg, const nn::NetArch& arch);

struct DeepJdotResult {
  nn::FeedForwardNet net;
  std::vector<double> loss_trace;
};

DeepJdotResult deepjdot_fit(const LabeledDataset& source, const MatrixXd& target,
                            const DeepDaConfig& cfg, const nn::NetArch& arch);

struct M3sdaResult {
  nn::FeedForwardNet net;  // heads h0..h{N-1} (+ p0..p{N-1} for the beta variant)
  VectorXd weights;        // per-source prediction weights from holdout accuracy
  bool uniform_weight_fallback = false;
  std::vector<double> loss_trace;
  std::vector<double> omega_trace;
};

M3sdaResult m3sda_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const DeepDaConfig& cfg, bool beta_variant,
                      const nn::NetArch& base_arch);

// Weighted combination of the per-source class heads.
MatrixXd m3sda_predict(const nn::FeedForwardNet& net, const MatrixXd& x,
                       const VectorXd& weights);

}  // namespace cdfd::deep
