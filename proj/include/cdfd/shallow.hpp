#pragma once

#include <vector>

#include "cdfd/core.hpp"
#include "cdfd/divergences.hpp"
#include "cdfd/nn.hpp"
#include "cdfd/ot.hpp"

namespace cdfd::shallow {

// Transfer component analysis, fitted transductively on the joint
// source+target sample. Out-of-sample points require the kernel extension.
struct TcaModel {
  MatrixXd w;        // n x effective_dim
  MatrixXd joint;    // the n training points the kernel was built on
  div::KernelSpec kernel;
  double mu = 1.0;
  int requested_dim = 0;
  int effective_dim = 0;
  VectorXd eigenvalues;  // pencil eigenvalues of the retained columns
};

TcaModel tca_fit(const MatrixXd& source, const MatrixXd& target,
                 const div::KernelSpec& kernel, double mu, int n_components);

// Projects rows of x. Without allow_extension every row must be one of the
// training joint rows (bitwise); with it, kernel rows against the joint set
// extend the map to new points.
MatrixXd tca_transform(const TcaModel& model, const MatrixXd& x,
                       bool allow_extension = false);
MatrixXd tca_transform_joint(const TcaModel& model);

// OT domain adaptation: transport source samples onto the target support by
// the barycentric mapping; labels ride along.
LabeledDataset otda_adapt(const LabeledDataset& source, const MatrixXd& target,
                          const ot::SolverSpec& solver = ot::SolverSpec::exact());

struct JdotConfig {
  double feature_weight = 1.0;  // weight on the squared feature distance
  double label_weight = 1.0;    // weight on the classifier loss term
  int outer_iters = 10;
  int inner_epochs = 20;      // classifier steps per outer iteration
  int warm_start_epochs = 50;  // plain ERM epochs before alternating
  nn::TrainConfig train;
};

struct JdotResult {
  nn::FeedForwardNet net;
  SimplexWeights alpha;                 // source mixture weights (single entry for JDOT)
  std::vector<double> objective_trace;  // transport objective after each plan solve
  std::vector<int> reverted_iters;      // h-updates rolled back (objective guard)
};

// Alternating minimization over the plan, the classifier, and (optionally)
// the source mixture weights. JDOT is the single-source case; WJDOT layers
// the weight updates on top.
JdotResult jdot_alternation(const std::vector<const LabeledDataset*>& sources,
                            const MatrixXd& target, const JdotConfig& cfg,
                            const nn::NetArch& arch, bool update_alpha);

JdotResult jdot_fit(const LabeledDataset& source, const MatrixXd& target,
                    const JdotConfig& cfg, const nn::NetArch& arch);

}  // namespace cdfd::shallow
