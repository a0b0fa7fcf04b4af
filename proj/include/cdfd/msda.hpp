#pragma once

#include <string>
#include <vector>

#include "cdfd/core.hpp"
#include "cdfd/nn.hpp"
#include "cdfd/ot.hpp"
#include "cdfd/shallow.hpp"

namespace cdfd::msda {

struct WbtConfig {
  double beta = 1.0;
  int n_support = 0;  // <= 0 picks the smallest source size
  ot::SolverSpec solver = ot::SolverSpec::exact();
  ot::BarycenterConfig barycenter;
  nn::TrainConfig train;
  nn::NetArch arch;  // input_dim filled in by the fit when left at 0
};

struct WbtResult {
  LabeledDataset transported;  // barycenter pushed onto the target support
  nn::FeedForwardNet classifier;
  ot::BarycenterResult barycenter;
};

// Wasserstein barycenter transport: aggregate the sources into a barycenter,
// transport it onto the target support, train a classifier there.
WbtResult wbt_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                  const WbtConfig& cfg, Rng& rng);

struct WjdotModel {
  SimplexWeights alpha;
  nn::FeedForwardNet net;
};

struct WjdotResult {
  WjdotModel model;
  std::vector<double> objective_trace;
};

WjdotResult wjdot_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const shallow::JdotConfig& cfg, const nn::NetArch& arch);

// Transports every source's one-hot labels onto the target support and
// averages: each row is a distribution over classes.
MatrixXd pseudo_label_target(const std::vector<LabeledDataset>& sources,
                             const MatrixXd& target,
                             const ot::SolverSpec& solver = ot::SolverSpec::exact());

// Labeled atom distributions plus per-domain barycentric coordinates; the
// last weight vector is the target's by convention.
struct Dictionary {
  std::vector<LabeledEmpirical> atoms;
  std::vector<SimplexWeights> weights;  // N+1 entries

  int atom_count() const { return static_cast<int>(atoms.size()); }
  const SimplexWeights& target_weights() const { return weights.back(); }
};

struct DadilConfig {
  int n_atoms = 0;         // <= 0 picks one atom per source
  int atom_size = 0;       // <= 0 picks the smallest domain size
  double beta = 1.0;
  int iterations = 50;
  double atom_step = 0.5;
  double weight_step = 0.1;
  int barycenter_inner_iters = 5;
  ot::SolverSpec solver = ot::SolverSpec::exact();
};

struct DadilResult {
  Dictionary dictionary;
  std::vector<double> loss_trace;
};

DadilResult dadil_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const DadilConfig& cfg, Rng& rng);

// Barycenter reconstruction at the target coordinates; labels are the argmax
// of the reconstructed soft labels.
LabeledDataset dadil_r_transform(const Dictionary& dict, double beta = 1.0,
                                 const ot::BarycenterConfig& cfg = {});

std::vector<nn::FeedForwardNet> train_atomic_classifiers(const Dictionary& dict,
                                                         const nn::NetArch& arch,
                                                         const nn::TrainConfig& cfg);

// Weighted vote of the atomic classifiers with the target coordinates.
MatrixXd dadil_e_predict(const Dictionary& dict,
                         const std::vector<nn::FeedForwardNet>& atomic,
                         const MatrixXd& x);

void save_dictionary(const Dictionary& dict, const std::string& path);
Dictionary load_dictionary(const std::string& path);

}  // namespace cdfd::msda
