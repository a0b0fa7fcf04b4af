#include "cdfd/msda.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace cdfd::msda {

namespace {

void check_sources(const std::vector<LabeledDataset>& sources) {
  if (sources.empty()) throw InvalidArgument("msda: no source domains");
  const int d = sources[0].feature_dim();
  const int n_c = sources[0].class_count;
  for (const auto& s : sources) {
    if (s.rows() == 0) throw InvalidArgument("msda: empty source domain");
    if (s.feature_dim() != d || s.class_count != n_c) {
      throw InvalidArgument("msda: sources disagree on dimensions");
    }
  }
}

}  // namespace

WbtResult wbt_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                  const WbtConfig& cfg, Rng& rng) {
  check_sources(sources);
  if (target.rows() == 0) throw InvalidArgument("wbt_fit: empty target");
  const int d = sources[0].feature_dim();
  const int n_c = sources[0].class_count;
  if (target.cols() != d) throw InvalidArgument("wbt_fit: target dimension mismatch");

  int n_support = cfg.n_support;
  if (n_support <= 0) {
    n_support = sources[0].rows();
    for (const auto& s : sources) n_support = std::min(n_support, s.rows());
  }

  std::vector<LabeledEmpirical> dists;
  dists.reserve(sources.size());
  for (const auto& s : sources) dists.push_back(LabeledEmpirical::from_dataset(s));

  WbtResult result;
  ot::BarycenterConfig bcfg = cfg.barycenter;
  result.barycenter = ot::free_support_barycenter(
      dists, SimplexWeights::uniform(static_cast<int>(sources.size())), cfg.beta,
      n_support, rng, bcfg);

  const LabeledEmpirical& bary = result.barycenter.barycenter;
  const ot::CostMatrix c = ot::cost_matrix(bary.support, target);
  const VectorXd tgt_w = VectorXd::Constant(target.rows(), 1.0 / target.rows());
  const ot::TransportPlan plan = ot::solve_ot(bary.weights, tgt_w, c, cfg.solver);

  result.transported = LabeledDataset(ot::barycentric_map(plan, target),
                                      argmax_labels(bary.soft_labels), n_c, "wbt");

  nn::NetArch arch = cfg.arch;
  if (arch.input_dim == 0) arch = nn::NetArch::classifier(d, n_c, arch.hidden_dim, arch.latent_dim);
  Rng crng = rng.split(0xC1A55);
  result.classifier = nn::FeedForwardNet(arch, crng);
  nn::train_erm(result.classifier, result.transported, cfg.train);
  return result;
}

WjdotResult wjdot_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const shallow::JdotConfig& cfg, const nn::NetArch& arch) {
  check_sources(sources);
  std::vector<const LabeledDataset*> ptrs;
  ptrs.reserve(sources.size());
  for (const auto& s : sources) ptrs.push_back(&s);
  shallow::JdotResult fit = shallow::jdot_alternation(ptrs, target, cfg, arch, true);
  WjdotResult result;
  result.model.alpha = fit.alpha;
  result.model.net = std::move(fit.net);
  result.objective_trace = std::move(fit.objective_trace);
  return result;
}

MatrixXd pseudo_label_target(const std::vector<LabeledDataset>& sources,
                             const MatrixXd& target, const ot::SolverSpec& solver) {
  check_sources(sources);
  if (target.rows() == 0) throw InvalidArgument("pseudo_label_target: empty target");
  const int n_c = sources[0].class_count;
  const VectorXd tgt_w = VectorXd::Constant(target.rows(), 1.0 / target.rows());

  MatrixXd soft = MatrixXd::Zero(target.rows(), n_c);
  for (const auto& s : sources) {
    const ot::CostMatrix c = ot::cost_matrix(s.features, target);
    const VectorXd src_w = VectorXd::Constant(s.rows(), 1.0 / s.rows());
    const ot::TransportPlan plan = ot::solve_ot(src_w, tgt_w, c, solver);
    MatrixXd mapped = plan.values.transpose() * s.one_hot();  // n_t x n_c
    for (Eigen::Index j = 0; j < mapped.rows(); ++j) {
      const double mass = mapped.row(j).sum();
      if (mass > 0.0) mapped.row(j) /= mass;
    }
    soft += mapped;
  }
  soft /= static_cast<double>(sources.size());
  return soft;
}

DadilResult dadil_fit(const std::vector<LabeledDataset>& sources, const MatrixXd& target,
                      const DadilConfig& cfg, Rng& rng) {
  check_sources(sources);
  if (target.rows() == 0) throw InvalidArgument("dadil_fit: empty target");
  const int d = sources[0].feature_dim();
  const int n_c = sources[0].class_count;
  if (target.cols() != d) throw InvalidArgument("dadil_fit: target dimension mismatch");

  // Domains: the sources plus the pseudo-labeled target as the (N+1)-th.
  std::vector<LabeledEmpirical> domains;
  domains.reserve(sources.size() + 1);
  for (const auto& s : sources) domains.push_back(LabeledEmpirical::from_dataset(s));
  {
    LabeledEmpirical tgt;
    tgt.support = target;
    tgt.soft_labels = pseudo_label_target(sources, target, cfg.solver);
    tgt.weights = VectorXd::Constant(target.rows(), 1.0 / target.rows());
    domains.push_back(std::move(tgt));
  }
  const int n_domains = static_cast<int>(domains.size());

  const int k_atoms = cfg.n_atoms > 0 ? cfg.n_atoms : static_cast<int>(sources.size());
  int total = 0;
  for (const auto& dom : domains) total += dom.size();
  if (k_atoms < 1) throw InvalidArgument("dadil_fit: need at least one atom");
  if (k_atoms > total) throw InvalidArgument("dadil_fit: more atoms than samples");
  int atom_size = cfg.atom_size;
  if (atom_size <= 0) {
    atom_size = domains[0].size();
    for (const auto& dom : domains) atom_size = std::min(atom_size, dom.size());
  }
  if (atom_size < n_c) throw InvalidArgument("dadil_fit: atom size below class count");

  DadilResult result;
  auto& dict = result.dictionary;
  for (int k = 0; k < k_atoms; ++k) {
    Rng arng = rng.split(0xA700 + static_cast<std::uint64_t>(k));
    dict.atoms.push_back(ot::stratified_subsample(domains, atom_size, arng));
  }
  dict.weights.assign(static_cast<std::size_t>(n_domains), SimplexWeights::uniform(k_atoms));

  // Warm-started per-domain barycenter supports.
  std::vector<MatrixXd> bary_x(n_domains), bary_y(n_domains);

  ot::BarycenterConfig bary_cfg;
  bary_cfg.max_iter = cfg.barycenter_inner_iters;
  bary_cfg.tol = 0.0;  // run all inner iterations

  auto reconstruct = [&](int dom_idx, Rng& brng) {
    ot::BarycenterConfig c = bary_cfg;
    if (bary_x[dom_idx].size() > 0) {
      c.init_support = bary_x[dom_idx];
      c.init_labels = bary_y[dom_idx];
    }
    ot::BarycenterResult bc = ot::free_support_barycenter(
        dict.atoms, dict.weights[static_cast<std::size_t>(dom_idx)], cfg.beta, atom_size,
        brng, c);
    bary_x[dom_idx] = bc.barycenter.support;
    bary_y[dom_idx] = bc.barycenter.soft_labels;
    return bc;
  };

  const double inv_domains = 1.0 / static_cast<double>(n_domains);
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    double loss = 0.0;
    std::vector<MatrixXd> atom_num_x(k_atoms, MatrixXd::Zero(atom_size, d));
    std::vector<MatrixXd> atom_num_y(k_atoms, MatrixXd::Zero(atom_size, n_c));
    std::vector<double> atom_den(k_atoms, 0.0);

    for (int l = 0; l < n_domains; ++l) {
      Rng brng = rng.split(0xB000 + static_cast<std::uint64_t>(iter * n_domains + l));
      const ot::BarycenterResult bc = reconstruct(l, brng);
      const auto& dom = domains[static_cast<std::size_t>(l)];

      const ot::CostMatrix c = ot::soft_labeled_cost_matrix(
          bary_x[l], bary_y[l], dom.support, dom.soft_labels, cfg.beta);
      const VectorXd bw = VectorXd::Constant(atom_size, 1.0 / atom_size);
      const ot::TransportPlan pi = ot::solve_ot(bw, dom.weights, c, cfg.solver);
      loss += inv_domains * pi.cost(c.values);

      // Where each barycenter point wants to move, pulled back to the atoms
      // through the barycenter plans.
      const MatrixXd disp_x = ot::barycentric_map(pi, dom.support);
      const MatrixXd disp_y = ot::barycentric_map(pi, dom.soft_labels);
      const auto& alpha = dict.weights[static_cast<std::size_t>(l)];
      for (int k = 0; k < k_atoms; ++k) {
        if (alpha[k] <= 0.0) continue;
        const auto& gamma = bc.plans[static_cast<std::size_t>(k)];
        if (gamma.values.size() == 0) continue;
        // Columns of gamma address atom points; each column sums to the
        // uniform atom mass.
        MatrixXd pulled_x = gamma.values.transpose() * disp_x;
        MatrixXd pulled_y = gamma.values.transpose() * disp_y;
        for (Eigen::Index r = 0; r < pulled_x.rows(); ++r) {
          const double mass = gamma.values.col(r).sum();
          if (mass > 0.0) {
            pulled_x.row(r) /= mass;
            pulled_y.row(r) /= mass;
          }
        }
        atom_num_x[static_cast<std::size_t>(k)] += alpha[k] * pulled_x;
        atom_num_y[static_cast<std::size_t>(k)] += alpha[k] * pulled_y;
        atom_den[static_cast<std::size_t>(k)] += alpha[k];
      }
    }
    result.loss_trace.push_back(loss);

    for (int k = 0; k < k_atoms; ++k) {
      if (atom_den[static_cast<std::size_t>(k)] <= 1e-12) continue;
      auto& atom = dict.atoms[static_cast<std::size_t>(k)];
      const MatrixXd tx = atom_num_x[static_cast<std::size_t>(k)] / atom_den[static_cast<std::size_t>(k)];
      const MatrixXd ty = atom_num_y[static_cast<std::size_t>(k)] / atom_den[static_cast<std::size_t>(k)];
      atom.support += cfg.atom_step * (tx - atom.support);
      MatrixXd y = atom.soft_labels + cfg.atom_step * (ty - atom.soft_labels);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        y.row(r) = project_to_simplex(y.row(r).transpose()).transpose();
      }
      atom.soft_labels = std::move(y);
    }

    // Mirror-descent weight update from atom-to-domain transport costs.
    for (int l = 0; l < n_domains; ++l) {
      const auto& dom = domains[static_cast<std::size_t>(l)];
      VectorXd g(k_atoms);
      for (int k = 0; k < k_atoms; ++k) {
        const auto& atom = dict.atoms[static_cast<std::size_t>(k)];
        const ot::CostMatrix c = ot::soft_labeled_cost_matrix(
            atom.support, atom.soft_labels, dom.support, dom.soft_labels, cfg.beta);
        g[k] = ot::solve_ot(atom.weights, dom.weights, c, cfg.solver).cost(c.values);
      }
      const double scale = std::max(g.cwiseAbs().mean(), 1e-12);
      VectorXd w = dict.weights[static_cast<std::size_t>(l)].values.array() *
                   (-cfg.weight_step * g.array() / scale).exp();
      const double total_w = w.sum();
      if (total_w > 0.0) {
        dict.weights[static_cast<std::size_t>(l)] = SimplexWeights(w / total_w);
      }
    }
  }

  // Final loss at the fitted dictionary.
  double final_loss = 0.0;
  for (int l = 0; l < n_domains; ++l) {
    Rng brng = rng.split(0xBFFF + static_cast<std::uint64_t>(l));
    reconstruct(l, brng);
    const auto& dom = domains[static_cast<std::size_t>(l)];
    const ot::CostMatrix c = ot::soft_labeled_cost_matrix(
        bary_x[l], bary_y[l], dom.support, dom.soft_labels, cfg.beta);
    const VectorXd bw = VectorXd::Constant(atom_size, 1.0 / atom_size);
    final_loss += inv_domains * ot::solve_ot(bw, dom.weights, c, cfg.solver).cost(c.values);
  }
  result.loss_trace.push_back(final_loss);
  return result;
}

LabeledDataset dadil_r_transform(const Dictionary& dict, double beta,
                                 const ot::BarycenterConfig& cfg) {
  if (dict.atoms.empty()) throw InvalidArgument("dadil_r_transform: empty dictionary");
  const SimplexWeights& alpha = dict.target_weights();
  const int n_c = dict.atoms[0].class_count();

  // A one-hot coordinate reconstructs the atom itself.
  for (int k = 0; k < alpha.size(); ++k) {
    if (alpha[k] >= 1.0 - 1e-12) {
      const auto& atom = dict.atoms[static_cast<std::size_t>(k)];
      return LabeledDataset(atom.support, argmax_labels(atom.soft_labels), n_c, "dadil-r");
    }
  }

  Rng rng(0xDAD1);
  const ot::BarycenterResult bc = ot::free_support_barycenter(
      dict.atoms, alpha, beta, dict.atoms[0].size(), rng, cfg);
  return LabeledDataset(bc.barycenter.support, argmax_labels(bc.barycenter.soft_labels),
                        n_c, "dadil-r");
}

std::vector<nn::FeedForwardNet> train_atomic_classifiers(const Dictionary& dict,
                                                         const nn::NetArch& arch,
                                                         const nn::TrainConfig& cfg) {
  std::vector<nn::FeedForwardNet> nets;
  for (std::size_t k = 0; k < dict.atoms.size(); ++k) {
    const auto& atom = dict.atoms[k];
    LabeledDataset ds(atom.support, argmax_labels(atom.soft_labels), atom.class_count(),
                      "atom" + std::to_string(k));
    nn::TrainConfig c = cfg;
    c.seed = Rng(cfg.seed).split(0xAC0 + k).seed();
    Rng nrng(c.seed);
    nn::FeedForwardNet net(
        nn::NetArch::classifier(atom.dim(), atom.class_count(), arch.hidden_dim,
                                arch.latent_dim),
        nrng);
    nn::train_erm(net, ds, c);
    nets.push_back(std::move(net));
  }
  return nets;
}

MatrixXd dadil_e_predict(const Dictionary& dict,
                         const std::vector<nn::FeedForwardNet>& atomic,
                         const MatrixXd& x) {
  if (atomic.size() != dict.atoms.size()) {
    throw InvalidArgument("dadil_e_predict: classifier count does not match atoms");
  }
  const SimplexWeights& alpha = dict.target_weights();
  MatrixXd out;
  for (std::size_t k = 0; k < atomic.size(); ++k) {
    const MatrixXd p = alpha[static_cast<int>(k)] * atomic[k].forward(x, "main");
    if (out.size() == 0) {
      out = p;
    } else {
      out += p;
    }
  }
  return out;
}

namespace {

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return MatrixXd(0, 0);
  MatrixXd m(static_cast<Eigen::Index>(rows.size()),
             static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw IoError("dictionary: ragged matrix");
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
  }
  return m;
}

}  // namespace

void save_dictionary(const Dictionary& dict, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cdfd-dictionary";
  j["version"] = 1;
  nlohmann::json atoms = nlohmann::json::array();
  for (const auto& atom : dict.atoms) {
    atoms.push_back({{"support", matrix_to_json(atom.support)},
                     {"soft_labels", matrix_to_json(atom.soft_labels)}});
  }
  j["atoms"] = atoms;
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& w : dict.weights) {
    weights.push_back(std::vector<double>(w.values.begin(), w.values.end()));
  }
  j["weights"] = weights;

  std::ofstream out(path);
  if (!out) throw IoError("save_dictionary: cannot open " + path);
  out << j.dump();
  if (!out) throw IoError("save_dictionary: write failed for " + path);
}

Dictionary load_dictionary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dictionary: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dictionary: parse error: " + std::string(e.what()));
  }
  if (j.value("format", "") != "cdfd-dictionary" || j.value("version", 0) != 1) {
    throw IoError("load_dictionary: unrecognized dictionary format");
  }
  Dictionary dict;
  for (const auto& atom : j["atoms"]) {
    LabeledEmpirical e;
    e.support = matrix_from_json(atom["support"]);
    e.soft_labels = matrix_from_json(atom["soft_labels"]);
    e.weights = VectorXd::Constant(e.support.rows(), 1.0 / e.support.rows());
    dict.atoms.push_back(std::move(e));
  }
  for (const auto& w : j["weights"]) {
    const auto vals = w.get<std::vector<double>>();
    dict.weights.emplace_back(
        Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  }
  return dict;
}

}  // namespace cdfd::msda
