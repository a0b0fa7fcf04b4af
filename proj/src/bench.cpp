#include "cdfd/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include "cdfd/data.hpp"
#include "cdfd/deep.hpp"
#include "cdfd/divergences.hpp"
#include "cdfd/msda.hpp"
#include "cdfd/nn.hpp"
#include "cdfd/ot.hpp"
#include "cdfd/shallow.hpp"
#include "json.hpp"

namespace cdfd::bench {

namespace {

using nlohmann::json;

const std::set<std::string> kSingleSource = {"tca", "otda", "jdot",
                                             "mmd", "dann", "deepjdot"};
const std::set<std::string> kMultiSource = {"wbt",     "wjdot", "dadil_r",
                                            "dadil_e", "m3sda", "m3sda_beta"};

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

bool is_single_source_method(const std::string& name) {
  return kSingleSource.count(name) > 0;
}

bool is_multi_source_method(const std::string& name) {
  return kMultiSource.count(name) > 0;
}

SplitIndices split_indices(int n, double fraction, Rng& rng) {
  if (n < 2) throw InvalidArgument("split_indices: need at least two samples");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw InvalidArgument("split_indices: fraction must be in (0, 1)");
  }
  const std::vector<int> perm = rng.permutation(n);
  int n_train = static_cast<int>(std::lround(fraction * n));
  n_train = std::clamp(n_train, 1, n - 1);
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.test.assign(perm.begin() + n_train, perm.end());
  return s;
}

LabeledDataset take_subset(const LabeledDataset& ds, const std::vector<int>& idx) {
  MatrixXd x(static_cast<Eigen::Index>(idx.size()), ds.feature_dim());
  VectorXi y(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = ds.features.row(idx[i]);
    y[static_cast<Eigen::Index>(i)] = ds.labels[idx[i]];
  }
  return LabeledDataset(std::move(x), std::move(y), ds.class_count, ds.domain_id);
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw IoError(std::string("config: parse error: ") + e.what());
  }

  ExperimentConfig cfg;
  const json& ds = j.at("dataset");
  const std::string type = ds.at("type").get<std::string>();
  if (type == "synthetic") {
    cfg.dataset.type = DatasetSource::Type::Synthetic;
    if (ds.contains("spec")) {
      cfg.dataset.synthetic_spec_json = ds["spec"].dump();
    } else if (ds.contains("spec_path")) {
      cfg.dataset.path = ds["spec_path"].get<std::string>();
    } else {
      throw IoError("config: synthetic dataset needs 'spec' or 'spec_path'");
    }
    cfg.dataset.n_per_mode = ds.value("n_per_mode", 150);
  } else if (type == "te_csv") {
    cfg.dataset.type = DatasetSource::Type::TeCsv;
    cfg.dataset.path = ds.at("dir").get<std::string>();
  } else {
    throw IoError("config: unknown dataset type '" + type + "'");
  }

  const std::string protocol = j.value("protocol", "pairwise");
  if (protocol == "pairwise") {
    cfg.protocol = Protocol::Pairwise;
  } else if (protocol == "multi_source" || protocol == "multi") {
    cfg.protocol = Protocol::MultiSource;
  } else {
    throw IoError("config: unknown protocol '" + protocol + "'");
  }

  if (j.contains("methods")) {
    for (const auto& m : j["methods"]) {
      const std::string name = m.get<std::string>();
      if (!is_single_source_method(name) && !is_multi_source_method(name)) {
        throw IoError("config: unknown method '" + name + "'");
      }
      cfg.methods.push_back(name);
    }
  }
  cfg.method_configs_json = j.value("method_configs", json::object()).dump();
  if (j.contains("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : j["seeds"]) cfg.seeds.push_back(s.get<std::uint64_t>());
  }
  if (cfg.seeds.empty()) throw IoError("config: need at least one seed");
  cfg.split_fraction = j.value("split_fraction", 0.7);
  if (!(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0)) {
    throw IoError("config: split_fraction must be in (0, 1)");
  }
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.jobs = j.value("jobs", 1);
  cfg.diagnostics = j.value("diagnostics", true);
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

namespace {

// Supplies the per-seed domain list. Synthetic data is redrawn per seed;
// ingested data is fixed and only the splits vary.
struct DomainProvider {
  DatasetSource source;
  std::vector<data::ModeSpec> specs;
  std::shared_ptr<const std::vector<LabeledDataset>> ingested;
  std::vector<std::string> names;

  static DomainProvider make(const DatasetSource& src) {
    DomainProvider p;
    p.source = src;
    if (src.type == DatasetSource::Type::Synthetic) {
      p.specs = src.synthetic_spec_json.empty()
                    ? data::load_synthetic_spec_file(src.path)
                    : data::load_synthetic_spec(src.synthetic_spec_json);
      for (std::size_t m = 0; m < p.specs.size(); ++m) {
        p.names.push_back("mode" + std::to_string(m + 1));
      }
    } else {
      Rng rng(fnv1a("te-ingest"));
      auto ingest = data::te_mode_datasets(src.path, rng);
      if (ingest.datasets.empty()) throw IoError("bench: no usable runs in " + src.path);
      auto owned = std::make_shared<std::vector<LabeledDataset>>(std::move(ingest.datasets));
      p.ingested = owned;
      for (const auto& d : *owned) p.names.push_back(d.domain_id);
    }
    return p;
  }

  std::shared_ptr<const std::vector<LabeledDataset>> domains(std::uint64_t seed) const {
    if (source.type == DatasetSource::Type::TeCsv) return ingested;
    Rng rng = Rng(seed).split(fnv1a("dataset"));
    return std::make_shared<const std::vector<LabeledDataset>>(
        data::gen_synthetic_modes(specs, source.n_per_mode, rng));
  }
};

struct Cell {
  std::string method;
  std::vector<int> source_ids;
  int target_id = 0;
  std::uint64_t seed = 0;
};

LabeledDataset merge_datasets(const std::vector<LabeledDataset>& parts) {
  int rows = 0;
  for (const auto& p : parts) rows += p.rows();
  MatrixXd x(rows, parts[0].feature_dim());
  VectorXi y(rows);
  int at = 0;
  for (const auto& p : parts) {
    x.middleRows(at, p.rows()) = p.features;
    y.segment(at, p.rows()) = p.labels;
    at += p.rows();
  }
  return LabeledDataset(std::move(x), std::move(y), parts[0].class_count, "concat");
}

struct MethodParams {
  json extra = json::object();  // method-specific knobs
  int hidden = 32;
  int latent = 16;
  double lr = 0.05;
  int epochs = 300;
  int batch = 64;
  double weight_decay = 1e-4;

  nn::TrainConfig train(std::uint64_t seed) const {
    nn::TrainConfig t;
    t.lr = lr;
    t.epochs = epochs;
    t.batch_size = batch;
    t.weight_decay = weight_decay;
    t.seed = seed;
    return t;
  }
  nn::NetArch arch(int input_dim, int n_classes) const {
    return nn::NetArch::classifier(input_dim, n_classes, hidden, latent);
  }
  double num(const std::string& key, double fallback) const {
    return extra.value(key, fallback);
  }
  int integer(const std::string& key, int fallback) const {
    return extra.value(key, fallback);
  }
};

MethodParams resolve_params(const json& method_cfgs, const std::string& method) {
  MethodParams p;
  auto apply = [&](const json& j) {
    p.hidden = j.value("hidden", p.hidden);
    p.latent = j.value("latent", p.latent);
    p.lr = j.value("lr", p.lr);
    p.epochs = j.value("epochs", p.epochs);
    p.batch = j.value("batch", p.batch);
    p.weight_decay = j.value("weight_decay", p.weight_decay);
  };
  if (method_cfgs.contains("classifier")) apply(method_cfgs["classifier"]);
  if (method_cfgs.contains(method)) {
    apply(method_cfgs[method]);
    p.extra = method_cfgs[method];
  }
  return p;
}

ot::SolverSpec solver_from(const MethodParams& p) {
  if (p.extra.value("solver", std::string("exact")) == "sinkhorn") {
    return ot::SolverSpec::sinkhorn(p.num("epsilon", 0.0));
  }
  return ot::SolverSpec::exact();
}

double labeled_accuracy(const MatrixXd& probs, const VectorXi& labels) {
  int correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (argmax_row(probs.row(i)) == labels[i]) ++correct;
  }
  return probs.rows() ? static_cast<double>(correct) / probs.rows() : 0.0;
}

Record run_cell(const Cell& cell, const ExperimentConfig& cfg,
                const DomainProvider& provider, const json& method_cfgs) {
  Record rec;
  rec.method = cell.method;
  rec.target = provider.names[static_cast<std::size_t>(cell.target_id)];
  for (const int s : cell.source_ids) {
    rec.sources.push_back(provider.names[static_cast<std::size_t>(s)]);
  }
  rec.seed = cell.seed;

  const auto started = std::chrono::steady_clock::now();
  try {
    const auto domains = provider.domains(cell.seed);

    auto split_of = [&](int id) {
      const LabeledDataset& ds = (*domains)[static_cast<std::size_t>(id)];
      Rng rng = Rng(cell.seed).split(fnv1a("split|" + ds.domain_id));
      return split_indices(ds.rows(), cfg.split_fraction, rng);
    };

    std::vector<LabeledDataset> source_train;
    for (const int id : cell.source_ids) {
      source_train.push_back(
          take_subset((*domains)[static_cast<std::size_t>(id)], split_of(id).train));
    }
    const SplitIndices tgt_split = split_of(cell.target_id);
    const LabeledDataset& target_full = (*domains)[static_cast<std::size_t>(cell.target_id)];
    const LabeledDataset target_train = take_subset(target_full, tgt_split.train);
    const LabeledDataset target_test = take_subset(target_full, tgt_split.test);
    const MatrixXd& target_x = target_train.features;  // unlabeled adaptation pool

    const std::uint64_t cell_seed =
        fnv1a(cell.method + "|" + rec.target + "|" + join(rec.sources, "+") + "|" +
              std::to_string(cell.seed));
    const MethodParams params = resolve_params(method_cfgs, cell.method);
    const int n_c = target_full.class_count;
    const int d = target_full.feature_dim();

    const bool wants_sources = cell.method != "target_only";
    LabeledDataset merged;
    if (wants_sources) merged = merge_datasets(source_train);

    if (cfg.diagnostics && wants_sources) {
      rec.diagnostics["mmd_pre"] =
          div::mmd(merged.features, target_x, div::KernelSpec::linear());
    }

    auto eval_net = [&](const nn::FeedForwardNet& net) {
      return nn::accuracy(net, target_test);
    };
    auto train_plain = [&](const LabeledDataset& ds) {
      Rng nrng(cell_seed);
      nn::FeedForwardNet net(params.arch(ds.feature_dim(), n_c), nrng);
      nn::train_erm(net, ds, params.train(cell_seed));
      return net;
    };

    if (cell.method == "source_only") {
      rec.accuracy = eval_net(train_plain(merged));
      if (cfg.diagnostics) {
        Rng hrng = Rng(cell_seed).split(fnv1a("dh"));
        rec.diagnostics["dh_proxy_pre"] =
            div::h_distance(merged.features, target_x, {}, 0.5, hrng).proxy_a;
      }
    } else if (cell.method == "target_only") {
      rec.accuracy = eval_net(train_plain(target_train));
    } else if (cell.method == "tca") {
      const double mu = params.num("mu", 1.0);
      const int comps = params.integer("components", 8);
      div::KernelSpec kernel = div::KernelSpec::linear();
      if (params.extra.value("kernel", std::string("linear")) == "rbf") {
        const double sigma = params.num("sigma", 0.0);
        kernel = div::KernelSpec::rbf(
            sigma > 0.0 ? sigma : div::median_heuristic_sigma(merged.features, target_x));
      }
      // Large joints are subsampled for the eigenproblem; everything else is
      // projected through the kernel extension.
      const int max_fit = params.integer("max_fit", 2000);
      MatrixXd fit_src = merged.features;
      MatrixXd fit_tgt = target_x;
      const int total = merged.rows() + static_cast<int>(target_x.rows());
      if (total > max_fit) {
        Rng srng = Rng(cell_seed).split(fnv1a("tca-subsample"));
        const double keep = static_cast<double>(max_fit) / total;
        const auto pick = [&](const MatrixXd& m) {
          const int want = std::max(2, static_cast<int>(std::lround(keep * m.rows())));
          const auto idx = srng.sample_without_replacement(static_cast<int>(m.rows()),
                                                           std::min<int>(want, m.rows()));
          MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
          for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
          return out;
        };
        fit_src = pick(merged.features);
        fit_tgt = pick(target_x);
      }
      const shallow::TcaModel model = shallow::tca_fit(fit_src, fit_tgt, kernel, mu, comps);
      const MatrixXd src_proj = shallow::tca_transform(model, merged.features, true);
      const MatrixXd test_proj = shallow::tca_transform(model, target_test.features, true);
      LabeledDataset proj_ds(src_proj, merged.labels, n_c, "tca");
      Rng nrng(cell_seed);
      nn::FeedForwardNet net(params.arch(model.effective_dim, n_c), nrng);
      nn::train_erm(net, proj_ds, params.train(cell_seed));
      rec.accuracy = nn::accuracy(net, test_proj, target_test.labels);
    } else if (cell.method == "otda") {
      const LabeledDataset adapted = shallow::otda_adapt(merged, target_x, solver_from(params));
      rec.accuracy = eval_net(train_plain(adapted));
      if (cfg.diagnostics) {
        rec.diagnostics["mmd_post"] =
            div::mmd(adapted.features, target_x, div::KernelSpec::linear());
      }
    } else if (cell.method == "jdot" || cell.method == "wjdot") {
      shallow::JdotConfig jcfg;
      jcfg.feature_weight = params.num("feature_weight", 1.0);
      jcfg.label_weight = params.num("label_weight", 1.0);
      jcfg.outer_iters = params.integer("outer_iters", 10);
      jcfg.inner_epochs = params.integer("inner_epochs", 20);
      jcfg.warm_start_epochs = params.integer("warm_start_epochs", 50);
      jcfg.train = params.train(cell_seed);
      if (cell.method == "jdot") {
        const shallow::JdotResult fit =
            shallow::jdot_fit(merged, target_x, jcfg, params.arch(d, n_c));
        rec.accuracy = eval_net(fit.net);
      } else {
        const msda::WjdotResult fit =
            msda::wjdot_fit(source_train, target_x, jcfg, params.arch(d, n_c));
        rec.accuracy = eval_net(fit.model.net);
      }
    } else if (cell.method == "mmd" || cell.method == "dann" || cell.method == "deepjdot") {
      deep::DeepDaConfig dcfg;
      dcfg.train = params.train(cell_seed);
      dcfg.lambda = params.num("lambda", 1.0);
      dcfg.lambda_rev = params.num("lambda_rev", 1.0);
      dcfg.feature_weight = params.num("feature_weight", 1.0);
      dcfg.label_weight = params.num("label_weight", 1.0);
      if (params.extra.value("kernel", std::string("rbf")) == "linear") {
        dcfg.kernel = div::KernelSpec::linear();
        dcfg.median_sigma = false;
      }
      if (cell.method == "mmd") {
        rec.accuracy = eval_net(
            deep::mmdnet_fit(merged, target_x, dcfg, params.arch(d, n_c)).net);
      } else if (cell.method == "dann") {
        rec.accuracy = eval_net(
            deep::dann_fit(merged, target_x, dcfg, params.arch(d, n_c)).net);
      } else {
        rec.accuracy = eval_net(
            deep::deepjdot_fit(merged, target_x, dcfg, params.arch(d, n_c)).net);
      }
    } else if (cell.method == "wbt") {
      msda::WbtConfig wcfg;
      wcfg.beta = params.num("beta", 1.0);
      wcfg.n_support = params.integer("n_support", 0);
      wcfg.barycenter.max_iter = params.integer("max_iter", 20);
      wcfg.train = params.train(cell_seed);
      wcfg.arch.hidden_dim = params.hidden;
      wcfg.arch.latent_dim = params.latent;
      Rng wrng(cell_seed);
      const msda::WbtResult fit = msda::wbt_fit(source_train, target_x, wcfg, wrng);
      rec.accuracy = eval_net(fit.classifier);
      if (cfg.diagnostics) {
        rec.diagnostics["mmd_post"] =
            div::mmd(fit.transported.features, target_x, div::KernelSpec::linear());
      }
    } else if (cell.method == "dadil_r" || cell.method == "dadil_e") {
      msda::DadilConfig dcfg;
      dcfg.n_atoms = params.integer("n_atoms", 0);
      dcfg.atom_size = params.integer("atom_size", 0);
      dcfg.beta = params.num("beta", 1.0);
      dcfg.iterations = params.integer("iterations", 50);
      Rng drng(cell_seed);
      const msda::DadilResult fit = msda::dadil_fit(source_train, target_x, dcfg, drng);
      if (cell.method == "dadil_r") {
        const LabeledDataset recon = msda::dadil_r_transform(fit.dictionary, dcfg.beta);
        rec.accuracy = eval_net(train_plain(recon));
        if (cfg.diagnostics) {
          rec.diagnostics["mmd_post"] =
              div::mmd(recon.features, target_x, div::KernelSpec::linear());
        }
      } else {
        const auto atomic = msda::train_atomic_classifiers(
            fit.dictionary, params.arch(d, n_c), params.train(cell_seed));
        rec.accuracy = labeled_accuracy(
            msda::dadil_e_predict(fit.dictionary, atomic, target_test.features),
            target_test.labels);
      }
    } else if (cell.method == "m3sda" || cell.method == "m3sda_beta") {
      deep::DeepDaConfig dcfg;
      dcfg.train = params.train(cell_seed);
      dcfg.lambda = params.num("lambda", 1.0);
      dcfg.moment_orders = params.integer("moment_orders", 2);
      const deep::M3sdaResult fit =
          deep::m3sda_fit(source_train, target_x, dcfg, cell.method == "m3sda_beta",
                          params.arch(d, n_c));
      rec.accuracy = labeled_accuracy(
          deep::m3sda_predict(fit.net, target_test.features, fit.weights),
          target_test.labels);
    } else {
      throw InvalidArgument("bench: unknown method '" + cell.method + "'");
    }
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.error = e.what();
    rec.accuracy = 0.0;
  }
  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

ExperimentReport run_protocol(const ExperimentConfig& cfg, bool include_methods) {
  const DomainProvider provider = DomainProvider::make(cfg.dataset);
  const int n_domains = static_cast<int>(provider.names.size());
  if (n_domains < 1) throw InvalidArgument("bench: no domains");

  json method_cfgs;
  try {
    method_cfgs = json::parse(cfg.method_configs_json);
  } catch (const json::exception& e) {
    throw IoError(std::string("bench: bad method_configs: ") + e.what());
  }

  std::vector<std::string> methods = include_methods ? cfg.methods : std::vector<std::string>{};
  if (cfg.protocol == Protocol::Pairwise) {
    for (const auto& m : methods) {
      if (!is_single_source_method(m)) {
        throw InvalidArgument("bench: method '" + m + "' is not single-source; use the multi_source protocol");
      }
    }
    if (!methods.empty() && n_domains < 2) {
      throw InvalidArgument("bench: pairwise adaptation needs at least two domains");
    }
  } else {
    if (n_domains < 3) {
      throw InvalidArgument("bench: the multi_source protocol needs at least three domains");
    }
  }

  std::vector<Cell> cells;
  for (const std::uint64_t seed : cfg.seeds) {
    if (cfg.protocol == Protocol::Pairwise) {
      for (int j = 0; j < n_domains; ++j) {
        cells.push_back({"target_only", {j}, j, seed});
        for (int i = 0; i < n_domains; ++i) {
          if (i == j) continue;
          cells.push_back({"source_only", {i}, j, seed});
          for (const auto& m : methods) cells.push_back({m, {i}, j, seed});
        }
      }
    } else {
      for (int j = 0; j < n_domains; ++j) {
        std::vector<int> sources;
        for (int i = 0; i < n_domains; ++i) {
          if (i != j) sources.push_back(i);
        }
        cells.push_back({"target_only", {j}, j, seed});
        cells.push_back({"source_only", sources, j, seed});
        for (const auto& m : methods) cells.push_back({m, sources, j, seed});
      }
    }
  }

  std::vector<Record> records(cells.size());
  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      records[i] = run_cell(cells[i], cfg, provider, method_cfgs);
    }
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= cells.size()) break;
        records[i] = run_cell(cells[i], cfg, provider, method_cfgs);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ExperimentReport report;
  report.protocol = cfg.protocol;
  report.domains = provider.names;
  report.records = std::move(records);

  json header;
  header["evaluation"] = "held_out_target_test_split";
  header["split_fraction"] = cfg.split_fraction;
  header["seeds"] = cfg.seeds;
  header["protocol"] = cfg.protocol == Protocol::Pairwise ? "pairwise" : "multi_source";
  header["methods"] = methods;
  header["classifier_note"] =
      "small feed-forward networks on fixed-length feature vectors";
  if (cfg.dataset.type == DatasetSource::Type::Synthetic) {
    header["dataset"] = {{"type", "synthetic"}, {"n_per_mode", cfg.dataset.n_per_mode}};
  } else {
    header["dataset"] = {{"type", "te_csv"}, {"dir", cfg.dataset.path}};
  }
  report.header_json = header.dump();
  return report;
}

}  // namespace

ExperimentReport run_baselines(const ExperimentConfig& cfg) {
  return run_protocol(cfg, false);
}

ExperimentReport run_pairwise(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.protocol = Protocol::Pairwise;
  return run_protocol(c, true);
}

ExperimentReport run_multi_source(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.protocol = Protocol::MultiSource;
  return run_protocol(c, true);
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  ExperimentReport report = cfg.protocol == Protocol::Pairwise ? run_pairwise(cfg)
                                                               : run_multi_source(cfg);
  emit_report(report, cfg.out_dir, "all");
  return report;
}

std::vector<Aggregate> ExperimentReport::aggregates() const {
  std::map<std::pair<std::string, std::string>, std::vector<double>> ok;
  std::map<std::pair<std::string, std::string>, int> failed;
  std::set<std::string> methods;
  for (const auto& r : records) {
    methods.insert(r.method);
    if (r.status == "ok") {
      ok[{r.method, r.target}].push_back(r.accuracy);
      ok[{r.method, "*"}].push_back(r.accuracy);
    } else {
      failed[{r.method, r.target}]++;
      failed[{r.method, "*"}]++;
    }
  }
  std::vector<Aggregate> out;
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& [k, _] : ok) keys.insert(k);
  for (const auto& [k, _] : failed) keys.insert(k);
  for (const auto& key : keys) {
    Aggregate a;
    a.method = key.first;
    a.target = key.second;
    const auto it = ok.find(key);
    if (it != ok.end() && !it->second.empty()) {
      const auto& v = it->second;
      a.runs = static_cast<int>(v.size());
      double mean = 0.0;
      for (const double x : v) mean += x;
      mean /= v.size();
      double var = 0.0;
      for (const double x : v) var += (x - mean) * (x - mean);
      a.mean = mean;
      a.stddev = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
    }
    const auto fit = failed.find(key);
    if (fit != failed.end()) a.failed = fit->second;
    out.push_back(a);
  }
  return out;
}

double ExperimentReport::mean_accuracy(const std::string& method) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : records) {
    if (r.method == method && r.status == "ok") {
      sum += r.accuracy;
      ++n;
    }
  }
  if (n == 0) throw InvalidArgument("mean_accuracy: no records for " + method);
  return sum / n;
}

double ExperimentReport::mean_accuracy(const std::string& method,
                                       const std::string& target) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : records) {
    if (r.method == method && r.target == target && r.status == "ok") {
      sum += r.accuracy;
      ++n;
    }
  }
  if (n == 0) {
    throw InvalidArgument("mean_accuracy: no records for " + method + "/" + target);
  }
  return sum / n;
}

namespace {

json record_to_json(const Record& r) {
  json j;
  j["method"] = r.method;
  j["sources"] = r.sources;
  j["target"] = r.target;
  j["seed"] = r.seed;
  j["accuracy"] = r.accuracy;
  j["status"] = r.status;
  if (!r.error.empty()) j["error"] = r.error;
  if (!r.diagnostics.empty()) j["diagnostics"] = r.diagnostics;
  return j;
}

std::vector<const Record*> sorted_records(const ExperimentReport& report) {
  std::vector<const Record*> out;
  for (const auto& r : report.records) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](const Record* a, const Record* b) {
    const auto key = [](const Record* r) {
      return std::tie(r->method, r->target, r->sources, r->seed);
    };
    return key(a) < key(b);
  });
  return out;
}

// Mean accuracy over seeds for one (method, source-set, target) cell; empty
// if every run failed or the cell is absent.
std::string cell_mean(const ExperimentReport& report, const std::string& method,
                      const std::string& source, const std::string& target) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : report.records) {
    if (r.method != method || r.target != target || r.status != "ok") continue;
    if (!source.empty() && (r.sources.size() != 1 || r.sources[0] != source)) continue;
    sum += r.accuracy;
    ++n;
  }
  return n ? format_double(sum / n) : std::string();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("emit_report: cannot open " + path);
  out << content;
  if (!out) throw IoError("emit_report: write failed for " + path);
}

std::string pairwise_matrix_csv(const ExperimentReport& report, const std::string& method,
                                bool delta_vs_source_only) {
  std::ostringstream out;
  out << "source\\target";
  for (const auto& t : report.domains) out << ',' << t;
  out << '\n';
  for (const auto& s : report.domains) {
    out << s;
    for (const auto& t : report.domains) {
      out << ',';
      if (s == t) {
        if (method == "baselines") out << cell_mean(report, "target_only", t, t);
        continue;
      }
      const std::string m = method == "baselines" ? "source_only" : method;
      const std::string value = cell_mean(report, m, s, t);
      if (value.empty()) continue;
      if (delta_vs_source_only) {
        const std::string base = cell_mean(report, "source_only", s, t);
        if (base.empty()) continue;
        out << format_double(std::stod(value) - std::stod(base));
      } else {
        out << value;
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string multi_matrix_csv(const ExperimentReport& report) {
  std::vector<std::string> methods;
  std::set<std::string> seen;
  for (const auto* r : sorted_records(report)) {
    if (seen.insert(r->method).second) methods.push_back(r->method);
  }
  std::sort(methods.begin(), methods.end());
  std::ostringstream out;
  out << "method\\target";
  for (const auto& t : report.domains) out << ',' << t;
  out << ",mean\n";
  for (const auto& m : methods) {
    out << m;
    double sum = 0.0;
    int n = 0;
    for (const auto& t : report.domains) {
      out << ',';
      const std::string value = cell_mean(report, m, "", t);
      if (!value.empty()) {
        out << value;
        sum += std::stod(value);
        ++n;
      }
    }
    out << ',';
    if (n) out << format_double(sum / n);
    out << '\n';
  }
  return out.str();
}

}  // namespace

void emit_report(const ExperimentReport& report, const std::string& out_dir,
                 const std::string& format) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("emit_report: cannot create " + out_dir);

  const bool want_json = format == "json" || format == "all";
  const bool want_csv = format == "csv" || format == "all";
  if (!want_json && !want_csv) {
    throw InvalidArgument("emit_report: format must be csv, json, or all");
  }

  if (want_json) {
    json j;
    j["format"] = "cdfd-report";
    j["version"] = 1;
    j["protocol"] = report.protocol == Protocol::Pairwise ? "pairwise" : "multi_source";
    j["header"] = json::parse(report.header_json);
    j["domains"] = report.domains;
    json recs = json::array();
    for (const auto* r : sorted_records(report)) recs.push_back(record_to_json(*r));
    j["records"] = recs;
    json aggs = json::array();
    for (const auto& a : report.aggregates()) {
      aggs.push_back({{"method", a.method},
                      {"target", a.target},
                      {"mean", a.mean},
                      {"stddev", a.stddev},
                      {"runs", a.runs},
                      {"failed", a.failed}});
    }
    j["aggregates"] = aggs;
    write_file((fs::path(out_dir) / "report.json").string(), j.dump(2) + "\n");
  }

  if (want_csv) {
    if (report.protocol == Protocol::Pairwise) {
      write_file((fs::path(out_dir) / "matrix_baselines.csv").string(),
                 pairwise_matrix_csv(report, "baselines", false));
      std::set<std::string> methods;
      for (const auto& r : report.records) {
        if (r.method != "source_only" && r.method != "target_only") {
          methods.insert(r.method);
        }
      }
      for (const auto& m : methods) {
        write_file((fs::path(out_dir) / ("matrix_" + m + ".csv")).string(),
                   pairwise_matrix_csv(report, m, false));
        write_file((fs::path(out_dir) / ("matrix_" + m + "_delta.csv")).string(),
                   pairwise_matrix_csv(report, m, true));
      }
    } else {
      write_file((fs::path(out_dir) / "matrix_methods.csv").string(),
                 multi_matrix_csv(report));
    }
  }

  if (format == "all") {
    json t;
    t["format"] = "cdfd-timings";
    json recs = json::array();
    for (const auto* r : sorted_records(report)) {
      recs.push_back({{"method", r->method},
                      {"target", r->target},
                      {"sources", r->sources},
                      {"seed", r->seed},
                      {"wall_time_s", r->wall_time_s}});
    }
    t["records"] = recs;
    write_file((fs::path(out_dir) / "timings.json").string(), t.dump(2) + "\n");
  }
}

ExperimentReport load_report(const std::string& dir_or_file) {
  namespace fs = std::filesystem;
  fs::path path(dir_or_file);
  if (fs::is_directory(path)) path /= "report.json";
  std::ifstream in(path);
  if (!in) throw IoError("load_report: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("load_report: parse error: ") + e.what());
  }
  if (j.value("format", "") != "cdfd-report" || j.value("version", 0) != 1) {
    throw IoError("load_report: unrecognized report format");
  }
  ExperimentReport report;
  report.protocol = j.value("protocol", "pairwise") == "multi_source"
                        ? Protocol::MultiSource
                        : Protocol::Pairwise;
  report.header_json = j["header"].dump();
  report.domains = j["domains"].get<std::vector<std::string>>();
  for (const auto& rj : j["records"]) {
    Record r;
    r.method = rj["method"].get<std::string>();
    r.sources = rj["sources"].get<std::vector<std::string>>();
    r.target = rj["target"].get<std::string>();
    r.seed = rj["seed"].get<std::uint64_t>();
    r.accuracy = rj["accuracy"].get<double>();
    r.status = rj["status"].get<std::string>();
    r.error = rj.value("error", "");
    if (rj.contains("diagnostics")) {
      r.diagnostics = rj["diagnostics"].get<std::map<std::string, double>>();
    }
    report.records.push_back(std::move(r));
  }
  return report;
}

}  // namespace cdfd::bench
