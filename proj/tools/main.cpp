#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sprune/convergence.hpp"
#include "sprune/estimators.hpp"
#include "sprune/io.hpp"
#include "sprune/trainer.hpp"

namespace fs = std::filesystem;
using namespace sprune;

namespace {

// exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataOpts {
  std::string kind = "blobs";
  std::string data_dir;
  std::string split = "train";
  int limit = 0;
  int classes = 4;
  int dim = 16;
  int per_class = 500;
  std::uint64_t data_seed = 7;
};

void add_data_flags(CLI::App* cmd, DataOpts& d) {
  cmd->add_option("--dataset", d.kind, "dataset kind: mnist or blobs");
  cmd->add_option("--data-dir", d.data_dir,
                  "directory with the IDX files (default: $" +
                      std::string(kDataDirEnv) + ")");
  cmd->add_option("--limit", d.limit, "truncate the training set to N samples");
  cmd->add_option("--classes", d.classes, "blob classes");
  cmd->add_option("--dim", d.dim, "blob dimensionality");
  cmd->add_option("--per-class", d.per_class, "blob samples per class");
  cmd->add_option("--data-seed", d.data_seed, "blob generator seed");
}

Dataset truncate(Dataset ds, int limit) {
  if (limit > 0 && limit < ds.size()) {
    ds.x = ds.x.leftCols(limit).eval();
    ds.y = ds.y.leftCols(limit).eval();
  }
  return ds;
}

std::pair<Dataset, Dataset> load_data(const DataOpts& d) {
  if (d.kind == "blobs") {
    int test_per_class = std::max(1, d.per_class / 4);
    Dataset all =
        synth_blobs(d.classes, d.dim, d.per_class + test_per_class,
                    d.data_seed);
    int n_train = d.classes * d.per_class;
    Dataset train{all.x.leftCols(n_train), all.y.leftCols(n_train)};
    Dataset test{all.x.rightCols(all.size() - n_train),
                 all.y.rightCols(all.size() - n_train)};
    return {truncate(std::move(train), d.limit), std::move(test)};
  }
  if (d.kind != "mnist") {
    throw std::invalid_argument("unknown dataset kind: " + d.kind);
  }
  std::string dir = d.data_dir;
  if (dir.empty()) {
    const char* env = std::getenv(kDataDirEnv);
    if (!env) {
      throw DataError(std::string("no --data-dir and $") + kDataDirEnv +
                      " unset");
    }
    dir = env;
  }
  try {
    Dataset train = load_idx(dir + "/train-images-idx3-ubyte",
                             dir + "/train-labels-idx1-ubyte");
    Dataset test = load_idx(dir + "/t10k-images-idx3-ubyte",
                            dir + "/t10k-labels-idx1-ubyte");
    return {truncate(std::move(train), d.limit), std::move(test)};
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
}

void add_train_flags(CLI::App* cmd, TrainConfig& c, std::string& config_file,
                     std::string& prior_family, double& gamma, double& alpha,
                     double& beta, std::string& estimator,
                     std::string& schedule) {
  cmd->add_option("--config", config_file, "JSON config file");
  cmd->add_option("--lambda", c.lambda, "weight decay strength");
  cmd->add_option("--batch-size", c.batch_size);
  cmd->add_option("--lr", c.lr, "learning rate");
  cmd->add_option("--schedule", schedule, "adam | robbins-monro | constant");
  cmd->add_option("--rm-tau", c.rm_tau);
  cmd->add_option("--estimator", estimator,
                  "taylor | concrete | sampling | hybrid");
  cmd->add_option("--temperature", c.concrete_temperature);
  cmd->add_option("--top-k", c.hybrid_top_k);
  cmd->add_option("--prior", prior_family, "flattening | beta");
  cmd->add_option("--gamma", gamma, "flattening prior gamma");
  cmd->add_option("--alpha", alpha, "beta prior alpha");
  cmd->add_option("--beta", beta, "beta prior beta");
  cmd->add_option("--eps1", c.clip.eps1);
  cmd->add_option("--eps2", c.clip.eps2);
  cmd->add_option("--theta0", c.theta0);
  cmd->add_option("--theta-lo", c.theta_lo);
  cmd->add_option("--theta-hi", c.theta_hi);
  cmd->add_option("--theta-tol", c.theta_tol);
  cmd->add_option("--theta-per", c.theta_per);
  cmd->add_option("--drop-after", c.drop_after);
  cmd->add_option("--phi-max", c.phi_max);
  cmd->add_option("--epochs", c.epochs);
  cmd->add_option("--fine-tune-epochs", c.fine_tune_epochs);
  cmd->add_option("--fine-tune-lr", c.fine_tune_lr);
  cmd->add_option("--input-threshold", c.input_threshold);
  cmd->add_option("--seed", c.seed);
}

TrainConfig merge_config(const CLI::App* cmd, TrainConfig flags,
                         const std::string& config_file,
                         const std::string& prior_family, double gamma,
                         double alpha, double beta,
                         const std::string& estimator,
                         const std::string& schedule) {
  TrainConfig c = flags;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) {
      throw DataError("cannot open config file " + config_file);
    }
    nlohmann::json j = nlohmann::json::parse(in);
    TrainConfig from_file = config_from_json(j);
    // flag > file > default: start from the file, reapply given flags
    c = from_file;
    TrainConfig defaults;
    auto seen = [&](const std::string& name) {
      return cmd->count("--" + name) > 0;
    };
    if (seen("lambda")) c.lambda = flags.lambda;
    if (seen("batch-size")) c.batch_size = flags.batch_size;
    if (seen("lr")) c.lr = flags.lr;
    if (seen("rm-tau")) c.rm_tau = flags.rm_tau;
    if (seen("temperature")) c.concrete_temperature = flags.concrete_temperature;
    if (seen("top-k")) c.hybrid_top_k = flags.hybrid_top_k;
    if (seen("eps1")) c.clip.eps1 = flags.clip.eps1;
    if (seen("eps2")) c.clip.eps2 = flags.clip.eps2;
    if (seen("theta0")) c.theta0 = flags.theta0;
    if (seen("theta-lo")) c.theta_lo = flags.theta_lo;
    if (seen("theta-hi")) c.theta_hi = flags.theta_hi;
    if (seen("theta-tol")) c.theta_tol = flags.theta_tol;
    if (seen("theta-per")) c.theta_per = flags.theta_per;
    if (seen("drop-after")) c.drop_after = flags.drop_after;
    if (seen("phi-max")) c.phi_max = flags.phi_max;
    if (seen("epochs")) c.epochs = flags.epochs;
    if (seen("fine-tune-epochs")) c.fine_tune_epochs = flags.fine_tune_epochs;
    if (seen("fine-tune-lr")) c.fine_tune_lr = flags.fine_tune_lr;
    if (seen("input-threshold")) c.input_threshold = flags.input_threshold;
    if (seen("seed")) c.seed = flags.seed;
  }
  if (cmd->count("--schedule") || config_file.empty()) {
    if (schedule == "adam") {
      c.schedule = ScheduleKind::Adam;
    } else if (schedule == "robbins-monro") {
      c.schedule = ScheduleKind::RobbinsMonro;
    } else if (schedule == "constant") {
      c.schedule = ScheduleKind::Constant;
    } else {
      throw std::invalid_argument("unknown schedule: " + schedule);
    }
  }
  if (cmd->count("--estimator") || config_file.empty()) {
    if (estimator == "taylor") {
      c.estimator = EstimatorKind::Taylor;
    } else if (estimator == "concrete") {
      c.estimator = EstimatorKind::Concrete;
    } else if (estimator == "sampling") {
      c.estimator = EstimatorKind::Sampling;
    } else if (estimator == "hybrid") {
      c.estimator = EstimatorKind::Hybrid;
    } else {
      throw std::invalid_argument("unknown estimator: " + estimator);
    }
  }
  bool prior_flag = cmd->count("--prior") || cmd->count("--gamma") ||
                    cmd->count("--alpha") || cmd->count("--beta");
  if (prior_flag || config_file.empty()) {
    if (prior_family == "flattening") {
      c.prior = FlatteningPrior{gamma};
    } else if (prior_family == "beta") {
      c.prior = BetaPrior{alpha, beta};
    } else {
      throw std::invalid_argument("unknown prior family: " + prior_family);
    }
  }
  return c;
}

int cmd_train(const CLI::App* cmd, const TrainConfig& flags,
              const std::string& config_file, const std::string& prior_family,
              double gamma, double alpha, double beta,
              const std::string& estimator, const std::string& schedule,
              const DataOpts& data_opts, const std::vector<int>& hidden,
              bool lenet, const std::string& out_dir) {
  TrainConfig cfg = merge_config(cmd, flags, config_file, prior_family, gamma,
                                 alpha, beta, estimator, schedule);
  auto [train_set, test_set] = load_data(data_opts);

  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/config.json");
    out << config_to_json(cfg).dump(2) << "\n";
  }

  Network net;
  int outputs = static_cast<int>(train_set.y.rows());
  Rng init_rng(cfg.seed);
  if (lenet) {
    net = make_lenet(1, 28, 28, 6, 16, 120, outputs,
                     {LossKind::Type::CategoricalCe, 1.0});
  } else {
    net = make_mlp(static_cast<int>(train_set.x.rows()), hidden, outputs,
                   {LossKind::Type::CategoricalCe, 1.0});
  }
  glorot_init(net, init_rng);

  Trainer trainer(std::move(net), cfg);
  std::vector<UnitId> initial_units = gated_unit_ids(trainer.net());
  std::vector<std::vector<std::pair<UnitId, double>>> snapshots;
  std::vector<MetricsRow> rows;
  for (int e = 1; e <= cfg.epochs; ++e) {
    MetricsRow row = trainer.run_epoch(train_set, test_set, e);
    snapshots.push_back(trainer.theta_snapshot());
    rows.push_back(row);
    std::cout << "epoch " << row.epoch << " loss " << row.train_loss
              << " acc " << row.accuracy << " alive " << row.alive_units
              << " pruned% " << row.prune_percent << "\n";
  }
  emit_metrics(out_dir + "/metrics.csv", rows);
  emit_theta_trajectory(out_dir + "/theta_trajectory.csv", snapshots,
                        initial_units);
  save_checkpoint(out_dir + "/checkpoint_main.bin", trainer);

  Network final_net = trainer.finalize();
  save_checkpoint(out_dir + "/checkpoint_finalized.bin",
                  Trainer(final_net, cfg));
  EvalResult before = evaluate(final_net, test_set);
  fine_tune(final_net, train_set, cfg, trainer.rng());
  EvalResult after = evaluate(final_net, test_set);
  save_checkpoint(out_dir + "/checkpoint_final.bin",
                  Trainer(final_net, cfg));

  double ratio =
      pruning_ratio(final_net, trainer.initial_weights(), cfg.input_threshold);
  std::cout << "finalized accuracy " << before.accuracy
            << " fine-tuned accuracy " << after.accuracy << " pruning% "
            << ratio << "\n";
  for (std::size_t l = 0; l < final_net.layers.size(); ++l) {
    int units = final_net.layer_units(static_cast<int>(l));
    if (units > 0) {
      std::cout << "layer " << l << " units " << units << "\n";
    }
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const DataOpts& data_opts) {
  Trainer trainer = load_checkpoint(checkpoint);
  auto [train_set, test_set] = load_data(data_opts);
  const Dataset& ds = data_opts.split == "train" ? train_set : test_set;
  EvalResult r = evaluate(trainer.net(), trainer.gates(), ds);
  std::cout << "loss " << r.loss << " accuracy " << r.accuracy << "\n";
  return 0;
}

int cmd_ode_lab(int p, int q, double lambda, double eta, double kappa,
                double eps1, double gamma, int starts, double dt, double t_end,
                std::uint64_t seed, const std::string& out_path) {
  UnitDynamics dyn;
  Rng rng(seed);
  dyn.m1.resize(q, p);
  dyn.m2.resize(p, q);
  for (Eigen::Index i = 0; i < dyn.m1.size(); ++i) {
    dyn.m1.data()[i] = rng.normal();
  }
  for (Eigen::Index i = 0; i < dyn.m2.size(); ++i) {
    dyn.m2.data()[i] = rng.normal();
  }
  Eigen::JacobiSVD<Matrix> svd(dyn.m1 + dyn.m2.transpose());
  double top = svd.singularValues()(0);
  if (top > 0.0 && eta > 0.0) {
    double s = eta / top;
    dyn.m1 *= s;
    dyn.m2 *= s;
  }
  dyn.lambda = lambda;
  dyn.prior = FlatteningPrior{gamma};
  dyn.clip.eps1 = eps1;
  dyn.diff_fn = [kappa](const Vector& wf, const Vector& wb, double) {
    return kappa * 0.5 * (wf.squaredNorm() + wb.squaredNorm());
  };
  if (dt <= 0.0) {
    dt = std::min(1e-2, 0.1 / lambda);
  }

  std::ofstream out(out_path);
  if (!out) {
    throw DataError("cannot write " + out_path);
  }
  out << "trajectory,t,norm_wf,norm_wb,theta,V\n";
  out.precision(17);
  double radius = lambda / (eta + kappa) - eps1;
  if (radius <= 0.0) {
    throw std::invalid_argument("empty region: lambda/(eta+kappa) <= eps1");
  }
  for (int s = 0; s < starts; ++s) {
    UnitState x0;
    do {
      x0.w_f.resize(q);
      x0.w_b.resize(p);
      for (int i = 0; i < q; ++i) {
        x0.w_f(i) = radius * (2.0 * rng.uniform() - 1.0);
      }
      for (int i = 0; i < p; ++i) {
        x0.w_b(i) = radius * (2.0 * rng.uniform() - 1.0);
      }
      x0.theta = std::clamp(eps1 + radius * (2.0 * rng.uniform() - 1.0),
                            dyn.theta_lo, dyn.theta_hi);
    } while (!roa_contains(x0, lambda, eta, kappa, eps1));
    auto traj = integrate(dyn, x0, dt, t_end);
    for (const auto& pt : traj) {
      out << s << ',' << pt.t << ',' << pt.state.w_f.norm() << ','
          << pt.state.w_b.norm() << ',' << pt.state.theta << ',' << pt.v
          << "\n";
    }
  }
  return 0;
}

int cmd_prior_curve(const std::string& family, double gamma, double alpha,
                    double beta, double eps1, double eps2, int points,
                    const std::string& out_path) {
  HyperPrior prior;
  if (family == "flattening") {
    prior = FlatteningPrior{gamma};
  } else if (family == "beta") {
    prior = BetaPrior{alpha, beta};
  } else {
    throw std::invalid_argument("unknown prior family: " + family);
  }
  ClipBounds cb{eps1, eps2};
  std::vector<double> grid;
  for (int i = 1; i < points; ++i) {
    grid.push_back(static_cast<double>(i) / points);
  }
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) {
      throw DataError("cannot write " + out_path);
    }
    out = &file;
  }
  *out << "theta,reg\n";
  out->precision(17);
  for (const auto& row : reg_curve(prior, cb, grid)) {
    *out << row.theta << ',' << row.reg << "\n";
  }
  return 0;
}

int cmd_estimator_bench(int in_dim, int units, int out_dim, int samples,
                        double temperature, int concrete_draws,
                        std::uint64_t seed) {
  if (units > 16) {
    throw std::invalid_argument("at most 16 gated units for the exact oracle");
  }
  Rng rng(seed);
  Network net = make_mlp(in_dim, {units}, out_dim,
                         {LossKind::Type::CategoricalCe, 1.0});
  glorot_init(net, rng);
  GateState gates = init_gates(net);
  Dataset data = synth_blobs(out_dim, in_dim,
                             std::max(1, samples / out_dim), seed + 1);

  double n_over_b = 1.0;
  GateSample ksi = sample_gates(net, gates, rng);
  GateDiff taylor = taylor_diff(net, data.x, data.y, ksi, n_over_b);
  GateDiff sampling = sampling_diff(net, gates, data.x, data.y, ksi, n_over_b);
  GateDiff brute = brute_force_diff(net, gates, data.x, data.y, n_over_b);
  GateDiff concrete;
  for (int d = 0; d < concrete_draws; ++d) {
    GateDiff one = concrete_diff(net, gates, data.x, data.y, n_over_b,
                                 temperature, rng);
    if (concrete.empty()) {
      concrete = std::move(one);
    } else {
      for (std::size_t l = 0; l < concrete.size(); ++l) {
        if (concrete[l].size() > 0) {
          concrete[l] += one[l];
        }
      }
    }
  }
  std::cout << "layer,unit,taylor,concrete,sampling,brute_force\n";
  std::cout.precision(17);
  for (UnitId id : gated_unit_ids(net)) {
    std::cout << id.layer << ',' << id.unit << ',' << taylor[id.layer](id.unit)
              << ',' << concrete[id.layer](id.unit) / concrete_draws << ','
              << sampling[id.layer](id.unit) << ','
              << brute[id.layer](id.unit) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured pruning by variational gate training"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train with gate learning");
  TrainConfig flags;
  std::string config_file, prior_family = "flattening", estimator = "taylor",
                           schedule = "adam";
  double gamma = 1e-2, alpha = 0.9, beta = 1e10;
  add_train_flags(train_cmd, flags, config_file, prior_family, gamma, alpha,
                  beta, estimator, schedule);
  DataOpts train_data;
  add_data_flags(train_cmd, train_data);
  std::vector<int> hidden = {300, 100};
  bool lenet = false;
  std::string out_dir = "out";
  train_cmd->add_option("--hidden", hidden, "hidden layer sizes");
  train_cmd->add_flag("--lenet", lenet, "use the conv architecture");
  train_cmd->add_option("--out", out_dir, "output directory");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  DataOpts eval_data;
  eval_data.split = "test";
  add_data_flags(eval_cmd, eval_data);
  eval_cmd->add_option("--split", eval_data.split, "train or test");

  // ode-lab
  auto* ode_cmd = app.add_subcommand("ode-lab", "single-unit dynamics sweep");
  int p = 4, q = 4, starts = 100;
  double lambda = 1.0, eta = 2.0, kappa = 1.0, eps1 = 0.05, ode_gamma = 0.5;
  double dt = 0.0, t_end = 50.0;
  std::uint64_t ode_seed = 1;
  std::string ode_out = "trajectories.csv";
  ode_cmd->add_option("--p", p, "fan-in dimension");
  ode_cmd->add_option("--q", q, "fan-out dimension");
  ode_cmd->add_option("--lambda", lambda);
  ode_cmd->add_option("--eta", eta);
  ode_cmd->add_option("--kappa", kappa);
  ode_cmd->add_option("--eps1", eps1);
  ode_cmd->add_option("--gamma", ode_gamma);
  ode_cmd->add_option("--starts", starts);
  ode_cmd->add_option("--dt", dt, "0 selects min(1e-2, 0.1/lambda)");
  ode_cmd->add_option("--t-end", t_end);
  ode_cmd->add_option("--seed", ode_seed);
  ode_cmd->add_option("--out", ode_out);

  // prior-curve
  auto* curve_cmd = app.add_subcommand(
      "prior-curve", "regularization term as a function of theta");
  std::string curve_family = "flattening";
  double curve_gamma = 1e-2, curve_alpha = 0.9, curve_beta = 1e10;
  double curve_eps1 = 1e-4, curve_eps2 = 1e-4;
  int curve_points = 1000;
  std::string curve_out;
  curve_cmd->add_option("--prior", curve_family, "flattening | beta");
  curve_cmd->add_option("--gamma", curve_gamma);
  curve_cmd->add_option("--alpha", curve_alpha);
  curve_cmd->add_option("--beta", curve_beta);
  curve_cmd->add_option("--eps1", curve_eps1);
  curve_cmd->add_option("--eps2", curve_eps2);
  curve_cmd->add_option("--points", curve_points);
  curve_cmd->add_option("--out", curve_out, "CSV path (default stdout)");

  // estimator-bench
  auto* bench_cmd = app.add_subcommand(
      "estimator-bench", "per-unit estimator comparison on a tiny net");
  int bench_in = 6, bench_units = 8, bench_out_dim = 3, bench_samples = 24;
  double bench_temp = 0.1;
  int bench_draws = 200;
  std::uint64_t bench_seed = 1;
  bench_cmd->add_option("--in-dim", bench_in);
  bench_cmd->add_option("--units", bench_units, "gated units (<= 16)");
  bench_cmd->add_option("--out-dim", bench_out_dim);
  bench_cmd->add_option("--samples", bench_samples);
  bench_cmd->add_option("--temperature", bench_temp);
  bench_cmd->add_option("--concrete-draws", bench_draws);
  bench_cmd->add_option("--seed", bench_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) {
      return cmd_train(train_cmd, flags, config_file, prior_family, gamma,
                       alpha, beta, estimator, schedule, train_data, hidden,
                       lenet, out_dir);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(checkpoint, eval_data);
    }
    if (ode_cmd->parsed()) {
      return cmd_ode_lab(p, q, lambda, eta, kappa, eps1, ode_gamma, starts,
                         dt, t_end, ode_seed, ode_out);
    }
    if (curve_cmd->parsed()) {
      return cmd_prior_curve(curve_family, curve_gamma, curve_alpha,
                             curve_beta, curve_eps1, curve_eps2, curve_points,
                             curve_out);
    }
    if (bench_cmd->parsed()) {
      return cmd_estimator_bench(bench_in, bench_units, bench_out_dim,
                                 bench_samples, bench_temp, bench_draws,
                                 bench_seed);
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
