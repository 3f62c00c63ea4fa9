#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sprune/convergence.hpp"
#include "sprune/estimators.hpp"
#include "sprune/io.hpp"
#include "sprune/trainer.hpp"

namespace py = pybind11;
using namespace sprune;

namespace {

// trainer plus the architecture bookkeeping the python surface needs
struct PyTrainer {
  PyTrainer(int input_size, std::vector<int> hidden, int outputs,
            TrainConfig cfg) {
    Network net = make_mlp(input_size, hidden, outputs,
                           {LossKind::Type::CategoricalCe, 1.0});
    Rng init_rng(cfg.seed);
    glorot_init(net, init_rng);
    trainer.emplace(std::move(net), std::move(cfg));
  }

  py::dict run_epoch(const Matrix& x, const Matrix& y, const Matrix& tx,
                     const Matrix& ty, int epoch) {
    Dataset train{x, y}, test{tx, ty};
    MetricsRow row = trainer->run_epoch(train, test, epoch);
    py::dict d;
    d["epoch"] = row.epoch;
    d["iteration"] = row.iteration;
    d["train_loss"] = row.train_loss;
    d["eval_loss"] = row.eval_loss;
    d["accuracy"] = row.accuracy;
    d["alive_units"] = row.alive_units;
    d["prune_percent"] = row.prune_percent;
    return d;
  }

  std::vector<int> hidden_sizes() const {
    std::vector<int> sizes;
    const Network& net = final_net ? *final_net : trainer->net();
    for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
      int u = net.layer_units(static_cast<int>(l));
      if (u > 0) {
        sizes.push_back(u);
      }
    }
    return sizes;
  }

  void finalize() { final_net = trainer->finalize(); }

  void fine_tune(const Matrix& x, const Matrix& y) {
    if (!final_net) {
      throw std::runtime_error("finalize() must run before fine_tune()");
    }
    Dataset train{x, y};
    sprune::fine_tune(*final_net, train, trainer->config(), trainer->rng());
  }

  py::tuple evaluate(const Matrix& x, const Matrix& y) const {
    Dataset ds{x, y};
    EvalResult r = final_net
                       ? sprune::evaluate(*final_net, ds)
                       : sprune::evaluate(trainer->net(), trainer->gates(), ds);
    return py::make_tuple(r.loss, r.accuracy);
  }

  double prune_percent() const {
    const Network& net = final_net ? *final_net : trainer->net();
    return pruning_ratio(net, trainer->initial_weights(),
                         trainer->config().input_threshold);
  }

  Matrix forward_deterministic(const Matrix& x) const {
    const Network& net = final_net ? *final_net : trainer->net();
    GateSample ksi = final_net ? GateSample(net.layers.size())
                               : all_ones_gates(net, trainer->gates());
    return forward(net, x, ksi).outputs;
  }

  std::optional<Trainer> trainer;
  std::optional<Network> final_net;
};

// opaque holder so the variant is passed around as one python object instead
// of being unpacked by the automatic variant conversion
struct PyPrior {
  HyperPrior value;
};

}  // namespace

PYBIND11_MODULE(_sprune, m) {
  m.doc() = "training-time structured pruning with stochastic unit gates";

  py::class_<PyPrior>(m, "Prior");
  m.def("flattening_prior",
        [](double gamma) { return PyPrior{FlatteningPrior{gamma}}; },
        py::arg("gamma"));
  m.def("beta_prior",
        [](double alpha, double beta) {
          return PyPrior{BetaPrior{alpha, beta}};
        },
        py::arg("alpha"), py::arg("beta"));

  m.def(
      "pi_star",
      [](const PyPrior& prior, double theta, double eps1, double eps2) {
        return pi_star(prior.value, {eps1, eps2}, theta);
      },
      py::arg("prior"), py::arg("theta"), py::arg("eps1") = 1e-4,
      py::arg("eps2") = 1e-4);
  m.def(
      "pi_star_numeric",
      [](const PyPrior& prior, double theta, double eps1, double eps2) {
        return pi_star_numeric(prior.value, {eps1, eps2}, theta);
      },
      py::arg("prior"), py::arg("theta"), py::arg("eps1") = 1e-4,
      py::arg("eps2") = 1e-4);
  m.def(
      "reg_term",
      [](const PyPrior& prior, double theta, double eps1, double eps2) {
        return reg_term(prior.value, {eps1, eps2}, theta);
      },
      py::arg("prior"), py::arg("theta"), py::arg("eps1") = 1e-4,
      py::arg("eps2") = 1e-4);
  m.def(
      "prior_pdf",
      [](const PyPrior& prior, double pi) { return pdf(prior.value, pi); },
      py::arg("prior"), py::arg("pi"));
  m.def(
      "gate_thresholds",
      [](const PyPrior& prior, double eps1, double eps2) {
        GateThresholds t = thresholds(prior.value, {eps1, eps2});
        return py::make_tuple(t.theta1, t.theta2);
      },
      py::arg("prior"), py::arg("eps1") = 1e-4, py::arg("eps2") = 1e-4);

  m.def(
      "synth_blobs",
      [](int classes, int dim, int n_per_class, std::uint64_t seed) {
        Dataset ds = synth_blobs(classes, dim, n_per_class, seed);
        return py::make_tuple(ds.x, ds.y);
      },
      py::arg("classes"), py::arg("dim"), py::arg("n_per_class"),
      py::arg("seed"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lam", &TrainConfig::lambda)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_property(
          "prior", [](const TrainConfig& c) { return PyPrior{c.prior}; },
          [](TrainConfig& c, const PyPrior& p) { c.prior = p.value; })
      .def_readwrite("theta0", &TrainConfig::theta0)
      .def_readwrite("theta_tol", &TrainConfig::theta_tol)
      .def_readwrite("theta_per", &TrainConfig::theta_per)
      .def_readwrite("drop_after", &TrainConfig::drop_after)
      .def_readwrite("phi_max", &TrainConfig::phi_max)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("fine_tune_epochs", &TrainConfig::fine_tune_epochs)
      .def_readwrite("fine_tune_lr", &TrainConfig::fine_tune_lr)
      .def_readwrite("input_threshold", &TrainConfig::input_threshold)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<PyTrainer>(m, "Trainer")
      .def(py::init<int, std::vector<int>, int, TrainConfig>(),
           py::arg("input_size"), py::arg("hidden"), py::arg("outputs"),
           py::arg("config"))
      .def("run_epoch", &PyTrainer::run_epoch, py::arg("x"), py::arg("y"),
           py::arg("test_x"), py::arg("test_y"), py::arg("epoch"))
      .def("hidden_sizes", &PyTrainer::hidden_sizes)
      .def("finalize", &PyTrainer::finalize)
      .def("fine_tune", &PyTrainer::fine_tune, py::arg("x"), py::arg("y"))
      .def("evaluate", &PyTrainer::evaluate, py::arg("x"), py::arg("y"))
      .def("prune_percent", &PyTrainer::prune_percent)
      .def("forward", &PyTrainer::forward_deterministic, py::arg("x"));

  m.def("stability_check", &stability_check, py::arg("lam"), py::arg("eta"),
        py::arg("kappa"), py::arg("eps1"));
  m.def(
      "lyapunov_v",
      [](const Vector& w_f, const Vector& w_b, double theta, double eps1) {
        return lyapunov_v({w_f, w_b, theta}, eps1);
      },
      py::arg("w_f"), py::arg("w_b"), py::arg("theta"), py::arg("eps1"));
}
