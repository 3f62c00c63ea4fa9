#pragma once

#include <cstdint>
#include <limits>
#include <string>

#include "sprune/estimators.hpp"
#include "sprune/hyper_prior.hpp"
#include "sprune/network.hpp"

namespace sprune {

struct Dataset {
  Matrix x;  // one sample per column
  Matrix y;  // one-hot labels or regression targets
  int size() const { return static_cast<int>(x.cols()); }
};

enum class EstimatorKind { Taylor, Concrete, Sampling, Hybrid };
enum class ScheduleKind { Constant, RobbinsMonro, Adam };

struct TrainConfig {
  double lambda = 20.0;  // L2 coefficient on weights (biases unregularized)
  int batch_size = 64;
  double lr = 1e-3;
  ScheduleKind schedule = ScheduleKind::Adam;
  double rm_tau = 100.0;  // step n uses lr / (1 + n/rm_tau)
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  EstimatorKind estimator = EstimatorKind::Taylor;
  double concrete_temperature = 0.1;
  int hybrid_top_k = 4;

  HyperPrior prior = FlatteningPrior{1e-2};
  ClipBounds clip;

  double theta0 = 0.5;
  double theta_lo = 1e-5;  // theta kept inside [theta_lo, theta_hi]
  double theta_hi = 1.0 - 1e-5;
  double theta_tol = 1e-3;  // prune when theta falls below this
  double theta_per = 0.1;   // ... or this fraction below its running max
  std::int64_t drop_after = 2814;  // iterations before the drop rule engages
  double phi_max = 1e6;            // per-unit norm projection bound; 0 = off
  double grad_tol = 1e-6;          // early exit when the step gradient norm
                                   // falls below this

  int epochs = 50;
  int fine_tune_epochs = 10;
  double fine_tune_lr = 1e-4;
  double input_threshold = 0.0;  // |w| below this on the input layer counts
                                 // as removable when reporting sparsity
  std::uint64_t seed = 1;
};

struct OptLayerState {
  Matrix mw, vw;  // first/second moments of the weight gradient
  Vector mb, vb;
  Vector mt, vt;  // gate parameter moments (gated layers only)
};

struct OptState {
  std::vector<OptLayerState> layers;
  std::int64_t t = 0;  // optimizer step count
};

struct StepInfo {
  double loss = 0.0;       // scaled minibatch data loss (n/b times batch sum)
  int pruned = 0;          // units pruned during this step
  double grad_norm = 0.0;  // Euclidean norm of the full parameter gradient
};

struct EvalResult {
  double loss = 0.0;      // mean per-sample loss
  double accuracy = 0.0;  // fraction correct (classification only)
};

struct LayerGateStats {
  int layer = 0;
  int alive = 0;
  double theta_mean = 0.0;
  double theta_min = 0.0;
  double theta_max = 0.0;
};

struct MetricsRow {
  int epoch = 0;
  std::int64_t iteration = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double accuracy = 0.0;
  int alive_units = 0;
  double prune_percent = 0.0;  // removed weight percentage vs the initial net
  std::vector<LayerGateStats> layer_stats;
};

// deterministic evaluation with every alive gate forced on
EvalResult evaluate(const Network& net, const GateState& gates,
                    const Dataset& data);
EvalResult evaluate(const Network& net, const Dataset& data);

// surviving / initial weight count; input-layer weights with magnitude below
// threshold count as removed
double weight_fraction(const Network& net, std::size_t initial_weights,
                       double input_threshold);

// removed weight percentage, in [0, 100]
double pruning_ratio(const Network& net, std::size_t initial_weights,
                     double input_threshold);

class Trainer {
 public:
  Trainer(Network net, TrainConfig cfg);

  StepInfo step(const Dataset& data);
  // runs one pass worth of steps (size/batch_size, at least one), then
  // physically removes pruned units
  MetricsRow run_epoch(const Dataset& train, const Dataset& eval, int epoch);
  std::vector<MetricsRow> train(const Dataset& train, const Dataset& eval);

  // rounds gates to 0/1, removes the zeros, and returns the deterministic
  // ungated network
  Network finalize();

  // per-unit gate parameters keyed by the unit ids of the original network
  std::vector<std::pair<UnitId, double>> theta_snapshot() const;

  Network& net() { return net_; }
  const Network& net() const { return net_; }
  GateState& gates() { return gates_; }
  const GateState& gates() const { return gates_; }
  OptState& opt() { return opt_; }
  const OptState& opt() const { return opt_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t iteration() const { return iter_; }
  std::size_t initial_weights() const { return initial_weights_; }

  void set_iteration(std::int64_t n) { iter_ = n; }
  void set_initial_weights(std::size_t n) { initial_weights_ = n; }
  std::vector<std::vector<int>>& orig_units() { return orig_unit_; }
  const std::vector<std::vector<int>>& orig_units() const { return orig_unit_; }

  // removes dead units from the network, gate state, optimizer state and the
  // original-id map
  void compact_now();

 private:
  Network net_;
  TrainConfig cfg_;
  GateState gates_;
  OptState opt_;
  Rng rng_;
  std::int64_t iter_ = 0;
  double last_grad_norm_ = std::numeric_limits<double>::infinity();
  std::size_t initial_weights_ = 0;
  std::vector<std::vector<int>> orig_unit_;  // per layer: original unit ids
};

// plain regularized training of a fixed (ungated) network
void fine_tune(Network& net, const Dataset& train, const TrainConfig& cfg,
               Rng& rng);

}  // namespace sprune
