#pragma once

#include <variant>
#include <vector>

#include "sprune/rng.hpp"
#include "sprune/tensor.hpp"

namespace sprune {

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;
  bool gated = false;
  Activation act = Activation::LeakyRelu;
  double slope = 1e-3;
  int out_size() const { return static_cast<int>(weights.rows()); }
  int in_size() const { return static_cast<int>(weights.cols()); }
};

struct ConvLayer {
  ConvSpec spec;
  Matrix kernels;  // out_c x (in_c*k*k)
  Vector bias;
  bool gated = false;
  Activation act = Activation::LeakyRelu;
  double slope = 1e-3;
};

struct PoolLayer {
  PoolSpec spec;
};

struct FlattenLayer {
  int size = 0;
};

using Layer = std::variant<DenseLayer, ConvLayer, PoolLayer, FlattenLayer>;

struct Network {
  std::vector<Layer> layers;
  LossKind loss;
  int input_size = 0;

  int output_size() const;
  // units carried by a layer: dense outputs or conv output channels; 0 for
  // pool/flatten
  int layer_units(int layer) const;
  bool layer_gated(int layer) const;
  std::size_t weight_count() const;  // excludes biases
};

// one gate per unit of a gated layer; empty vectors for ungated layers
struct GateLayerState {
  Vector theta;
  Vector theta_max;
  Vector last_xi;
  std::vector<char> alive;
};

struct GateState {
  std::vector<GateLayerState> layers;

  int alive_count() const;
  int alive_count(int layer) const;
};

GateState init_gates(const Network& net, double theta0 = 0.5);

struct UnitId {
  int layer = 0;
  int unit = 0;
  bool operator==(const UnitId&) const = default;
};

// ksi values are continuous to admit relaxed (CONCRETE) gates; Bernoulli
// samples are exactly 0 or 1
using GateSample = std::vector<Vector>;

GateSample sample_gates(const Network& net, const GateState& gates, Rng& rng);
GateSample all_ones_gates(const Network& net, const GateState& gates);

struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> zeta;        // pre-activations (dense/conv layers)
  std::vector<Matrix> z_pre_gate;  // post-activation outputs before gating
  std::vector<Matrix> z_out;       // layer outputs after gating/pool/flatten
  std::vector<ByteMatrix> pool_argmax;
  GateSample gates;
  Matrix outputs;  // final pre-activations (logits / regression outputs)
};

ForwardTrace forward(const Network& net, const Matrix& batch,
                     const GateSample& ksi);

// total negative log-likelihood of the batch under the sampled network
double forward_loss(const Network& net, const Matrix& batch,
                    const Matrix& targets, const GateSample& ksi);

struct BackwardResult {
  std::vector<Matrix> dweights;  // scaled by n_over_b
  std::vector<Vector> dbias;
  std::vector<Matrix> delta;  // gradient w.r.t. pre-activations, per sample
  // per gated layer: straight-through gradient w.r.t. the gate value,
  // summed over batch (and spatial positions for conv), scaled by n_over_b.
  // This is exactly the Taylor estimate of C1-C0 per unit.
  std::vector<Vector> gate_grad;
  double loss = 0.0;
};

BackwardResult backward(const Network& net, const ForwardTrace& trace,
                        const Matrix& targets, double n_over_b);

struct UnitView {
  UnitId id;
  std::vector<double*> fan_in;   // weights feeding the unit (bias excluded)
  std::vector<double*> fan_out;  // weights reading the unit's output
  double phi() const;
};

std::vector<UnitView> unit_views(Network& net);
UnitView unit_view(Network& net, UnitId id);

void prune_unit(Network& net, GateState& gates, UnitId id);

// index plan of a compaction: per layer, which unit rows and which input
// columns of the weight matrix survive (empty lists for pool/flatten layers)
struct CompactPlan {
  std::vector<std::vector<int>> row_keep;
  std::vector<std::vector<int>> col_keep;
};

// physically removes dead units, shrinking weight matrices; optionally
// reports the surviving indices so auxiliary per-weight state can be sliced
// identically
Network compact(const Network& net, const GateState& gates,
                CompactPlan* plan = nullptr);

std::vector<UnitId> gated_unit_ids(const Network& net);

// fully connected net; hidden layers are gated leaky-ReLU units, the output
// layer is ungated with identity pre-softmax outputs
Network make_mlp(int input_size, const std::vector<int>& hidden, int outputs,
                 LossKind loss, double slope = 1e-3);

// conv-pool-conv-pool-dense-dense classifier in the LeNet-5 layout; conv
// filters and the first dense layer are gated
Network make_lenet(int in_c, int in_h, int in_w, int c1, int c2, int fc,
                   int outputs, LossKind loss, double slope = 1e-3);

// Glorot normal initialization of all weights; biases start at zero
void glorot_init(Network& net, Rng& rng);

}  // namespace sprune
