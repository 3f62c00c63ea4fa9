#pragma once

#include "sprune/network.hpp"

namespace sprune {

// All estimators return, per layer, a vector with one entry per gated unit
// (empty for ungated layers): an estimate of the loss gap C1 - C0 between
// forcing the unit's gate on and off, scaled by n_over_b. Pruned units get 0.
using GateDiff = std::vector<Vector>;

// first-order straight-through estimate from a single backward pass with the
// shared gate sample ksi
GateDiff taylor_diff(const Network& net, const Matrix& batch,
                     const Matrix& targets, const GateSample& ksi,
                     double n_over_b);

// relaxed-gate pathwise estimate: gates follow a binary CONCRETE relaxation
// at the given temperature, and the chain rule runs through the relaxation
GateDiff concrete_diff(const Network& net, const GateState& gates,
                       const Matrix& batch, const Matrix& targets,
                       double n_over_b, double temperature, Rng& rng);

// one-flip estimate: evaluate the loss once under ksi, then once per alive
// unit with that unit's gate flipped, all other gates shared
GateDiff sampling_diff(const Network& net, const GateState& gates,
                       const Matrix& batch, const Matrix& targets,
                       const GateSample& ksi, double n_over_b);

// exact expectation by enumerating all gate configurations (guarded to at
// most 16 alive units); the oracle the cheap estimators are tested against
GateDiff brute_force_diff(const Network& net, const GateState& gates,
                          const Matrix& batch, const Matrix& targets,
                          double n_over_b);

// taylor everywhere except the top_k units with the largest phi (half the
// squared norm of fan-in plus fan-out), which use the one-flip estimate
GateDiff hybrid_diff(Network& net, const GateState& gates, const Matrix& batch,
                     const Matrix& targets, const GateSample& ksi,
                     double n_over_b, int top_k);

}  // namespace sprune
