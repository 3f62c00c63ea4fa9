#include "sprune/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sprune {

namespace {

GateDiff zero_diff(const Network& net) {
  GateDiff d(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (net.layer_gated(static_cast<int>(l))) {
      d[l] = Vector::Zero(net.layer_units(static_cast<int>(l)));
    }
  }
  return d;
}

std::vector<UnitId> alive_units(const Network& net, const GateState& gates) {
  std::vector<UnitId> ids;
  for (UnitId id : gated_unit_ids(net)) {
    if (gates.layers[id.layer].alive[id.unit]) {
      ids.push_back(id);
    }
  }
  return ids;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

GateDiff taylor_diff(const Network& net, const Matrix& batch,
                     const Matrix& targets, const GateSample& ksi,
                     double n_over_b) {
  ForwardTrace tr = forward(net, batch, ksi);
  BackwardResult bw = backward(net, tr, targets, n_over_b);
  GateDiff d = zero_diff(net);
  for (std::size_t l = 0; l < d.size(); ++l) {
    if (bw.gate_grad[l].size() > 0) {
      d[l] = bw.gate_grad[l];
    }
  }
  return d;
}

GateDiff concrete_diff(const Network& net, const GateState& gates,
                       const Matrix& batch, const Matrix& targets,
                       double n_over_b, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    throw std::invalid_argument("concrete_diff: temperature must be positive");
  }
  GateSample ksi(net.layers.size());
  GateDiff dxi_dtheta(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& gl = gates.layers[l];
    if (gl.theta.size() == 0) {
      continue;
    }
    Vector x = Vector::Zero(gl.theta.size());
    Vector dd = Vector::Zero(gl.theta.size());
    for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
      if (!gl.alive[j]) {
        continue;
      }
      double th = gl.theta(j);
      if (!(th > 0.0 && th < 1.0)) {
        throw std::invalid_argument("concrete_diff: theta must lie in (0,1)");
      }
      double u = rng.uniform_open();
      double h = (std::log(1.0 - th) - std::log(th) + std::log(u) -
                  std::log(1.0 - u)) /
                 temperature;
      double s = sigmoid(h);
      x(j) = 1.0 - s;
      dd(j) = s * (1.0 - s) / (temperature * th * (1.0 - th));
    }
    ksi[l] = std::move(x);
    dxi_dtheta[l] = std::move(dd);
  }

  ForwardTrace tr = forward(net, batch, ksi);
  BackwardResult bw = backward(net, tr, targets, n_over_b);
  GateDiff d = zero_diff(net);
  for (std::size_t l = 0; l < d.size(); ++l) {
    if (bw.gate_grad[l].size() > 0) {
      d[l] = bw.gate_grad[l].cwiseProduct(dxi_dtheta[l]);
    }
  }
  return d;
}

GateDiff sampling_diff(const Network& net, const GateState& gates,
                       const Matrix& batch, const Matrix& targets,
                       const GateSample& ksi, double n_over_b) {
  double base = forward_loss(net, batch, targets, ksi);
  GateDiff d = zero_diff(net);
  GateSample flipped = ksi;
  for (UnitId id : alive_units(net, gates)) {
    double orig = flipped[id.layer](id.unit);
    flipped[id.layer](id.unit) = 1.0 - orig;
    double other = forward_loss(net, batch, targets, flipped);
    flipped[id.layer](id.unit) = orig;
    double diff = (orig == 1.0) ? base - other : other - base;
    d[id.layer](id.unit) = n_over_b * diff;
  }
  return d;
}

GateDiff brute_force_diff(const Network& net, const GateState& gates,
                          const Matrix& batch, const Matrix& targets,
                          double n_over_b) {
  std::vector<UnitId> ids = alive_units(net, gates);
  int m = static_cast<int>(ids.size());
  if (m > 16) {
    throw std::invalid_argument("brute_force_diff: more than 16 alive units");
  }
  for (UnitId id : ids) {
    double th = gates.layers[id.layer].theta(id.unit);
    if (!(th > 0.0 && th < 1.0)) {
      throw std::invalid_argument("brute_force_diff: theta must lie in (0,1)");
    }
  }

  GateDiff c1 = zero_diff(net);
  GateDiff c0 = zero_diff(net);
  GateSample ksi(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (gates.layers[l].theta.size() > 0) {
      ksi[l] = Vector::Zero(gates.layers[l].theta.size());
    }
  }
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    double w = 1.0;
    for (int j = 0; j < m; ++j) {
      double th = gates.layers[ids[j].layer].theta(ids[j].unit);
      bool on = (mask >> j) & 1;
      ksi[ids[j].layer](ids[j].unit) = on ? 1.0 : 0.0;
      w *= on ? th : 1.0 - th;
    }
    double loss = forward_loss(net, batch, targets, ksi);
    for (int j = 0; j < m; ++j) {
      double th = gates.layers[ids[j].layer].theta(ids[j].unit);
      if ((mask >> j) & 1) {
        c1[ids[j].layer](ids[j].unit) += w / th * loss;
      } else {
        c0[ids[j].layer](ids[j].unit) += w / (1.0 - th) * loss;
      }
    }
  }
  GateDiff d = zero_diff(net);
  for (UnitId id : ids) {
    d[id.layer](id.unit) =
        n_over_b * (c1[id.layer](id.unit) - c0[id.layer](id.unit));
  }
  return d;
}

GateDiff hybrid_diff(Network& net, const GateState& gates, const Matrix& batch,
                     const Matrix& targets, const GateSample& ksi,
                     double n_over_b, int top_k) {
  GateDiff d = taylor_diff(net, batch, targets, ksi, n_over_b);
  if (top_k <= 0) {
    return d;
  }
  std::vector<std::pair<double, UnitId>> ranked;
  for (UnitId id : alive_units(net, gates)) {
    ranked.emplace_back(unit_view(net, id).phi(), id);
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  if (static_cast<int>(ranked.size()) > top_k) {
    ranked.resize(top_k);
  }
  if (ranked.empty()) {
    return d;
  }

  double base = forward_loss(net, batch, targets, ksi);
  GateSample flipped = ksi;
  for (const auto& [phi, id] : ranked) {
    double orig = flipped[id.layer](id.unit);
    flipped[id.layer](id.unit) = 1.0 - orig;
    double other = forward_loss(net, batch, targets, flipped);
    flipped[id.layer](id.unit) = orig;
    double diff = (orig == 1.0) ? base - other : other - base;
    d[id.layer](id.unit) = n_over_b * diff;
  }
  return d;
}

}  // namespace sprune
