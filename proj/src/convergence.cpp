#include "sprune/convergence.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sprune {

Derivative ode_rhs(const UnitDynamics& dyn, const UnitState& s) {
  if (!(s.theta > 0.0 && s.theta < 1.0)) {
    throw std::invalid_argument("ode_rhs: theta must lie strictly in (0,1)");
  }
  if (s.w_f.size() != dyn.q() || s.w_b.size() != dyn.p()) {
    throw std::invalid_argument("ode_rhs: state dimensions mismatch");
  }
  Derivative d;
  d.dw_f = -s.theta * (dyn.m1 * s.w_b) - dyn.lambda * s.w_f;
  d.dw_b = -s.theta * (dyn.m2 * s.w_f) - dyn.lambda * s.w_b;
  double diff = dyn.diff_fn ? dyn.diff_fn(s.w_f, s.w_b, s.theta) : 0.0;
  d.dtheta = -diff - reg_term(dyn.prior, dyn.clip, s.theta);
  return d;
}

double lyapunov_v(const UnitState& s, double eps1) {
  double phi = 0.5 * (s.w_f.squaredNorm() + s.w_b.squaredNorm());
  double dth = s.theta - eps1;
  return phi + 0.5 * dth * dth;
}

namespace {

UnitState advance(const UnitDynamics& dyn, const UnitState& s,
                  const Derivative& d, double h) {
  UnitState out;
  out.w_f = s.w_f + h * d.dw_f;
  out.w_b = s.w_b + h * d.dw_b;
  out.theta = std::clamp(s.theta + h * d.dtheta, dyn.theta_lo, dyn.theta_hi);
  return out;
}

}  // namespace

std::vector<TrajectoryPoint> integrate(const UnitDynamics& dyn,
                                       const UnitState& x0, double dt,
                                       double t_end) {
  if (dt <= 0.0 || t_end < 0.0) {
    throw std::invalid_argument("integrate: dt must be positive");
  }
  double eps1 = dyn.clip.eps1;
  std::vector<TrajectoryPoint> traj;
  UnitState s = x0;
  s.theta = std::clamp(s.theta, dyn.theta_lo, dyn.theta_hi);
  auto steps = static_cast<long>(std::ceil(t_end / dt - 1e-12));
  traj.reserve(steps + 1);
  traj.push_back({0.0, s, lyapunov_v(s, eps1)});
  for (long n = 0; n < steps; ++n) {
    Derivative k1 = ode_rhs(dyn, s);
    Derivative k2 = ode_rhs(dyn, advance(dyn, s, k1, dt / 2));
    Derivative k3 = ode_rhs(dyn, advance(dyn, s, k2, dt / 2));
    Derivative k4 = ode_rhs(dyn, advance(dyn, s, k3, dt));
    UnitState next;
    next.w_f =
        s.w_f + dt / 6.0 * (k1.dw_f + 2 * k2.dw_f + 2 * k3.dw_f + k4.dw_f);
    next.w_b =
        s.w_b + dt / 6.0 * (k1.dw_b + 2 * k2.dw_b + 2 * k3.dw_b + k4.dw_b);
    next.theta = std::clamp(
        s.theta +
            dt / 6.0 * (k1.dtheta + 2 * k2.dtheta + 2 * k3.dtheta + k4.dtheta),
        dyn.theta_lo, dyn.theta_hi);
    if (next.w_f.norm() > 1e12 || next.w_b.norm() > 1e12) {
      throw std::runtime_error("integrate: trajectory blow-up");
    }
    s = std::move(next);
    traj.push_back({dt * (n + 1), s, lyapunov_v(s, eps1)});
  }
  return traj;
}

bool roa_contains(const UnitState& s, double lambda, double eta, double kappa,
                  double eps1) {
  double radius = lambda / (eta + kappa) - eps1;
  if (radius <= 0.0) {
    return false;  // empty region
  }
  double dth = s.theta - eps1;
  double sq = s.w_f.squaredNorm() + s.w_b.squaredNorm() + dth * dth;
  return sq < radius * radius;
}

bool stability_check(double lambda, double eta, double kappa, double eps1) {
  return eps1 > 0.0 && eps1 < 0.5 * lambda / (eta + kappa);
}

double lipschitz_product(const Network& net) {
  double sum = 0.0;
  int count = 0;
  for (const auto& layer : net.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      sum += d->weights.squaredNorm();
      ++count;
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      sum += c->kernels.squaredNorm();
      ++count;
    }
  }
  if (count == 0) {
    return 0.0;
  }
  return std::pow(sum / count, count / 2.0);
}

namespace {

// (layer, flat offset) of a weight pointer inside the network, so the same
// entry can be read out of a gradient structure with identical shapes
struct WeightLoc {
  int layer;
  Eigen::Index off;
};

WeightLoc locate(Network& net, const double* p) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Matrix* w = nullptr;
    if (auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
      w = &d->weights;
    } else if (auto* c = std::get_if<ConvLayer>(&net.layers[l])) {
      w = &c->kernels;
    } else {
      continue;
    }
    if (p >= w->data() && p < w->data() + w->size()) {
      return {static_cast<int>(l), p - w->data()};
    }
  }
  throw std::logic_error("locate: pointer outside any weight matrix");
}

Vector read_grad(Network& net, const std::vector<double*>& ptrs,
                 const BackwardResult& bw) {
  Vector g(ptrs.size());
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    WeightLoc loc = locate(net, ptrs[i]);
    g(i) = bw.dweights[loc.layer].data()[loc.off];
  }
  return g;
}

}  // namespace

BoundReport empirical_bounds(Network& net, const GateState& gates,
                             const Dataset& data, UnitId id, int n_samples,
                             Rng& rng) {
  if (n_samples < 1) {
    throw std::invalid_argument("empirical_bounds: n_samples must be >= 1");
  }
  if (!gates.layers.at(id.layer).alive.at(id.unit)) {
    throw std::invalid_argument("empirical_bounds: unit is pruned");
  }
  UnitView view = unit_view(net, id);
  if (view.phi() == 0.0) {
    throw std::invalid_argument("empirical_bounds: unit has zero weight norm");
  }

  BoundReport rep;
  rep.lipschitz_prod = lipschitz_product(net);

  const int b = std::min(32, data.size());
  double n_over_b = static_cast<double>(data.size()) / b;
  Matrix bx(data.x.rows(), b), by(data.y.rows(), b);

  std::vector<double> saved(view.fan_in.size() + view.fan_out.size());
  auto save_unit = [&]() {
    std::size_t k = 0;
    for (double* p : view.fan_in) {
      saved[k++] = *p;
    }
    for (double* p : view.fan_out) {
      saved[k++] = *p;
    }
  };
  auto restore_unit = [&]() {
    std::size_t k = 0;
    for (double* p : view.fan_in) {
      *p = saved[k++];
    }
    for (double* p : view.fan_out) {
      *p = saved[k++];
    }
  };
  auto scale_unit = [&](double s) {
    for (double* p : view.fan_in) {
      *p *= s;
    }
    for (double* p : view.fan_out) {
      *p *= s;
    }
  };

  save_unit();
  for (int n = 0; n < n_samples; ++n) {
    for (int i = 0; i < b; ++i) {
      auto idx = static_cast<Eigen::Index>(rng.index(data.size()));
      bx.col(i) = data.x.col(idx);
      by.col(i) = data.y.col(idx);
    }
    GateSample ksi = sample_gates(net, gates, rng);
    double scale = 0.1 + 0.9 * rng.uniform();
    scale_unit(scale);
    double phi = view.phi();

    // loss gap between the probed unit on and off
    ksi[id.layer](id.unit) = 1.0;
    double c1 = n_over_b * forward_loss(net, bx, by, ksi);
    ksi[id.layer](id.unit) = 0.0;
    double c0 = n_over_b * forward_loss(net, bx, by, ksi);
    if (phi > 1e-8) {
      rep.kappa_hat = std::max(rep.kappa_hat, std::abs(c1 - c0) / phi);
    }

    // coupling matrices from finite differences of the data-term gradient,
    // with the probed unit's gate held on
    ksi[id.layer](id.unit) = 1.0;
    auto grad_pair = [&]() {
      ForwardTrace tr = forward(net, bx, ksi);
      BackwardResult bw = backward(net, tr, by, n_over_b);
      return std::make_pair(read_grad(net, view.fan_out, bw),
                            read_grad(net, view.fan_in, bw));
    };
    const double h = 1e-5;
    int q = static_cast<int>(view.fan_out.size());
    int p = static_cast<int>(view.fan_in.size());
    Matrix m1(q, p), m2(p, q);
    for (int j = 0; j < p; ++j) {
      double orig = *view.fan_in[j];
      *view.fan_in[j] = orig + h;
      Vector gp = grad_pair().first;
      *view.fan_in[j] = orig - h;
      Vector gm = grad_pair().first;
      *view.fan_in[j] = orig;
      m1.col(j) = (gp - gm) / (2 * h);
    }
    for (int j = 0; j < q; ++j) {
      double orig = *view.fan_out[j];
      *view.fan_out[j] = orig + h;
      Vector gp = grad_pair().second;
      *view.fan_out[j] = orig - h;
      Vector gm = grad_pair().second;
      *view.fan_out[j] = orig;
      m2.col(j) = (gp - gm) / (2 * h);
    }
    Matrix m = m1 + m2.transpose();
    Eigen::JacobiSVD<Matrix> svd(m);
    rep.eta_hat = std::max(rep.eta_hat, svd.singularValues()(0));

    restore_unit();
  }
  return rep;
}

}  // namespace sprune
