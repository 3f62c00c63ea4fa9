#pragma once

#include <functional>

#include "sprune/hyper_prior.hpp"
#include "sprune/network.hpp"
#include "sprune/trainer.hpp"

namespace sprune {

// synthetic single-unit gradient-flow system over (w_f, w_b, theta)
struct UnitDynamics {
  Matrix m1;  // q x p, couples w_b into the w_f equation
  Matrix m2;  // p x q
  double lambda = 1.0;
  // loss gap the unit would deliver at this state; must vanish at the origin
  std::function<double(const Vector& w_f, const Vector& w_b, double theta)>
      diff_fn;
  HyperPrior prior = FlatteningPrior{0.5};
  ClipBounds clip;
  double theta_lo = 1e-5;  // integration clamp keeping theta inside (0,1)
  double theta_hi = 1.0 - 1e-5;

  int p() const { return static_cast<int>(m2.rows()); }
  int q() const { return static_cast<int>(m1.rows()); }
};

struct UnitState {
  Vector w_f;
  Vector w_b;
  double theta = 0.5;
};

struct Derivative {
  Vector dw_f;
  Vector dw_b;
  double dtheta = 0.0;
};

Derivative ode_rhs(const UnitDynamics& dyn, const UnitState& s);

struct TrajectoryPoint {
  double t = 0.0;
  UnitState state;
  double v = 0.0;  // Lyapunov value at this point
};

// fixed-step RK4; theta clamped to [theta_lo, theta_hi] after each stage
std::vector<TrajectoryPoint> integrate(const UnitDynamics& dyn,
                                       const UnitState& x0, double dt,
                                       double t_end);

double lyapunov_v(const UnitState& s, double eps1);

// strict membership in the ball of radius lambda/(eta+kappa) - eps1 around
// the pruned equilibrium; an empty ball contains nothing
bool roa_contains(const UnitState& s, double lambda, double eta, double kappa,
                  double eps1);

// 0 < eps1 < lambda / (2(eta+kappa))
bool stability_check(double lambda, double eta, double kappa, double eps1);

struct BoundReport {
  double kappa_hat = 0.0;  // empirical max of |C1-C0| / phi
  double eta_hat = 0.0;    // empirical max singular value of M1 + M2^T
  double lipschitz_prod = 0.0;
};

// samples gate configurations, minibatches and weight rescalings of one unit
// to estimate the constants entering the region-of-attraction radius
BoundReport empirical_bounds(Network& net, const GateState& gates,
                             const Dataset& data, UnitId id, int n_samples,
                             Rng& rng);

// ((1/L) * sum_l ||W_l||_F^2)^(L/2) over weight-bearing layers
double lipschitz_product(const Network& net);

}  // namespace sprune
