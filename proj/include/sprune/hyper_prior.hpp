#pragma once

#include <functional>
#include <variant>
#include <vector>

namespace sprune {

struct BetaPrior {
  double alpha = 0.9;  // in (0,1)
  double beta = 10.0;  // > 1
};

struct FlatteningPrior {
  double gamma = 1e-2;  // density c/(1+(gamma-1)(1-pi)); gamma < 1 for pruning
};

using HyperPrior = std::variant<BetaPrior, FlatteningPrior>;

struct ClipBounds {
  double eps1 = 1e-4;
  double eps2 = 1e-4;
};

struct GateThresholds {
  double theta1 = 0.0;  // below: pi* clipped at eps1
  double theta2 = 1.0;  // above: pi* clipped at 1-eps2 (may exceed 1: vacuous)
};

void validate(const HyperPrior& hp);

GateThresholds thresholds(const HyperPrior& hp, const ClipBounds& cb);

// closed-form constrained minimizer of J(pi) over [eps1, 1-eps2]
double pi_star(const HyperPrior& hp, const ClipBounds& cb, double theta);

// -log p(pi | hyper-prior), up to an additive constant
double neg_log_density(const HyperPrior& hp, double pi);

// KL(Bernoulli(theta) || Bernoulli(pi)) - log p(pi)
double j_objective(const HyperPrior& hp, double theta, double pi);

// log( theta*(1-pi*) / ((1-theta)*pi*) ); the flattening interior branch is
// exactly -log(gamma)
double reg_term(const HyperPrior& hp, const ClipBounds& cb, double theta);

double pdf(const HyperPrior& hp, double pi);

struct CurveRow {
  double theta;
  double reg;
};
std::vector<CurveRow> reg_curve(const HyperPrior& hp, const ClipBounds& cb,
                                const std::vector<double>& grid);

// Grid + ternary-refinement minimizer of J(pi); the independent oracle for
// pi_star. Precomputes log tables so repeated solves share the grid work.
class PiStarOracle {
 public:
  PiStarOracle(const HyperPrior& hp, const ClipBounds& cb, int grid_points = 100001);
  // custom density variant (testing): nld(pi) = -log p(pi), up to a constant
  PiStarOracle(std::function<double(double)> nld, const ClipBounds& cb,
               int grid_points = 100001);
  double solve(double theta) const;

 private:
  std::function<double(double)> nld_;
  double lo_, hi_;
  std::vector<double> grid_, log_pi_, log_1mpi_, nld_vals_;
};

double pi_star_numeric(const HyperPrior& hp, const ClipBounds& cb, double theta);

}  // namespace sprune
