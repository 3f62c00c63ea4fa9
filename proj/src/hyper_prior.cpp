#include "sprune/hyper_prior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace sprune {

namespace {

void validate_clip(const ClipBounds& cb) {
  if (!(cb.eps1 > 0.0 && cb.eps1 < 1.0 && cb.eps2 > 0.0 && cb.eps2 < 1.0)) {
    throw std::invalid_argument("clip bounds must lie in (0,1)");
  }
  if (cb.eps1 >= 1.0 - cb.eps2) {
    throw std::invalid_argument("empty pi interval: eps1 >= 1-eps2");
  }
}

double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

}  // namespace

void validate(const HyperPrior& hp) {
  if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    if (!(b->alpha > 0.0 && b->alpha < 1.0)) {
      throw std::invalid_argument("Beta hyper-prior requires alpha in (0,1)");
    }
    if (!(b->beta > 1.0)) {
      throw std::invalid_argument("Beta hyper-prior requires beta > 1");
    }
  } else {
    const auto& f = std::get<FlatteningPrior>(hp);
    if (!(f.gamma > 0.0)) {
      throw std::invalid_argument("Flattening hyper-prior requires gamma > 0");
    }
  }
}

GateThresholds thresholds(const HyperPrior& hp, const ClipBounds& cb) {
  validate(hp);
  validate_clip(cb);
  GateThresholds t;
  if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    t.theta1 = (1.0 - cb.eps1) * (1.0 - b->alpha) + cb.eps1 * b->beta;
    t.theta2 = cb.eps2 * (1.0 - b->alpha) + (1.0 - cb.eps2) * b->beta;
  } else {
    double g = std::get<FlatteningPrior>(hp).gamma;
    t.theta1 = cb.eps1 / (cb.eps1 + g * (1.0 - cb.eps1));
    t.theta2 = (1.0 - cb.eps2) / (1.0 + cb.eps2 * (g - 1.0));
  }
  return t;
}

double pi_star(const HyperPrior& hp, const ClipBounds& cb, double theta) {
  if (theta < 0.0 || theta > 1.0) {
    throw std::invalid_argument("pi_star: theta outside [0,1]");
  }
  GateThresholds t = thresholds(hp, cb);
  double lo = cb.eps1, hi = 1.0 - cb.eps2;
  double p;
  if (theta <= t.theta1) {
    p = lo;
  } else if (theta >= t.theta2) {
    p = hi;
  } else if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    p = (theta + b->alpha - 1.0) / (b->alpha + b->beta - 1.0);
  } else {
    double g = std::get<FlatteningPrior>(hp).gamma;
    p = g * theta / (1.0 + theta * (g - 1.0));
  }
  return std::clamp(p, lo, hi);
}

double neg_log_density(const HyperPrior& hp, double pi) {
  if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    return -(b->alpha - 1.0) * std::log(pi) -
           (b->beta - 1.0) * std::log(1.0 - pi);
  }
  double g = std::get<FlatteningPrior>(hp).gamma;
  return std::log(1.0 + (g - 1.0) * (1.0 - pi));
}

double j_objective(const HyperPrior& hp, double theta, double pi) {
  return xlogy(1.0 - theta, (1.0 - theta) / (1.0 - pi)) +
         xlogy(theta, theta / pi) + neg_log_density(hp, pi);
}

double reg_term(const HyperPrior& hp, const ClipBounds& cb, double theta) {
  if (!(theta > 0.0 && theta < 1.0)) {
    throw std::invalid_argument("reg_term: theta must lie strictly in (0,1)");
  }
  GateThresholds t = thresholds(hp, cb);
  double logit_theta = std::log(theta) - std::log(1.0 - theta);
  if (theta <= t.theta1) {
    return logit_theta + std::log(1.0 - cb.eps1) - std::log(cb.eps1);
  }
  if (theta >= t.theta2) {
    return logit_theta + std::log(cb.eps2) - std::log(1.0 - cb.eps2);
  }
  if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    // log( theta*(beta-theta) / ((1-theta)*(theta+alpha-1)) ), kept in
    // log-space so beta up to ~1e300 stays finite
    return logit_theta + std::log(b->beta - theta) -
           std::log(theta + b->alpha - 1.0);
  }
  double g = std::get<FlatteningPrior>(hp).gamma;
  return -std::log(g);
}

double pdf(const HyperPrior& hp, double pi) {
  if (pi < 0.0 || pi > 1.0) {
    throw std::invalid_argument("pdf: pi outside [0,1]");
  }
  if (const auto* b = std::get_if<BetaPrior>(&hp)) {
    double log_norm = std::lgamma(b->alpha) + std::lgamma(b->beta) -
                      std::lgamma(b->alpha + b->beta);
    return std::exp((b->alpha - 1.0) * std::log(pi) +
                    (b->beta - 1.0) * std::log(1.0 - pi) - log_norm);
  }
  double g = std::get<FlatteningPrior>(hp).gamma;
  if (std::abs(g - 1.0) < 1e-12) {
    return 1.0;  // uniform limit
  }
  double c = (g - 1.0) / std::log(g);
  return c / (1.0 + (g - 1.0) * (1.0 - pi));
}

std::vector<CurveRow> reg_curve(const HyperPrior& hp, const ClipBounds& cb,
                                const std::vector<double>& grid) {
  std::vector<CurveRow> rows;
  rows.reserve(grid.size());
  for (double th : grid) {
    rows.push_back({th, reg_term(hp, cb, th)});
  }
  return rows;
}

PiStarOracle::PiStarOracle(const HyperPrior& hp, const ClipBounds& cb,
                           int grid_points)
    : PiStarOracle([hp](double pi) { return neg_log_density(hp, pi); }, cb,
                   grid_points) {
  validate(hp);
}

PiStarOracle::PiStarOracle(std::function<double(double)> nld,
                           const ClipBounds& cb, int grid_points)
    : nld_(std::move(nld)), lo_(cb.eps1), hi_(1.0 - cb.eps2) {
  validate_clip(cb);
  if (grid_points < 3) {
    throw std::invalid_argument("oracle grid too coarse");
  }
  grid_.resize(grid_points);
  log_pi_.resize(grid_points);
  log_1mpi_.resize(grid_points);
  nld_vals_.resize(grid_points);
  double step = (hi_ - lo_) / (grid_points - 1);
  for (int i = 0; i < grid_points; ++i) {
    double p = lo_ + step * i;
    grid_[i] = p;
    log_pi_[i] = std::log(p);
    log_1mpi_[i] = std::log(1.0 - p);
    nld_vals_[i] = nld_(p);
  }
}

double PiStarOracle::solve(double theta) const {
  // J up to theta-only constants: -theta*log(pi) - (1-theta)*log(1-pi) + nld
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < grid_.size(); ++i) {
    double v = -theta * log_pi_[i] - (1.0 - theta) * log_1mpi_[i] + nld_vals_[i];
    if (v < best) {
      best = v;
      best_i = i;
    }
  }
  auto obj = [&](double p) {
    return -theta * std::log(p) - (1.0 - theta) * std::log(1.0 - p) + nld_(p);
  };
  double a = grid_[best_i == 0 ? 0 : best_i - 1];
  double b = grid_[std::min(best_i + 1, grid_.size() - 1)];
  while (b - a > 1e-12) {
    double m1 = a + (b - a) / 3.0;
    double m2 = b - (b - a) / 3.0;
    if (obj(m1) < obj(m2)) {
      b = m2;
    } else {
      a = m1;
    }
  }
  return 0.5 * (a + b);
}

double pi_star_numeric(const HyperPrior& hp, const ClipBounds& cb,
                       double theta) {
  if (theta < 0.0 || theta > 1.0) {
    throw std::invalid_argument("pi_star_numeric: theta outside [0,1]");
  }
  return PiStarOracle(hp, cb).solve(theta);
}

}  // namespace sprune
