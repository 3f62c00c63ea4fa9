#include "sprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sprune {

namespace {

void gather_batch(const Dataset& data, int batch_size, Rng& rng, Matrix& bx,
                  Matrix& by) {
  bx.resize(data.x.rows(), batch_size);
  by.resize(data.y.rows(), batch_size);
  for (int i = 0; i < batch_size; ++i) {
    auto idx = static_cast<Eigen::Index>(rng.index(data.size()));
    bx.col(i) = data.x.col(idx);
    by.col(i) = data.y.col(idx);
  }
}

template <class T>
void sgd_like_update(const TrainConfig& cfg, std::int64_t t, double lr, T& p,
                     T& m, T& v, const T& g) {
  switch (cfg.schedule) {
    case ScheduleKind::Constant:
      p -= lr * g;
      return;
    case ScheduleKind::RobbinsMonro:
      p -= (lr / (1.0 + static_cast<double>(t) / cfg.rm_tau)) * g;
      return;
    case ScheduleKind::Adam: {
      m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
      v = (cfg.adam_beta2 * v.array() +
           (1.0 - cfg.adam_beta2) * g.array().square())
              .matrix();
      double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
      double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
      p.array() -=
          lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
      return;
    }
  }
  throw std::logic_error("unknown schedule");
}

template <class Vec>
void slice_rows(Vec& v, const std::vector<int>& keep) {
  Vec out(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out(i) = v(keep[i]);
  }
  v = std::move(out);
}

void slice_matrix(Matrix& m, const std::vector<int>& rows,
                  const std::vector<int>& cols) {
  Matrix out(rows.size(), cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      out(r, c) = m(rows[r], cols[c]);
    }
  }
  m = std::move(out);
}

}  // namespace

EvalResult evaluate(const Network& net, const Dataset& data,
                    const GateSample& ksi) {
  if (data.size() == 0) {
    throw std::invalid_argument("evaluate: empty dataset");
  }
  EvalResult r;
  int correct = 0;
  const int chunk = 512;
  for (int start = 0; start < data.size(); start += chunk) {
    int n = std::min(chunk, data.size() - start);
    Matrix bx = data.x.middleCols(start, n);
    Matrix by = data.y.middleCols(start, n);
    ForwardTrace tr = forward(net, bx, ksi);
    r.loss += loss_and_grad(net.loss, tr.outputs, by).loss;
    if (net.loss.type == LossKind::Type::CategoricalCe) {
      for (int i = 0; i < n; ++i) {
        Eigen::Index pred, truth;
        tr.outputs.col(i).maxCoeff(&pred);
        by.col(i).maxCoeff(&truth);
        correct += pred == truth;
      }
    }
  }
  r.loss /= data.size();
  r.accuracy = static_cast<double>(correct) / data.size();
  return r;
}

EvalResult evaluate(const Network& net, const GateState& gates,
                    const Dataset& data) {
  return evaluate(net, data, all_ones_gates(net, gates));
}

EvalResult evaluate(const Network& net, const Dataset& data) {
  return evaluate(net, data, GateSample(net.layers.size()));
}

double pruning_ratio(const Network& net, std::size_t initial_weights,
                     double input_threshold) {
  return 100.0 * (1.0 - weight_fraction(net, initial_weights, input_threshold));
}

double weight_fraction(const Network& net, std::size_t initial_weights,
                       double input_threshold) {
  std::size_t surviving = 0;
  bool first = true;
  for (const auto& layer : net.layers) {
    const Matrix* w = nullptr;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      w = &d->weights;
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      w = &c->kernels;
    } else {
      continue;
    }
    double thr = first ? input_threshold : 0.0;
    first = false;
    for (Eigen::Index i = 0; i < w->size(); ++i) {
      surviving += std::abs(w->data()[i]) > thr;
    }
  }
  return static_cast<double>(surviving) / static_cast<double>(initial_weights);
}

Trainer::Trainer(Network net, TrainConfig cfg)
    : net_(std::move(net)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  validate(cfg_.prior);
  if (cfg_.batch_size <= 0 || cfg_.lr <= 0.0 || cfg_.lambda < 0.0) {
    throw std::invalid_argument("bad training configuration");
  }
  if (!(cfg_.theta_lo > 0.0 && cfg_.theta_lo < cfg_.theta_hi &&
        cfg_.theta_hi < 1.0)) {
    throw std::invalid_argument("theta clip bounds must satisfy 0<lo<hi<1");
  }
  gates_ = init_gates(net_, cfg_.theta0);
  initial_weights_ = net_.weight_count();
  opt_.layers.resize(net_.layers.size());
  orig_unit_.resize(net_.layers.size());
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    auto& os = opt_.layers[l];
    if (const auto* d = std::get_if<DenseLayer>(&net_.layers[l])) {
      os.mw = Matrix::Zero(d->weights.rows(), d->weights.cols());
      os.vw = os.mw;
      os.mb = Vector::Zero(d->bias.size());
      os.vb = os.mb;
    } else if (const auto* c = std::get_if<ConvLayer>(&net_.layers[l])) {
      os.mw = Matrix::Zero(c->kernels.rows(), c->kernels.cols());
      os.vw = os.mw;
      os.mb = Vector::Zero(c->bias.size());
      os.vb = os.mb;
    }
    if (net_.layer_gated(static_cast<int>(l))) {
      int n = net_.layer_units(static_cast<int>(l));
      os.mt = Vector::Zero(n);
      os.vt = os.mt;
      auto& ids = orig_unit_[l];
      ids.resize(n);
      for (int j = 0; j < n; ++j) {
        ids[j] = j;
      }
    }
  }
}

StepInfo Trainer::step(const Dataset& data) {
  if (data.size() == 0) {
    throw std::invalid_argument("step: empty dataset");
  }
  Matrix bx, by;
  gather_batch(data, cfg_.batch_size, rng_, bx, by);
  double n_over_b =
      static_cast<double>(data.size()) / static_cast<double>(cfg_.batch_size);

  GateSample ksi = sample_gates(net_, gates_, rng_);
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    if (gates_.layers[l].theta.size() > 0) {
      gates_.layers[l].last_xi = ksi[l];
    }
  }

  ForwardTrace tr = forward(net_, bx, ksi);
  BackwardResult bw = backward(net_, tr, by, n_over_b);

  GateDiff diff;
  switch (cfg_.estimator) {
    case EstimatorKind::Taylor:
      diff = bw.gate_grad;
      for (std::size_t l = 0; l < diff.size(); ++l) {
        if (diff[l].size() == 0 && gates_.layers[l].theta.size() > 0) {
          diff[l] = Vector::Zero(gates_.layers[l].theta.size());
        }
      }
      break;
    case EstimatorKind::Concrete:
      diff = concrete_diff(net_, gates_, bx, by, n_over_b,
                           cfg_.concrete_temperature, rng_);
      break;
    case EstimatorKind::Sampling:
      diff = sampling_diff(net_, gates_, bx, by, ksi, n_over_b);
      break;
    case EstimatorKind::Hybrid:
      diff = hybrid_diff(net_, gates_, bx, by, ksi, n_over_b,
                         cfg_.hybrid_top_k);
      break;
  }

  ++opt_.t;
  std::int64_t t = opt_.t;
  double grad_sq = 0.0;
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    auto& os = opt_.layers[l];
    if (auto* d = std::get_if<DenseLayer>(&net_.layers[l])) {
      Matrix gw = bw.dweights[l] + cfg_.lambda * d->weights;
      grad_sq += gw.squaredNorm() + bw.dbias[l].squaredNorm();
      sgd_like_update(cfg_, t, cfg_.lr, d->weights, os.mw, os.vw, gw);
      sgd_like_update(cfg_, t, cfg_.lr, d->bias, os.mb, os.vb, bw.dbias[l]);
    } else if (auto* c = std::get_if<ConvLayer>(&net_.layers[l])) {
      Matrix gw = bw.dweights[l] + cfg_.lambda * c->kernels;
      grad_sq += gw.squaredNorm() + bw.dbias[l].squaredNorm();
      sgd_like_update(cfg_, t, cfg_.lr, c->kernels, os.mw, os.vw, gw);
      sgd_like_update(cfg_, t, cfg_.lr, c->bias, os.mb, os.vb, bw.dbias[l]);
    }
    auto& gl = gates_.layers[l];
    if (gl.theta.size() > 0) {
      Vector gt = Vector::Zero(gl.theta.size());
      for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
        if (gl.alive[j]) {
          gt(j) = diff[l](j) + reg_term(cfg_.prior, cfg_.clip, gl.theta(j));
        } else {
          os.mt(j) = 0.0;  // frozen: no residual momentum drift
          os.vt(j) = 0.0;
        }
      }
      grad_sq += gt.squaredNorm();
      sgd_like_update(cfg_, t, cfg_.lr, gl.theta, os.mt, os.vt, gt);
      for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
        if (gl.alive[j]) {
          gl.theta(j) = std::clamp(gl.theta(j), cfg_.theta_lo, cfg_.theta_hi);
          gl.theta_max(j) = std::max(gl.theta_max(j), gl.theta(j));
        }
      }
    }
  }

  // per-unit norm projection and re-zeroing of already-pruned units
  for (UnitId id : gated_unit_ids(net_)) {
    UnitView v = unit_view(net_, id);
    if (!gates_.layers[id.layer].alive[id.unit]) {
      for (double* p : v.fan_in) {
        *p = 0.0;
      }
      for (double* p : v.fan_out) {
        *p = 0.0;
      }
      continue;
    }
    if (cfg_.phi_max > 0.0) {
      double phi = v.phi();
      if (phi > cfg_.phi_max) {
        double s = std::sqrt(cfg_.phi_max / phi);
        for (double* p : v.fan_in) {
          *p *= s;
        }
        for (double* p : v.fan_out) {
          *p *= s;
        }
      }
    }
  }

  ++iter_;
  StepInfo info;
  info.loss = bw.loss * n_over_b;
  info.grad_norm = std::sqrt(grad_sq);
  last_grad_norm_ = info.grad_norm;

  for (UnitId id : gated_unit_ids(net_)) {
    auto& gl = gates_.layers[id.layer];
    if (!gl.alive[id.unit]) {
      continue;
    }
    double th = gl.theta(id.unit);
    bool drop = th < cfg_.theta_tol ||
                (iter_ > cfg_.drop_after &&
                 th < gl.theta_max(id.unit) * (1.0 - cfg_.theta_per));
    if (drop) {
      prune_unit(net_, gates_, id);
      ++info.pruned;
    }
  }
  return info;
}

MetricsRow Trainer::run_epoch(const Dataset& train, const Dataset& eval,
                              int epoch) {
  int steps = std::max(1, train.size() / cfg_.batch_size);
  double loss_sum = 0.0;
  for (int s = 0; s < steps; ++s) {
    loss_sum += step(train).loss;
  }
  compact_now();
  EvalResult ev = evaluate(net_, gates_, eval);
  MetricsRow row;
  row.epoch = epoch;
  row.iteration = iter_;
  row.train_loss = loss_sum / steps;
  row.eval_loss = ev.loss;
  row.accuracy = ev.accuracy;
  row.alive_units = gates_.alive_count();
  row.prune_percent =
      pruning_ratio(net_, initial_weights_, cfg_.input_threshold);
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    const auto& gl = gates_.layers[l];
    if (gl.theta.size() == 0) {
      continue;
    }
    LayerGateStats st;
    st.layer = static_cast<int>(l);
    st.alive = gates_.alive_count(static_cast<int>(l));
    st.theta_mean = gl.theta.size() > 0 ? gl.theta.mean() : 0.0;
    st.theta_min = gl.theta.size() > 0 ? gl.theta.minCoeff() : 0.0;
    st.theta_max = gl.theta.size() > 0 ? gl.theta.maxCoeff() : 0.0;
    row.layer_stats.push_back(st);
  }
  return row;
}

std::vector<MetricsRow> Trainer::train(const Dataset& train,
                                       const Dataset& eval) {
  std::vector<MetricsRow> rows;
  rows.reserve(cfg_.epochs);
  for (int e = 1; e <= cfg_.epochs; ++e) {
    rows.push_back(run_epoch(train, eval, e));
    if (last_grad_norm_ < cfg_.grad_tol) {
      break;
    }
  }
  return rows;
}

Network Trainer::finalize() {
  for (UnitId id : gated_unit_ids(net_)) {
    auto& gl = gates_.layers[id.layer];
    if (!gl.alive[id.unit]) {
      continue;
    }
    if (gl.theta(id.unit) < cfg_.theta_tol) {
      prune_unit(net_, gates_, id);
    } else {
      gl.theta(id.unit) = 1.0;
    }
  }
  compact_now();
  Network out = net_;
  for (auto& layer : out.layers) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      d->gated = false;
    } else if (auto* c = std::get_if<ConvLayer>(&layer)) {
      c->gated = false;
    }
  }
  return out;
}

std::vector<std::pair<UnitId, double>> Trainer::theta_snapshot() const {
  std::vector<std::pair<UnitId, double>> snap;
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    const auto& gl = gates_.layers[l];
    for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
      snap.emplace_back(UnitId{static_cast<int>(l), orig_unit_[l][j]},
                        gl.theta(j));
    }
  }
  return snap;
}

void Trainer::compact_now() {
  CompactPlan plan;
  Network compacted = compact(net_, gates_, &plan);
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    auto& os = opt_.layers[l];
    if (os.mw.size() > 0) {
      slice_matrix(os.mw, plan.row_keep[l], plan.col_keep[l]);
      slice_matrix(os.vw, plan.row_keep[l], plan.col_keep[l]);
      slice_rows(os.mb, plan.row_keep[l]);
      slice_rows(os.vb, plan.row_keep[l]);
    }
    auto& gl = gates_.layers[l];
    if (gl.theta.size() > 0) {
      const auto& keep = plan.row_keep[l];
      slice_rows(gl.theta, keep);
      slice_rows(gl.theta_max, keep);
      slice_rows(gl.last_xi, keep);
      slice_rows(os.mt, keep);
      slice_rows(os.vt, keep);
      std::vector<char> alive(keep.size(), 1);
      gl.alive = std::move(alive);
      std::vector<int> ids(keep.size());
      for (std::size_t i = 0; i < keep.size(); ++i) {
        ids[i] = orig_unit_[l][keep[i]];
      }
      orig_unit_[l] = std::move(ids);
    }
  }
  net_ = std::move(compacted);
}

void fine_tune(Network& net, const Dataset& train, const TrainConfig& cfg,
               Rng& rng) {
  OptState opt;
  opt.layers.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& os = opt.layers[l];
    if (const auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
      os.mw = Matrix::Zero(d->weights.rows(), d->weights.cols());
      os.vw = os.mw;
      os.mb = Vector::Zero(d->bias.size());
      os.vb = os.mb;
    } else if (const auto* c = std::get_if<ConvLayer>(&net.layers[l])) {
      os.mw = Matrix::Zero(c->kernels.rows(), c->kernels.cols());
      os.vw = os.mw;
      os.mb = Vector::Zero(c->bias.size());
      os.vb = os.mb;
    }
  }
  TrainConfig ft = cfg;
  ft.schedule = ScheduleKind::Adam;
  GateSample none(net.layers.size());
  int steps_per_epoch = std::max(1, train.size() / cfg.batch_size);
  double n_over_b =
      static_cast<double>(train.size()) / static_cast<double>(cfg.batch_size);
  Matrix bx, by;
  for (int e = 0; e < cfg.fine_tune_epochs; ++e) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      gather_batch(train, cfg.batch_size, rng, bx, by);
      ForwardTrace tr = forward(net, bx, none);
      BackwardResult bw = backward(net, tr, by, n_over_b);
      ++opt.t;
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& os = opt.layers[l];
        if (auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
          Matrix gw = bw.dweights[l] + cfg.lambda * d->weights;
          sgd_like_update(ft, opt.t, cfg.fine_tune_lr, d->weights, os.mw,
                          os.vw, gw);
          sgd_like_update(ft, opt.t, cfg.fine_tune_lr, d->bias, os.mb, os.vb,
                          bw.dbias[l]);
        } else if (auto* c = std::get_if<ConvLayer>(&net.layers[l])) {
          Matrix gw = bw.dweights[l] + cfg.lambda * c->kernels;
          sgd_like_update(ft, opt.t, cfg.fine_tune_lr, c->kernels, os.mw,
                          os.vw, gw);
          sgd_like_update(ft, opt.t, cfg.fine_tune_lr, c->bias, os.mb, os.vb,
                          bw.dbias[l]);
        }
      }
    }
  }
}

}  // namespace sprune
