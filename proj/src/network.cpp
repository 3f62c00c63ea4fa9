#include "sprune/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sprune {

namespace {

int layer_out_size(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> int {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer>) {
          return l.out_size();
        } else if constexpr (std::is_same_v<T, ConvLayer>) {
          return l.spec.out_size();
        } else if constexpr (std::is_same_v<T, PoolLayer>) {
          return l.spec.out_size();
        } else {
          return l.size;
        }
      },
      layer);
}

}  // namespace

int Network::output_size() const {
  if (layers.empty()) {
    throw std::logic_error("empty network");
  }
  return layer_out_size(layers.back());
}

int Network::layer_units(int layer) const {
  const Layer& l = layers.at(layer);
  if (const auto* d = std::get_if<DenseLayer>(&l)) {
    return d->out_size();
  }
  if (const auto* c = std::get_if<ConvLayer>(&l)) {
    return c->spec.out_c;
  }
  return 0;
}

bool Network::layer_gated(int layer) const {
  const Layer& l = layers.at(layer);
  if (const auto* d = std::get_if<DenseLayer>(&l)) {
    return d->gated;
  }
  if (const auto* c = std::get_if<ConvLayer>(&l)) {
    return c->gated;
  }
  return false;
}

std::size_t Network::weight_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
      n += static_cast<std::size_t>(d->weights.size());
    } else if (const auto* c = std::get_if<ConvLayer>(&l)) {
      n += static_cast<std::size_t>(c->kernels.size());
    }
  }
  return n;
}

int GateState::alive_count() const {
  int n = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    n += alive_count(static_cast<int>(l));
  }
  return n;
}

int GateState::alive_count(int layer) const {
  const auto& a = layers.at(layer).alive;
  return static_cast<int>(std::count(a.begin(), a.end(), 1));
}

GateState init_gates(const Network& net, double theta0) {
  GateState gs;
  gs.layers.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (!net.layer_gated(static_cast<int>(l))) {
      continue;
    }
    int n = net.layer_units(static_cast<int>(l));
    auto& gl = gs.layers[l];
    gl.theta = Vector::Constant(n, theta0);
    gl.theta_max = Vector::Constant(n, theta0);
    gl.last_xi = Vector::Zero(n);
    gl.alive.assign(n, 1);
  }
  return gs;
}

GateSample sample_gates(const Network& net, const GateState& gates, Rng& rng) {
  GateSample ksi(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& gl = gates.layers[l];
    if (gl.theta.size() == 0) {
      continue;
    }
    Vector x(gl.theta.size());
    for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
      double th = gl.theta(j);
      if (th < 0.0 || th > 1.0) {
        throw std::invalid_argument("sample_gates: theta outside [0,1]");
      }
      x(j) = (gl.alive[j] && rng.bernoulli(th)) ? 1.0 : 0.0;
    }
    ksi[l] = std::move(x);
  }
  return ksi;
}

GateSample all_ones_gates(const Network& net, const GateState& gates) {
  GateSample ksi(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& gl = gates.layers[l];
    if (gl.theta.size() == 0) {
      continue;
    }
    Vector x(gl.theta.size());
    for (Eigen::Index j = 0; j < gl.theta.size(); ++j) {
      x(j) = gl.alive[j] ? 1.0 : 0.0;
    }
    ksi[l] = std::move(x);
  }
  return ksi;
}

ForwardTrace forward(const Network& net, const Matrix& batch,
                     const GateSample& ksi) {
  if (batch.rows() != net.input_size) {
    throw std::invalid_argument("forward: batch shape mismatch");
  }
  ForwardTrace tr;
  tr.input = batch;
  tr.gates = ksi;
  std::size_t n_layers = net.layers.size();
  tr.zeta.resize(n_layers);
  tr.z_pre_gate.resize(n_layers);
  tr.z_out.resize(n_layers);
  tr.pool_argmax.resize(n_layers);

  Matrix z = batch;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Layer& layer = net.layers[l];
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      Matrix zeta = affine_forward(d->weights, d->bias, z);
      Matrix zp = apply_activation(d->act, d->slope, zeta);
      tr.zeta[l] = std::move(zeta);
      if (d->gated) {
        z = zp.array().colwise() * ksi[l].array();
      } else {
        z = zp;
      }
      tr.z_pre_gate[l] = std::move(zp);
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      Matrix zeta = conv2d_forward(c->spec, c->kernels, c->bias, z);
      Matrix zp = apply_activation(c->act, c->slope, zeta);
      tr.zeta[l] = std::move(zeta);
      z = zp;
      if (c->gated) {
        int block = c->spec.out_h() * c->spec.out_w();
        for (int ch = 0; ch < c->spec.out_c; ++ch) {
          z.middleRows(ch * block, block) *= ksi[l](ch);
        }
      }
      tr.z_pre_gate[l] = std::move(zp);
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      PoolResult pr = pool_forward(p->spec, z);
      z = std::move(pr.out);
      tr.pool_argmax[l] = std::move(pr.argmax);
    } else {
      // flatten: layout is already per-sample flat
    }
    tr.z_out[l] = z;
  }
  check_finite(z, "network outputs");
  tr.outputs = z;
  return tr;
}

double forward_loss(const Network& net, const Matrix& batch,
                    const Matrix& targets, const GateSample& ksi) {
  ForwardTrace tr = forward(net, batch, ksi);
  return loss_and_grad(net.loss, tr.outputs, targets).loss;
}

BackwardResult backward(const Network& net, const ForwardTrace& trace,
                        const Matrix& targets, double n_over_b) {
  std::size_t n_layers = net.layers.size();
  if (trace.z_out.size() != n_layers ||
      trace.outputs.cols() != targets.cols()) {
    throw std::invalid_argument("backward: trace does not match network/targets");
  }
  BackwardResult res;
  res.dweights.resize(n_layers);
  res.dbias.resize(n_layers);
  res.delta.resize(n_layers);
  res.gate_grad.resize(n_layers);

  LossGrad lg = loss_and_grad(net.loss, trace.outputs, targets);
  res.loss = lg.loss;

  // g holds the gradient w.r.t. the current layer's (post-gate) output;
  // for the output layer the loss gradient is w.r.t. pre-activations
  Matrix g = lg.dzeta;
  bool g_is_dzeta = true;

  for (int l = static_cast<int>(n_layers) - 1; l >= 0; --l) {
    const Layer& layer = net.layers[l];
    const Matrix& z_in = (l == 0) ? trace.input : trace.z_out[l - 1];
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      Matrix dzeta;
      if (g_is_dzeta) {
        dzeta = std::move(g);
      } else {
        if (d->gated) {
          // straight-through gate gradient from pre-gate activations
          res.gate_grad[l] =
              n_over_b *
              (trace.z_pre_gate[l].array() * g.array()).rowwise().sum().matrix();
          g = g.array().colwise() * trace.gates[l].array();
        }
        dzeta = g.cwiseProduct(activation_grad(d->act, d->slope, trace.zeta[l]));
      }
      res.dweights[l] = n_over_b * (dzeta * z_in.transpose());
      res.dbias[l] = n_over_b * dzeta.rowwise().sum();
      g = d->weights.transpose() * dzeta;
      res.delta[l] = std::move(dzeta);
      g_is_dzeta = false;
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      Matrix dzeta;
      if (g_is_dzeta) {
        dzeta = std::move(g);
      } else {
        if (c->gated) {
          int block = c->spec.out_h() * c->spec.out_w();
          Vector gg(c->spec.out_c);
          for (int ch = 0; ch < c->spec.out_c; ++ch) {
            gg(ch) = (trace.z_pre_gate[l].middleRows(ch * block, block).array() *
                      g.middleRows(ch * block, block).array())
                         .sum();
          }
          res.gate_grad[l] = n_over_b * gg;
          for (int ch = 0; ch < c->spec.out_c; ++ch) {
            g.middleRows(ch * block, block) *= trace.gates[l](ch);
          }
        }
        dzeta = g.cwiseProduct(activation_grad(c->act, c->slope, trace.zeta[l]));
      }
      ConvGrads cg = conv2d_backward(c->spec, c->kernels, z_in, dzeta);
      res.dweights[l] = n_over_b * cg.dkernels;
      res.dbias[l] = n_over_b * cg.dbias;
      g = std::move(cg.dfmap);
      res.delta[l] = std::move(dzeta);
      g_is_dzeta = false;
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      g = pool_backward(p->spec, trace.pool_argmax[l], g);
    } else {
      // flatten: passthrough
    }
  }
  return res;
}

namespace {

std::vector<double*> fan_in_ptrs(Network& net, UnitId id) {
  std::vector<double*> ptrs;
  Layer& layer = net.layers.at(id.layer);
  if (auto* d = std::get_if<DenseLayer>(&layer)) {
    ptrs.reserve(d->in_size());
    for (int i = 0; i < d->in_size(); ++i) {
      ptrs.push_back(&d->weights(id.unit, i));
    }
  } else if (auto* c = std::get_if<ConvLayer>(&layer)) {
    ptrs.reserve(c->spec.patch_size());
    for (int i = 0; i < c->spec.patch_size(); ++i) {
      ptrs.push_back(&c->kernels(id.unit, i));
    }
  } else {
    throw std::invalid_argument("unit_view: layer carries no units");
  }
  return ptrs;
}

std::vector<double*> fan_out_ptrs(Network& net, UnitId id) {
  std::vector<double*> ptrs;
  bool from_conv = std::holds_alternative<ConvLayer>(net.layers[id.layer]);
  int h = 0, w = 0;
  if (from_conv) {
    const auto& c = std::get<ConvLayer>(net.layers[id.layer]);
    h = c.spec.out_h();
    w = c.spec.out_w();
  }
  for (std::size_t l = id.layer + 1; l < net.layers.size(); ++l) {
    Layer& next = net.layers[l];
    if (auto* d = std::get_if<DenseLayer>(&next)) {
      if (from_conv) {
        int block = h * w;
        for (int r = 0; r < d->out_size(); ++r) {
          for (int i = 0; i < block; ++i) {
            ptrs.push_back(&d->weights(r, id.unit * block + i));
          }
        }
      } else {
        for (int r = 0; r < d->out_size(); ++r) {
          ptrs.push_back(&d->weights(r, id.unit));
        }
      }
      return ptrs;
    }
    if (auto* c = std::get_if<ConvLayer>(&next)) {
      if (!from_conv) {
        throw std::logic_error("dense feeding conv is unsupported");
      }
      int kk = c->spec.k * c->spec.k;
      for (int r = 0; r < c->spec.out_c; ++r) {
        for (int i = 0; i < kk; ++i) {
          ptrs.push_back(&c->kernels(r, id.unit * kk + i));
        }
      }
      return ptrs;
    }
    if (std::holds_alternative<PoolLayer>(next)) {
      h /= 2;
      w /= 2;
    }
    // flatten: geometry already tracked
  }
  return ptrs;  // unit feeds nothing (output layer is never gated)
}

}  // namespace

double UnitView::phi() const {
  double s = 0.0;
  for (const double* p : fan_in) {
    s += *p * *p;
  }
  for (const double* p : fan_out) {
    s += *p * *p;
  }
  return 0.5 * s;
}

UnitView unit_view(Network& net, UnitId id) {
  UnitView v;
  v.id = id;
  v.fan_in = fan_in_ptrs(net, id);
  v.fan_out = fan_out_ptrs(net, id);
  return v;
}

std::vector<UnitView> unit_views(Network& net) {
  std::vector<UnitView> views;
  for (UnitId id : gated_unit_ids(net)) {
    views.push_back(unit_view(net, id));
  }
  return views;
}

std::vector<UnitId> gated_unit_ids(const Network& net) {
  std::vector<UnitId> ids;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (!net.layer_gated(static_cast<int>(l))) {
      continue;
    }
    int n = net.layer_units(static_cast<int>(l));
    for (int j = 0; j < n; ++j) {
      ids.push_back({static_cast<int>(l), j});
    }
  }
  return ids;
}

void prune_unit(Network& net, GateState& gates, UnitId id) {
  auto& gl = gates.layers.at(id.layer);
  if (!gl.alive.at(id.unit)) {
    return;  // idempotent
  }
  UnitView v = unit_view(net, id);
  for (double* p : v.fan_in) {
    *p = 0.0;
  }
  for (double* p : v.fan_out) {
    *p = 0.0;
  }
  if (auto* d = std::get_if<DenseLayer>(&net.layers[id.layer])) {
    d->bias(id.unit) = 0.0;
  } else if (auto* c = std::get_if<ConvLayer>(&net.layers[id.layer])) {
    c->bias(id.unit) = 0.0;
  }
  gl.alive[id.unit] = 0;
  gl.last_xi(id.unit) = 0.0;
}

Network compact(const Network& net, const GateState& gates,
                CompactPlan* plan) {
  std::size_t n_layers = net.layers.size();
  std::vector<std::vector<int>> row_keep(n_layers), col_keep(n_layers);

  Network out;
  out.loss = net.loss;
  out.input_size = net.input_size;
  out.layers = net.layers;

  // surviving output feature indices of the previous layer, in the original
  // (pre-compaction) indexing
  std::vector<int> prev_surv(net.input_size);
  for (int i = 0; i < net.input_size; ++i) {
    prev_surv[i] = i;
  }
  std::vector<int> prev_channels;  // kept channels of the last conv/pool output

  for (std::size_t l = 0; l < n_layers; ++l) {
    Layer& layer = out.layers[l];
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      col_keep[l] = prev_surv;
      auto& rk = row_keep[l];
      for (int j = 0; j < d->out_size(); ++j) {
        if (!d->gated || gates.layers[l].alive[j]) {
          rk.push_back(j);
        }
      }
      Matrix nw(rk.size(), col_keep[l].size());
      Vector nb(rk.size());
      for (std::size_t r = 0; r < rk.size(); ++r) {
        for (std::size_t c = 0; c < col_keep[l].size(); ++c) {
          nw(r, c) = d->weights(rk[r], col_keep[l][c]);
        }
        nb(r) = d->bias(rk[r]);
      }
      d->weights = std::move(nw);
      d->bias = std::move(nb);
      prev_surv = rk;
      prev_channels.clear();
    } else if (auto* c = std::get_if<ConvLayer>(&layer)) {
      std::vector<int> kept_in;
      if (!prev_channels.empty()) {
        kept_in = prev_channels;
      } else {
        for (int i = 0; i < c->spec.in_c; ++i) {
          kept_in.push_back(i);
        }
      }
      int kk = c->spec.k * c->spec.k;
      for (int ch : kept_in) {
        for (int i = 0; i < kk; ++i) {
          col_keep[l].push_back(ch * kk + i);
        }
      }
      auto& rk = row_keep[l];
      for (int j = 0; j < c->spec.out_c; ++j) {
        if (!c->gated || gates.layers[l].alive[j]) {
          rk.push_back(j);
        }
      }
      Matrix nk(rk.size(), col_keep[l].size());
      Vector nb(rk.size());
      for (std::size_t r = 0; r < rk.size(); ++r) {
        for (std::size_t cc = 0; cc < col_keep[l].size(); ++cc) {
          nk(r, cc) = c->kernels(rk[r], col_keep[l][cc]);
        }
        nb(r) = c->bias(rk[r]);
      }
      c->kernels = std::move(nk);
      c->bias = std::move(nb);
      int block = c->spec.out_h() * c->spec.out_w();
      c->spec.in_c = static_cast<int>(kept_in.size());
      c->spec.out_c = static_cast<int>(rk.size());
      prev_surv.clear();
      for (int ch : rk) {
        for (int p = 0; p < block; ++p) {
          prev_surv.push_back(ch * block + p);
        }
      }
      prev_channels = rk;
    } else if (auto* p = std::get_if<PoolLayer>(&layer)) {
      int block = p->spec.out_h() * p->spec.out_w();
      std::vector<int> chans = prev_channels;
      if (chans.empty()) {
        for (int i = 0; i < p->spec.c; ++i) {
          chans.push_back(i);
        }
      }
      p->spec.c = static_cast<int>(chans.size());
      prev_surv.clear();
      for (int ch : chans) {
        for (int q = 0; q < block; ++q) {
          prev_surv.push_back(ch * block + q);
        }
      }
    } else {
      auto& f = std::get<FlattenLayer>(layer);
      f.size = static_cast<int>(prev_surv.size());
      prev_channels.clear();
    }
  }
  if (plan) {
    plan->row_keep = std::move(row_keep);
    plan->col_keep = std::move(col_keep);
  }
  return out;
}

Network make_mlp(int input_size, const std::vector<int>& hidden, int outputs,
                 LossKind loss, double slope) {
  Network net;
  net.loss = loss;
  net.input_size = input_size;
  int in = input_size;
  for (int h : hidden) {
    DenseLayer d;
    d.weights = Matrix::Zero(h, in);
    d.bias = Vector::Zero(h);
    d.gated = true;
    d.act = Activation::LeakyRelu;
    d.slope = slope;
    net.layers.emplace_back(std::move(d));
    in = h;
  }
  DenseLayer out;
  out.weights = Matrix::Zero(outputs, in);
  out.bias = Vector::Zero(outputs);
  out.gated = false;
  out.act = Activation::Identity;
  net.layers.emplace_back(std::move(out));
  return net;
}

Network make_lenet(int in_c, int in_h, int in_w, int c1, int c2, int fc,
                   int outputs, LossKind loss, double slope) {
  Network net;
  net.loss = loss;
  net.input_size = in_c * in_h * in_w;

  ConvLayer l1;
  l1.spec = {in_c, in_h, in_w, c1, 5};
  l1.kernels = Matrix::Zero(c1, l1.spec.patch_size());
  l1.bias = Vector::Zero(c1);
  l1.gated = true;
  l1.slope = slope;
  int h1 = l1.spec.out_h(), w1 = l1.spec.out_w();
  net.layers.emplace_back(std::move(l1));
  net.layers.emplace_back(PoolLayer{{c1, h1, w1}});

  ConvLayer l2;
  l2.spec = {c1, h1 / 2, w1 / 2, c2, 5};
  l2.kernels = Matrix::Zero(c2, l2.spec.patch_size());
  l2.bias = Vector::Zero(c2);
  l2.gated = true;
  l2.slope = slope;
  int h2 = l2.spec.out_h(), w2 = l2.spec.out_w();
  net.layers.emplace_back(std::move(l2));
  net.layers.emplace_back(PoolLayer{{c2, h2, w2}});
  net.layers.emplace_back(FlattenLayer{c2 * (h2 / 2) * (w2 / 2)});

  DenseLayer d1;
  d1.weights = Matrix::Zero(fc, c2 * (h2 / 2) * (w2 / 2));
  d1.bias = Vector::Zero(fc);
  d1.gated = true;
  d1.slope = slope;
  net.layers.emplace_back(std::move(d1));

  DenseLayer out;
  out.weights = Matrix::Zero(outputs, fc);
  out.bias = Vector::Zero(outputs);
  out.gated = false;
  out.act = Activation::Identity;
  net.layers.emplace_back(std::move(out));
  return net;
}

void glorot_init(Network& net, Rng& rng) {
  for (auto& layer : net.layers) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      double sd = std::sqrt(2.0 / (d->in_size() + d->out_size()));
      for (Eigen::Index i = 0; i < d->weights.size(); ++i) {
        d->weights.data()[i] = sd * rng.normal();
      }
      d->bias.setZero();
    } else if (auto* c = std::get_if<ConvLayer>(&layer)) {
      int fan_in = c->spec.patch_size();
      int fan_out = c->spec.out_c * c->spec.k * c->spec.k;
      double sd = std::sqrt(2.0 / (fan_in + fan_out));
      for (Eigen::Index i = 0; i < c->kernels.size(); ++i) {
        c->kernels.data()[i] = sd * rng.normal();
      }
      c->bias.setZero();
    }
  }
}

}  // namespace sprune
